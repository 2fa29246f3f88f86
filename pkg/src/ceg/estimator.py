"""scikit-learn style wrappers around the generator and the ETAS fitter.

``X`` is always a collection of event sequences: a :class:`Dataset`, a
list of :class:`EventSequence`, or a path to a JSONL file.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import classical as cl
from .core import Dataset, EventSequence, load_dataset, substream
from .evaluate import test_loglik
from .generate import GenerationConfig, generate_dataset, predict_next
from .nets import CegModel, CvaeNets
from .train import TrainConfig, train_nonparametric, train_variational

__all__ = ["check_sequences", "CEGEstimator", "EtasEstimator"]


def check_sequences(X, mark_dim: int | None = None, allow_empty: bool = False) -> Dataset:
    """Coerce ``X`` to a validated :class:`Dataset`."""
    if isinstance(X, Dataset):
        ds = X
    elif isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
        ds = load_dataset(X, mark_dim)
    else:
        seqs = list(X)
        if not all(isinstance(s, EventSequence) for s in seqs):
            raise TypeError("X must be a Dataset, a list of EventSequence, or a JSONL path")
        d = mark_dim if mark_dim is not None else (seqs[0].mark_dim if seqs else 0)
        ds = Dataset(seqs, d)
    if mark_dim is not None and ds.mark_dim != mark_dim and ds.n_events:
        raise ValueError(f"expected mark_dim={mark_dim}, got {ds.mark_dim}")
    if not allow_empty and ds.n_events == 0:
        raise ValueError("X holds no events")
    return ds


class CEGEstimator(BaseEstimator):
    """Conditional event generator trained by KDE likelihood or an ELBO.

    Parameters
    ----------
    method : {"kde", "cvae"}
    epochs, lr, batch_size : optimization settings.
    L : int
        Generated samples per event during KDE training.
    eval_L : int
        Samples per query for ``predict`` and ``score``.
    noise_dim, hidden_dim : int
        Latent size r and LSTM width p.
    time_head : {"softplus", "relu"}
        Activation of the generated gap before the floor.
    ema_decay : float or None
        Decay of the weight average returned after training; None keeps the
        last optimizer iterate.
    """

    def __init__(self, method="kde", epochs=50, lr=1e-3, batch_size=32, L=100, k=None, noise_dim=16,
                 hidden_dim=64, bandwidth="adaptive", sigma_obs=0.1, clip_norm=5.0, eval_L=1000, seed=0,
                 time_head="softplus", ema_decay=0.95):
        self.method = method
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.L = L
        self.k = k
        self.noise_dim = noise_dim
        self.hidden_dim = hidden_dim
        self.bandwidth = bandwidth
        self.sigma_obs = sigma_obs
        self.clip_norm = clip_norm
        self.eval_L = eval_L
        self.seed = seed
        self.time_head = time_head
        self.ema_decay = ema_decay

    def _config(self) -> TrainConfig:
        return TrainConfig(method=self.method, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           L=self.L, k=self.k, seed=self.seed, clip_norm=self.clip_norm,
                           bandwidth=self.bandwidth, sigma_obs=self.sigma_obs, ema_decay=self.ema_decay)

    def fit(self, X, y=None, heldout=None):
        ds = check_sequences(X)
        cfg = self._config()
        model = CegModel.init(ds.mark_dim, self.noise_dim, self.hidden_dim, seed=self.seed,
                              time_head=self.time_head)
        held = check_sequences(heldout, ds.mark_dim) if heldout is not None else None
        if cfg.method == "kde":
            res = train_nonparametric(model, ds, cfg, held)
        else:
            res = train_variational(model, CvaeNets.init(model, seed=self.seed), ds, cfg, held)
        self.model_, self.nets_, self.history_ = res.model, res.nets, res.history
        self.mark_dim_ = ds.mark_dim
        return self

    def predict(self, X):
        """Next-event estimate after each sequence: rows ``[time, mark...]``."""
        check_is_fitted(self, "model_")
        ds = check_sequences(X, self.mark_dim_, allow_empty=True)
        out = []
        for j, s in enumerate(ds):
            e = predict_next(self.model_, s, self.eval_L, substream(self.seed, 5, j), self.nets_)
            out.append([e.time, *e.mark])
        return np.array(out).reshape(len(ds), 1 + self.mark_dim_)

    def score(self, X, y=None) -> float:
        """Mean per-event log-likelihood under the KDE of generated samples."""
        check_is_fitted(self, "model_")
        return test_loglik(self.model_, check_sequences(X, self.mark_dim_), self.eval_L, self.seed, self.nets_)

    def sample(self, n_seqs: int, horizon: float, seed: int | None = None, max_events: int = 100_000):
        check_is_fitted(self, "model_")
        cfg = GenerationConfig(horizon, max_events, self.seed if seed is None else seed)
        return [r.sequence for r in generate_dataset(self.model_, cfg, n_seqs, self.nets_)]


class EtasEstimator(BaseEstimator):
    """Maximum-likelihood ETAS fit; constructor values are the initial guess."""

    def __init__(self, mu=0.02, C=0.5, beta=1.0, sigma_x=0.5, sigma_y=0.5, a=(0.0, 0.0),
                 domain=((0.0, 10.0), (0.0, 10.0)), lr=1e-2, steps=500, checkpoint_every=50):
        self.mu = mu
        self.C = C
        self.beta = beta
        self.sigma_x = sigma_x
        self.sigma_y = sigma_y
        self.a = a
        self.domain = domain
        self.lr = lr
        self.steps = steps
        self.checkpoint_every = checkpoint_every

    def fit(self, X, y=None):
        ds = check_sequences(X, 2)
        init = cl.Etas(self.mu, self.C, self.beta, self.sigma_x, self.sigma_y, self.a, self.domain)
        fit = cl.fit_etas(ds, init, cl.EtasFitConfig(self.lr, self.steps, self.checkpoint_every))
        self.model_, self.checkpoints_ = fit.model, fit.checkpoints
        return self

    def score(self, X, y=None) -> float:
        """Exact log-likelihood per event."""
        check_is_fitted(self, "model_")
        ds = check_sequences(X, 2)
        return cl.etas_loglik(self.model_, ds) / ds.n_events

    def sample(self, n_seqs: int, horizon: float, seed: int = 0) -> Dataset:
        check_is_fitted(self, "model_")
        return cl.simulate_dataset(self.model_, n_seqs, horizon, seed)
