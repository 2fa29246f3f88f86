"""Learning the generator: KDE maximum likelihood and CVAE (ELBO) training.

Both objectives run on mini-batches of whole sequences. The LSTM is unrolled
once per batch over zero-padded inputs; every event then contributes one
row holding the encoding of its history. Losses are reported per event in
raw (unstandardized) units, i.e. standardized log-densities plus the log
Jacobian of the standardization.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .core import Dataset, Event, substream
from .kde import PDF_FLOOR, batch_bandwidths, log_density_nodes
from .nets import (
    AdamState, CegModel, CvaeNets, adam_step, clip_global_norm, encode_events, generator_batch,
    history_projection, latent_params,
)

__all__ = [
    "TrainConfig", "TrainResult", "prepare_batch", "kde_loss", "train_nonparametric", "gaussian_kl",
    "gaussian_kl_nodes", "elbo", "elbo_loss", "train_variational", "write_log", "DivergenceError",
]

_LOG_2PI = math.log(2.0 * math.pi)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    method: str = "kde"
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    L: int = 100
    k: int | None = None
    seed: int = 0
    clip_norm: float | None = 5.0
    bandwidth: str = "adaptive"
    sigma_obs: float = 0.1
    mc_samples: int = 1
    ema_decay: float | None = 0.95  # returned weights are an EMA of the Adam iterates; None keeps the last iterate

    def __post_init__(self):
        if self.method not in ("kde", "cvae"):
            raise ValueError(f"method must be 'kde' or 'cvae', got {self.method!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.method == "kde" and self.L < 2:
            raise ValueError(f"L must be >= 2 for KDE training, got {self.L}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: CegModel
    nets: CvaeNets | None = None
    history: list = field(default_factory=list)


@dataclass
class Batch:
    """Events of several sequences flattened to rows, in (sequence, event) order."""

    gaps_s: np.ndarray   # (B, n_max) padded
    marks_s: np.ndarray  # (B, n_max, d)
    rows: np.ndarray     # index into the (n_max * B) stacked encodings
    obs: np.ndarray      # (N, 1 + d) standardized observed events
    where: list          # (sequence position, event index) per row


def prepare_batch(model: CegModel, seqs) -> Batch:
    seqs = [s for s in seqs if len(s)]
    if not seqs:
        raise ValueError("batch holds no events")
    B, d = len(seqs), model.mark_dim
    n_max = max(len(s) for s in seqs)
    gaps = np.zeros((B, n_max))
    marks = np.zeros((B, n_max, d))
    rows, obs, where = [], [], []
    for b, s in enumerate(seqs):
        g, m = model.standardize(s.gaps(), s.marks)
        n = len(s)
        gaps[b, :n], marks[b, :n] = g, m
        rows.extend(i * B + b for i in range(n))
        obs.append(np.concatenate([g[:, None], m], axis=1))
        where.extend((b, i) for i in range(n))
    return Batch(gaps, marks, np.array(rows, dtype=np.intp), np.concatenate(obs), where)


def _histories(model: CegModel, batch: Batch):
    """(N, p) node: for every event the LSTM state before it."""
    n_max = batch.gaps_s.shape[1]
    hs = encode_events(model, batch.gaps_s, batch.marks_s)
    return ad.take(ad.concat(hs[:n_max], axis=0), batch.rows)


def _check_rows(values, batch: Batch, what: str):
    bad = np.where(~np.isfinite(values))[0]
    if bad.size:
        b, i = batch.where[bad[0]]
        raise DivergenceError(f"non-finite {what} at batch sequence {b}, event {i}")


def kde_loss(model: CegModel, seqs, L: int, k: int | None, rng, bandwidth: str = "adaptive",
             widths=None, return_widths: bool = False, pdf_floor: float = PDF_FLOOR):
    """Negative mean per-event log-likelihood under the generated-sample KDE.

    For each event, ``L`` samples are generated from its history; their
    bandwidths are computed from the sample values and held constant, so
    gradients flow only through sample positions. ``widths`` (N, L, 1+d)
    overrides the bandwidth computation.
    """
    batch = seqs if isinstance(seqs, Batch) else prepare_batch(model, seqs)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    N, D = batch.obs.shape
    H = _histories(model, batch)
    hproj = ad.repeat_rows(history_projection(model, H), L)
    z = rng.standard_normal((N * L, model.noise_dim))
    dt, mk = generator_batch(model, z, hproj)
    cols = [ad.reshape(dt, (N, L))] + [ad.reshape(ad.cols(mk, j, j + 1), (N, L)) for j in range(D - 1)]
    if widths is None:
        points = np.stack([c.value for c in cols], axis=2)
        if not np.all(np.isfinite(points)):
            _check_rows(points.sum(axis=(1, 2)), batch, "generated sample")
        bw, scales = batch_bandwidths(points, k, rule=bandwidth)
        widths = bw[:, :, None] * scales[:, None, :]
    logf = log_density_nodes(batch.obs, cols, widths, reflect=True, pdf_floor=pdf_floor)
    _check_rows(logf.value, batch, "log-density")
    loss = ad.add_scalar(ad.scale(ad.mean(logf), -1.0), -model.log_jacobian)
    return (loss, widths) if return_widths else loss


def _param_list(*groups):
    out = []
    for g in groups:
        out.extend(g.params[name] for name in sorted(g.params))
    return out


def _step(graph, loss, params, state: AdamState, clip):
    grads = ad.backward(graph, loss)
    by_id = {id(p): g for p, g in zip(graph.parameters, grads)}
    grads = [by_id.get(id(p), np.zeros_like(p.value)) for p in params]
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {p.name}")
    adam_step(params, clip_global_norm(grads, clip), state)


def _batches(n: int, size: int, rng):
    order = rng.permutation(n)
    return [np.sort(order[s:s + size]) for s in range(0, n, size)]


def _prepare(model: CegModel, data: Dataset, standardize: bool):
    if data.mark_dim != model.mark_dim:
        raise ValueError(f"data mark_dim {data.mark_dim} != model mark_dim {model.mark_dim}")
    seqs = [s for s in data if len(s)]
    if not seqs:
        raise ValueError("training data holds no events")
    if standardize:
        model.set_standardization(seqs)
        model.calibrate_time_head(seqs)
        if data.mark_bounds is not None:
            model.mark_bounds = np.array(data.mark_bounds, float)
    return seqs


class _WeightAverage:
    """Bias-corrected exponential moving average of parameter values."""

    def __init__(self, params, decay):
        self.params, self.decay, self.t = params, decay, 0
        self.acc = [np.zeros_like(p.value) for p in params]

    def update(self):
        self.t += 1
        for a, p in zip(self.acc, self.params):
            a *= self.decay
            a += (1.0 - self.decay) * p.value

    def values(self):
        c = 1.0 - self.decay ** self.t
        return [a / c for a in self.acc]

    def swap_in(self):
        """Load the averaged values; returns the raw ones."""
        raw = [p.value.copy() for p in self.params]
        if self.t:
            for p, v in zip(self.params, self.values()):
                p.value[...] = v
        return raw

    def restore(self, raw):
        for p, v in zip(self.params, raw):
            p.value[...] = v


def _run(cfg: TrainConfig, seqs, heldout, params, objective, evaluate, log_path=None):
    state = AdamState(lr=cfg.lr)
    avg = _WeightAverage(params, cfg.ema_decay) if cfg.ema_decay else None
    history = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for bi, idx in enumerate(_batches(len(seqs), cfg.batch_size, substream(cfg.seed, 1, epoch))):
            batch = [seqs[i] for i in idx]
            with ad.Graph() as g:
                loss = objective(batch, substream(cfg.seed, 2, step))
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            try:
                _step(g, loss, params, state, cfg.clip_norm)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            if avg is not None:
                avg.update()
            n_ev = sum(len(s) for s in batch)
            total += value * n_ev
            count += n_ev
            step += 1
        raw = avg.swap_in() if avg is not None else None
        held = evaluate(heldout) if heldout else float("nan")
        if avg is not None and epoch < cfg.epochs:
            avg.restore(raw)
        history.append({"epoch": epoch, "train_loss": total / count, "heldout_loss": held,
                        "wall_seconds": time.perf_counter() - t0})
        if log_path is not None:
            write_log(history, log_path)
    return history


def _heldout_loss(objective, heldout, seed, chunk=64):
    seqs = [s for s in heldout if len(s)]
    total, count = 0.0, 0
    for c in range(0, len(seqs), chunk):
        part = seqs[c:c + chunk]
        n = sum(len(s) for s in part)
        total += float(objective(part, substream(seed, 3, c)).value) * n
        count += n
    return total / count


def train_nonparametric(model: CegModel, data: Dataset, cfg: TrainConfig, heldout: Dataset | None = None,
                        log_path=None, standardize: bool = True) -> TrainResult:
    """Fit ``model`` by maximizing the KDE log-likelihood of observed events.

    ``model`` is updated in place and returned inside a :class:`TrainResult`
    whose history has one row per epoch. With ``standardize`` the model's
    standardization is fitted on ``data`` and its time head calibrated to the
    observed gaps (:meth:`CegModel.calibrate_time_head`) before the first step.
    """
    if cfg.method != "kde":
        raise ValueError("train_nonparametric needs cfg.method == 'kde'")
    seqs = _prepare(model, data, standardize)
    model.latent = "standard"

    def objective(batch, rng):
        return kde_loss(model, batch, cfg.L, cfg.k, rng, cfg.bandwidth)

    history = _run(cfg, seqs, heldout, _param_list(model), objective,
                   lambda h: _heldout_loss(objective, h, cfg.seed), log_path)
    model.assert_finite()
    return TrainResult(model, None, history)


# --------------------------------------------------------------------------- variational


def gaussian_kl(mu_q, logvar_q, mu_p, logvar_p) -> float:
    """KL(N(mu_q, diag e^logvar_q) || N(mu_p, diag e^logvar_p)), summed over dimensions."""
    mu_q, lq, mu_p, lp = (np.asarray(a, float) for a in (mu_q, logvar_q, mu_p, logvar_p))
    if not (mu_q.shape == lq.shape == mu_p.shape == lp.shape):
        raise ValueError("gaussian_kl: all arguments must share one shape")
    val = 0.5 * np.sum(lp - lq + (np.exp(lq) + (mu_q - mu_p) ** 2) * np.exp(-lp) - 1.0, axis=-1)
    return float(np.maximum(val, 0.0)) if np.ndim(val) == 0 else np.maximum(val, 0.0)


def gaussian_kl_nodes(mu_q, logvar_q, mu_p, logvar_p):
    """Row-wise KL for (n, r) nodes; returns an (n,) node."""
    diff = ad.sub(mu_q, mu_p)
    ratio = ad.exp(ad.sub(logvar_q, logvar_p))
    quad = ad.mul(ad.square(diff), ad.exp(ad.neg(logvar_p)))
    inner = ad.add_scalar(ad.sub(ad.add(ratio, quad), ad.sub(logvar_q, logvar_p)), -1.0)
    return ad.scale(ad.sum(inner, axis=1), 0.5)


def _gaussian_loglik(obs, mean_cols, sigma):
    """Row-wise log N(obs; mean, sigma^2 I) with ``mean_cols`` a list of (n,) nodes."""
    n, D = obs.shape
    sq = None
    for j, col in enumerate(mean_cols):
        term = ad.square(ad.sub(obs[:, j], col))
        sq = term if sq is None else ad.add(sq, term)
    return ad.add_scalar(ad.scale(sq, -0.5 / sigma ** 2), -0.5 * D * (_LOG_2PI + 2 * math.log(sigma)))


def _elbo_rows(nets: CvaeNets, model: CegModel, obs: np.ndarray, H, eps: np.ndarray, sigma_obs: float):
    mu_q, lv_q = latent_params(nets, obs, H)
    mu_p, lv_p = latent_params(nets, None, H)
    z = ad.add(mu_q, ad.mul(ad.exp(ad.scale(lv_q, 0.5)), eps))
    dt, mk = generator_batch(model, z, history_projection(model, H))
    means = [dt] + [ad.reshape(ad.cols(mk, j, j + 1), (-1,)) for j in range(model.mark_dim)]
    recon = _gaussian_loglik(obs, means, sigma_obs)
    return ad.sub(recon, gaussian_kl_nodes(mu_q, lv_q, mu_p, lv_p))


def elbo(nets: CvaeNets, model: CegModel, x: Event, h, eps, sigma_obs: float = 0.1) -> float:
    """Single-sample ELBO of one raw event ``x`` given the history encoding ``h`` (p,).

    The value is a bound on the standardized log-density; add
    ``model.log_jacobian`` for raw units.
    """
    g, m = model.standardize([x.time], [x.mark])
    obs = np.concatenate([g[:, None], m], axis=1)
    H = np.asarray(h, float).reshape(1, model.hidden_dim)
    eps = np.asarray(eps, float).reshape(1, model.noise_dim)
    return float(_elbo_rows(nets, model, obs, H, eps, sigma_obs).value[0])


def elbo_loss(model: CegModel, nets: CvaeNets, seqs, rng, sigma_obs: float = 0.1, mc_samples: int = 1):
    """Negative mean per-event ELBO (raw units) over a batch of sequences."""
    batch = seqs if isinstance(seqs, Batch) else prepare_batch(model, seqs)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    N = batch.obs.shape[0]
    H = _histories(model, batch)
    total = None
    for _ in range(mc_samples):
        eps = rng.standard_normal((N, model.noise_dim))
        rows = _elbo_rows(nets, model, batch.obs, H, eps, sigma_obs)
        _check_rows(rows.value, batch, "ELBO")
        term = ad.mean(rows)
        total = term if total is None else ad.add(total, term)
    return ad.add_scalar(ad.scale(total, -1.0 / mc_samples), -model.log_jacobian)


def train_variational(model: CegModel, nets: CvaeNets, data: Dataset, cfg: TrainConfig,
                      heldout: Dataset | None = None, log_path=None, standardize: bool = True) -> TrainResult:
    """Maximize the per-event ELBO jointly over generator, encoder and prior nets.

    After training the model samples its latent from the prior net.
    """
    if cfg.method != "cvae":
        raise ValueError("train_variational needs cfg.method == 'cvae'")
    seqs = _prepare(model, data, standardize)

    def objective(batch, rng):
        return elbo_loss(model, nets, batch, rng, cfg.sigma_obs, cfg.mc_samples)

    history = _run(cfg, seqs, heldout, _param_list(model, nets), objective,
                   lambda h: _heldout_loss(objective, h, cfg.seed), log_path)
    model.assert_finite()
    model.latent = "prior"
    return TrainResult(model, nets, history)


def write_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "heldout_loss", "wall_seconds"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["heldout_loss"]),
                        f"{row['wall_seconds']:.3f}"])
