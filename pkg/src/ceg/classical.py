"""Ground-truth point processes: intensities, likelihoods, thinning and ETAS fitting.

Three models are provided:

* :class:`SelfExciting`, ``lambda(t) = mu + sum beta exp(-beta (t - t_i))``
* :class:`SelfCorrecting`, ``lambda(t) = exp(mu t - alpha N(t))``
* :class:`Etas`, a constant background per unit area plus Gaussian diffusion
  triggering kernels whose covariance grows linearly with elapsed time.

Compensators are closed form. For ETAS the spatial integral of each kernel
over the (finite) domain is replaced by its untruncated mass
``C exp(-beta (t - t_i))``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from . import autodiff as ad
from .core import Dataset, EventSequence, substream
from .nets import AdamState, adam_step

__all__ = [
    "SelfExciting", "SelfCorrecting", "Etas", "ClassicalModel", "UpperBoundViolation",
    "intensity", "compensator", "exact_loglik", "ground_truth_cond_pdf", "ground_truth_cond_cdf",
    "thinning_simulate", "simulate_dataset", "rescaled_gaps", "model_from_dict", "EtasFitConfig",
    "fit_etas", "etas_loglik",
]


class UpperBoundViolation(RuntimeError):
    pass


def _positive(**kw):
    for k, v in kw.items():
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{k} must be positive and finite, got {v}")


def _decay_mass(b, t0, t1, times):
    # integral over [t0, t1) of b exp(-b (u - t_i)) for u >= t_i
    times = times[times < t1]
    lo = np.maximum(t0, times)
    return np.exp(-b * (lo - times)) - np.exp(-b * (t1 - times))


@dataclass(frozen=True)
class SelfExciting:
    mu: float = 0.1
    beta: float = 0.1
    kind = "self-exciting"
    mark_dim = 0

    def __post_init__(self):
        _positive(mu=self.mu, beta=self.beta)

    def intensity_many(self, t, times, marks=None):
        t = np.asarray(t, float)
        tau = t[..., None] - times
        contrib = np.where(tau >= 0, self.beta * np.exp(-self.beta * np.maximum(tau, 0.0)), 0.0)
        return self.mu + contrib.sum(axis=-1)

    def compensator(self, t0, t1, times):
        b = self.beta
        return self.mu * (t1 - t0) + np.sum(_decay_mass(b, t0, t1, times))


@dataclass(frozen=True)
class SelfCorrecting:
    mu: float = 1.0
    alpha: float = 1.0
    kind = "self-correcting"
    mark_dim = 0

    def __post_init__(self):
        _positive(mu=self.mu, alpha=self.alpha)

    def intensity_many(self, t, times, marks=None):
        t = np.asarray(t, float)
        n = (times[None, :] <= t.reshape(-1, 1)).sum(axis=1).reshape(t.shape)
        return np.exp(self.mu * t - self.alpha * n)

    def compensator(self, t0, t1, times):
        # history fixed on [t0, t1): exp(-alpha n) * (e^{mu t1} - e^{mu t0}) / mu
        n = times.size
        return math.exp(self.mu * t0 - self.alpha * n) * math.expm1(self.mu * (t1 - t0)) / self.mu


@dataclass(frozen=True)
class Etas:
    mu: float = 0.02
    C: float = 0.5
    beta: float = 1.0
    sigma_x: float = 0.5
    sigma_y: float = 0.5
    a: tuple = (0.0, 0.0)
    domain: tuple = ((0.0, 10.0), (0.0, 10.0))
    kind = "etas"
    mark_dim = 2

    def __post_init__(self):
        _positive(mu=self.mu, C=self.C, beta=self.beta, sigma_x=self.sigma_x, sigma_y=self.sigma_y)
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        dom = tuple(tuple(float(v) for v in r) for r in self.domain)
        if len(dom) != 2 or any(len(r) != 2 or not r[1] > r[0] for r in dom):
            raise ValueError(f"ETAS domain must be a non-degenerate 2-D box, got {self.domain}")
        object.__setattr__(self, "domain", dom)

    @property
    def area(self) -> float:
        (x0, x1), (y0, y1) = self.domain
        return (x1 - x0) * (y1 - y0)

    def kernel(self, tau, dx, dy):
        """Triggering density at elapsed time ``tau`` and displacement (dx, dy); 0 for tau <= 0."""
        tau = np.asarray(tau, float)
        pos = tau > 0
        ts = np.where(pos, tau, 1.0)
        qx = (dx - self.a[0]) / self.sigma_x
        qy = (dy - self.a[1]) / self.sigma_y
        val = (self.C * np.exp(-self.beta * ts) / (2 * np.pi * self.sigma_x * self.sigma_y * ts)
               * np.exp(-(qx * qx + qy * qy) / (2 * ts)))
        return np.where(pos, val, 0.0)

    def intensity_many(self, t, times, marks, s=None):
        t = np.asarray(t, float)
        s = np.asarray(s, float).reshape(t.shape + (2,))
        tau = t[..., None] - times
        dx = s[..., 0:1] - marks[:, 0]
        dy = s[..., 1:2] - marks[:, 1]
        return self.mu + self.kernel(tau, dx, dy).sum(axis=-1)

    def compensator(self, t0, t1, times):
        b = self.beta
        return self.mu * self.area * (t1 - t0) + self.C / b * np.sum(_decay_mass(b, t0, t1, times))

    def contains(self, s) -> bool:
        (x0, x1), (y0, y1) = self.domain
        return x0 <= s[0] <= x1 and y0 <= s[1] <= y1


ClassicalModel = Union[SelfExciting, SelfCorrecting, Etas]


def model_from_dict(d: dict) -> ClassicalModel:
    d = dict(d)
    kind = d.pop("kind")
    cls = {"self-exciting": SelfExciting, "self-correcting": SelfCorrecting, "etas": Etas}.get(kind)
    if cls is None:
        raise ValueError(f"unknown model {kind!r}; valid models: self-exciting, self-correcting, etas")
    return cls(**d)


def model_to_dict(model: ClassicalModel) -> dict:
    out = {"kind": model.kind, **asdict(model)}
    if isinstance(model, Etas):
        out["a"] = list(model.a)
        out["domain"] = [list(r) for r in model.domain]
    return out


# --------------------------------------------------------------------------- exact quantities


def _history(history):
    if history is None:
        return np.zeros(0), np.zeros((0, 0))
    if isinstance(history, EventSequence):
        return history.times, history.marks
    times = np.array([e.time for e in history], float)
    marks = np.array([e.mark for e in history], float).reshape(times.size, -1)
    return times, marks


def intensity(model: ClassicalModel, t: float, mark=None, history=None) -> float:
    """lambda(t[, mark] | history) by direct summation over the history.

    History events at times <= t contribute (the intensity is right-continuous).
    """
    times, marks = _history(history)
    if times.size and t < times[-1]:
        raise ValueError(f"intensity: t={t} is earlier than the last history event {times[-1]}")
    if isinstance(model, Etas):
        return float(model.intensity_many(np.array(t), times, marks.reshape(-1, 2), mark))
    return float(model.intensity_many(np.array(t), times))


def compensator(model: ClassicalModel, t0: float, t1: float, history=None) -> float:
    """Integral of the intensity over [t0, t1) (and the mark space), no events inside."""
    times, _ = _history(history)
    return float(model.compensator(t0, t1, times))


def exact_loglik(model: ClassicalModel, seq: EventSequence) -> float:
    """Sum of log lambda(t_i- | H) minus the compensator over [0, T)."""
    ll = 0.0
    times, marks = seq.times, seq.marks
    for i in range(len(seq)):
        if isinstance(model, Etas):
            lam = model.intensity_many(np.array(times[i]), times[:i], marks[:i], marks[i])
        else:
            lam = model.intensity_many(np.array(times[i]), times[:i])
        ll += math.log(float(lam))
    if isinstance(model, SelfCorrecting):
        edges = np.concatenate([[0.0], times, [seq.horizon]])
        comp = sum(model.compensator(edges[i], edges[i + 1], times[:i]) for i in range(len(seq) + 1))
    else:
        comp = model.compensator(0.0, seq.horizon, times)
    return ll - float(comp)


def rescaled_gaps(model: ClassicalModel, seq: EventSequence) -> np.ndarray:
    """Compensator increments between consecutive events (the first from 0)."""
    times = seq.times
    edges = np.concatenate([[0.0], times])
    return np.array([model.compensator(edges[i], edges[i + 1], times[:i]) for i in range(len(seq))])


def ground_truth_cond_cdf(model: ClassicalModel, t, history=None):
    """F(t | H) = 1 - exp(-compensator(t_n, t)) for the next event time."""
    times, _ = _history(history)
    tn = times[-1] if times.size else 0.0
    tq = np.atleast_1d(np.asarray(t, float))
    if np.any(tq < tn):
        raise ValueError(f"ground_truth_cond_cdf: t earlier than the last event {tn}")
    out = np.array([-math.expm1(-model.compensator(tn, u, times)) for u in tq])
    return float(out[0]) if np.ndim(t) == 0 else out


def ground_truth_cond_pdf(model: ClassicalModel, t, mark=None, history=None):
    """f(t[, mark] | H) = lambda(t[, mark] | H) exp(-compensator(t_n, t)).

    ``t`` may be scalar or an array of times after the last history event; the
    history is taken as all given events, which must precede ``t``.
    """
    times, marks = _history(history)
    tn = times[-1] if times.size else 0.0
    tq = np.atleast_1d(np.asarray(t, float))
    if np.any(tq < tn):
        raise ValueError(f"ground_truth_cond_pdf: t earlier than the last event {tn}")
    if isinstance(model, Etas):
        s = np.broadcast_to(np.asarray(mark, float).reshape(-1, 2), (tq.size, 2))
        lam = model.intensity_many(tq, times, marks.reshape(-1, 2), s)
    elif isinstance(model, SelfCorrecting):
        lam = np.exp(model.mu * tq - model.alpha * times.size)
    else:
        lam = model.intensity_many(tq, times)
    comp = np.array([model.compensator(tn, u, times) for u in tq])
    out = lam * np.exp(-comp)
    return float(out[0]) if np.ndim(t) == 0 else out


# --------------------------------------------------------------------------- simulation


def _uniform_mark(rng, box):
    return np.array([rng.uniform(lo, hi) for lo, hi in box])


def _finish(times, marks, T, d):
    # the last candidate may land at or beyond T; it is removed
    if times and times[-1] >= T:
        times.pop()
        marks.pop()
    return EventSequence(times, T, np.array(marks, float).reshape(len(times), d))


def _thin_fixed(model, T, box, lambda_bar, rng):
    d = model.mark_dim
    volume = float(np.prod([hi - lo for lo, hi in box])) if d else 1.0
    rate = lambda_bar * volume
    times, marks = [], []
    t = 0.0
    while t < T:
        u = 1.0 - rng.random()
        t = t - math.log(u) / rate
        m = _uniform_mark(rng, box) if d else np.zeros(0)
        D = rng.random()
        ht, hm = np.array(times), np.array(marks, float).reshape(len(times), d)
        if isinstance(model, Etas):
            lam = float(model.intensity_many(np.array(t), ht, hm, m))
        else:
            lam = float(model.intensity_many(np.array(t), ht))
        if t < T and lam > lambda_bar:
            raise UpperBoundViolation(f"upper bound violated at t={t:.6g}: lambda={lam:.6g} > {lambda_bar:.6g}")
        if D * lambda_bar <= lam:
            times.append(t)
            marks.append(m)
    return _finish(times, marks, T, d)


def _thin_self_exciting(model: SelfExciting, T, rng):
    times = []
    t = 0.0
    bound = model.mu
    while t < T:
        t = t - math.log(1.0 - rng.random()) / bound
        lam = float(model.intensity_many(np.array(t), np.array(times)))
        if lam > bound * (1 + 1e-12):
            raise UpperBoundViolation(f"upper bound violated at t={t:.6g}")
        if rng.random() * bound <= lam:
            times.append(t)
            lam += model.beta
        bound = lam
    return _finish(times, [np.zeros(0)] * len(times), T, 0)


def _thin_self_correcting(model: SelfCorrecting, T, rng):
    times = []
    t = 0.0
    w = 1.0 / model.mu
    while t < T:
        n = len(times)
        bound = math.exp(model.mu * (t + w) - model.alpha * n)
        gap = -math.log(1.0 - rng.random()) / bound
        if gap > w:
            t += w
            continue
        t += gap
        lam = math.exp(model.mu * t - model.alpha * n)
        if rng.random() * bound <= lam:
            times.append(t)
    return _finish(times, [np.zeros(0)] * len(times), T, 0)


def _thin_etas(model: Etas, T, rng):
    times, marks = [], []
    t = 0.0
    base = model.mu * model.area
    (x0, x1), (y0, y1) = model.domain
    while t < T:
        ht = np.array(times)
        bound = base + model.C * np.sum(np.exp(-model.beta * (t - ht)))
        t = t - math.log(1.0 - rng.random()) / bound
        weights = model.C * np.exp(-model.beta * (t - ht))
        total = base + weights.sum()
        if rng.random() * bound > total:
            continue
        pick = rng.random() * total
        if pick < base:
            s = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        else:
            j = min(int(np.searchsorted(np.cumsum(weights), pick - base)), len(times) - 1)
            tau = t - times[j]
            s = marks[j] + np.asarray(model.a) + np.sqrt(tau) * np.array(
                [model.sigma_x, model.sigma_y]) * rng.standard_normal(2)
            if not model.contains(s):
                continue
        times.append(t)
        marks.append(s)
    return _finish(times, marks, T, 2)


def thinning_simulate(model: ClassicalModel, T: float, mark_space=None, lambda_bar=None,
                      rng: np.random.Generator | int = 0) -> EventSequence:
    """Simulate one sequence on [0, T) by thinning.

    With a numeric ``lambda_bar`` this is the fixed-bound algorithm: candidate
    gaps are exponential(lambda_bar * |mark space|), candidate marks uniform,
    and a candidate is kept iff ``D * lambda_bar <= lambda``. Any candidate
    before T whose intensity exceeds ``lambda_bar`` raises
    :class:`UpperBoundViolation`. With ``lambda_bar=None`` a model-specific
    local bound is used instead.
    """
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if lambda_bar is not None:
        if not lambda_bar > 0:
            raise ValueError(f"lambda_bar must be positive, got {lambda_bar}")
        box = mark_space if mark_space is not None else (model.domain if isinstance(model, Etas) else ())
        return _thin_fixed(model, T, box, float(lambda_bar), rng)
    if isinstance(model, SelfExciting):
        return _thin_self_exciting(model, T, rng)
    if isinstance(model, SelfCorrecting):
        return _thin_self_correcting(model, T, rng)
    return _thin_etas(model, T, rng)


def simulate_dataset(model: ClassicalModel, n_seqs: int, T: float, seed: int = 0, lambda_bar=None,
                     threads: int = 1) -> Dataset:
    """``n_seqs`` independent sequences; sequence ``i`` uses random stream ``(seed, i)``."""
    def one(i):
        return thinning_simulate(model, T, None, lambda_bar, substream(seed, i))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            seqs = list(pool.map(one, range(n_seqs)))
    else:
        seqs = [one(i) for i in range(n_seqs)]
    bounds = np.array(model.domain) if isinstance(model, Etas) else None
    return Dataset(seqs, model.mark_dim, bounds)


# --------------------------------------------------------------------------- ETAS fitting


@dataclass
class EtasFitConfig:
    lr: float = 1e-2
    steps: int = 500
    checkpoint_every: int = 50
    fit_drift: bool = True


@dataclass
class _EtasData:
    pair_i: np.ndarray  # receiving event (global index)
    tau: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    remain: np.ndarray  # T - t_j for every event
    n_events: int
    n_seqs: int
    T: float
    area: float


def _etas_data(data: Dataset, area: float, max_lag: float = np.inf) -> _EtasData:
    pi, tau, dx, dy, remain = [], [], [], [], []
    offset = 0
    for s in data:
        t, m = s.times, s.marks
        n = len(s)
        if n:
            i, j = np.tril_indices(n, -1)
            keep = (t[i] - t[j]) <= max_lag
            i, j = i[keep], j[keep]
            pi.append(i + offset)
            tau.append(t[i] - t[j])
            dx.append(m[i, 0] - m[j, 0])
            dy.append(m[i, 1] - m[j, 1])
            remain.append(s.horizon - t)
        offset += n
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
    return _EtasData(cat(pi).astype(np.intp), cat(tau), cat(dx), cat(dy), cat(remain),
                     offset, len(data), float(data.horizon or 0.0), area)


def _etas_objective(theta: dict, D: _EtasData):
    """Mean per-event log-likelihood as a node, from log-parameters and drift."""
    P = D.tau.size
    b = lambda name, n: ad.broadcast_to(theta[name], (n,))  # noqa: E731
    mu = ad.exp(theta["log_mu"])
    beta = ad.exp(theta["log_beta"])
    if P:
        inv_sx2 = ad.exp(ad.scale(b("log_sigma_x", P), -2.0))
        inv_sy2 = ad.exp(ad.scale(b("log_sigma_y", P), -2.0))
        qx = ad.square(ad.sub(D.dx, b("a_x", P)))
        qy = ad.square(ad.sub(D.dy, b("a_y", P)))
        quad = ad.mul(ad.add(ad.mul(qx, inv_sx2), ad.mul(qy, inv_sy2)), -0.5 / D.tau)
        beta_tau = ad.mul(ad.broadcast_to(beta, (P,)), D.tau)
        log_norm = ad.add(b("log_sigma_x", P), b("log_sigma_y", P))
        logk = ad.add(ad.sub(ad.sub(b("log_C", P), beta_tau), log_norm),
                      ad.add_scalar(quad, 0.0) - np.log(2 * np.pi * D.tau))
        excite = ad.segment_sum(ad.exp(logk), D.pair_i, D.n_events)
    else:
        excite = ad.as_node(np.zeros(D.n_events))
    lam = ad.add(excite, ad.broadcast_to(mu, (D.n_events,)))
    log_term = ad.sum(ad.log(lam))
    decay = ad.exp(ad.mul(ad.broadcast_to(ad.neg(beta), (D.n_events,)), D.remain))
    trig_comp = ad.mul(ad.exp(ad.sub(theta["log_C"], theta["log_beta"])),
                       ad.reshape(ad.sum(ad.scale(decay, -1.0) + 1.0), (1,)))
    comp = ad.add(ad.scale(mu, D.area * D.T * D.n_seqs), trig_comp)
    return ad.scale(ad.sub(ad.reshape(log_term, (1,)), comp), 1.0 / max(D.n_events, 1))


def _theta_from(model: Etas) -> dict:
    vals = {
        "log_mu": math.log(model.mu), "log_C": math.log(model.C), "log_beta": math.log(model.beta),
        "log_sigma_x": math.log(model.sigma_x), "log_sigma_y": math.log(model.sigma_y),
        "a_x": model.a[0], "a_y": model.a[1],
    }
    return {k: ad.Parameter(np.array([v]), name=k) for k, v in vals.items()}


def _model_from(theta: dict, domain) -> Etas:
    v = {k: float(p.value[0]) for k, p in theta.items()}
    return Etas(math.exp(v["log_mu"]), math.exp(v["log_C"]), math.exp(v["log_beta"]),
                math.exp(v["log_sigma_x"]), math.exp(v["log_sigma_y"]), (v["a_x"], v["a_y"]), domain)


def etas_loglik(model: Etas, data: Dataset) -> float:
    """Total exact log-likelihood of ``data`` (vectorized; equals the sum of exact_loglik)."""
    D = _etas_data(data, model.area)
    return float(_etas_objective(_theta_from(model), D).value[0]) * max(D.n_events, 1)


@dataclass
class EtasFit:
    model: Etas
    checkpoints: list = field(default_factory=list)  # (step, mean log-likelihood per event)


def fit_etas(data: Dataset, init: Etas, cfg: EtasFitConfig | None = None) -> EtasFit:
    """Maximum likelihood by Adam on log-parameters (drift unconstrained).

    A step that lowers the likelihood is undone and the learning rate halved,
    so the recorded checkpoints never decrease.
    """
    cfg = cfg or EtasFitConfig()
    if data.mark_dim != 2:
        raise ValueError(f"fit_etas needs 2-D marks, got mark_dim={data.mark_dim}")
    D = _etas_data(data, init.area)
    theta = _theta_from(init)
    trainable = [p for k, p in theta.items() if cfg.fit_drift or not k.startswith("a_")]
    state = AdamState(lr=cfg.lr)
    fit = EtasFit(init)
    best, saved = -math.inf, None
    for step in range(cfg.steps + 1):
        with ad.Graph() as g:
            ll = _etas_objective(theta, D)
            loss = ad.neg(ad.sum(ll))
        value = float(ll.value[0])
        if not math.isfinite(value) or value < best:
            if saved is None:
                raise FloatingPointError(f"fit_etas: non-finite likelihood at step {step}")
            for p, v in zip(trainable, saved):
                p.value = v.copy()
            state.lr *= 0.5
            with ad.Graph() as g:
                ll = _etas_objective(theta, D)
                loss = ad.neg(ad.sum(ll))
            value = float(ll.value[0])
        best, saved = value, [p.value.copy() for p in trainable]
        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            fit.checkpoints.append((step, value))
        if step == cfg.steps:
            break
        grads = ad.backward(g, loss)
        by_id = {id(p): gr for p, gr in zip(g.parameters, grads)}
        adam_step(trainable, [by_id.get(id(p), np.zeros_like(p.value)) for p in trainable], state)
    fit.model = _model_from(theta, init.domain)
    return fit
