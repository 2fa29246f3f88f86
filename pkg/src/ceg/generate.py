"""Inference with a trained generator: sequence generation, next-event clouds,
point prediction and model-implied conditional density / intensity.

Histories may be given as an :class:`EventSequence` or a list of
:class:`Event`. Models trained variationally (``model.latent == "prior"``)
draw noise from the prior net, so ``nets`` must be supplied for them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Event, EventSequence, substream
from .kde import SampleCloud, cdf_time_kde, cond_pdf_kde
from .nets import CegModel, CvaeNets, encode_history, generator_batch, history_projection, latent_params, lstm_step

__all__ = [
    "GenerationConfig", "GenerationResult", "INTENSITY_EPS", "generate_sequence", "generate_dataset",
    "draw_latent", "clouds_for_sequence", "sample_next", "predict_next", "cond_pdf", "cond_intensity",
    "intensity_from_cloud",
]

INTENSITY_EPS = 1e-6


@dataclass
class GenerationConfig:
    horizon: float
    max_events: int = 100_000
    seed: int = 0
    sample_count: int = 1000

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.max_events < 1:
            raise ValueError(f"max_events must be >= 1, got {self.max_events}")


@dataclass
class GenerationResult:
    sequence: EventSequence
    truncated: bool


def draw_latent(model: CegModel, nets: CvaeNets | None, H: np.ndarray, rng) -> np.ndarray:
    """Noise for the generator, one row per row of ``H`` (n, p)."""
    eps = rng.standard_normal((H.shape[0], model.noise_dim))
    if model.latent != "prior":
        return eps
    if nets is None:
        raise ValueError("this model samples its latent from the prior net; pass nets=")
    mu, logvar = latent_params(nets, None, H)
    return mu.value + np.exp(0.5 * logvar.value) * eps


def _decode(model: CegModel, z: np.ndarray, H: np.ndarray):
    dt_s, m_s = generator_batch(model, z, history_projection(model, H))
    if not (np.all(np.isfinite(dt_s.value)) and np.all(np.isfinite(m_s.value))):
        raise FloatingPointError("generator produced non-finite output")
    dt, m = model.unstandardize(dt_s.value, m_s.value)
    dt = np.maximum(dt, model.dt_floor)
    if model.mark_bounds is not None:
        m = np.clip(m, model.mark_bounds[:, 0], model.mark_bounds[:, 1])
    return dt, m


def generate_sequence(model: CegModel, cfg: GenerationConfig, nets: CvaeNets | None = None,
                      rng: np.random.Generator | None = None) -> GenerationResult:
    """Generate one sequence on [0, T) event by event.

    The loop runs while the current time is below T; the last generated
    event, which may land at or beyond T, is then dropped. Generation stops
    early with ``truncated=True`` once ``max_events`` events are emitted.
    """
    rng = substream(cfg.seed, 0) if rng is None else rng
    p, d = model.hidden_dim, model.mark_dim
    h, c = np.zeros(p), np.zeros(p)
    times, marks = [], []
    t = 0.0
    truncated = False
    while t < cfg.horizon:
        if len(times) >= cfg.max_events:
            truncated = True
            break
        H = h.reshape(1, p)
        dt, m = _decode(model, draw_latent(model, nets, H, rng), H)
        t = t + float(dt[0])
        times.append(t)
        marks.append(m[0])
        dt_s, m_s = model.standardize(dt, m)
        x = np.concatenate([dt_s, m_s[0]])
        hn, cn = lstm_step(model, x, (h, c))
        h, c = hn.value, cn.value
    if not truncated and times and times[-1] >= cfg.horizon:
        times.pop()
        marks.pop()
    seq = EventSequence(times, cfg.horizon, np.array(marks, float).reshape(len(times), d))
    return GenerationResult(seq, truncated)


def generate_dataset(model: CegModel, cfg: GenerationConfig, n_seqs: int, nets=None, threads: int = 1):
    """``n_seqs`` sequences; sequence ``i`` uses stream ``(seed, i)``. Returns a list of results."""
    def one(i):
        return generate_sequence(model, cfg, nets, substream(cfg.seed, i))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(n_seqs)))
    return [one(i) for i in range(n_seqs)]


def _history_seq(history, model) -> EventSequence:
    if isinstance(history, EventSequence):
        return history
    return EventSequence.from_events(list(history or []), np.inf, model.mark_dim)


def sample_next(model: CegModel, history, L: int, rng, nets: CvaeNets | None = None,
                k: int | None = None, rule: str = "adaptive") -> SampleCloud:
    """Cloud of ``L`` draws of the next (gap, mark) given ``history``."""
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    h = encode_history(model, _history_seq(history, model))
    H = np.broadcast_to(h, (L, model.hidden_dim))
    dt, m = _decode(model, draw_latent(model, nets, H, rng), H)
    return SampleCloud.from_samples(dt, m, k=k, rule=rule)


def clouds_for_sequence(model: CegModel, seq: EventSequence, L: int, seed: int, key: int,
                        nets: CvaeNets | None = None, k: int | None = None, rule: str = "adaptive",
                        chunk: int = 64) -> list[SampleCloud]:
    """One cloud per event of ``seq`` (history = all earlier events).

    Cloud ``i`` uses stream ``(seed, key, i)`` and matches, up to rounding,
    ``sample_next(model, seq.prefix(i), L, substream(seed, key, i))``.
    """
    n = len(seq)
    if n == 0:
        return []
    g, m = model.standardize(seq.gaps(), seq.marks)
    hs = _encode_all(model, g, m)
    out = []
    for s in range(0, n, chunk):
        idx = range(s, min(n, s + chunk))
        H = np.repeat(hs[list(idx)], L, axis=0)
        z = np.concatenate([draw_latent(model, nets, H[j * L:(j + 1) * L], substream(seed, key, i))
                            for j, i in enumerate(idx)])
        dt, mk = _decode(model, z, H)
        for j in range(len(idx)):
            sl = slice(j * L, (j + 1) * L)
            out.append(SampleCloud.from_samples(dt[sl], mk[sl], k=k, rule=rule))
    return out


def _encode_all(model: CegModel, gaps_s, marks_s) -> np.ndarray:
    # rows h_0 .. h_{n-1}: the encoding before each event
    p = model.hidden_dim
    h, c = np.zeros(p), np.zeros(p)
    rows = [h]
    for i in range(len(gaps_s) - 1):
        hn, cn = lstm_step(model, np.concatenate([[gaps_s[i]], marks_s[i]]), (h, c))
        h, c = hn.value, cn.value
        rows.append(h)
    return np.array(rows)


def predict_next(model: CegModel, history, L: int, rng, nets: CvaeNets | None = None) -> Event:
    """Sample-average prediction: last event time plus the mean generated gap, mean mark."""
    cloud = sample_next(model, history, L, rng, nets)
    seq = _history_seq(history, model)
    t_last = float(seq.times[-1]) if len(seq) else 0.0
    return Event(t_last + float(cloud.dts.mean()), tuple(cloud.marks.mean(axis=0)))


def _query(model, x: Event, history):
    seq = _history_seq(history, model)
    t_last = float(seq.times[-1]) if len(seq) else 0.0
    if not x.time > t_last:
        raise ValueError(f"query time {x.time} is not after the last history event {t_last}")
    return seq, x.time - t_last


def cond_pdf(model: CegModel, x: Event, history, L: int, rng, nets: CvaeNets | None = None) -> float:
    """KDE estimate of f(x | history) from ``L`` generated samples."""
    seq, dt = _query(model, x, history)
    cloud = sample_next(model, seq, L, rng, nets)
    return cond_pdf_kde(dt, cloud, np.asarray(x.mark) if model.mark_dim else None)


def intensity_from_cloud(dt, cloud: SampleCloud, mark=None, eps: float = INTENSITY_EPS):
    """``lambda = f / (1 - F)`` with the survival clamped at ``eps``; returns (lambda, clamped)."""
    f = cond_pdf_kde(dt, cloud, mark)
    surv = 1.0 - cdf_time_kde(dt, cloud)
    clamped = surv < eps
    return f / np.maximum(surv, eps), clamped


def cond_intensity(model: CegModel, x: Event, history, L: int, rng, nets: CvaeNets | None = None,
                   return_flag: bool = False):
    """Intensity recovered from the generated cloud as f / (1 - F)."""
    seq, dt = _query(model, x, history)
    cloud = sample_next(model, seq, L, rng, nets)
    lam, flag = intensity_from_cloud(dt, cloud, np.asarray(x.mark) if model.mark_dim else None)
    return (float(lam), bool(flag)) if return_flag else float(lam)

