"""Generator, LSTM history encoder, CVAE encoder/prior nets and Adam.

All networks work in a standardized event space: gaps are divided by
``time_scale`` and marks are shifted/scaled by ``mark_mean``/``mark_std``.
Public helpers that take or return raw events convert at the boundary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import Event, EventSequence

__all__ = [
    "CegModel", "CvaeNets", "AdamState", "generator_forward", "generator_batch",
    "lstm_step", "encode_history", "encode_events", "reparam_sample", "latent_params",
    "adam_step", "clip_global_norm", "save_model", "load_model", "dumps_model", "loads_model",
]

GEN_WIDTH = 32
TIME_HEADS = {"relu": ad.relu, "softplus": ad.softplus}


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass
class CegModel:
    """Parameters of the generator g and history encoder psi plus metadata."""

    params: dict
    noise_dim: int = 16
    hidden_dim: int = 64
    mark_dim: int = 0
    dt_floor: float = 1e-6
    time_scale: float = 1.0
    mark_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mark_std: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mark_bounds: np.ndarray | None = None
    latent: str = "standard"  # "standard": z ~ N(0, I); "prior": z from the CVAE prior net
    time_head: str = "softplus"  # "relu" gives the hard-rectified head; it can die during training

    @classmethod
    def init(cls, mark_dim=0, noise_dim=16, hidden_dim=64, dt_floor=1e-6, seed=0,
             time_scale=1.0, mark_mean=None, mark_std=None, mark_bounds=None, time_head="softplus"):
        if time_head not in TIME_HEADS:
            raise ValueError(f"time_head must be one of {sorted(TIME_HEADS)}, got {time_head!r}")
        rng = np.random.default_rng(seed)
        r, p, d, w = noise_dim, hidden_dim, mark_dim, GEN_WIDTH
        # the first generator layer is split so history rows can be shared across L noise draws
        w1 = _glorot(rng, r + p, w)
        b3 = np.zeros(1 + d)
        b3[0] = 1.0  # start the time head well above the floor
        lstm_b = np.zeros(4 * p)
        lstm_b[p:2 * p] = 1.0  # forget gate
        raw = {
            "gen.W1z": w1[:r], "gen.W1h": w1[r:], "gen.b1": np.zeros(w),
            "gen.W2": _glorot(rng, w, w), "gen.b2": np.zeros(w),
            "gen.W3": _glorot(rng, w, 1 + d), "gen.b3": b3,
            "lstm.W": _glorot(rng, 1 + d + p, 4 * p), "lstm.b": lstm_b,
        }
        params = {k: ad.Parameter(v, name=k) for k, v in raw.items()}
        return cls(
            params, r, p, d, dt_floor, float(time_scale),
            np.zeros(d) if mark_mean is None else np.asarray(mark_mean, float),
            np.ones(d) if mark_std is None else np.asarray(mark_std, float),
            None if mark_bounds is None else np.asarray(mark_bounds, float).reshape(d, 2),
            time_head=time_head,
        )

    def __getitem__(self, name) -> ad.Parameter:
        return self.params[name]

    @property
    def event_dim(self) -> int:
        return 1 + self.mark_dim

    @property
    def log_jacobian(self) -> float:
        """log |d standardized / d raw|, added to standardized log-densities."""
        return -float(np.log(self.time_scale) + np.sum(np.log(self.mark_std)))

    def set_standardization(self, sequences):
        """Fit gap scale and mark mean/std on training sequences."""
        gaps = np.concatenate([s.gaps() for s in sequences] or [np.zeros(0)])
        self.time_scale = float(gaps.std()) if gaps.size > 1 and gaps.std() > 0 else 1.0
        if self.mark_dim:
            marks = np.concatenate([s.marks for s in sequences])
            self.mark_mean = marks.mean(axis=0)
            std = marks.std(axis=0)
            self.mark_std = np.where(std > 0, std, 1.0)
        return self

    def calibrate_time_head(self, sequences, n=2048, seed=0):
        """Match the initial gap cloud to the data's gap spread.

        Rescales column 0 of ``gen.W3`` and shifts ``gen.b3[0]`` so that, with
        an empty history and z ~ N(0, I), the time-head pre-activation has the
        mean and std of the inverse head applied to the standardized gaps.
        Call after :meth:`set_standardization`.
        """
        gaps = np.concatenate([s.gaps() for s in sequences] or [np.zeros(0)]) / self.time_scale
        gaps = gaps[gaps > self.dt_floor / self.time_scale]
        if gaps.size < 2:
            return self
        target = np.log(np.expm1(gaps)) if self.time_head == "softplus" else gaps
        z = np.random.default_rng(seed).standard_normal((n, self.noise_dim))
        P = {k: p.value for k, p in self.params.items()}
        sp = lambda a: np.logaddexp(a, 0.0)
        h2 = sp(sp(z @ P["gen.W1z"] + P["gen.b1"]) @ P["gen.W2"] + P["gen.b2"])
        pre = h2 @ P["gen.W3"][:, 0]
        if pre.std() > 0:
            scale = target.std() / pre.std()
            self.params["gen.W3"].value[:, 0] *= scale
            pre = pre * scale
        self.params["gen.b3"].value[0] = target.mean() - pre.mean()
        return self

    def standardize(self, gaps, marks):
        gaps = np.asarray(gaps, float) / self.time_scale
        marks = (np.asarray(marks, float).reshape(len(gaps), self.mark_dim) - self.mark_mean) / self.mark_std
        return gaps, marks

    def unstandardize(self, gaps_s, marks_s):
        return np.asarray(gaps_s) * self.time_scale, np.asarray(marks_s) * self.mark_std + self.mark_mean

    def assert_finite(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.value)):
                raise FloatingPointError(f"non-finite values in parameter {name}")


@dataclass
class CvaeNets:
    """Encoder net q(z | x, h) and prior net p(z | h), one softplus hidden layer each."""

    params: dict
    noise_dim: int
    width: int = GEN_WIDTH

    @classmethod
    def init(cls, model: CegModel, width=GEN_WIDTH, seed=0):
        rng = np.random.default_rng(seed + 7919)
        r, p, e = model.noise_dim, model.hidden_dim, model.event_dim
        raw = {
            "enc.W1": _glorot(rng, e + p, width), "enc.b1": np.zeros(width),
            "enc.W2": _glorot(rng, width, 2 * r), "enc.b2": np.zeros(2 * r),
            "prior.W1": _glorot(rng, p, width), "prior.b1": np.zeros(width),
            "prior.W2": _glorot(rng, width, 2 * r), "prior.b2": np.zeros(2 * r),
        }
        return cls({k: ad.Parameter(v, name=k) for k, v in raw.items()}, r, width)

    def __getitem__(self, name):
        return self.params[name]


# --------------------------------------------------------------------------- forward passes


def generator_batch(model: CegModel, z, h_first):
    """Batched generator in standardized units.

    ``z`` is (n, r); ``h_first`` is the history contribution to the first
    layer, i.e. ``H @ W1h`` of shape (n, 32) (see :func:`history_projection`).
    Returns (dt node of shape (n,), mark node of shape (n, d)).
    """
    P = model.params
    a1 = ad.add_bias(ad.add(ad.matmul(z, P["gen.W1z"]), h_first), P["gen.b1"])
    a2 = ad.affine(P["gen.W2"], ad.softplus(a1), P["gen.b2"])
    out = ad.affine(P["gen.W3"], ad.softplus(a2), P["gen.b3"])
    floor = model.dt_floor / model.time_scale
    dt = ad.clamp_min(TIME_HEADS[model.time_head](ad.reshape(ad.cols(out, 0, 1), (-1,))), floor)
    return dt, ad.cols(out, 1, model.event_dim)


def history_projection(model: CegModel, H):
    return ad.matmul(H, model.params["gen.W1h"])


def generator_forward(model: CegModel, z, h, clamp_marks=True):
    """g(z, h) for a single noise vector; returns raw (dt, mark)."""
    z = np.asarray(z, float).reshape(1, model.noise_dim)
    h = np.asarray(h, float).reshape(1, model.hidden_dim)
    dt, mark = generator_batch(model, z, history_projection(model, h))
    if not (np.all(np.isfinite(dt.value)) and np.all(np.isfinite(mark.value))):
        raise FloatingPointError("generator_forward: non-finite activations")
    dt_raw, m_raw = model.unstandardize(dt.value, mark.value)
    m_raw = m_raw[0]
    if clamp_marks and model.mark_bounds is not None:
        m_raw = np.clip(m_raw, model.mark_bounds[:, 0], model.mark_bounds[:, 1])
    return float(max(dt_raw[0], model.dt_floor)), m_raw


def lstm_step(model: CegModel, x, state):
    """One LSTM cell update with gates ordered (input, forget, cell, output).

    ``x`` is the standardized event encoding (gap, marks), shape (B, 1+d) or (1+d,);
    ``state`` is ``(h, c)`` with matching leading shape.
    """
    h, c = ad.as_node(state[0]), ad.as_node(state[1])
    x = ad.as_node(x)
    single = x.value.ndim == 1
    if single:
        x, h, c = ad.reshape(x, (1, -1)), ad.reshape(h, (1, -1)), ad.reshape(c, (1, -1))
    p = model.hidden_dim
    if h.shape[-1] != p or c.shape[-1] != p:
        raise ad.ShapeError(f"lstm_step: state width {h.shape}/{c.shape} != hidden_dim {p}")
    gates = ad.affine(model.params["lstm.W"], ad.concat([x, h], axis=1), model.params["lstm.b"])
    i = ad.sigmoid(ad.cols(gates, 0, p))
    f = ad.sigmoid(ad.cols(gates, p, 2 * p))
    g = ad.tanh(ad.cols(gates, 2 * p, 3 * p))
    o = ad.sigmoid(ad.cols(gates, 3 * p, 4 * p))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    if single:
        return ad.reshape(h_new, (-1,)), ad.reshape(c_new, (-1,))
    return h_new, c_new


def _as_sequence(prefix, model) -> EventSequence:
    if isinstance(prefix, EventSequence):
        return prefix
    prefix = list(prefix)
    return EventSequence.from_events(prefix, np.inf, model.mark_dim)


def encode_events(model: CegModel, gaps_s, marks_s):
    """Run the LSTM over standardized inputs of shape (B, n) / (B, n, d).

    Returns the list ``[h_0, h_1, ..., h_n]`` of (B, p) nodes with h_0 = 0.
    Padding at the end of shorter rows is harmless because the cell is causal.
    """
    B, n = gaps_s.shape
    p = model.hidden_dim
    h = ad.as_node(np.zeros((B, p)))
    c = ad.as_node(np.zeros((B, p)))
    hs = [h]
    for i in range(n):
        x = np.concatenate([gaps_s[:, i:i + 1], marks_s[:, i, :]], axis=1)
        h, c = lstm_step(model, x, (h, c))
        hs.append(h)
    return hs


def encode_history(model: CegModel, prefix) -> np.ndarray:
    """h after folding the LSTM over ``prefix`` (zero vector when empty)."""
    seq = _as_sequence(prefix, model)
    if np.any(np.diff(seq.times) <= 0) or (len(seq) and seq.times[0] < 0):
        raise ValueError("encode_history: prefix times must be nonnegative and strictly increasing")
    g, m = model.standardize(seq.gaps(), seq.marks)
    hs = encode_events(model, g[None, :], m[None, :, :])
    return hs[-1].value[0].copy()


def latent_params(nets: CvaeNets, x_s, h):
    """(mu, logvar) of q(z|x,h) when ``x_s`` is given, else of p(z|h).

    ``x_s`` is the standardized event (n, 1+d) or None; ``h`` is (n, p).
    """
    P = nets.params
    r = nets.noise_dim
    if x_s is None:
        hidden = ad.softplus(ad.affine(P["prior.W1"], h, P["prior.b1"]))
        out = ad.affine(P["prior.W2"], hidden, P["prior.b2"])
    else:
        hidden = ad.softplus(ad.affine(P["enc.W1"], ad.concat([x_s, h], axis=-1), P["enc.b1"]))
        out = ad.affine(P["enc.W2"], hidden, P["enc.b2"])
    return ad.cols(out, 0, r), ad.cols(out, r, 2 * r)


def reparam_sample(nets: CvaeNets, x, h, eps, model: CegModel | None = None):
    """z = mu + exp(logvar / 2) * eps, from the encoder if ``x`` is given else the prior.

    ``x`` is an :class:`Event` (standardized with ``model``) or an already
    standardized array; ``h`` and ``eps`` are 1-D or batched 2-D.
    """
    h = ad.as_node(h)
    single = h.value.ndim == 1
    if single:
        h = ad.reshape(h, (1, -1))
    x_s = None
    if x is not None:
        if isinstance(x, Event):
            if model is None:
                raise ValueError("reparam_sample: a model is needed to standardize an Event")
            g, m = model.standardize([x.time], [x.mark])
            x = np.concatenate([g, m[0]])
        x_s = ad.as_node(x)
        if x_s.value.ndim == 1:
            x_s = ad.reshape(x_s, (1, -1))
    mu, logvar = latent_params(nets, x_s, h)
    eps = np.asarray(eps, float).reshape(mu.shape)
    z = ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), eps))
    return ad.reshape(z, (-1,)) if single else z


# --------------------------------------------------------------------------- optimization


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_global_norm(grads, max_norm):
    if max_norm is None:
        return grads
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads]
    return grads


def adam_step(params, grads, state: AdamState) -> AdamState:
    """In-place bias-corrected Adam descent step on ``params`` (a list of Parameters)."""
    for p, g in zip(params, grads):
        if p.value.shape != g.shape:
            raise ad.ShapeError(f"adam_step: grad shape {g.shape} != parameter {p.name} shape {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {p.name}")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    for p, g in zip(params, grads):
        key = p.name or id(p)
        m = state.m.get(key, np.zeros_like(g))
        v = state.v.get(key, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[key], state.v[key] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# --------------------------------------------------------------------------- serialization


def _array_json(a) -> str:
    vals = ",".join(format(float(v), ".17g") for v in np.asarray(a, float).reshape(-1))
    return "[" + vals + "]"


def _params_json(params: dict) -> str:
    items = []
    for name in sorted(params):
        v = params[name].value
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"cannot serialize non-finite parameter {name}")
        items.append(
            '{"name":' + json.dumps(name) + ',"shape":' + json.dumps(list(v.shape))
            + ',"values":' + _array_json(v) + "}"
        )
    return "[" + ",".join(items) + "]"


def dumps_model(model: CegModel, nets: CvaeNets | None = None) -> str:
    arch = {
        "noise_dim": model.noise_dim, "hidden_dim": model.hidden_dim, "mark_dim": model.mark_dim,
        "generator_widths": [GEN_WIDTH, GEN_WIDTH], "dt_floor": model.dt_floor, "latent": model.latent,
        "time_head": model.time_head,
    }
    if nets is not None:
        arch["cvae_width"] = nets.width
    head = json.dumps({"format": "ceg-model", "version": 1, "architecture": arch})[:-1]
    std = (
        '{"time_scale":' + format(model.time_scale, ".17g")
        + ',"mark_mean":' + _array_json(model.mark_mean)
        + ',"mark_std":' + _array_json(model.mark_std)
        + ',"mark_bounds":' + ("null" if model.mark_bounds is None else _array_json(model.mark_bounds)) + "}"
    )
    body = head + ',"standardization":' + std + ',"parameters":' + _params_json(model.params)
    if nets is not None:
        body += ',"cvae_parameters":' + _params_json(nets.params)
    return body + "}\n"


def _load_params(entries):
    return {
        e["name"]: ad.Parameter(np.array(e["values"], dtype=np.float64).reshape(e["shape"]), name=e["name"])
        for e in entries
    }


def loads_model(text: str):
    """Inverse of :func:`dumps_model`; returns ``(model, nets_or_None)``."""
    doc = json.loads(text)
    if doc.get("format") != "ceg-model":
        raise ValueError("not a ceg-model document")
    arch, std = doc["architecture"], doc["standardization"]
    d = arch["mark_dim"]
    bounds = std["mark_bounds"]
    model = CegModel(
        _load_params(doc["parameters"]), arch["noise_dim"], arch["hidden_dim"], d, arch["dt_floor"],
        std["time_scale"], np.array(std["mark_mean"], float), np.array(std["mark_std"], float),
        None if bounds is None else np.array(bounds, float).reshape(d, 2), arch.get("latent", "standard"),
        arch.get("time_head", "softplus"),
    )
    nets = None
    if "cvae_parameters" in doc:
        nets = CvaeNets(_load_params(doc["cvae_parameters"]), arch["noise_dim"], arch.get("cvae_width", GEN_WIDTH))
    return model, nets


def save_model(path, model: CegModel, nets: CvaeNets | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(model, nets))


def load_model(path):
    with open(path) as fh:
        return loads_model(fh.read())
