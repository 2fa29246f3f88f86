"""Event data model, JSONL dataset I/O, splitting and validation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DataValidationError",
    "Event",
    "EventSequence",
    "Dataset",
    "validate_sequence",
    "load_dataset",
    "save_dataset",
    "dumps_sequence",
    "split_dataset",
    "substream",
]


class DataValidationError(ValueError):
    """Raised when input data violates the event-sequence invariants."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Event:
    time: float
    mark: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "mark", tuple(float(m) for m in self.mark))

    @property
    def mark_dim(self) -> int:
        return len(self.mark)


@dataclass(frozen=True, eq=False)
class EventSequence:
    """Ordered events on ``[0, horizon)``.

    Times and marks are kept as read-only arrays: ``times`` has shape
    ``(n,)`` and ``marks`` has shape ``(n, d_m)``. Construction does not
    validate; use :func:`validate_sequence` or :meth:`checked`.
    """

    times: np.ndarray
    marks: np.ndarray
    horizon: float

    def __init__(self, times, horizon, marks=None):
        t = np.array(times, dtype=np.float64).reshape(-1)
        if marks is None:
            m = np.zeros((t.size, 0))
        else:
            m = np.array(marks, dtype=np.float64)
            if m.ndim == 1:
                m = m.reshape(t.size, -1) if t.size else m.reshape(0, 0)
        object.__setattr__(self, "times", _frozen(t))
        object.__setattr__(self, "marks", _frozen(m))
        object.__setattr__(self, "horizon", float(horizon))

    @classmethod
    def from_events(cls, events: Iterable[Event], horizon: float, mark_dim: int | None = None):
        events = list(events)
        d = mark_dim if mark_dim is not None else (events[0].mark_dim if events else 0)
        times = [e.time for e in events]
        marks = np.array([e.mark for e in events], dtype=np.float64).reshape(len(events), d)
        return cls(times, horizon, marks)

    @property
    def mark_dim(self) -> int:
        return self.marks.shape[1]

    @property
    def events(self) -> list[Event]:
        return [Event(t, m) for t, m in zip(self.times, self.marks)]

    def __len__(self) -> int:
        return self.times.size

    def __getitem__(self, i) -> Event:
        return Event(self.times[i], self.marks[i])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.marks, other.marks)
        )

    def prefix(self, n: int) -> "EventSequence":
        """The first ``n`` events (the history before event ``n``)."""
        return EventSequence(self.times[:n], self.horizon, self.marks[:n])

    def count(self, t: float) -> int:
        """N_t, the number of events with time <= t."""
        return int(np.searchsorted(self.times, t, side="right"))

    def gaps(self) -> np.ndarray:
        """Inter-event times, the first measured from 0."""
        return np.diff(self.times, prepend=0.0)

    def checked(self, mark_dim: int | None = None) -> "EventSequence":
        problems = validate_sequence(self, self.mark_dim if mark_dim is None else mark_dim)
        if problems:
            raise DataValidationError("; ".join(problems))
        return self


def validate_sequence(seq: EventSequence, mark_dim: int) -> list[str]:
    """Return the list of invariant violations of ``seq`` (empty if valid)."""
    problems = []
    if not (math.isfinite(seq.horizon) and seq.horizon > 0):
        problems.append(f"horizon must be positive and finite, got {seq.horizon}")
    if seq.marks.shape[1] != mark_dim:
        problems.append(f"mark-length mismatch: expected {mark_dim}, got {seq.marks.shape[1]}")
    t = seq.times
    for i in range(t.size):
        if not math.isfinite(t[i]) or (seq.marks.size and not np.all(np.isfinite(seq.marks[i]))):
            problems.append(f"non-finite value at index {i}")
            continue
        if t[i] < 0:
            problems.append(f"negative time at index {i}")
        if i > 0 and not t[i] > t[i - 1]:
            problems.append(f"non-monotone times at index {i}")
        if t[i] >= seq.horizon:
            problems.append(f"time ≥ horizon at index {i} ({t[i]} >= {seq.horizon})")
    return problems


@dataclass(frozen=True)
class Dataset:
    sequences: tuple
    mark_dim: int
    mark_bounds: np.ndarray | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if self.mark_bounds is not None:
            b = np.array(self.mark_bounds, dtype=np.float64).reshape(self.mark_dim, 2)
            object.__setattr__(self, "mark_bounds", _frozen(b))
        horizons = {s.horizon for s in self.sequences}
        if len(horizons) > 1:
            raise DataValidationError(f"sequences must share one horizon, got {sorted(horizons)}")
        for k, s in enumerate(self.sequences):
            problems = validate_sequence(s, self.mark_dim)
            if self.mark_bounds is not None and len(s) and not problems:
                lo, hi = self.mark_bounds[:, 0], self.mark_bounds[:, 1]
                bad = np.where(np.any((s.marks < lo) | (s.marks > hi), axis=1))[0]
                problems += [f"mark outside bounds at index {i}" for i in bad]
            if problems:
                raise DataValidationError(f"sequence {k}: " + "; ".join(problems))

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def horizon(self) -> float | None:
        return self.sequences[0].horizon if self.sequences else None

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.sequences[i] for i in indices], self.mark_dim, self.mark_bounds)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_sequence(seq: EventSequence) -> str:
    rows = ",".join(
        "[" + ",".join(_fmt(v) for v in (t, *m)) + "]" for t, m in zip(seq.times, seq.marks)
    )
    return '{"T":' + _fmt(seq.horizon) + ',"events":[' + rows + "]}"


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as JSONL, one sequence per line, 17 significant digits."""
    with open(path, "w") as fh:
        for s in ds.sequences:
            fh.write(dumps_sequence(s) + "\n")


def load_dataset(path, mark_dim: int | None = None, mark_bounds=None) -> Dataset:
    """Read a JSONL dataset file.

    Each non-blank line holds ``{"T": <real>, "events": [[t, m1, ..., m_d], ...]}``.
    The mark dimension is inferred from the first event found unless given.

    Raises
    ------
    DataValidationError
        On malformed JSON (with the line number) or on an invariant
        violation (with the sequence id and offending event index).
    """
    sequences = []
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                horizon = float(obj["T"])
                rows = obj["events"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataValidationError(f"line {lineno}: parse error: {exc}") from exc
            widths = {len(r) for r in rows}
            if len(widths) > 1 or 0 in widths:
                raise DataValidationError(f"line {lineno}: ragged or empty event rows")
            if mark_dim is None and rows:
                mark_dim = len(rows[0]) - 1
            d = mark_dim if mark_dim is not None else 0
            if rows and len(rows[0]) != d + 1:
                raise DataValidationError(
                    f"sequence {len(sequences)}: mark-length mismatch: expected {d}, got {len(rows[0]) - 1}"
                )
            arr = np.array(rows, dtype=np.float64).reshape(len(rows), d + 1)
            seq = EventSequence(arr[:, 0], horizon, arr[:, 1:])
            problems = validate_sequence(seq, d)
            if problems:
                raise DataValidationError(f"sequence {len(sequences)} (line {lineno}): " + "; ".join(problems))
            sequences.append(seq)
    return Dataset(sequences, mark_dim or 0, mark_bounds)


def split_dataset(ds: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then split into (train, test) with round(train_frac * n) training sequences."""
    n = len(ds)
    if n < 2:
        raise DataValidationError(f"need at least 2 sequences to split, got {n}")
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(math.floor(train_frac * n + 0.5)), 1), n - 1)
    return ds.subset(sorted(order[:n_train])), ds.subset(sorted(order[n_train:]))


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, *key)``.

    Streams for different keys never overlap, so per-sequence or per-purpose
    randomness does not depend on evaluation order or thread count.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))
