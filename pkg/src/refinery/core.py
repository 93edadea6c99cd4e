"""Shared domain types: the initialization box, seeded random streams and
rollout datasets.

Points in the initialization space are plain float arrays of shape ``(d,)``;
collections of points are ``(n, d)`` arrays.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

MAX_DIM = 16

InitState = np.ndarray


class NumericalError(RuntimeError):
    """A factorization or fit failed beyond the documented fallbacks."""


@dataclass(frozen=True)
class Domain:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi):
            raise ValueError("lower and upper must have the same length")
        if not 1 <= len(lo) <= MAX_DIM:
            raise ValueError(f"dimension must be in [1, {MAX_DIM}], got {len(lo)}")
        if not all(np.isfinite(lo + hi)):
            raise ValueError("domain bounds must be finite")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("every lower bound must be strictly below its upper bound")

    @classmethod
    def unit(cls, dim: int) -> Domain:
        return cls((0.0,) * dim, (1.0,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x, atol: float = 0.0) -> np.ndarray:
        """Inclusive box membership; vectorized over leading axes."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - atol) & (x <= self.hi + atol), axis=-1)

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, d: dict) -> Domain:
        return cls(tuple(d["lower"]), tuple(d["upper"]))


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode())


@dataclass(frozen=True)
class RngStream:
    """A named, splittable random stream.

    Draws depend only on ``(seed, stream_id)``. Use :meth:`child` to derive
    independent sub-streams for parallel or nested work instead of sharing a
    generator, so results never depend on call order between workers.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer")
            object.__setattr__(self, name, int(v))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> RngStream:
        """Sub-stream addressed by a path of ints or strings."""
        ints = [_key_to_int(k) for k in keys]
        mixed = np.random.SeedSequence(self.stream_id, spawn_key=tuple(ints))
        return RngStream(self.seed, int(mixed.generate_state(1, np.uint64)[0]))


def uniform_sample(domain: Domain, n: int, rng: RngStream) -> np.ndarray:
    """``n`` points i.i.d. uniform on the domain box, shape ``(n, d)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = rng.generator().random((n, domain.dim))
    return domain.lo + u * domain.width


@dataclass(frozen=True)
class EvalRecord:
    state: tuple[float, ...]
    trials: int
    successes: int

    def __post_init__(self):
        object.__setattr__(self, "state", tuple(float(v) for v in self.state))
        if self.trials < 0 or self.successes < 0 or self.successes > self.trials:
            raise ValueError("need 0 <= successes <= trials")

    @property
    def rate(self) -> float:
        if self.trials == 0:
            raise ValueError("no trials")
        return self.successes / self.trials


class EvalDataset:
    """Rollout outcomes aggregated per probe location.

    Stored column-wise: ``X`` is ``(n, d)``, ``trials`` and ``successes`` are
    integer vectors of length ``n``.
    """

    def __init__(self, domain: Domain, X, trials, successes):
        X = np.asarray(X, dtype=float).reshape(-1, domain.dim)
        trials = np.asarray(trials, dtype=np.int64).reshape(-1)
        successes = np.asarray(successes, dtype=np.int64).reshape(-1)
        if not (len(X) == len(trials) == len(successes)):
            raise ValueError("column lengths differ")
        if np.any(trials < 0) or np.any(successes < 0) or np.any(successes > trials):
            raise ValueError("need 0 <= successes <= trials for every record")
        for a in (X, trials, successes):
            a.setflags(write=False)
        self.domain = domain
        self.X = X
        self.trials = trials
        self.successes = successes

    @classmethod
    def from_records(cls, domain: Domain, records: Sequence[EvalRecord]) -> EvalDataset:
        if not records:
            return cls(domain, np.empty((0, domain.dim)), [], [])
        for r in records:
            if len(r.state) != domain.dim:
                raise ValueError("record dimension does not match domain")
        return cls(
            domain,
            [r.state for r in records],
            [r.trials for r in records],
            [r.successes for r in records],
        )

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self) -> Iterator[EvalRecord]:
        return iter(self.records)

    @property
    def records(self) -> list[EvalRecord]:
        return [
            EvalRecord(tuple(x), int(t), int(s))
            for x, t, s in zip(self.X, self.trials, self.successes)
        ]

    @property
    def rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.successes / self.trials

    def concat(self, other: EvalDataset) -> EvalDataset:
        if other.domain.dim != self.domain.dim:
            raise ValueError("dimension mismatch")
        return EvalDataset(
            self.domain,
            np.vstack([self.X, other.X]),
            np.concatenate([self.trials, other.trials]),
            np.concatenate([self.successes, other.successes]),
        )

    def successful_points(self) -> np.ndarray:
        """Locations of successful single rollouts (records with trials == 1)."""
        single = self.trials == 1
        return self.X[single & (self.successes == 1)]

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "records": [
                {"coords": [float(v) for v in x], "trials": int(t), "successes": int(s)}
                for x, t, s in zip(self.X, self.trials, self.successes)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalDataset:
        domain = Domain.from_dict(d["domain"])
        recs = [EvalRecord(tuple(r["coords"]), r["trials"], r["successes"]) for r in d["records"]]
        return cls.from_records(domain, recs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> EvalDataset:
        return cls.from_dict(json.loads(s))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvalDataset):
            return NotImplemented
        return (
            self.domain == other.domain
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.trials, other.trials)
            and np.array_equal(self.successes, other.successes)
        )

    def __repr__(self) -> str:
        return f"EvalDataset(n={len(self)}, dim={self.domain.dim})"


def success_rate(ds: EvalDataset) -> float:
    """Pooled success rate, total successes over total trials."""
    total = int(ds.trials.sum())
    if total == 0:
        raise ValueError("no trials")
    return int(ds.successes.sum()) / total
