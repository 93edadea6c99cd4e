"""Synthetic success-probability fields standing in for a trained policy in
simulation.

A field is a clamped sum of Gaussian bumps. Fine-tuning at a point closes a
fraction of the remaining gap to the cap in a Gaussian neighbourhood, so a
stack of updates composes to

    p(x) = p_max - (p_max - base(x)) * prod_k (1 - eta_k * g_k(x))

which is monotone in the number of updates and never exceeds ``p_max``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import Domain, EvalRecord, RngStream

BOUNDARY_ATOL = 1e-12


@dataclass(frozen=True)
class Bump:
    center: tuple[float, ...]
    amplitude: float
    width: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if not 0 < self.amplitude <= 1:
            raise ValueError("bump amplitude must be in (0, 1]")
        if not self.width > 0:
            raise ValueError("bump width must be positive")


@dataclass(frozen=True)
class Boost:
    center: tuple[float, ...]
    strength: float
    width: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if not 0 < self.strength <= 1:
            raise ValueError("boost strength must be in (0, 1]")
        if not self.width > 0:
            raise ValueError("boost width must be positive")


def _gauss(X: np.ndarray, centers: np.ndarray, widths: np.ndarray) -> np.ndarray:
    # per-dimension accumulation: exact zero at a center, no (n, k, d) temporary
    d2 = np.zeros((len(X), len(centers)))
    for j in range(X.shape[1]):
        diff = np.subtract.outer(X[:, j], centers[:, j])
        d2 += diff * diff
    d2 *= -0.5 / widths**2
    return np.exp(d2, out=d2)


@dataclass(frozen=True)
class OracleField:
    domain: Domain
    bumps: tuple[Bump, ...] = ()
    p_min: float = 0.02
    p_max: float = 0.99
    boosts: tuple[Boost, ...] = ()
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "bumps", tuple(self.bumps))
        object.__setattr__(self, "boosts", tuple(self.boosts))
        # p_min == p_max is allowed so constant fields (including p = 1) can be expressed
        if not (0.0 <= self.p_min <= self.p_max <= 1.0):
            raise ValueError("need 0 <= p_min <= p_max <= 1")
        for b in self.bumps + self.boosts:
            if len(b.center) != self.domain.dim:
                raise ValueError("bump/boost center dimension does not match the domain")

    @classmethod
    def constant(cls, domain: Domain, p: float) -> OracleField:
        return cls(domain, (), p, p)

    def _arrays(self):
        if "a" not in self._cache:
            d = self.domain.dim
            bc = np.array([b.center for b in self.bumps], dtype=float).reshape(-1, d)
            ba = np.array([b.amplitude for b in self.bumps], dtype=float)
            bw = np.array([b.width for b in self.bumps], dtype=float)
            gc = np.array([b.center for b in self.boosts], dtype=float).reshape(-1, d)
            gs = np.array([b.strength for b in self.boosts], dtype=float)
            gw = np.array([b.width for b in self.boosts], dtype=float)
            self._cache["a"] = (bc, ba, bw, gc, gs, gw)
        return self._cache["a"]

    def base_prob(self, X) -> np.ndarray:
        bc, ba, bw, *_ = self._arrays()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        raw = (_gauss(X, bc, bw) * ba).sum(1) if len(ba) else np.zeros(len(X))
        return np.clip(raw, self.p_min, self.p_max)

    def prob(self, X) -> np.ndarray:
        """Vectorized success probability at the rows of ``X`` (no bounds check)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        p = self.base_prob(X)
        *_, gc, gs, gw = self._arrays()
        if len(gs):
            # gap-closed fraction 1 - prod(1 - s g), written so that it is >= 0
            # exactly and tiny boosts round to no change at all
            with np.errstate(divide="ignore"):
                gain = -np.expm1(np.log1p(-_gauss(X, gc, gw) * gs[None, :]).sum(1))
            p = np.minimum(p + (self.p_max - p) * gain, self.p_max)
        return p

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "bumps": [
                {"center": list(b.center), "amplitude": b.amplitude, "width": b.width}
                for b in self.bumps
            ],
            "p_min": self.p_min,
            "p_max": self.p_max,
            "boosts": [
                {"center": list(b.center), "strength": b.strength, "width": b.width}
                for b in self.boosts
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> OracleField:
        return cls(
            Domain.from_dict(d["domain"]),
            tuple(Bump(tuple(b["center"]), b["amplitude"], b["width"]) for b in d.get("bumps", [])),
            float(d.get("p_min", 0.02)),
            float(d.get("p_max", 0.99)),
            tuple(Boost(tuple(b["center"]), b["strength"], b["width"]) for b in d.get("boosts", [])),
        )


def true_prob(f: OracleField, theta):
    """Ground-truth success probability; scalar for a single point."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != f.domain.dim:
        raise ValueError("dimension mismatch")
    if not np.all(f.domain.contains(theta, atol=BOUNDARY_ATOL)):
        raise ValueError("initialization outside the domain")
    p = f.prob(theta)
    return float(p[0]) if theta.ndim == 1 else p


@dataclass(frozen=True)
class StageSpec:
    oracle: OracleField
    label: str = "stage-0"
    eval_noise: tuple[float, ...] = ()

    def __post_init__(self):
        d = self.oracle.domain.dim
        noise = tuple(float(v) for v in self.eval_noise) or (0.0,) * d
        if len(noise) != d:
            raise ValueError("eval_noise needs one half-width per dimension")
        if any(h < 0 for h in noise) or np.any(np.asarray(noise) >= self.oracle.domain.width):
            raise ValueError("noise half-widths must be >= 0 and below the domain width")
        object.__setattr__(self, "eval_noise", noise)

    @property
    def domain(self) -> Domain:
        return self.oracle.domain

    def with_oracle(self, oracle: OracleField) -> StageSpec:
        return replace(self, oracle=oracle)

    def to_dict(self) -> dict:
        return {"label": self.label, "eval_noise": list(self.eval_noise), "oracle": self.oracle.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> StageSpec:
        return cls(OracleField.from_dict(d["oracle"]), d.get("label", "stage-0"), tuple(d.get("eval_noise", ())))


def rollout_outcomes(s: StageSpec, X, gen: np.random.Generator) -> np.ndarray:
    """One Bernoulli outcome per row of ``X``, each under fresh
    initialization noise (perturbed points are clipped to the domain)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    h = np.asarray(s.eval_noise)
    noise = gen.uniform(-1.0, 1.0, X.shape) * h
    p = s.oracle.prob(s.domain.clip(X + noise))
    return gen.random(len(X)) < p


def rollout(s: StageSpec, theta, trials: int, rng: RngStream) -> EvalRecord:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if not s.domain.contains(theta, atol=BOUNDARY_ATOL):
        raise ValueError("initialization outside the domain")
    wins = rollout_outcomes(s, np.broadcast_to(theta, (trials, len(theta))), rng.generator())
    return EvalRecord(tuple(theta), trials, int(wins.sum()))


def finetune_update(f: OracleField, points, eta: float, width: float) -> OracleField:
    """New field after fine-tuning at each of ``points`` (a ProposalBatch or an
    ``(B, d)`` array). The input field is left untouched."""
    if not 0 < eta <= 1:
        raise ValueError("eta must be in (0, 1]")
    if not width > 0:
        raise ValueError("improvement width must be positive")
    pts = getattr(points, "points", points)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    new = tuple(Boost(tuple(p), eta, width) for p in pts)
    return replace(f, boosts=f.boosts + new)


def success_map(f: OracleField, resolution: Sequence[int] | int, slice_values: Sequence[float | None]) -> np.ndarray:
    """True success probability on a cell-centred grid over the two free
    dimensions (entries of ``slice_values`` that are None).

    Returns an array of shape ``(n_first, n_second)``, row index over the
    first free dimension.
    """
    d = f.domain.dim
    vals = list(slice_values)
    if len(vals) != d:
        raise ValueError("slice needs one entry per dimension")
    free = [j for j, v in enumerate(vals) if v is None]
    if len(free) != 2:
        raise ValueError(f"exactly 2 free dimensions are required, got {len(free)}")
    res = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    axes = []
    for j, n in zip(free, res):
        lo, w = f.domain.lower[j], f.domain.width[j]
        axes.append(lo + (np.arange(n) + 0.5) * w / n)
    g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
    X = np.empty((g0.size, d))
    for j, v in enumerate(vals):
        if v is not None:
            X[:, j] = v
    X[:, free[0]] = g0.ravel()
    X[:, free[1]] = g1.ravel()
    return true_prob(f, X).reshape(g0.shape)


def success_map_csv(grid: np.ndarray, free_dims: Sequence[int], slice_values: Sequence[float | None]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["free_dims", *free_dims])
    w.writerow(["slice", *("" if v is None else repr(float(v)) for v in slice_values)])
    for row in grid:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def random_landscape(
    domain: Domain,
    rng: RngStream,
    n_bumps: tuple[int, int] = (1, 4),
    amplitude: tuple[float, float] = (0.4, 0.95),
    width: tuple[float, float] = (0.1, 0.3),
    p_min: float = 0.02,
    p_max: float = 0.99,
) -> OracleField:
    """Seeded field with 1-4 isotropic bumps; widths are fractions of the
    mean domain width."""
    gen = rng.generator()
    k = int(gen.integers(n_bumps[0], n_bumps[1] + 1))
    scale = float(domain.width.mean())
    bumps = []
    for _ in range(k):
        c = domain.lo + gen.random(domain.dim) * domain.width
        a = float(gen.uniform(*amplitude))
        s = float(gen.uniform(*width)) * scale
        bumps.append(Bump(tuple(c), a, s))
    return OracleField(domain, tuple(bumps), p_min, p_max)


def field_mean(f: OracleField, n: int = 20000, rng: RngStream | None = None) -> float:
    """Domain-average success probability by quasi-uniform Monte Carlo."""
    rng = rng or RngStream(0, 0)
    X = f.domain.lo + rng.generator().random((n, f.domain.dim)) * f.domain.width
    return float(f.prob(X).mean())


def landscape_json(f: OracleField) -> str:
    return json.dumps(f.to_dict(), sort_keys=True)
