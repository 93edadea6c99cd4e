"""UCB / PI / EI acquisition functions and a seeded candidate-scan maximizer
with constant-liar batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erfc

from .core import Domain, RngStream, uniform_sample
from .gp import GPModel, gram, predict

KINDS = ("ucb", "pi", "ei")
Z_CLAMP = 8.0
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class AcquisitionSpec:
    kind: str = "ucb"
    beta: float = 2.0

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in KINDS:
            raise ValueError(f"acquisition.kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not (np.isfinite(self.beta) and self.beta >= 0):
            raise ValueError("acquisition.beta must be finite and non-negative")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta}

    @classmethod
    def from_dict(cls, d: dict) -> AcquisitionSpec:
        return cls(d.get("kind", "ucb"), float(d.get("beta", 2.0)))


@dataclass(frozen=True, eq=False)
class ProposalBatch:
    points: np.ndarray  # (B, d)
    scores: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.scores)


def norm_cdf(z):
    z = np.asarray(z, dtype=float)
    out = 0.5 * erfc(-z / _SQRT2)
    out = np.where(z > Z_CLAMP, 1.0, np.where(z < -Z_CLAMP, 0.0, out))
    return out if out.ndim else float(out)


def norm_pdf(z):
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        out = np.where(np.abs(z) > Z_CLAMP, 0.0, _INV_SQRT_2PI * np.exp(-0.5 * z * z))
    return out if out.ndim else float(out)


def ucb(mean, std, beta: float = 2.0):
    return mean + beta * std


def _z(mean, std, incumbent):
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    pos = std > 0
    with np.errstate(over="ignore"):
        z = np.where(pos, (mean - incumbent) / np.where(pos, std, 1.0), 0.0)
    return mean, std, pos, z


def pi(mean, std, incumbent):
    mean, std, pos, z = _z(mean, std, incumbent)
    out = np.where(pos, norm_cdf(z), (mean > incumbent).astype(float))
    return out if out.ndim else float(out)


def ei(mean, std, incumbent):
    mean, std, pos, z = _z(mean, std, incumbent)
    imp = mean - incumbent
    closed = imp * norm_cdf(z) + std * norm_pdf(z)
    out = np.where(pos, np.maximum(closed, 0.0), np.maximum(imp, 0.0))
    return out if out.ndim else float(out)


def score(spec: AcquisitionSpec, mean, std, incumbent: float):
    if spec.kind == "ucb":
        return ucb(mean, std, spec.beta)
    if spec.kind == "pi":
        return pi(mean, std, incumbent)
    return ei(mean, std, incumbent)


def propose(
    m: GPModel,
    spec: AcquisitionSpec,
    domain: Domain,
    batch: int = 8,
    candidates: int = 4096,
    rng: RngStream | None = None,
) -> ProposalBatch:
    """Pick ``batch`` points from uniform candidates plus the training inputs.

    Greedy constant-liar: after each pick the posterior is updated as if the
    incumbent rate had been observed there (rank-one update), so later picks
    move away from earlier ones.
    """
    if m is None:
        raise ValueError("model is not fitted")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if batch > candidates:
        raise ValueError("batch cannot exceed the candidate count")
    if rng is None:
        raise ValueError("propose needs an rng")
    if domain.dim != m.params.dim:
        raise ValueError("model and domain dimensions differ")

    C = np.vstack([uniform_sample(domain, candidates, rng), m.train_X])
    incumbent = m.incumbent
    liar_noise = float(np.min(m.noise_var)) + m.jitter_used

    # posterior state over candidates, kept in factored form for updates
    Ks = gram(C, m.train_X, m.params)
    mean = m.mean_const + Ks @ m.alpha
    V = solve_triangular(m.chol, Ks.T, lower=True)
    var = np.maximum(m.params.signal_variance - (V * V).sum(0), 0.0)

    taken = np.zeros(len(C), dtype=bool)
    picks, scores = [], []
    for _ in range(batch):
        s = np.asarray(score(spec, mean, np.sqrt(var), incumbent), dtype=float)
        s = np.where(taken, -np.inf, s)
        i = int(np.argmax(s))
        picks.append(i)
        scores.append(float(s[i]))
        taken[i] = True
        # condition on a pseudo-observation y = incumbent at C[i]
        cov_i = gram(C, C[i : i + 1], m.params)[:, 0] - V.T @ V[:, i]
        denom = np.sqrt(var[i] + liar_noise)
        v_new = cov_i / denom
        mean = mean + v_new * (incumbent - mean[i]) / denom
        var = np.maximum(var - v_new * v_new, 0.0)
        V = np.vstack([V, v_new[None, :]])
    return ProposalBatch(C[picks].copy(), np.asarray(scores))


def predict_scores(m: GPModel, spec: AcquisitionSpec, Q) -> np.ndarray:
    """Acquisition values at ``Q`` under the plain posterior (no batching)."""
    mean, std = predict(m, np.atleast_2d(Q))
    return np.asarray(score(spec, mean, std, m.incumbent), dtype=float)
