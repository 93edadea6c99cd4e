"""Exact Gaussian-process regression of success rates.

Squared-exponential ARD kernel, constant prior mean set to the pooled success
rate, and per-point binomial observation noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf, dtrtrs

from .core import EvalDataset, NumericalError, RngStream, success_rate

MAX_TRAIN = 2000
NOISE_FLOOR = 1e-4
MAX_JITTER = 1e-2

# "auto" hyperparameter search
N_STARTS = 32
N_SWEEPS = 2
GOLDEN_BUDGET = 100  # golden-section steps in total, split across sweeps and coordinates
LENGTHSCALE_RANGE = (0.05, 2.0)  # multiples of the domain width
SIGNAL_VAR_RANGE = (0.01, 1.0)

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class KernelParams:
    signal_variance: float
    lengthscales: tuple[float, ...]
    jitter: float = 1e-6

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        vals = (self.signal_variance, self.jitter) + ls
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ValueError("kernel parameters must be positive and finite")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": list(self.lengthscales),
            "jitter": self.jitter,
        }


def gram(A, B, p: KernelParams) -> np.ndarray:
    """Kernel matrix between the rows of ``A`` and ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != p.dim or B.shape[1] != p.dim:
        raise ValueError("dimension mismatch between inputs and lengthscales")
    ls = np.asarray(p.lengthscales)
    a = A / ls
    b = B / ls
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    np.maximum(sq, 0.0, out=sq)
    return p.signal_variance * np.exp(-0.5 * sq)


def kernel(a, b, p: KernelParams) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape or a.size != p.dim:
        raise ValueError("dimension mismatch")
    r = (a - b) / np.asarray(p.lengthscales)
    return float(p.signal_variance * np.exp(-0.5 * float(r @ r)))


def _factor(K: np.ndarray, noise_var: np.ndarray, jitter: float) -> tuple[np.ndarray, float]:
    # escalate jitter x10 until the factorization succeeds
    j = jitter
    while True:
        try:
            L = np.linalg.cholesky(K + np.diag(noise_var + j))
            if np.all(np.diag(L) > 0):
                return L, j
        except np.linalg.LinAlgError:
            pass
        if j >= MAX_JITTER:
            raise NumericalError("Cholesky failed even at maximum jitter")
        j = min(j * 10.0, MAX_JITTER)


@dataclass(frozen=True, eq=False)
class GPModel:
    params: KernelParams
    mean_const: float
    train_X: np.ndarray
    train_y: np.ndarray
    noise_var: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter_used: float

    @property
    def n(self) -> int:
        return len(self.train_y)

    @property
    def incumbent(self) -> float:
        """Best observed rate, the reference point for PI and EI."""
        return float(np.max(self.train_y))

    def predict(self, Q) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, Q)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "mean_const": self.mean_const,
            "train_X": self.train_X.tolist(),
            "train_y": self.train_y.tolist(),
            "noise_var": self.noise_var.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> GPModel:
        p = d["params"]
        params = KernelParams(p["signal_variance"], tuple(p["lengthscales"]), p.get("jitter", 1e-6))
        return condition(d["train_X"], d["train_y"], d["noise_var"], params, d["mean_const"])

    @classmethod
    def from_json(cls, s: str) -> GPModel:
        return cls.from_dict(json.loads(s))


def condition(X, y, noise_var, params: KernelParams, mean_const: float) -> GPModel:
    """Condition the prior on observations with known per-point noise."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    noise_var = np.broadcast_to(np.asarray(noise_var, dtype=float), y.shape).copy()
    if len(y) == 0:
        raise ValueError("empty dataset")
    if len(y) > MAX_TRAIN:
        raise ValueError(f"at most {MAX_TRAIN} training records are supported, got {len(y)}")
    if X.shape != (len(y), params.dim):
        raise ValueError("training inputs do not match targets/lengthscales")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
        raise ValueError("non-finite training data")
    if np.any(noise_var < 0):
        raise ValueError("noise variances must be non-negative")
    L, j = _factor(gram(X, X, params), noise_var, params.jitter)
    resid = y - mean_const
    alpha = solve_triangular(L.T, solve_triangular(L, resid, lower=True), lower=False)
    for a in (X, y, noise_var, L, alpha):
        a.setflags(write=False)
    return GPModel(params, float(mean_const), X, y, noise_var, L, alpha, j)


def binomial_noise(ds: EvalDataset, floor: float = NOISE_FLOOR) -> np.ndarray:
    p = ds.rates
    return p * (1.0 - p) / ds.trials + floor


def log_marginal_likelihood(m: GPModel) -> float:
    resid = m.train_y - m.mean_const
    return float(
        -0.5 * resid @ m.alpha
        - np.log(np.diag(m.chol)).sum()
        - 0.5 * m.n * np.log(2.0 * np.pi)
    )


def _lml(D2, resid, noise, theta, jitter) -> float:
    # theta = [log sv, log l_1, ..., log l_d]; D2 holds per-dimension squared
    # differences, shape (d, n, n). Returns -inf if not factorizable.
    sv = np.exp(theta[0])
    inv_l2 = np.exp(-2.0 * theta[1:])
    K = sv * np.exp(-0.5 * np.tensordot(inv_l2, D2, axes=1))
    n = len(resid)
    j = jitter
    while True:
        L, info = dpotrf(K + np.diag(noise + j), lower=1, clean=1, overwrite_a=1)
        if info == 0:
            break
        if j >= MAX_JITTER:
            return -np.inf
        j = min(j * 10.0, MAX_JITTER)
    z, _ = dtrtrs(L, resid, lower=1)
    return float(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi))


def _golden_max(f, lo: float, hi: float, steps: int) -> tuple[float, float]:
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(steps):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def optimize_hyperparameters(
    X: np.ndarray,
    y: np.ndarray,
    noise: np.ndarray,
    mean_const: float,
    width: np.ndarray,
    rng: RngStream,
    jitter: float = 1e-6,
) -> KernelParams:
    """Maximize the log marginal likelihood by seeded multi-start search
    followed by coordinate-wise golden-section refinement in log space."""
    d = X.shape[1]
    lo = np.concatenate([[np.log(SIGNAL_VAR_RANGE[0])], np.log(LENGTHSCALE_RANGE[0] * width)])
    hi = np.concatenate([[np.log(SIGNAL_VAR_RANGE[1])], np.log(LENGTHSCALE_RANGE[1] * width)])
    resid = y - mean_const
    D2 = (X.T[:, :, None] - X.T[:, None, :]) ** 2

    starts = lo + rng.generator().random((N_STARTS, d + 1)) * (hi - lo)
    scores = [_lml(D2, resid, noise, t, jitter) for t in starts]
    best = int(np.argmax(scores))
    theta, best_val = starts[best].copy(), scores[best]

    steps = max(1, GOLDEN_BUDGET // (N_SWEEPS * (d + 1)))
    for _ in range(N_SWEEPS):
        for j in range(d + 1):
            def f(v, j=j):
                t = theta.copy()
                t[j] = v
                return _lml(D2, resid, noise, t, jitter)

            v, fv = _golden_max(f, lo[j], hi[j], steps)
            if fv > best_val:
                theta[j] = v
                best_val = fv
    return KernelParams(float(np.exp(theta[0])), tuple(np.exp(theta[1:])), jitter)


def fit(
    ds: EvalDataset,
    params: Union[KernelParams, str] = "auto",
    rng: RngStream | None = None,
    noise_floor: float = NOISE_FLOOR,
) -> GPModel:
    """Fit the surrogate to per-location empirical rates.

    With ``params="auto"`` the kernel hyperparameters are chosen by
    :func:`optimize_hyperparameters`, which needs ``rng``.
    """
    keep = ds.trials > 0
    if not np.any(keep):
        raise ValueError("empty dataset")
    X = ds.X[keep]
    y = ds.rates[keep]
    noise = binomial_noise(ds, noise_floor)[keep]
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite targets")
    mean_const = success_rate(ds)
    if isinstance(params, str):
        if params != "auto":
            raise ValueError(f"unknown params spec {params!r}")
        if rng is None:
            raise ValueError("auto hyperparameters need an rng")
        params = optimize_hyperparameters(X, y, noise, mean_const, ds.domain.width, rng)
    return condition(X, y, noise, params, mean_const)


def predict(m: GPModel, Q) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation at the rows of ``Q``.

    A single ``(d,)`` query returns scalars.
    """
    Q = np.asarray(Q, dtype=float)
    single = Q.ndim == 1
    Q = np.atleast_2d(Q)
    Ks = gram(Q, m.train_X, m.params)
    mean = m.mean_const + Ks @ m.alpha
    V = solve_triangular(m.chol, Ks.T, lower=True)
    var = m.params.signal_variance - (V * V).sum(0)
    std = np.sqrt(np.maximum(var, 0.0))
    if single:
        return float(mean[0]), float(std[0])
    return mean, std
