"""Gaussian mixture over successful initializations and the deployment-time
density-argmax selector."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import Domain, NumericalError, RngStream

REG = 1e-6
MAX_ITER = 200
TOL = 1e-6
N_RESTARTS = 4
K_MAX = 8
_LOG_2PI = np.log(2.0 * np.pi)


def _cholesky(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(S + REG * np.eye(len(S)))
    except np.linalg.LinAlgError as e:
        raise NumericalError("covariance is not positive definite") from e


def _logpdf(X: np.ndarray, means: np.ndarray, chols: np.ndarray) -> np.ndarray:
    """``log N(x | mu_k, L_k L_k^T)`` for all components and rows, ``(K, n)``."""
    d = X.shape[1]
    Linv = np.linalg.inv(chols)
    diff = X[None, :, :] - means[:, None, :]
    z = np.matmul(diff, np.swapaxes(Linv, 1, 2))  # (K, n, d)
    logdet = np.log(np.diagonal(chols, axis1=1, axis2=2)).sum(1)
    return -0.5 * (z * z).sum(-1) - logdet[:, None] - 0.5 * d * _LOG_2PI


def _lse(a: np.ndarray) -> np.ndarray:
    # log-sum-exp over components (axis 0)
    mx = a.max(axis=0)
    return mx + np.log(np.exp(a - mx).sum(axis=0))


@dataclass(frozen=True, eq=False)
class GMMModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)
    chols: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float).reshape(len(w), mu.shape[1], mu.shape[1])
        if len(mu) != len(w):
            raise ValueError("weights and means disagree on K")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        chols = np.stack([_cholesky(S) for S in cov])
        for name, a in (("weights", w), ("means", mu), ("covariances", cov), ("chols", chols)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def n_params(self) -> int:
        K, d = self.K, self.dim
        return K - 1 + K * d + K * d * (d + 1) // 2

    def component_logpdf(self, X) -> np.ndarray:
        """``log N(x | mu_k, Sigma_k)`` as an ``(n, K)`` array."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError("dimension mismatch")
        return _logpdf(X, self.means, self.chols).T

    def log_density(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError("dimension mismatch")
        return _lse(_logpdf(X, self.means, self.chols) + np.log(self.weights)[:, None])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": [S.reshape(-1).tolist() for S in self.covariances],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> GMMModel:
        means = np.asarray(d["means"], dtype=float)
        dim = means.shape[1]
        covs = np.asarray(d["covariances"], dtype=float).reshape(-1, dim, dim)
        return cls(np.asarray(d["weights"], dtype=float), means, covs)

    @classmethod
    def from_json(cls, s: str) -> GMMModel:
        return cls.from_dict(json.loads(s))


def density(m: GMMModel, x) -> np.ndarray | float:
    """Mixture density; scalar for a single ``(d,)`` point."""
    x = np.asarray(x, dtype=float)
    out = np.exp(m.log_density(x))
    return float(out[0]) if x.ndim == 1 else out


def _kmeanspp(X: np.ndarray, K: int, gen: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[gen.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = gen.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), gen.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers)


def _m_step(X: np.ndarray, resp: np.ndarray):
    """Weights, means and regularized covariances from responsibilities."""
    F, c = _features(X)
    w, mc, covs = _m_from_stats(resp.T @ F, X.shape[1], c)
    return w, mc + c, covs


def _features(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # [vec((x-c)(x-c)^T), x-c, 1] on centred data; centring limits
    # cancellation in S - mu mu^T and in the expanded quadratic form
    n, d = X.shape
    c = X.mean(0)
    Xc = X - c
    outer = (Xc[:, :, None] * Xc[:, None, :]).reshape(n, d * d)
    return np.hstack([outer, Xc, np.ones((n, 1))]), c


def _m_from_stats(stats: np.ndarray, d: int, c: np.ndarray):
    K = len(stats)
    nk = stats[:, -1] + 10 * np.finfo(float).eps
    mc = stats[:, d * d : d * d + d] / nk[:, None]
    S = stats[:, : d * d].reshape(K, d, d) / nk[:, None, None]
    covs = S - mc[:, :, None] * mc[:, None, :]
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2)) + REG * np.eye(d)
    return nk / nk.sum(), mc, covs


def _chols(covs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        return np.stack([_cholesky(S) for S in covs])


def run_em(
    X: np.ndarray,
    init_means: np.ndarray,
    max_iter: int = MAX_ITER,
    tol: float = TOL,
) -> tuple[GMMModel, list[float]]:
    """EM from hard nearest-center assignments.

    Returns the model and the log-likelihood after every M-step.
    """
    n, d = X.shape
    K = len(init_means)
    F, c = _features(X)
    FT = np.ascontiguousarray(F.T)
    d2 = ((X[:, None, :] - init_means[None, :, :]) ** 2).sum(-1)
    resp = np.zeros((K, n))
    resp[np.argmin(d2, axis=1), np.arange(n)] = 1.0
    trace: list[float] = []
    for it in range(max_iter + 1):
        w, mc, cov = _m_from_stats(resp @ F, d, c)
        L = _chols(cov)
        P = np.linalg.inv(cov)
        Pm = np.matmul(P, mc[:, :, None])[:, :, 0]
        coef = np.hstack([P.reshape(K, d * d), -2.0 * Pm, (mc * Pm).sum(1, keepdims=True)])
        logp = coef @ FT
        np.maximum(logp, 0.0, out=logp)
        logp *= -0.5
        logp += (np.log(w) - np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1) - 0.5 * d * _LOG_2PI)[:, None]
        # log-sum-exp over components; its normalized terms are the responsibilities
        mx = logp.max(axis=0)
        logp -= mx
        np.exp(logp, out=logp)
        tot = logp.sum(axis=0)
        trace.append(float((mx + np.log(tot)).sum()))
        if it == max_iter or (len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol):
            break
        resp = logp / tot
    return GMMModel(w, mc + c, cov), trace


def _spherical(X: np.ndarray) -> GMMModel:
    d = X.shape[1]
    mu = X.mean(0)
    var = float(((X - mu) ** 2).mean()) if len(X) > 1 else 0.0
    return GMMModel(np.ones(1), mu[None, :], ((var + REG) * np.eye(d))[None, :, :])


def fit_em(points, K: int, rng: RngStream) -> tuple[GMMModel, float]:
    """Best of ``N_RESTARTS`` k-means++-seeded EM runs.

    Fewer than ``d + 1`` points cannot support a full covariance; a single
    spherical component is returned instead.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = X.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < K:
        raise ValueError(f"need at least K={K} points, got {n}")
    if n < d + 1:
        m = _spherical(X)
        return m, float(m.log_density(X).sum())

    best: tuple[float, GMMModel] | None = None
    for r in range(N_RESTARTS):
        gen = rng.child("restart", r).generator()
        model, trace = run_em(X, _kmeanspp(X, K, gen))
        ll = trace[-1]
        # strict > keeps the lowest restart index on ties
        if best is None or ll > best[0]:
            best = (ll, model)
    return best[1], best[0]


def bic(loglik: float, m: GMMModel, n: int) -> float:
    return -2.0 * loglik + m.n_params() * np.log(n)


def select_k(points, k_max: int = K_MAX, rng: RngStream | None = None) -> GMMModel:
    """Minimum-BIC mixture over ``K = 1 .. min(k_max, n // (d + 1))``."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least 2 points")
    if rng is None:
        raise ValueError("select_k needs an rng")
    k_hi = max(1, min(k_max, n // (d + 1)))
    best: tuple[float, GMMModel] | None = None
    for K in range(1, k_hi + 1):
        m, ll = fit_em(X, K, rng.child("K", K))
        b = bic(ll, m, n)
        if best is None or b < best[0]:
            best = (b, m)
    return best[1]


def sample(m: GMMModel, n: int, rng: RngStream) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return _draw(m, n, rng.generator())


def _draw(m: GMMModel, n: int, gen: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(m.weights)
    comp = np.minimum(np.searchsorted(cdf, gen.random(n) * cdf[-1], side="right"), m.K - 1)
    z = gen.standard_normal((n, m.dim))
    return m.means[comp] + np.einsum("nij,nj->ni", m.chols[comp], z)


@dataclass(frozen=True, eq=False)
class Selection:
    point: np.ndarray
    density: float
    candidates: np.ndarray  # in-domain draws, in draw order
    fallback: bool


def _in_domain_draws(m: GMMModel, M: int, domain: Domain, gen: np.random.Generator) -> np.ndarray:
    # the first M in-domain draws out of at most 10 * M; chunk sizes adapt
    # to the observed acceptance rate
    kept: list[np.ndarray] = []
    n_kept = drawn = 0
    want = M + M // 8 + 16
    while n_kept < M and drawn < 10 * M:
        want = min(want, 10 * M - drawn)
        xs = _draw(m, want, gen)
        drawn += want
        xs = xs[domain.contains(xs)]
        kept.append(xs[: M - n_kept])
        n_kept += len(kept[-1])
        acc = max(n_kept / drawn, 0.05)
        want = int(np.ceil(1.2 * (M - n_kept) / acc)) + 16
    return np.vstack(kept) if kept else np.empty((0, m.dim))


def select_many(m: GMMModel, M: int, domain: Domain, rngs: list[RngStream]) -> list[Selection]:
    """Independent selections, one per stream, scored in a single batch."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if domain.dim != m.dim:
        raise ValueError("model and domain dimensions differ")
    draws = [_in_domain_draws(m, M, domain, r.generator()) for r in rngs]
    sizes = [len(c) for c in draws]
    logd = m.log_density(np.vstack(draws)) if sum(sizes) else np.empty(0)
    out = []
    start = 0
    for cands, n in zip(draws, sizes):
        if n == 0:
            x = domain.clip(m.means[int(np.argmax(m.weights))])
            out.append(Selection(x, float(density(m, x)), cands, True))
            continue
        i = int(np.argmax(logd[start : start + n]))  # first maximum on ties
        out.append(Selection(cands[i].copy(), float(np.exp(logd[start + i])), cands, False))
        start += n
    return out


def select_candidates(m: GMMModel, M: int, domain: Domain, rng: RngStream) -> Selection:
    """Draw ``M`` in-domain candidates and keep the highest-density one.

    Out-of-domain draws are discarded and replaced, up to ``10 * M`` draws in
    total. If none land inside, the highest-weight mean clipped to the box is
    returned with ``fallback=True``.
    """
    return select_many(m, M, domain, [rng])[0]


def deploy_select(m: GMMModel, M: int, domain: Domain, rng: RngStream) -> np.ndarray:
    return select_candidates(m, M, domain, rng).point
