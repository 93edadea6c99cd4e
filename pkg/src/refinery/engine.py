"""Fine-tuning loop, deployment strategies, policy chains and the
four-strategy benchmark."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from . import gmm as _gmm
from .acquisition import AcquisitionSpec, propose
from .core import Domain, EvalDataset, RngStream, uniform_sample
from .gp import fit as fit_gp
from .oracle import (
    OracleField,
    StageSpec,
    finetune_update,
    random_landscape,
    rollout,
    rollout_outcomes,
)

log = logging.getLogger(__name__)

PROPOSERS = ("acquisition", "uniform")


class Strategy(str, enum.Enum):
    BASELINE = "baseline"
    DEPLOYMENT = "deployment"
    FINETUNE = "finetune"
    REFINERY = "refinery"

    @property
    def uses_gmm(self) -> bool:
        return self in (Strategy.DEPLOYMENT, Strategy.REFINERY)

    @property
    def uses_finetune(self) -> bool:
        return self in (Strategy.FINETUNE, Strategy.REFINERY)


ALL_STRATEGIES = tuple(Strategy)


@dataclass(frozen=True)
class FinetuneConfig:
    probe_count: int = 64
    rollouts_per_probe: int = 20
    batch: int = 8
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    max_epochs: int = 60
    conv_window: int = 5
    conv_tol: float = 0.05
    learning_gain: float = 0.5
    improvement_width: float = 0.1
    candidates: int = 4096
    proposer: str = "acquisition"

    def __post_init__(self):
        if isinstance(self.acquisition, dict):
            object.__setattr__(self, "acquisition", AcquisitionSpec.from_dict(self.acquisition))
        checks = [
            (self.probe_count >= 1, "probe_count must be >= 1"),
            (self.rollouts_per_probe >= 1, "rollouts_per_probe must be >= 1"),
            (self.probe_count * self.rollouts_per_probe >= 100, "probe_count * rollouts_per_probe must be >= 100"),
            (1 <= self.batch <= self.candidates, "batch must be in [1, candidates]"),
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
            (self.conv_window >= 2, "conv_window must be >= 2"),
            (self.conv_tol > 0, "conv_tol must be > 0"),
            (0 < self.learning_gain <= 1, "learning_gain must be in (0, 1]"),
            (self.improvement_width > 0, "improvement_width must be > 0"),
            (self.proposer in PROPOSERS, f"proposer must be one of {PROPOSERS}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["acquisition"] = self.acquisition.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FinetuneConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown finetune config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RunRecord:
    strategy: str
    stage: str
    epochs: int
    epoch_rates: tuple[float, ...]
    final_rate: float
    seed: int
    config: dict

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["epoch_rates"] = list(self.epoch_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(
            d["strategy"], d["stage"], int(d["epochs"]), tuple(d["epoch_rates"]),
            float(d["final_rate"]), int(d["seed"]), d["config"],
        )


def evaluate_policy(s: StageSpec, cfg: FinetuneConfig, rng: RngStream) -> tuple[EvalDataset, float]:
    """``probe_count`` uniform probes with ``rollouts_per_probe`` rollouts each."""
    P, R = cfg.probe_count, cfg.rollouts_per_probe
    X = uniform_sample(s.domain, P, rng.child("probes"))
    wins = rollout_outcomes(s, np.repeat(X, R, axis=0), rng.child("rollouts").generator())
    succ = wins.reshape(P, R).sum(1)
    ds = EvalDataset(s.domain, X, np.full(P, R), succ)
    return ds, float(succ.sum()) / (P * R)


def converged(history: Sequence[float], window: int = 5, tol: float = 0.05) -> bool:
    """True once the last ``window`` rates span less than ``tol`` (absolute)."""
    if len(history) < window:
        return False
    tail = history[-window:]
    return max(tail) - min(tail) < tol


def finetune_stage(s: StageSpec, cfg: FinetuneConfig, rng: RngStream) -> tuple[StageSpec, RunRecord]:
    """Evaluate, fit the surrogate, propose a batch, fine-tune; repeat until
    the evaluated rate stabilizes or ``max_epochs`` is reached."""
    history: list[float] = []
    cur = s
    for epoch in range(cfg.max_epochs):
        r = rng.child("epoch", epoch)
        ds, rate = evaluate_policy(cur, cfg, r.child("eval"))
        history.append(rate)
        if converged(history, cfg.conv_window, cfg.conv_tol):
            break
        if cfg.proposer == "uniform":
            pts = uniform_sample(s.domain, cfg.batch, r.child("propose"))
        else:
            model = fit_gp(ds, "auto", r.child("gp"))
            pts = propose(model, cfg.acquisition, s.domain, cfg.batch, cfg.candidates, r.child("propose")).points
        cur = cur.with_oracle(finetune_update(cur.oracle, pts, cfg.learning_gain, cfg.improvement_width))
    log.debug("finetune %s: %d epochs, %.3f -> %.3f", s.label, len(history), history[0], history[-1])
    rec = RunRecord(
        Strategy.FINETUNE.value, s.label, len(history), tuple(history),
        history[-1], rng.seed, cfg.to_dict(),
    )
    return cur, rec


@dataclass(frozen=True, eq=False)
class GMMFit:
    model: _gmm.GMMModel
    n_rollouts: int
    n_success: int
    fallback: bool


def fit_success_gmm(
    s: StageSpec, rng: RngStream, n: int = 1000, k_max: int = _gmm.K_MAX
) -> GMMFit:
    """Offline phase of deployment-time optimization: ``n`` uniform single
    rollouts, then a BIC-selected mixture over the successful ones.

    With no successes at all, a single Gaussian matching the moments of the
    uniform box is returned and ``fallback`` is set.
    """
    X = uniform_sample(s.domain, n, rng.child("probes"))
    wins = rollout_outcomes(s, X, rng.child("rollouts").generator())
    succ = X[wins]
    if len(succ) == 0:
        w = s.domain.width
        m = _gmm.GMMModel(np.ones(1), s.domain.center[None, :], np.diag(w * w / 12.0)[None, :, :])
        return GMMFit(m, n, 0, True)
    if len(succ) == 1:
        m, _ = _gmm.fit_em(succ, 1, rng.child("gmm"))
    else:
        m = _gmm.select_k(succ, k_max, rng.child("gmm"))
    return GMMFit(m, n, len(succ), False)


@dataclass(frozen=True, eq=False)
class Artifacts:
    """Per-stage products consumed by the deployment strategies."""

    finetuned: StageSpec | None = None
    gmm: _gmm.GMMModel | None = None  # fit on the baseline stage
    gmm_finetuned: _gmm.GMMModel | None = None  # fit on the fine-tuned stage


def _resolve(s: StageSpec, strategy: Strategy, art: Artifacts | None) -> tuple[StageSpec, _gmm.GMMModel | None]:
    strategy = Strategy(strategy)
    art = art or Artifacts()
    stage = s
    if strategy.uses_finetune:
        if art.finetuned is None:
            raise ValueError(f"strategy {strategy.value} needs a fine-tuned stage")
        stage = art.finetuned
    model = None
    if strategy == Strategy.DEPLOYMENT:
        model = art.gmm
    elif strategy == Strategy.REFINERY:
        model = art.gmm_finetuned
    if strategy.uses_gmm and model is None:
        raise ValueError(f"strategy {strategy.value} needs a fitted GMM")
    return stage, model


def choose_points(
    s: StageSpec,
    strategy: Strategy,
    art: Artifacts | None,
    n: int,
    rng: RngStream,
    M: int = 1000,
    keep_selections: bool = False,
):
    """Initializations for ``n`` deployments under ``strategy``.

    Returns ``(points, stage_to_execute, selections)``; ``selections`` is a
    list of :class:`gmm.Selection` when requested for GMM strategies.
    """
    stage, model = _resolve(s, strategy, art)
    if model is None:
        return uniform_sample(s.domain, n, rng.child("uniform")), stage, None
    sels = _gmm.select_many(model, M, s.domain, [rng.child("select", j) for j in range(n)])
    pts = np.array([x.point for x in sels])
    return pts, stage, (sels if keep_selections else None)


def deploy(
    s: StageSpec, strategy: Strategy, art: Artifacts | None, rng: RngStream, M: int = 1000
) -> tuple[np.ndarray, bool]:
    """One deployment: pick an initialization, execute a single rollout."""
    pts, stage, _ = choose_points(s, strategy, art, 1, rng.child("choose"), M)
    rec = rollout(stage, pts[0], 1, rng.child("run"))
    return pts[0], rec.successes == 1


def evaluate_strategy(
    s: StageSpec,
    strategy: Strategy,
    art: Artifacts | None,
    n: int,
    rng: RngStream,
    M: int = 1000,
    keep_selections: bool = False,
):
    """Success rate over ``n`` independent deployments.

    Returns ``(rate, selections)``.
    """
    pts, stage, sels = choose_points(s, strategy, art, n, rng.child("choose"), M, keep_selections)
    wins = rollout_outcomes(stage, pts, rng.child("run").generator())
    return float(wins.mean()), sels


@dataclass(frozen=True, eq=False)
class ChainSpec:
    stages: tuple[StageSpec, ...]
    strategies: tuple[Strategy, ...] = ()
    artifacts: tuple[Artifacts | None, ...] = ()

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("a chain needs at least one stage")
        strategies = tuple(Strategy(x) for x in self.strategies) or (Strategy.BASELINE,) * len(stages)
        arts = tuple(self.artifacts) or (None,) * len(stages)
        if not (len(strategies) == len(arts) == len(stages)):
            raise ValueError("one strategy and one artifact slot per stage")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "strategies", strategies)
        object.__setattr__(self, "artifacts", arts)

    def with_strategy(self, strategy: Strategy, artifacts: Sequence[Artifacts | None] | None = None) -> ChainSpec:
        return ChainSpec(self.stages, (strategy,) * len(self.stages), tuple(artifacts or self.artifacts))


@dataclass(frozen=True)
class ChainResult:
    sequence_rate: float
    per_stage_rates: tuple[float, ...]
    reached: tuple[int, ...]
    interventions: int


def run_chain(c: ChainSpec, trials: int, rng: RngStream, retries: int = 0, M: int = 1000) -> ChainResult:
    """Execute every stage in order per trial; a trial succeeds only if all
    stages do. ``retries`` is the per-trial budget of stage re-attempts.

    ``per_stage_rates[i]`` is the fraction of trials reaching stage ``i`` that
    eventually passed it.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if retries < 0:
        raise ValueError("retries must be >= 0")
    alive = np.ones(trials, dtype=bool)
    budget = np.full(trials, retries)
    per_stage, reached = [], []
    used = 0
    for i, (s, strat, art) in enumerate(zip(c.stages, c.strategies, c.artifacts)):
        idx = np.flatnonzero(alive)
        reached.append(len(idx))
        passed = np.zeros(trials, dtype=bool)
        pending = idx
        attempt = 0
        while len(pending):
            r = rng.child("stage", i, "attempt", attempt)
            pts, stage, _ = choose_points(s, strat, art, len(pending), r.child("choose"), M)
            wins = rollout_outcomes(stage, pts, r.child("run").generator())
            passed[pending[wins]] = True
            failed = pending[~wins]
            retry = failed[budget[failed] > 0]
            budget[retry] -= 1
            used += len(retry)
            pending = retry
            attempt += 1
        per_stage.append(float(passed[idx].mean()) if len(idx) else 0.0)
        alive &= passed
    return ChainResult(float(alive.mean()), tuple(per_stage), tuple(reached), used)


# -- benchmark ---------------------------------------------------------------


@dataclass(frozen=True)
class SuiteConfig:
    n_landscapes: int = 10
    stages: int = 1
    dim: int = 2
    seed: int = 0
    eval_noise: float = 0.01

    def __post_init__(self):
        if self.n_landscapes < 1 or self.stages < 1:
            raise ValueError("suite needs at least one landscape and one stage")


def default_suite(cfg: SuiteConfig = SuiteConfig()) -> list[ChainSpec]:
    """Seeded random landscapes on the unit box, one chain per landscape."""
    dom = Domain.unit(cfg.dim)
    root = RngStream(cfg.seed, 0).child("suite")
    chains = []
    for i in range(cfg.n_landscapes):
        stages = tuple(
            StageSpec(
                random_landscape(dom, root.child("landscape", i, "stage", j)),
                f"L{i:02d}-s{j}",
                (cfg.eval_noise,) * cfg.dim,
            )
            for j in range(cfg.stages)
        )
        chains.append(ChainSpec(stages))
    return chains


@dataclass(frozen=True)
class BenchConfig:
    seeds: int = 5
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    gmm_rollouts: int = 1000
    deploy_candidates: int = 1000
    eval_trials: int = 1000
    k_max: int = _gmm.K_MAX
    check_selector: bool = True
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.finetune, dict):
            object.__setattr__(self, "finetune", FinetuneConfig.from_dict(self.finetune))
        if self.seeds < 2:
            raise ValueError("seeds must be >= 2")
        for name in ("gmm_rollouts", "deploy_candidates", "eval_trials", "k_max", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self, include_threads: bool = False) -> dict:
        d = dataclasses.asdict(self)
        d["finetune"] = self.finetune.to_dict()
        if not include_threads:
            d.pop("threads")
        return d


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _selector_violations(model: _gmm.GMMModel, sels) -> tuple[int, int]:
    """Count selections beaten by any of their own candidates, with densities
    recomputed by direct summation over components."""
    sels = [x for x in sels if not x.fallback]
    if not sels:
        return 0, 0
    cands = np.vstack([x.candidates for x in sels])
    dens = np.zeros(len(cands))
    for k in range(model.K):
        diff = cands - model.means[k]
        maha = ((diff @ np.linalg.inv(model.covariances[k])) * diff).sum(1)
        norm = np.sqrt((2 * np.pi) ** model.dim * np.linalg.det(model.covariances[k]))
        dens += model.weights[k] * np.exp(-0.5 * maha) / norm
    bad = 0
    start = 0
    for sel in sels:
        n = len(sel.candidates)
        seg = dens[start : start + n]
        chosen = int(np.flatnonzero(np.all(sel.candidates == sel.point, axis=1))[0])
        if np.any(seg > seg[chosen] * (1 + 1e-12)):
            bad += 1
        start += n
    return bad, len(sels)


def run_cell(stage: StageSpec, cfg: BenchConfig, rng: RngStream) -> dict:
    """All four strategies on one stage for one seed."""
    ft_stage, ft_rec = finetune_stage(stage, cfg.finetune, rng.child("finetune"))
    g_base = fit_success_gmm(stage, rng.child("gmm", "baseline"), cfg.gmm_rollouts, cfg.k_max)
    g_ft = fit_success_gmm(ft_stage, rng.child("gmm", "finetuned"), cfg.gmm_rollouts, cfg.k_max)
    art = Artifacts(ft_stage, g_base.model, g_ft.model)

    # common random numbers across strategies sharpen paired comparisons
    eval_rng = rng.child("deploy")
    out = {"stage": stage.label, "seed": rng.seed, "records": {}, "selector": {"checked": 0, "violations": 0}}
    for strat in ALL_STRATEGIES:
        rate, sels = evaluate_strategy(
            stage, strat, art, cfg.eval_trials, eval_rng, cfg.deploy_candidates,
            keep_selections=cfg.check_selector and strat.uses_gmm,
        )
        if sels is not None:
            model = art.gmm if strat == Strategy.DEPLOYMENT else art.gmm_finetuned
            bad, n = _selector_violations(model, sels)
            out["selector"]["checked"] += n
            out["selector"]["violations"] += bad
        epochs, hist = (ft_rec.epochs, ft_rec.epoch_rates) if strat.uses_finetune else (0, ())
        out["records"][strat.value] = RunRecord(
            strat.value, stage.label, epochs, hist, rate, rng.seed, {}
        ).to_dict()
    out["gmm"] = {
        "baseline": {"K": g_base.model.K, "n_success": g_base.n_success, "fallback": g_base.fallback},
        "finetuned": {"K": g_ft.model.K, "n_success": g_ft.n_success, "fallback": g_ft.fallback},
    }
    out["_artifacts"] = art
    return out


def _cell_job(args):
    ci, si, seed, stage, cfg, master = args
    res = run_cell(stage, cfg, master.child("chain", ci, "stage", si, "seed", seed))
    res.update(chain=ci, stage_index=si, seed_index=seed)
    return res


def run_benchmark(
    suite: Sequence[ChainSpec],
    cfg: BenchConfig,
    rng: RngStream,
    strategies: Sequence[Strategy] = ALL_STRATEGIES,
) -> dict:
    """Every (chain, stage, seed) cell under all four strategies, aggregated
    as mean and std across seeds. Multi-stage chains additionally get a
    full-sequence success rate per strategy and seed."""
    if tuple(Strategy(s) for s in strategies) != ALL_STRATEGIES:
        raise ValueError("the benchmark always compares all four strategies")
    jobs = [
        (ci, si, seed, stage, cfg, rng)
        for ci, chain in enumerate(suite)
        for si, stage in enumerate(chain.stages)
        for seed in range(cfg.seeds)
    ]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as ex:
            cells = list(ex.map(_cell_job, jobs))
    else:
        cells = [_cell_job(j) for j in jobs]

    names = [s.value for s in ALL_STRATEGIES]
    rows = []
    for ci, chain in enumerate(suite):
        for si, stage in enumerate(chain.stages):
            mine = [c for c in cells if c["chain"] == ci and c["stage_index"] == si]
            rates = {n: [c["records"][n]["final_rate"] for c in mine] for n in names}
            row = {"landscape_id": stage.label}
            for n in names:
                row[n] = {"mean": float(np.mean(rates[n])), "std": float(np.std(rates[n])), "per_seed": rates[n]}
            for n in names[1:]:
                row[n]["delta"] = row[n]["mean"] - row["baseline"]["mean"]
            rows.append(row)

    chains_out = []
    for ci, chain in enumerate(suite):
        if len(chain.stages) < 2:
            continue
        entry = {"chain": ci, "strategies": {}}
        for strat in ALL_STRATEGIES:
            seq = []
            for seed in range(cfg.seeds):
                arts = [
                    next(c for c in cells if c["chain"] == ci and c["stage_index"] == si and c["seed_index"] == seed)["_artifacts"]
                    for si in range(len(chain.stages))
                ]
                res = run_chain(
                    chain.with_strategy(strat, arts), cfg.eval_trials,
                    rng.child("chain", ci, "sequence", seed), M=cfg.deploy_candidates,
                )
                seq.append(res.sequence_rate)
            entry["strategies"][strat.value] = {"mean": float(np.mean(seq)), "std": float(np.std(seq)), "per_seed": seq}
        chains_out.append(entry)

    means = {n: float(np.mean([r[n]["mean"] for r in rows])) for n in names}
    spread = {n: float(np.std([r[n]["mean"] for r in rows])) for n in names}
    for c in cells:
        c.pop("_artifacts")
    return {
        "tool": "refinery",
        "version": __version__,
        "master_seed": rng.seed,
        "config_hash": config_hash(cfg.to_dict()),
        "config": cfg.to_dict(),
        "summary": {
            "strategy_means": means,
            "std_across_landscapes": spread,
            "selector_check": {
                "checked": sum(c["selector"]["checked"] for c in cells),
                "violations": sum(c["selector"]["violations"] for c in cells),
            },
        },
        "rows": rows,
        "chains": chains_out,
        "cells": cells,
    }


def summary_csv(report: dict) -> str:
    """Table with one row per landscape stage; cells are percentages."""
    lines = ["landscape_id,baseline,deployment,finetune,refinery"]
    for r in report["rows"]:
        cells = [f"{100 * r[n]['mean']:.2f}±{100 * r[n]['std']:.2f}" for n in ("baseline", "deployment", "finetune", "refinery")]
        lines.append(",".join([r["landscape_id"], *cells]))
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
