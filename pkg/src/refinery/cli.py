"""Command-line entry point.

Every subcommand reads an optional JSON config, resolves the master seed
(flag, then ``REFINERY_SEED``, then the file, then 0) and writes its outputs
into ``--out`` only. Outputs carry the master seed, a hash of the effective
config and the tool version; equal triples give byte-identical files.

Exit codes: 0 ok, 2 usage or config error, 3 numerical or runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import gmm as _gmm
from .core import NumericalError, RngStream
from .engine import (
    Artifacts,
    BenchConfig,
    FinetuneConfig,
    Strategy,
    SuiteConfig,
    config_hash,
    default_suite,
    finetune_stage,
    fit_success_gmm,
    report_json,
    run_benchmark,
    run_chain,
    summary_csv,
)
from .oracle import StageSpec, rollout, success_map, success_map_csv

log = logging.getLogger("refinery")

SECTIONS = ("seed", "suite", "stage", "finetune", "bench", "eval_map", "deploy", "chain")
DEFAULT_N = 1000
DEFAULT_M = 1000


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


@dataclasses.dataclass(frozen=True)
class CliConfig:
    subcommand: str
    config_path: Path | None
    seed: int
    out: Path
    verbosity: int
    threads: int
    raw: dict


def _parse_seed(value, source: str) -> int:
    try:
        s = int(str(value).strip(), 0) if isinstance(value, str) else int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"seed ({source}) must be an integer, got {value!r}") from None
    if not 0 <= s < 2**64:
        raise ConfigError(f"seed ({source}) must be a 64-bit unsigned integer")
    return s


def _section(raw: dict, name: str) -> dict:
    v = raw.get(name, {})
    if not isinstance(v, dict):
        raise ConfigError(f"{name} must be a JSON object")
    return v


def _build(name: str, fn, *args):
    # prefix validation errors with the config section they came from
    try:
        return fn(*args)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as e:
        msg = str(e.args[0]) if isinstance(e, KeyError) and e.args else str(e)
        raise ConfigError(msg if msg.startswith(name) else f"{name}: {msg}") from None


def load_config(args: argparse.Namespace) -> CliConfig:
    raw: dict = {}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {unknown}")

    if args.seed is not None:
        seed = _parse_seed(args.seed, "--seed")
    elif os.environ.get("REFINERY_SEED", "") != "":
        seed = _parse_seed(os.environ["REFINERY_SEED"], "REFINERY_SEED")
    else:
        seed = _parse_seed(raw.get("seed", 0), "config")

    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} is not a directory")
    return CliConfig(args.command, args.config, seed, out, args.verbose, threads, raw)


def _suite_cfg(cfg: CliConfig, stages: int | None = None) -> SuiteConfig:
    d = dict(_section(cfg.raw, "suite"))
    if stages is not None:
        d["stages"] = stages
    return _build("suite", lambda: SuiteConfig(**d))


def _finetune_cfg(cfg: CliConfig) -> FinetuneConfig:
    return _build("finetune", FinetuneConfig.from_dict, _section(cfg.raw, "finetune"))


def _stage(cfg: CliConfig) -> StageSpec:
    """Stage from an explicit ``stage`` object or a default-suite landscape."""
    d = _section(cfg.raw, "stage")
    if "oracle" in d:
        return _build("stage", StageSpec.from_dict, d)
    unknown = sorted(set(d) - {"landscape", "stage_index"})
    if unknown:
        raise ConfigError(f"stage: unknown field(s) {unknown}")
    li, si = d.get("landscape", 0), d.get("stage_index", 0)
    suite = default_suite(_suite_cfg(cfg, max(int(si) + 1, _section(cfg.raw, "suite").get("stages", 1))))
    if not (isinstance(li, int) and 0 <= li < len(suite)):
        raise ConfigError(f"stage.landscape must be an index below {len(suite)}")
    if not (isinstance(si, int) and si >= 0):
        raise ConfigError("stage.stage_index must be a non-negative integer")
    return suite[li].stages[si]


def _positive(sec: dict, name: str, key: str, default: int) -> int:
    v = sec.get(key, default)
    if not (isinstance(v, int) and not isinstance(v, bool) and v >= 1):
        raise ConfigError(f"{name}.{key} must be a positive integer")
    return v


def _header(cfg: CliConfig, effective: dict) -> dict:
    return {
        "tool": "refinery",
        "version": __version__,
        "master_seed": cfg.seed,
        "config_hash": config_hash(effective),
        "config": effective,
    }


def _write(cfg: CliConfig, name: str, text: str) -> Path:
    # fixed file names only, so nothing can escape the output directory
    assert "/" not in name and name not in (".", "..")
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / name
    path.write_text(text, encoding="utf-8", newline="\n")
    log.info("wrote %s", path)
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- subcommands --------------------------------------------------------------


def cmd_eval_map(cfg: CliConfig) -> dict:
    stage = _stage(cfg)
    sec = _section(cfg.raw, "eval_map")
    res = sec.get("resolution", 64)
    if isinstance(res, int):
        res = [res, res]
    if not (isinstance(res, list) and len(res) == 2 and all(isinstance(r, int) and r >= 1 for r in res)):
        raise ConfigError("eval_map.resolution must be a positive integer or a pair of them")
    d = stage.domain.dim
    sl = sec.get("slice", [None, None] + [float(c) for c in stage.domain.center[2:]])
    if not (isinstance(sl, list) and len(sl) == d):
        raise ConfigError(f"eval_map.slice needs {d} entries (null marks a free dimension)")
    if sum(v is None for v in sl) != 2:
        raise ConfigError("eval_map.slice must have exactly 2 free (null) dimensions")
    sl = [None if v is None else float(v) for v in sl]
    if any(v is not None and not stage.domain.lower[j] <= v <= stage.domain.upper[j] for j, v in enumerate(sl)):
        raise ConfigError("eval_map.slice values must lie inside the domain")

    grid = success_map(stage.oracle, res, sl)
    free = [j for j, v in enumerate(sl) if v is None]
    effective = {"stage": stage.to_dict(), "eval_map": {"resolution": res, "slice": sl}}
    _write(cfg, "success_map.csv", success_map_csv(grid, free, sl))
    meta = _header(cfg, effective)
    meta.update(shape=list(grid.shape), free_dims=free, min=float(grid.min()), max=float(grid.max()),
                mean=float(grid.mean()))
    _write(cfg, "success_map.json", _dump(meta))
    return meta


def cmd_finetune(cfg: CliConfig) -> dict:
    stage = _stage(cfg)
    ft = _finetune_cfg(cfg)
    effective = {"stage": stage.to_dict(), "finetune": ft.to_dict()}
    rng = RngStream(cfg.seed).child("finetune")
    tuned, rec = finetune_stage(stage, ft, rng)
    out = _header(cfg, effective)
    out.update(record=rec.to_dict(), finetuned_stage=tuned.to_dict())
    _write(cfg, "finetune_record.json", _dump(out))
    print(f"{stage.label}: {rec.epochs} epochs, rate {rec.epoch_rates[0]:.4f} -> {rec.final_rate:.4f}")
    return out


def cmd_deploy(cfg: CliConfig) -> dict:
    stage = _stage(cfg)
    sec = _section(cfg.raw, "deploy")
    unknown = sorted(set(sec) - {"N", "M", "k_max"})
    if unknown:
        raise ConfigError(f"deploy: unknown field(s) {unknown}")
    N = _positive(sec, "deploy", "N", DEFAULT_N)
    M = _positive(sec, "deploy", "M", DEFAULT_M)
    k_max = _positive(sec, "deploy", "k_max", _gmm.K_MAX)
    effective = {"stage": stage.to_dict(), "deploy": {"N": N, "M": M, "k_max": k_max}}

    rng = RngStream(cfg.seed).child("deploy")
    fit = fit_success_gmm(stage, rng.child("gmm"), N, k_max)
    sel = _gmm.select_candidates(fit.model, M, stage.domain, rng.child("select"))
    rec = rollout(stage, sel.point, 1, rng.child("run"))
    warnings = []
    if fit.fallback:
        warnings.append("no successful rollouts; GMM replaced by a box-moment Gaussian")
    if sel.fallback:
        warnings.append("no in-domain GMM draws; used the clipped heaviest mean")
    for w in warnings:
        log.warning(w)

    out = _header(cfg, effective)
    out.update(
        x_star=[float(v) for v in sel.point],
        density=sel.density,
        outcome=bool(rec.successes),
        n_rollouts=fit.n_rollouts,
        n_success=fit.n_success,
        n_candidates=int(len(sel.candidates)),
        warning=bool(warnings),
        warnings=warnings,
        gmm=fit.model.to_dict(),
    )
    _write(cfg, "deploy_log.json", _dump(out))
    print(f"x* = {out['x_star']}  density = {sel.density:.6g}  outcome = {'success' if rec.successes else 'failure'}")
    return out


def cmd_chain(cfg: CliConfig, stages: int | None = None) -> dict:
    sec = _section(cfg.raw, "chain")
    unknown = sorted(set(sec) - {"landscape", "trials", "retries", "strategy", "M"})
    if unknown:
        raise ConfigError(f"chain: unknown field(s) {unknown}")
    suite_cfg = _suite_cfg(cfg, stages)
    suite = default_suite(suite_cfg)
    li = sec.get("landscape", 0)
    if not (isinstance(li, int) and 0 <= li < len(suite)):
        raise ConfigError(f"chain.landscape must be an index below {len(suite)}")
    trials = _positive(sec, "chain", "trials", 1000)
    M = _positive(sec, "chain", "M", DEFAULT_M)
    retries = sec.get("retries", 0)
    if retries not in (0, 1, 2):
        raise ConfigError("chain.retries must be 0, 1 or 2")
    strat = _build("chain.strategy", Strategy, sec.get("strategy", "refinery"))
    ft = _finetune_cfg(cfg)
    bench = _section(cfg.raw, "bench")
    N = _positive(bench, "bench", "gmm_rollouts", DEFAULT_N)

    chain = suite[li]
    effective = {
        "suite": dataclasses.asdict(suite_cfg),
        "chain": {"landscape": li, "trials": trials, "retries": retries, "strategy": strat.value, "M": M},
        "finetune": ft.to_dict(),
        "gmm_rollouts": N,
    }
    rng = RngStream(cfg.seed).child("chain")
    arts = []
    for i, s in enumerate(chain.stages):
        r = rng.child("stage", i)
        tuned = finetune_stage(s, ft, r.child("finetune"))[0] if strat.uses_finetune else None
        g = fit_success_gmm(s, r.child("gmm", "baseline"), N).model if strat == Strategy.DEPLOYMENT else None
        gf = fit_success_gmm(tuned, r.child("gmm", "finetuned"), N).model if strat == Strategy.REFINERY else None
        arts.append(Artifacts(tuned, g, gf))
    res = run_chain(chain.with_strategy(strat, arts), trials, rng.child("run"), retries, M)
    out = _header(cfg, effective)
    out.update(result=dataclasses.asdict(res), stages=[s.label for s in chain.stages])
    _write(cfg, "chain_result.json", _dump(out))
    print(f"{strat.value}: sequence rate {res.sequence_rate:.4f} over {len(chain.stages)} stage(s)")
    return out


def cmd_bench(cfg: CliConfig, seeds: int | None = None, stages: int | None = None) -> dict:
    suite_cfg = _suite_cfg(cfg, stages)
    b = dict(_section(cfg.raw, "bench"))
    if "threads" in b:
        raise ConfigError("bench.threads is a command-line setting (--threads)")
    if seeds is not None:
        b["seeds"] = seeds
    b["finetune"] = _finetune_cfg(cfg)
    b["threads"] = cfg.threads
    bench = _build("bench", lambda: BenchConfig(**b))
    effective = {"suite": dataclasses.asdict(suite_cfg), "bench": bench.to_dict()}

    report = run_benchmark(default_suite(suite_cfg), bench, RngStream(cfg.seed).child("bench"))
    report.update(_header(cfg, effective))
    _write(cfg, "bench_report.json", report_json(report) + "\n")
    _write(cfg, "bench_summary.csv", summary_csv(report))
    for name, v in report["summary"]["strategy_means"].items():
        print(f"{name:<11s} {100 * v:6.2f}%")
    return report


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refinery", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"refinery {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="JSON config file")
    common.add_argument("--seed", help="master seed (u64); overrides REFINERY_SEED and the config")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--threads", type=int, help="worker processes (default: logical cores)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("eval-map", parents=[common], help="export a 2-D success-map slice as CSV")
    sub.add_parser("finetune", parents=[common], help="run GP-guided fine-tuning on one stage")
    sub.add_parser("deploy", parents=[common], help="fit the success GMM and select one initialization")
    ch = sub.add_parser("chain", parents=[common], help="run a multi-stage chain under one strategy")
    ch.add_argument("--stages", type=int)
    bp = sub.add_parser("bench", parents=[common], help="four-strategy benchmark over the landscape suite")
    bp.add_argument("--seeds", type=int)
    bp.add_argument("--stages", type=int)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args)
        if args.command == "eval-map":
            cmd_eval_map(cfg)
        elif args.command == "finetune":
            cmd_finetune(cfg)
        elif args.command == "deploy":
            cmd_deploy(cfg)
        elif args.command == "chain":
            cmd_chain(cfg, args.stages)
        else:
            cmd_bench(cfg, args.seeds, args.stages)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
