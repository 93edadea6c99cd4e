"""Run the four-strategy benchmark on the default suite and print the summary.

    python scripts/run_benchmark.py --seeds 5 --threads 4 --out out/bench
"""

import argparse
import pathlib
import time

from refinery.core import RngStream
from refinery.engine import BenchConfig, SuiteConfig, default_suite, report_json, run_benchmark, summary_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--landscapes", type=int, default=10)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="out/bench")
    a = ap.parse_args()

    t = time.perf_counter()
    rep = run_benchmark(
        default_suite(SuiteConfig(n_landscapes=a.landscapes)),
        BenchConfig(seeds=a.seeds, threads=a.threads),
        RngStream(a.seed),
    )
    out = pathlib.Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench_report.json").write_text(report_json(rep))
    (out / "bench_summary.csv").write_text(summary_csv(rep))
    print(summary_csv(rep), end="")
    print(f"{time.perf_counter() - t:.1f}s")


if __name__ == "__main__":
    main()
