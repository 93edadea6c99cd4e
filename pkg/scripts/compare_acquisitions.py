"""Fine-tune each default-suite landscape with UCB, PI, EI and the uniform
ablation under paired seeds; print the per-landscape success table."""

import argparse

import numpy as np

from refinery.acquisition import AcquisitionSpec
from refinery.core import RngStream
from refinery.engine import Artifacts, FinetuneConfig, Strategy, default_suite, evaluate_strategy, finetune_stage

ARMS = {
    "ucb": FinetuneConfig(acquisition=AcquisitionSpec("ucb")),
    "pi": FinetuneConfig(acquisition=AcquisitionSpec("pi")),
    "ei": FinetuneConfig(acquisition=AcquisitionSpec("ei")),
    "uniform": FinetuneConfig(proposer="uniform"),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--trials", type=int, default=1000)
    a = ap.parse_args()

    suite = default_suite()
    table = {k: np.zeros((len(suite), a.seeds)) for k in ARMS}
    epochs = {k: np.zeros((len(suite), a.seeds)) for k in ARMS}
    for li, chain in enumerate(suite):
        stage = chain.stages[0]
        for s in range(a.seeds):
            rng = RngStream(0).child("acq", li, s)
            for k, cfg in ARMS.items():
                tuned, rec = finetune_stage(stage, cfg, rng.child("finetune"))
                table[k][li, s], _ = evaluate_strategy(
                    stage, Strategy.FINETUNE, Artifacts(tuned), a.trials, rng.child("deploy")
                )
                epochs[k][li, s] = rec.epochs
        print(f"L{li:02d} " + " ".join(f"{k}={100 * table[k][li].mean():6.2f}%" for k in ARMS), flush=True)
    print("mean " + " ".join(f"{k}={100 * table[k].mean():6.2f}%" for k in ARMS))
    print("mean epochs " + " ".join(f"{k}={epochs[k].mean():.1f}" for k in ARMS))


if __name__ == "__main__":
    main()
