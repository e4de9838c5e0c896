"""Warm up on the constructed APS scene and check the part classification against ground truth.

    python scripts/aps_oracle.py --seeds 0,1,2,3,4 [--config configs/aps.json]
"""
import argparse
import sys

from splatrig.experiments import aps_config, aps_oracle
from splatrig.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--config")
    a = ap.parse_args()
    seeds = [int(s) for s in a.seeds.split(",")]
    ok = True
    for seed in seeds:
        cfg = TrainConfig.load(a.config) if a.config else aps_config()
        cfg.seed = seed
        res = aps_oracle(seed, cfg)
        print(res.line(), f"seconds={res.seconds:.1f}", flush=True)
        if not res.correct:
            wrong = [k for k in res.truth if res.truth[k] != res.predicted[k]]
            print(f"  misclassified: {', '.join(wrong)}")
        ok &= res.correct
    print(f"all_correct={ok}")
    return 0 if ok else 3


if __name__ == "__main__":
    sys.exit(main())
