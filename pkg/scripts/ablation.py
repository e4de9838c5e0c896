"""Held-out MSE on the mouth scene with and without the part-wise deformation networks.

    python scripts/ablation.py --seeds 0,1,2 [--config configs/mouth.json]
"""
import argparse
import sys

from splatrig.experiments import mouth_ablation, mouth_config
from splatrig.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--config")
    a = ap.parse_args()
    wins = 0
    seeds = [int(s) for s in a.seeds.split(",")]
    for seed in seeds:
        cfg = TrainConfig.load(a.config) if a.config else mouth_config()
        cfg.seed = seed
        res = mouth_ablation(seed, cfg)
        print(res.line(), f"train_mse_deform={res.train_mse['deform']:.6g}",
              f"train_mse_static={res.train_mse['static']:.6g} seconds={res.seconds:.1f}", flush=True)
        wins += res.deform_wins
    print(f"deform_wins={wins}/{len(seeds)}")
    return 0 if wins == len(seeds) else 3


if __name__ == "__main__":
    sys.exit(main())
