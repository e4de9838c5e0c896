"""Fit the 3-part smoke scene until training PSNR reaches 30 dB (or 5000 steps).

    python scripts/smoke_fit.py --seed 0 [--config configs/smoke.json] [--threads 4]
"""
import argparse
import sys

from splatrig.experiments import smoke_config, smoke_fit
from splatrig.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config")
    ap.add_argument("--threads", type=int, default=1)
    a = ap.parse_args()
    cfg = TrainConfig.load(a.config) if a.config else smoke_config()
    cfg.seed, cfg.threads = a.seed, a.threads
    res = smoke_fit(a.seed, cfg)
    for step, psnr in res.history:
        print(f"step={step} train_psnr={psnr:.3f}")
    print(f"reached={res.reached} steps={res.steps} psnr={res.psnr:.3f} seconds={res.seconds:.1f}")
    return 0 if res.reached else 3


if __name__ == "__main__":
    sys.exit(main())
