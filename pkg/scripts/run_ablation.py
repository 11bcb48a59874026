#!/usr/bin/env python3
"""(codec mode x T) refiner ablation on the synthetic terrain set.

    python scripts/run_ablation.py --out runs/ablation [--config C] [--T 3,6,10] [--modes identity,vae]

Stage 1 is trained once and shared by every row; one codec per mode and one
refiner per (mode, T). The TSV lands in OUT/ablation.tsv and on stdout.
"""
import argparse
import logging
import sys
import time
from pathlib import Path

from terradepth.config import load_run_config
from terradepth.terrain import write_dataset
from terradepth.trainer import TileData, run_ablation


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", required=True)
    ap.add_argument("--data", default=None)
    ap.add_argument("--T", default="3,6,10")
    ap.add_argument("--modes", default="identity,vae")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)

    cfg = load_run_config(args.config)
    out = Path(args.out)
    t0 = time.time()
    data = TileData.load(args.data or write_dataset(cfg.terrain, out / "data"))
    T_values = [int(v) for v in args.T.split(",")]
    modes = [m.strip() for m in args.modes.split(",")]
    sys.stdout.write(run_ablation(T_values, modes, data, cfg, out))
    print(f"total {(time.time() - t0) / 60:.1f} min", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
