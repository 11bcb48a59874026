#!/usr/bin/env python3
"""Desk-scale end-to-end run: dataset, codec, stage 1, stage 2, test metrics.

    python scripts/run_desk_experiment.py --out runs/desk [--config configs/desk.json]

Writes everything ``run_pipeline`` writes plus ``timing.json`` and prints the
test-split table (median alignment) with the A7 ratios underneath.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

from terradepth.config import load_run_config
from terradepth.metrics import pretty_table
from terradepth.terrain import write_dataset
from terradepth.trainer import TileData, run_pipeline


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None, help="RunConfig JSON (package defaults when omitted)")
    ap.add_argument("--out", required=True)
    ap.add_argument("--data", default=None, help="existing dataset dir; generated under OUT/data if omitted")
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)

    cfg = load_run_config(args.config)
    out = Path(args.out)
    t0 = time.time()
    data_dir = Path(args.data) if args.data else write_dataset(cfg.terrain, out / "data")
    data = TileData.load(data_dir)
    t_data = time.time() - t0
    res = run_pipeline(cfg, data, out)
    total = time.time() - t0

    rows = dict(res.rows)
    g, c, r = rows["global_mean"], rows["coarse"], rows["refined"]
    print(pretty_table(res.rows))
    print(f"coarse/global MAE   {c.mae / g.mae:.3f}   (A7a wants <= 0.6)")
    print(f"refined/coarse hf   {r.hf_proxy / c.hf_proxy:.3f}   (A7b wants <= 1)")
    print(f"refined/coarse MAE  {r.mae / c.mae:.3f}   (A7c wants <= 1.05)")
    print(f"total {total / 60:.1f} min (data {t_data:.0f} s)")
    (out / "timing.json").write_text(json.dumps({"data_s": t_data, "total_s": total}, indent=1) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
