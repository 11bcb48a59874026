"""``terradepth`` command line: data generation, staged training, inference,
evaluation and the (mode, T) ablation.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 numerical failure. Every failure prints a single diagnostic line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import persistence, trainer
from .autodiff import NumericalError, ShapeError
from .coarse import CoarseDepthNet
from .codec import Codec
from .config import CodecConfig, ConfigError, RunConfig, UNetConfig, ViTConfig, from_dict, load_run_config
from .metrics import compute, mean_report, pretty_table, to_tsv
from .netpbm import NetpbmError, read_pgm, read_ppm, write_pgm
from .plbr import make_schedule
from .terrain import DatasetError, write_dataset
from .unet import RefinerUNet

log = logging.getLogger("terradepth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here.
    def error(self, message):
        raise UsageError(message)


# -- helpers ----------------------------------------------------------------

def _setup_threads() -> None:
    raw = os.environ.get("D3_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"D3_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"D3_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def _run_config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    cfg.train.seed = args.seed
    cfg.validate()
    return cfg


def _echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "run_config.json")


def _load_data(path) -> trainer.TileData:
    data = trainer.TileData.load(path)
    if not data.ids:
        raise DataError(f"dataset {path} is empty")
    return data


def _meta_config(ckpt: persistence.ModelCheckpoint, cls, kind: str, path):
    if ckpt.meta.get("kind") != kind:
        raise DataError(f"{path}: expected a {kind} checkpoint, found {ckpt.meta.get('kind')!r}")
    try:
        cfg = from_dict(cls, json.loads(ckpt.meta["config"]))
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: checkpoint metadata lacks a usable config ({exc})") from exc
    cfg.validate()
    return cfg


def load_coarse(path) -> CoarseDepthNet:
    ck = persistence.load(path)
    net = CoarseDepthNet(_meta_config(ck, ViTConfig, "coarse", path))
    return persistence.bind(net, ck).eval()


def load_codec(path) -> Codec:
    ck = persistence.load(path)
    codec = Codec(_meta_config(ck, CodecConfig, "codec", path))
    return persistence.bind(codec, ck).eval()


def load_refiner(path) -> tuple[RefinerUNet, dict[str, str]]:
    ck = persistence.load(path)
    ucfg = _meta_config(ck, UNetConfig, "refiner", path)
    net = RefinerUNet(int(ck.meta["latent_channels"]), ucfg)
    return persistence.bind(net, ck).eval(), ck.meta


def _pad_multiple(coarse: CoarseDepthNet, codec: Codec, refiner: RefinerUNet) -> int:
    vit = coarse.cfg
    levels = 2 ** (len(refiner.cfg.channel_mults) - 1)
    m = math.lcm(vit.patch_size, max(vit.hook_scales), codec.factor * levels)
    return m


def _pgm_dir(path: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(path.glob("*.pgm"))}


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    write_dataset(cfg.terrain, out)
    print(f"wrote {cfg.terrain.count} tiles to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_train_vae(args) -> int:
    cfg = _run_config(args)
    data = _load_data(args.data)
    out = Path(args.out)
    _echo_config(cfg, out)
    codec, _ = trainer.train_vae(data, cfg.codec, cfg, out / "vae_log.tsv")
    persistence.save(codec, trainer._model_meta("codec", cfg.codec, mode=cfg.codec.mode, seed=cfg.train.seed),
                     out / "codec.d3ck")
    return EXIT_OK


def cmd_train_coarse(args) -> int:
    cfg = _run_config(args)
    data = _load_data(args.data)
    out = Path(args.out)
    _echo_config(cfg, out)
    trainer.train_stage1(data, cfg, out)
    return EXIT_OK


def cmd_train_refiner(args) -> int:
    cfg = _run_config(args)
    data = _load_data(args.data)
    codec = load_codec(args.codec)
    try:
        coarse = trainer.read_coarse_maps(args.coarse, data)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    _echo_config(cfg, out)
    trainer.train_stage2(coarse, data, codec, cfg, out)
    return EXIT_OK


def cmd_infer(args) -> int:
    rgb = read_ppm(args.rgb)
    coarse_net = load_coarse(args.coarse)
    codec = load_codec(args.codec)
    refiner, meta = load_refiner(args.refiner)
    if int(meta["latent_channels"]) != codec.latent_channels:
        raise DataError(f"refiner expects {meta['latent_channels']} latent channels, "
                        f"codec gives {codec.latent_channels}")
    T = int(meta["T"]) if args.steps is None else args.steps
    if T < 2:
        raise UsageError(f"--steps must be >= 2, got {T}")
    sched = make_schedule(T, float(meta["epsilon"]))

    H, W = rgb.shape[1:]
    m = _pad_multiple(coarse_net, codec, refiner)
    ph, pw = -H % m, -W % m
    x = torch.from_numpy(np.ascontiguousarray(rgb, dtype=np.float32))[None]
    if ph or pw:
        # edge-replicate up to the network stride, crop back afterwards
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")

    inter = Path(args.save_intermediates) if args.save_intermediates else None
    if inter:
        inter.mkdir(parents=True, exist_ok=True)

    def save_step(t, zt, pred):
        write_pgm(inter / f"step_t{t}.pgm", codec.decode_depth(zt)[0, 0, :H, :W].numpy())

    with torch.no_grad():
        dc = trainer.minmax_normalize(coarse_net(x))
        if inter:
            write_pgm(inter / "coarse.pgm", dc[0, 0, :H, :W].numpy())
        depth = trainer.refine_depth(codec, refiner, x, dc, sched, save_step if inter else None)
    out = depth[0, 0, :H, :W].numpy()
    if not np.isfinite(out).all():
        raise NumericalError("non-finite depth produced")
    if inter:
        write_pgm(inter / "step_t0.pgm", out)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_pgm(args.out, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    preds = _pgm_dir(pred_dir)
    # a dataset directory keeps its ground truth under depth/
    gts = _pgm_dir(gt_dir / "depth") if (gt_dir / "depth").is_dir() else _pgm_dir(gt_dir)
    common = [k for k in preds if k in gts]
    if not common:
        raise DataError(f"no matching .pgm files between {pred_dir} and {gt_dir}")
    rows = []
    for k in common:
        p, g = read_pgm(preds[k]), read_pgm(gts[k])
        if p.shape != g.shape:
            raise DataError(f"{k}: prediction {p.shape} and ground truth {g.shape} differ")
        rows.append((k, compute(p, g, args.align)))
    rows.append(("mean", mean_report([r for _, r in rows])))
    sys.stdout.write(to_tsv(rows))
    print(pretty_table(rows[-1:]), file=sys.stderr)
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 2 for v in vals):
        raise argparse.ArgumentTypeError(f"T values must be integers >= 2, got {text!r}")
    return vals


def _mode_list(text: str) -> list[str]:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in vals if v not in ("identity", "vae")]
    if not vals or bad:
        raise argparse.ArgumentTypeError(f"modes must be identity|vae, got {text!r}")
    return vals


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    data = _load_data(args.data)
    out = Path(args.out)
    _echo_config(cfg, out)
    sys.stdout.write(trainer.run_ablation(args.T, args.modes, data, cfg, out))
    return EXIT_OK


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="terradepth", description="Coarse-to-fine depth from synthetic terrain imagery.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, config=True):
        s = sub.add_parser(name, help=help_)
        if config:
            s.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
        s.add_argument("--seed", type=int, default=42)
        s.set_defaults(func=fn)
        return s

    s = add("gen-data", cmd_gen_data, "write the synthetic terrain dataset")
    s.add_argument("--out", required=True)

    s = add("train-vae", cmd_train_vae, "train the latent codec")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = add("train-coarse", cmd_train_coarse, "stage 1: coarse net and cross-validated coarse maps")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = add("train-refiner", cmd_train_refiner, "stage 2: latent refiner")
    s.add_argument("--data", required=True)
    s.add_argument("--coarse", required=True, help="stage 1 output directory")
    s.add_argument("--codec", required=True, help="codec checkpoint")
    s.add_argument("--out", required=True)

    s = add("infer", cmd_infer, "refine depth for one RGB tile", config=False)
    s.add_argument("--rgb", required=True)
    s.add_argument("--coarse", required=True)
    s.add_argument("--refiner", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=None, help="schedule length T (default: training T)")
    s.add_argument("--save-intermediates", default=None, metavar="DIR")

    s = add("eval", cmd_eval, "metrics of a prediction directory", config=False)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--align", choices=("median", "none"), default="median")

    s = add("ablate", cmd_ablate, "refiner ablation over codec modes and T")
    s.add_argument("--data", required=True)
    s.add_argument("--T", type=_int_list, default=[3, 6, 10])
    s.add_argument("--modes", type=_mode_list, default=["identity", "vae"])
    s.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
        _setup_threads()
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        code, msg = EXIT_USAGE, f"usage error: {exc}"
    except NumericalError as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except (DataError, DatasetError, NetpbmError, persistence.CheckpointError, ShapeError,
            FileNotFoundError, IsADirectoryError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    print(f"terradepth: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
