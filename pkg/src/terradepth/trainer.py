"""Two-stage training: coarse net with K-fold coarse maps, then the refiner.

Stage 1 trains K fold models, each predicting the coarse maps of its
held-out fold, so every training sample's coarse map comes from a model
that never saw it; a full-train model covers val/test. Stage 2 encodes
(gt, coarse, rgb) with a frozen codec and trains the refiner on
progressively blended latents.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import persistence
from .autodiff import NumericalError, assert_finite
from .coarse import CoarseDepthNet
from .codec import Codec, vae_loss
from .config import CodecConfig, RunConfig, UNetConfig, ViTConfig, to_dict
from .hdn import ContextSet, build_contexts, hdn_loss
from .metrics import MetricReport, compute, mean_report, to_tsv
from .netpbm import read_pgm, write_pgm
from .plbr import PlbrSchedule, forward_blend, make_schedule, refine
from .terrain import SamplePair, read_dataset
from .unet import RefinerUNet

log = logging.getLogger(__name__)


# -- learning-rate schedule -------------------------------------------------

class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a
    relative improvement of ``threshold`` over the best loss so far."""

    def __init__(self, lr: float, factor: float, patience: int, threshold: float = 1e-4):
        self.lr, self.factor, self.patience, self.threshold = lr, factor, patience, threshold
        self.best = float("inf")
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.reductions += 1
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler(history: list[float], lr: float, factor: float, patience: int) -> float:
    """LR after replaying the validation-loss ``history`` from ``lr``."""
    sched = PlateauScheduler(lr, factor, patience)
    for loss in history:
        sched.step(loss)
    return sched.lr


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


class TrainLog:
    """Rows of (epoch, split, loss, lr), optionally mirrored to a TSV file."""

    def __init__(self, path: Path | None = None, stage: str = ""):
        self.rows: list[tuple[int, str, float, float]] = []
        self.path, self.stage = path, stage
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("epoch\tsplit\tloss\tlr\n")

    def add(self, epoch: int, split: str, loss: float, lr: float) -> None:
        self.rows.append((epoch, split, loss, lr))
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(f"{epoch}\t{split}\t{loss:.8f}\t{lr:.6e}\n")
        log.info("%s epoch %d %s loss %.6f lr %.2e", self.stage, epoch, split, loss, lr)

    def losses(self, split: str) -> list[float]:
        return [r[2] for r in self.rows if r[1] == split]


# -- data -------------------------------------------------------------------

@dataclass
class TileData:
    ids: list[str]
    rgb: torch.Tensor       # (N, 3, H, W)
    depth: torch.Tensor     # (N, 1, H, W)
    splits: list[str]

    @classmethod
    def from_samples(cls, samples: list[SamplePair]) -> "TileData":
        return cls([s.id for s in samples],
                   torch.from_numpy(np.stack([s.rgb for s in samples])).float(),
                   torch.from_numpy(np.stack([s.depth for s in samples])).float(),
                   [s.split for s in samples])

    @classmethod
    def load(cls, data_dir) -> "TileData":
        return cls.from_samples(read_dataset(data_dir))

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]


def _batches(idx: list[int], batch_size: int, gen: torch.Generator | None) -> list[list[int]]:
    order = idx if gen is None else [idx[j] for j in torch.randperm(len(idx), generator=gen).tolist()]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _check(loss: torch.Tensor, what: str) -> torch.Tensor:
    try:
        return assert_finite(loss, what)
    except NumericalError:
        raise NumericalError(f"NaN/Inf loss during {what}") from None


def minmax_normalize(d: torch.Tensor) -> torch.Tensor:
    """Per-sample min-max scaling of (B, 1, H, W) maps to [0, 1]."""
    flat = d.flatten(1)
    lo, hi = flat.min(1).values, flat.max(1).values
    span = (hi - lo).clamp(min=1e-12)
    return ((flat - lo[:, None]) / span[:, None]).reshape(d.shape)


# -- stage 1 ----------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list[list[int]]                       # dataset indices
    provenance: dict[int, str] = field(default_factory=dict)   # index -> "fold<k>" | "full"

    def fold_of(self, i: int) -> int | None:
        for k, f in enumerate(self.folds):
            if i in f:
                return k
        return None

    def training_set(self, k: int) -> list[int]:
        return sorted(i for j, f in enumerate(self.folds) if j != k for i in f)

    def to_json(self) -> str:
        return json.dumps({"folds": self.folds, "provenance": {str(k): v for k, v in sorted(self.provenance.items())}},
                          indent=1)


def make_fold_plan(train_idx: list[int], K: int, seed: int) -> FoldPlan:
    if len(train_idx) < K:
        raise ValueError(f"{len(train_idx)} training samples is fewer than {K} folds")
    gen = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(train_idx), generator=gen).tolist()
    shuffled = [train_idx[j] for j in perm]
    return FoldPlan([sorted(shuffled[k::K]) for k in range(K)])


def train_coarse(data: TileData, train_idx: list[int], val_idx: list[int], vit: ViTConfig,
                 cfg: RunConfig, seed: int, log_path: Path | None = None, stage: str = "stage1"
                 ) -> tuple[CoarseDepthNet, float, TrainLog]:
    s1, tc = cfg.train.stage1, cfg.train
    torch.manual_seed(seed)
    model = CoarseDepthNet(vit)
    opt = torch.optim.AdamW(model.parameters(), lr=s1.lr, betas=(0.9, 0.999), weight_decay=s1.weight_decay)
    sched = PlateauScheduler(s1.lr, s1.plateau_factor, s1.patience)
    gen = torch.Generator().manual_seed(seed)
    ctx_cache: dict[int, ContextSet] = {}

    def ctxs(idx):
        for i in idx:
            if i not in ctx_cache:
                ctx_cache[i] = build_contexts(data.depth[i, 0].numpy(), cfg.hdn)
        return [ctx_cache[i] for i in idx]

    tlog = TrainLog(log_path, stage)
    best, best_state = float("inf"), None
    for epoch in range(1, s1.epochs + 1):
        model.train()
        total, n = 0.0, 0
        for b in _batches(train_idx, tc.batch_size, gen):
            pred = model(data.rgb[b])
            loss = _check(hdn_loss(pred, data.depth[b], ctxs(b), cfg.hdn.mad_floor), stage)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            n += len(b)
        tlog.add(epoch, "train", total / n, sched.lr)
        val = _eval_coarse(model, data, val_idx or train_idx, ctxs, cfg)
        tlog.add(epoch, "val", val, sched.lr)
        if val < best:
            best, best_state = val, {k: v.clone() for k, v in model.state_dict().items()}
        _set_lr(opt, sched.step(val))
    model.load_state_dict(best_state)
    model.eval()
    return model, best, tlog


def _eval_coarse(model, data, idx, ctxs, cfg) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for b in _batches(idx, cfg.train.batch_size, None):
            total += hdn_loss(model(data.rgb[b]), data.depth[b], ctxs(b), cfg.hdn.mad_floor).item() * len(b)
    return total / len(idx)


def predict_maps(model: CoarseDepthNet, rgb: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """Coarse maps, min-max normalized per tile."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, rgb.shape[0], batch_size):
            out.append(minmax_normalize(model(rgb[i:i + batch_size])))
    return torch.cat(out) if out else rgb.new_zeros(0, 1, *rgb.shape[-2:])


def _model_meta(kind: str, config, **extra) -> dict[str, str]:
    meta = {"kind": kind, "config": json.dumps(to_dict(config), sort_keys=True)}
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


@dataclass
class Stage1Result:
    model: CoarseDepthNet
    plan: FoldPlan
    coarse: torch.Tensor              # (N, 1, H, W), every sample
    fold_counts: list[int]


def train_stage1(data: TileData, cfg: RunConfig, out_dir=None) -> Stage1Result:
    out = Path(out_dir) if out_dir is not None else None
    seed = cfg.train.seed
    train_idx, val_idx = data.indices("train"), data.indices("val")
    plan = make_fold_plan(train_idx, cfg.train.folds, seed)
    coarse = torch.zeros_like(data.depth)
    counts = []
    for k, held in enumerate(plan.folds):
        t0 = time.time()
        model, best, _ = train_coarse(data, plan.training_set(k), val_idx, cfg.vit, cfg, seed + 1 + k,
                                      out / f"fold{k}_log.tsv" if out else None, f"stage1/fold{k}")
        coarse[held] = predict_maps(model, data.rgb[held])
        for i in held:
            plan.provenance[i] = f"fold{k}"
        counts.append(len(held))
        if out:
            persistence.save(model, _model_meta("coarse", cfg.vit, fold=k, seed=seed + 1 + k, best_val=repr(best)),
                             out / f"fold{k}.d3ck")
        log.info("fold %d done in %.1fs (best val %.5f)", k, time.time() - t0, best)

    full, best, _ = train_coarse(data, train_idx, val_idx, cfg.vit, cfg, seed,
                                 out / "full_log.tsv" if out else None, "stage1/full")
    rest = [i for i in range(len(data.ids)) if i not in plan.provenance]
    if rest:
        coarse[rest] = predict_maps(full, data.rgb[rest])
    for i in rest:
        plan.provenance[i] = "full"
    if out:
        persistence.save(full, _model_meta("coarse", cfg.vit, seed=seed, best_val=repr(best)), out / "coarse.d3ck")
        write_coarse_maps(out, data, coarse, plan)
    return Stage1Result(full, plan, coarse, counts)


def write_coarse_maps(out: Path, data: TileData, coarse: torch.Tensor, plan: FoldPlan) -> None:
    (out / "coarse").mkdir(parents=True, exist_ok=True)
    lines = ["id\tcoarse_path\tsplit\tsource"]
    for i, sid in enumerate(data.ids):
        rel = f"coarse/{sid}.pgm"
        write_pgm(out / rel, coarse[i, 0].numpy())
        lines.append(f"{sid}\t{rel}\t{data.splits[i]}\t{plan.provenance[i]}")
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n")
    (out / "fold_plan.json").write_text(plan.to_json() + "\n")


def read_coarse_maps(coarse_dir, data: TileData) -> torch.Tensor:
    coarse_dir = Path(coarse_dir)
    path = coarse_dir / "manifest.tsv"
    if not path.is_file():
        raise FileNotFoundError(f"missing coarse manifest {path}")
    rows = [l.split("\t") for l in path.read_text().splitlines()[1:] if l]
    by_id = {r[0]: r[1] for r in rows}
    missing = [sid for sid, sp in zip(data.ids, data.splits) if sid not in by_id]
    if missing:
        raise ValueError(f"missing coarse maps for {len(missing)} samples, e.g. {missing[:3]}")
    return torch.from_numpy(np.stack([read_pgm(coarse_dir / by_id[sid])[None] for sid in data.ids])).float()


# -- codec ------------------------------------------------------------------

def train_vae(data: TileData, ccfg: CodecConfig, cfg: RunConfig, log_path: Path | None = None,
              idx: list[int] | None = None) -> tuple[Codec, TrainLog]:
    """Joint rgb + replicated-depth VAE training; identity codecs return at once."""
    seed = cfg.train.seed
    torch.manual_seed(seed)
    codec = Codec(ccfg)
    tlog = TrainLog(log_path, "vae")
    if ccfg.mode == "identity":
        return codec, tlog
    idx = data.indices("train") if idx is None else idx
    if not idx:
        raise ValueError("train_vae: empty dataset")
    images = torch.cat([data.rgb[idx], data.depth[idx].expand(-1, 3, -1, -1)])
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.train.vae_lr)
    gen = torch.Generator().manual_seed(seed)
    noise_gen = torch.Generator().manual_seed(seed + 7)
    for epoch in range(1, cfg.train.vae_epochs + 1):
        codec.train()
        total, n = 0.0, 0
        for b in _batches(list(range(images.shape[0])), cfg.train.batch_size, gen):
            loss, _, _ = vae_loss(codec, images[b], noise_gen)
            _check(loss, "vae training")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            n += len(b)
        tlog.add(epoch, "train", total / n, cfg.train.vae_lr)
    codec.eval()
    return codec, tlog


def encode_batched(codec: Codec, x: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([codec.encode(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])


# -- stage 2 ----------------------------------------------------------------

@dataclass
class Triples:
    z0: torch.Tensor
    zc: torch.Tensor
    zx: torch.Tensor

    def __len__(self) -> int:
        return self.z0.shape[0]


def build_triples(codec: Codec, rgb: torch.Tensor, depth: torch.Tensor, coarse: torch.Tensor) -> Triples:
    codec.eval()
    return Triples(encode_batched(codec, depth), encode_batched(codec, coarse), encode_batched(codec, rgb))


def refiner_val_loss(model: RefinerUNet, trip: Triples, sched: PlbrSchedule, batch_size: int) -> float:
    """Mean L1 over every sample and every t in 1..T-1 (deterministic)."""
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for t in range(1, sched.T):
            for i in range(0, len(trip), batch_size):
                sl = slice(i, i + batch_size)
                zt = forward_blend(trip.z0[sl], trip.zc[sl], t, sched)
                err = (model(trip.zx[sl], zt, t) - trip.z0[sl]).abs().mean()
                total += err.item() * zt.shape[0]
                n += zt.shape[0]
    return total / n


def train_refiner(train: Triples, val: Triples | None, sched: PlbrSchedule, ucfg: UNetConfig,
                  cfg: RunConfig, log_path: Path | None = None, seed: int | None = None
                  ) -> tuple[RefinerUNet, float, TrainLog]:
    if len(train) == 0:
        raise ValueError("train_refiner: empty sample set")
    s2, tc = cfg.train.stage2, cfg.train
    seed = tc.seed if seed is None else seed
    torch.manual_seed(seed)
    model = RefinerUNet(train.z0.shape[1], ucfg)
    opt = torch.optim.AdamW(model.parameters(), lr=s2.lr, betas=(0.9, 0.999), weight_decay=s2.weight_decay)
    plateau = PlateauScheduler(s2.lr, s2.plateau_factor, s2.patience)
    gen = torch.Generator().manual_seed(seed)
    tlog = TrainLog(log_path, f"stage2/T{sched.T}")
    val = val if val is not None and len(val) else train
    best, best_state = float("inf"), None
    for epoch in range(1, s2.epochs + 1):
        model.train()
        total, n = 0.0, 0
        for b in _batches(list(range(len(train))), tc.batch_size, gen):
            t = torch.randint(1, sched.T, (len(b),), generator=gen)
            zt = forward_blend(train.z0[b], train.zc[b], t, sched)
            loss = _check((model(train.zx[b], zt, t) - train.z0[b]).abs().mean(), "refiner training")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            n += len(b)
        tlog.add(epoch, "train", total / n, plateau.lr)
        v = refiner_val_loss(model, val, sched, tc.batch_size)
        tlog.add(epoch, "val", v, plateau.lr)
        if v < best:
            best, best_state = v, {k: x.clone() for k, x in model.state_dict().items()}
        _set_lr(opt, plateau.step(v))
    model.load_state_dict(best_state)
    model.eval()
    return model, best, tlog


def train_stage2(coarse: torch.Tensor, data: TileData, codec: Codec, cfg: RunConfig, out_dir=None,
                 T: int | None = None) -> tuple[RefinerUNet, float]:
    T = cfg.train.T if T is None else T
    sched = make_schedule(T, cfg.train.epsilon)
    tr, va = data.indices("train"), data.indices("val")
    if coarse.shape[0] != len(data.ids):
        raise ValueError(f"missing coarse maps: {coarse.shape[0]} for {len(data.ids)} samples")
    train = build_triples(codec, data.rgb[tr], data.depth[tr], coarse[tr])
    val = build_triples(codec, data.rgb[va], data.depth[va], coarse[va]) if va else None
    out = Path(out_dir) if out_dir is not None else None
    model, best, _ = train_refiner(train, val, sched, cfg.unet, cfg,
                                   out / f"refiner_T{T}_log.tsv" if out else None)
    if out:
        meta = _model_meta("refiner", cfg.unet, latent_channels=codec.latent_channels, T=T,
                           epsilon=repr(cfg.train.epsilon), best_val=repr(best), seed=cfg.train.seed)
        persistence.save(model, meta, out / f"refiner_T{T}.d3ck")
    return model, best


# -- inference and evaluation -------------------------------------------------

def refine_depth(codec: Codec, refiner: RefinerUNet, rgb: torch.Tensor, coarse: torch.Tensor,
                 sched: PlbrSchedule, on_step: Callable[[int, torch.Tensor, torch.Tensor], None] | None = None
                 ) -> torch.Tensor:
    """(B,3,H,W) rgb + (B,1,H,W) normalized coarse -> (B,1,H,W) refined depth."""
    codec.eval()
    refiner.eval()
    with torch.no_grad():
        zx, zc = codec.encode(rgb), codec.encode(coarse)
        z = refine(zc, zx, refiner, sched, on_step)
        return codec.decode_depth(z)


def evaluate(data: TileData, idx: list[int], coarse: torch.Tensor, refined: torch.Tensor | None = None,
             alignment: str = "median") -> list[tuple[str, MetricReport]]:
    gt = data.depth[idx, 0].numpy()
    rows = []
    train_mean = float(data.depth[data.indices("train")].mean()) if data.indices("train") else 0.5
    const = [compute(np.full_like(g, train_mean), g, alignment) for g in gt]
    rows.append(("global_mean", mean_report(const)))
    rows.append(("coarse", mean_report([compute(c, g, alignment) for c, g in zip(coarse[:, 0].numpy(), gt)])))
    if refined is not None:
        rows.append(("refined", mean_report([compute(r, g, alignment) for r, g in zip(refined[:, 0].numpy(), gt)])))
    return rows


def refine_all(codec: Codec, refiner: RefinerUNet, rgb: torch.Tensor, coarse: torch.Tensor,
               sched: PlbrSchedule, batch_size: int = 16) -> torch.Tensor:
    return torch.cat([refine_depth(codec, refiner, rgb[i:i + batch_size], coarse[i:i + batch_size], sched)
                      for i in range(0, rgb.shape[0], batch_size)])


@dataclass
class PipelineResult:
    rows: list[tuple[str, MetricReport]]
    stage1: Stage1Result
    codec: Codec
    refiner: RefinerUNet
    refined: torch.Tensor
    test_idx: list[int]


def run_pipeline(cfg: RunConfig, data: TileData, out_dir) -> PipelineResult:
    """VAE -> stage 1 -> stage 2 -> test metrics; writes ``metrics.tsv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "run_config.json")
    t0 = time.time()
    codec, _ = train_vae(data, cfg.codec, cfg, out / "vae_log.tsv")
    persistence.save(codec, _model_meta("codec", cfg.codec, mode=cfg.codec.mode), out / "codec.d3ck")
    log.info("codec ready after %.1fs", time.time() - t0)
    s1 = train_stage1(data, cfg, out / "stage1")
    log.info("stage 1 done after %.1fs", time.time() - t0)
    refiner, _ = train_stage2(s1.coarse, data, codec, cfg, out)
    log.info("stage 2 done after %.1fs", time.time() - t0)
    test = data.indices("test")
    sched = make_schedule(cfg.train.T, cfg.train.epsilon)
    refined = refine_all(codec, refiner, data.rgb[test], s1.coarse[test], sched)
    rows = evaluate(data, test, s1.coarse[test], refined)
    (out / "metrics.tsv").write_text(to_tsv(rows))
    return PipelineResult(rows, s1, codec, refiner, refined, test)


ABLATION_COLUMNS = ("mode", "T", "mae", "rmse", "delta3", "psnr", "hf_proxy")


def run_ablation(T_values: list[int], modes: list[str], data: TileData, cfg: RunConfig, out_dir,
                 stage1: Stage1Result | None = None) -> str:
    """One refiner per (mode, T); returns the TSV text (also written to ablation.tsv)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s1 = stage1 or train_stage1(data, cfg, out / "stage1")
    test = data.indices("test")
    lines = ["\t".join(ABLATION_COLUMNS)]
    for mode in modes:
        ccfg = CodecConfig(**{**to_dict(cfg.codec), "mode": mode})
        codec, _ = train_vae(data, ccfg, cfg, out / f"vae_{mode}_log.tsv")
        for T in T_values:
            sched = make_schedule(T, cfg.train.epsilon)
            refiner, _ = train_stage2(s1.coarse, data, codec, cfg, out / mode, T=T)
            refined = refine_all(codec, refiner, data.rgb[test], s1.coarse[test], sched)
            rep = mean_report([compute(r, g, "median") for r, g in
                               zip(refined[:, 0].numpy(), data.depth[test, 0].numpy())])
            lines.append("\t".join([mode, str(T)] + [f"{getattr(rep, c):.6f}" for c in ABLATION_COLUMNS[2:]]))
    text = "\n".join(lines) + "\n"
    (out / "ablation.tsv").write_text(text)
    return text
