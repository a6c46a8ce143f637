"""Pretraining, two-stage training and evaluation drivers.

Run directory layout (``--out``)::

    data/                      dataset written by ``generate``
    pretrain/fold{f}/mae.smae  sparse MAE checkpoint + history.json
    train/fold{f}/model.dswm   selected forecaster + history.json
    eval/                      predictions_fold{f}.csv, report.json, *.png

Every directory also receives ``config.txt`` and ``VERSION``.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt
from . import metrics
from . import tensor_engine as te
from .config import CLASSES, RunConfig
from .data.augment import augment
from .data.io import FlareDataset, FoldArrays
from .data.sampling import crt_resample
from .errors import DataError, MetricUndefined, NumericalError
from .head import DeepSWM
from .losses import one_hot, total_loss
from .mae import SparseMAE, mask_counts, two_phase_mask

MAE_MAGIC = b"SMAE"
MODEL_MAGIC = b"DSWM"

log = logging.getLogger("flare_ssm")


# --- logging & artifacts -------------------------------------------------------

class JsonLines(logging.Formatter):
    def format(self, record):
        payload = {"t": round(record.created, 3), "level": record.levelname.lower(), "event": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, default=_jsonable)


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def setup_logging(path: Path | None = None, level=logging.INFO, stream=None):
    for h in log.handlers:
        h.close()
    log.handlers.clear()
    log.setLevel(level)
    log.propagate = False
    handlers = [logging.StreamHandler(stream or sys.stderr)]
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(path, encoding="utf-8"))
    for h in handlers:
        h.setFormatter(JsonLines())
        log.addHandler(h)


def event(name: str, level=logging.INFO, **fields):
    log.log(level, name, extra={"fields": fields})


def prepare_dir(path, cfg: RunConfig) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    (path / "VERSION").write_text(__version__ + "\n", encoding="utf-8")
    return path


def run_paths(cfg: RunConfig, fold: int) -> dict[str, Path]:
    root = Path(cfg.out)
    return {
        "data": root / "data",
        "pretrain": root / "pretrain" / f"fold{fold}",
        "train": root / "train" / f"fold{fold}",
        "eval": root / "eval",
    }


# --- optimizer ------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay, applied before the moment update."""

    def __init__(self, params, lr, betas=(0.9, 0.95), weight_decay=0.0, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.weight_decay, self.eps = lr, betas, weight_decay, eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            p.mul_(1 - self.lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(self.eps), value=-self.lr)


def _check_finite(loss, where: dict, model, out_dir: Path | None):
    if torch.isfinite(loss):
        return
    diag = dict(where, loss=float(loss.detach()), param_norms={
        n: float(p.detach().norm()) for n, p in model.named_parameters()})
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "diagnostics.json").write_text(json.dumps(diag, indent=1), encoding="utf-8")
    event("nan_loss", **where)
    raise NumericalError(f"non-finite loss {float(loss.detach())} at {where}; diagnostics in {out_dir}")


# --- sparse MAE pretraining -----------------------------------------------------

def mae_hours(fa: FoldArrays, m: int, which=("train", "val")) -> np.ndarray:
    """Hourly frames inside the long-term windows of the given splits."""
    hours = np.zeros(fa.frames.shape[0], dtype=bool)
    for split in which:
        for t in fa.timestamps[getattr(fa.fold, split)]:
            hours[max(t - m + 1, 0) : t + 1] = True
    return np.flatnonzero(hours)


def _plans(frames, cfg, seed):
    return [two_phase_mask(f, cfg, np.random.default_rng([*seed, i])) for i, f in enumerate(frames)]


@torch.no_grad()
def mae_eval_mse(model: SparseMAE, frames: np.ndarray, seed: int, batch: int = 128) -> float:
    """Masked MSE under masks fixed by ``seed`` (reproducible validation score)."""
    model.eval()
    total, n = 0.0, 0
    for a in range(0, len(frames), batch):
        v = frames[a : a + batch]
        plans = _plans(v, model.cfg, (seed, 10_000_019, a))
        _, loss = model.step(torch.from_numpy(v), plans)
        total += float(loss) * len(v)
        n += len(v)
    return total / max(n, 1)


@dataclass
class PretrainResult:
    path: Path
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = math.inf


def pretrain(cfg: RunConfig, fa: FoldArrays, out_dir, seed: int | None = None,
             max_frames: int | None = None) -> PretrainResult:
    seed = cfg.seed if seed is None else seed
    out = prepare_dir(out_dir, cfg)
    mc = cfg.mae
    te.set_deterministic(seed)
    model = SparseMAE(mc)
    hours = mae_hours(fa, mc.history)
    if max_frames is not None:
        hours = hours[:max_frames]
    val_hours = fa.timestamps[fa.fold.val]
    train_frames, val_frames = fa.frames[hours], fa.frames[val_hours]
    counts = mask_counts(mc.grid[0] * mc.grid[1], mc)
    event("pretrain_start", frames=len(hours), val_frames=len(val_hours), mask_closed_form=counts)
    opt = AdamW(model.parameters(), mc.lr, (cfg.train.beta1, cfg.train.beta2), mc.weight_decay)
    rng = np.random.default_rng([seed, 1])
    res = PretrainResult(out / "mae.smae")
    for epoch in range(1, mc.epochs + 1):
        model.train()
        t0 = time.time()
        order = rng.permutation(len(hours))
        total, n, observed = 0.0, 0, {"spatial_masked": 0, "feature_masked": 0, "images": 0}
        for a in range(0, len(order), mc.batch_size):
            idx = order[a : a + mc.batch_size]
            v = train_frames[idx]
            plans = _plans(v, mc, (seed, epoch, a))
            for p in plans:
                observed["spatial_masked"] += p.spatial_masked_ids.size
                observed["feature_masked"] += p.feature_masked_ids.size
            observed["images"] += len(plans)
            _, loss = model.step(torch.from_numpy(v), plans)
            _check_finite(loss, {"stage": "pretrain", "epoch": epoch, "batch": a}, model, out)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
            opt.step()
            total += float(loss.detach()) * len(idx)
            n += len(idx)
        val = mae_eval_mse(model, val_frames, seed)
        rec = {"epoch": epoch, "masked_mse": total / n, "val_masked_mse": val,
               "mask_per_image": {k: observed[k] / observed["images"] for k in ("spatial_masked", "feature_masked")},
               "seconds": round(time.time() - t0, 2)}
        res.history.append(rec)
        event("pretrain_epoch", **rec)
        if val < res.best_val_mse:
            res.best_val_mse, res.best_epoch = val, epoch
            ckpt.save_module(res.path, model, MAE_MAGIC, {"epoch": epoch, "val_masked_mse": val,
                                                          "seed": seed, "version": __version__})
    (out / "history.json").write_text(json.dumps(
        {"history": res.history, "best_epoch": res.best_epoch, "best_val_masked_mse": res.best_val_mse,
         "mask_closed_form": counts}, indent=1), encoding="utf-8")
    return res


# --- forecaster training --------------------------------------------------------

def class_marginals(labels, n_classes: int = len(CLASSES)) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes) / len(labels)


def loss_marginals(labels) -> tuple[np.ndarray, bool]:
    """Training marginals for the scoring matrix; add-one smoothed if any class is absent."""
    p = class_marginals(labels)
    try:
        metrics.scoring_matrix(p)
        return p, False
    except MetricUndefined:
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=len(CLASSES)) + 1.0
        return counts / counts.sum(), True


@torch.no_grad()
def frame_features(model: SparseMAE, frames: np.ndarray, chunk: int = 256) -> torch.Tensor:
    model.eval()
    return torch.cat([model.encode(torch.from_numpy(np.ascontiguousarray(frames[a : a + chunk])))
                      for a in range(0, len(frames), chunk)])


class Batcher:
    """Builds model inputs for sample indices of one fold."""

    def __init__(self, cfg: RunConfig, fa: FoldArrays, feats: torch.Tensor | None):
        self.cfg, self.fa, self.feats = cfg, fa, feats
        self.offsets = np.arange(-cfg.data.lt_history + 1, 1)

    def inputs(self, idx, aug_seed=None):
        x = self.fa.images[idx]
        if aug_seed is not None and self.cfg.train.augment > 0:
            x = np.stack([augment(x[j], (*aug_seed, int(i)), self.cfg.train.augment, self.fa.images_missing[i])
                          for j, i in enumerate(idx)])
        hours = self.fa.timestamps[idx][:, None] + self.offsets
        if self.cfg.mae.finetune:
            return torch.from_numpy(x), None, torch.from_numpy(self.fa.frames[hours])
        return torch.from_numpy(x), self.feats[torch.from_numpy(hours)], None

    def targets(self, idx):
        return one_hot(self.fa.labels[idx])


@torch.no_grad()
def predict(model: DeepSWM, batcher: Batcher, idx, batch: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for a in range(0, len(idx), batch):
        x, h_pre, x_pre = batcher.inputs(idx[a : a + batch])
        out.append(model(x, h_pre, x_pre).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, len(CLASSES)))


def _score(labels, probs, fallback) -> dict:
    return metrics.evaluate(labels, probs, fallback)


@dataclass
class TrainResult:
    path: Path
    history: list = field(default_factory=list)
    best: dict = field(default_factory=dict)


def build_model(cfg: RunConfig, mae_path=None) -> DeepSWM:
    model = DeepSWM(cfg, with_mae=True)
    if mae_path is not None:
        ckpt.load_module(mae_path, model.mae, MAE_MAGIC)
    return model


def _set_trainable(model: DeepSWM, stage: int, cfg: RunConfig):
    for p in model.parameters():
        p.requires_grad_(True)
    if not cfg.mae.finetune:
        for p in model.mae.parameters():
            p.requires_grad_(False)
    if stage == 2 and cfg.train.crt_scope == "head":
        for mod in (model.sse, model.lt, model.mae):
            for p in mod.parameters():
                p.requires_grad_(False)


def train(cfg: RunConfig, fa: FoldArrays, out_dir, mae_path=None, seed: int | None = None) -> TrainResult:
    seed = cfg.seed if seed is None else seed
    out = prepare_dir(out_dir, cfg)
    tc = cfg.train
    te.set_deterministic(seed)
    model = build_model(cfg, mae_path)
    feats = None if cfg.mae.finetune else frame_features(model.mae, fa.frames)
    batcher = Batcher(cfg, fa, feats)
    train_idx, val_idx = fa.fold.train, fa.fold.val
    y_train = fa.labels[train_idx]
    marg, smoothed = loss_marginals(y_train)
    S = torch.tensor(metrics.scoring_matrix(marg).s, dtype=torch.float32)
    event("train_start", fold=fa.fold.index, n_train=len(train_idx), n_val=len(val_idx),
          train_classes=np.bincount(y_train, minlength=4), loss_marginals=marg, smoothed=smoothed)
    res = TrainResult(out / "model.dswm")
    rng = np.random.default_rng([seed, 2])
    best_state, best_gmgs = None, -math.inf

    def validate(stage, epoch, train_loss, extra=None):
        nonlocal best_state, best_gmgs
        rep = _score(fa.labels[val_idx], predict(model, batcher, val_idx), marg)
        rec = {"stage": stage, "epoch": epoch, "train_loss": train_loss, "val_gmgs": rep["gmgs"],
               "val_gmgs_marginals": rep["gmgs_marginals"], "val_tss_geq_m": rep["tss_geq_m"],
               "val_bss_geq_m": rep["bss_geq_m"]}
        rec.update(extra or {})
        res.history.append(rec)
        event("train_epoch", **rec)
        if rep["gmgs"] > best_gmgs:
            best_gmgs = rep["gmgs"]
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            res.best = {"stage": stage, "epoch": epoch, "val_gmgs": rep["gmgs"]}

    def run_epoch(stage, order, opt, step_fn):
        total, n = 0.0, 0
        model.train()
        for a in range(0, len(order), tc.batch_size):
            idx = order[a : a + tc.batch_size]
            p = step_fn(idx, a)
            loss = total_loss(p, batcher.targets(idx), S, cfg.loss)
            _check_finite(loss, {"stage": stage, "batch": a, "timestamps": fa.timestamps[idx].tolist()}, model, out)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(opt.params, tc.grad_clip)
            opt.step()
            total += float(loss.detach()) * len(idx)
            n += len(idx)
        return total / max(n, 1)

    # stage 1: natural class distribution, augmented inputs
    _set_trainable(model, 1, cfg)
    opt = AdamW(model.parameters(), tc.lr_stage1, (tc.beta1, tc.beta2), tc.weight_decay_stage1)
    for epoch in range(1, tc.epochs_stage1 + 1):
        order = train_idx[rng.permutation(len(train_idx))]

        def step1(idx, a, epoch=epoch):
            x, h_pre, x_pre = batcher.inputs(idx, aug_seed=(seed, epoch))
            return model(x, h_pre, x_pre)

        validate(1, epoch, run_epoch(1, order, opt, step1))

    # stage 2: classifier re-training on class-balanced epochs
    if tc.epochs_stage2 > 0:
        if best_state is not None:
            model.load_state_dict(best_state)
        if tc.crt_reinit:
            model.head.reset_classifier()
        _set_trainable(model, 2, cfg)
        cached = None
        if tc.crt_scope == "head":
            with torch.no_grad():
                model.eval()
                cached = torch.cat([model.backbone(*batcher.inputs(train_idx[a : a + 64]))
                                    for a in range(0, len(train_idx), 64)])
        pos = {int(i): j for j, i in enumerate(train_idx)}
        opt = AdamW(model.parameters(), tc.lr_stage2, (tc.beta1, tc.beta2), tc.weight_decay_stage2)
        present = np.unique(y_train)
        for epoch in range(1, tc.epochs_stage2 + 1):
            ep_seed = [seed, 3, epoch]
            if present.size == len(CLASSES):
                local = crt_resample(y_train, ep_seed, tc.crt_per_class or None)
            else:
                # classes absent from training cannot be drawn; balance over the rest
                local = crt_resample(np.searchsorted(present, y_train), ep_seed, tc.crt_per_class or None,
                                     n_classes=present.size)
            order = train_idx[local]
            hist = np.bincount(fa.labels[order], minlength=4)

            def step2(idx, a, epoch=epoch):
                if cached is not None:
                    z = cached[torch.as_tensor([pos[int(i)] for i in idx])]
                    return te.softmax(model.head.logits(z), dim=-1)
                x, h_pre, x_pre = batcher.inputs(idx, aug_seed=(seed, 100 + epoch))
                return model(x, h_pre, x_pre)

            validate(2, epoch, run_epoch(2, order, opt, step2), {"epoch_class_counts": hist.tolist()})

    if best_state is None:
        best_state = model.state_dict()
        res.best = {"stage": 0, "epoch": 0, "val_gmgs": None}
    model.load_state_dict(best_state)
    ckpt.save_module(res.path, model, MODEL_MAGIC, {
        **res.best, "fold": fa.fold.index, "seed": seed, "version": __version__,
        "loss_marginals": marg.tolist(), "mae_checkpoint": str(mae_path) if mae_path else None})
    (out / "history.json").write_text(json.dumps(
        {"history": res.history, "best": res.best, "loss_marginals": marg.tolist()}, indent=1,
        default=_jsonable), encoding="utf-8")
    return res


# --- evaluation -----------------------------------------------------------------

def load_model(cfg: RunConfig, path) -> tuple[DeepSWM, dict]:
    model = DeepSWM(cfg, with_mae=True)
    meta = ckpt.load_module(path, model, MODEL_MAGIC)
    return model, meta


def evaluate_fold(cfg: RunConfig, fa: FoldArrays, model_path, out_dir, split: str = "test") -> dict:
    model, meta = load_model(cfg, model_path)
    feats = None if cfg.mae.finetune else frame_features(model.mae, fa.frames)
    batcher = Batcher(cfg, fa, feats)
    idx = getattr(fa.fold, split)
    if idx.size == 0:
        raise DataError(f"fold {fa.fold.index} has an empty {split} split")
    probs = predict(model, batcher, idx)
    labels = fa.labels[idx]
    out = Path(out_dir)
    pred_path = out / f"predictions_fold{fa.fold.index}.csv"
    metrics.write_predictions(pred_path, fa.timestamps[idx], probs, labels)
    fallback = np.asarray(meta.get("loss_marginals") or loss_marginals(fa.labels[fa.fold.train])[0])
    rep = metrics.metrics_from_file(pred_path, fallback)
    rep.update({"fold": fa.fold.index, "split": split, "predictions": pred_path.name,
                "checkpoint": str(model_path), "selected": {k: meta.get(k) for k in ("stage", "epoch", "val_gmgs")},
                "fallback_marginals": fallback.tolist()})
    return rep


SUMMARY_KEYS = ("gmgs", "bss_geq_m", "tss_geq_m")


def summarize(reports: list[dict]) -> dict:
    out = {}
    for key in SUMMARY_KEYS:
        vals = [r[key] for r in reports if r.get(key) is not None]
        out[key] = {"mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None, "n": len(vals)}
    return out


def load_fold(cfg: RunConfig, fold: int) -> FoldArrays:
    return FlareDataset(run_paths(cfg, fold)["data"]).fold_arrays(fold)
