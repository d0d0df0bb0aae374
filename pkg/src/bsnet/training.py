"""Staged training: segmentation -> alignment -> scoring -> full fine-tuning.

Each stage starts from the previous stage's checkpoint (checked through its
stage tag), optimises only the parameter groups it owns, and returns the
best-validation checkpoint together with a per-epoch history.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from . import imaging, losses, synthcxr
from .network import BSNet, ModelConfig, align_features, predict_score, roi_pool
from .optim import Adam, PlateauHalver
from .tensor import ContractError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

STAGES = ("segmentation", "alignment", "scoring", "finetune")
PREREQUISITE = {"alignment": "segmentation", "scoring": "alignment", "finetune": "scoring"}
BASE_LR = 3e-2


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    stage: str = "segmentation"
    epochs: int = 40
    batch_size: int = 8
    lr_scale: float = 0.1
    plateau_patience: int = 5
    lr_factor: float = 0.5
    seed: int = 0
    alpha: float = 0.7
    beta: float = 10.0
    input_size: int = 128
    mode: str = "ha"
    augment: str = "all"
    preprocess: bool = True
    lr: float | None = None
    finetune_factor: float = 0.1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}")
        for name in ("epochs", "batch_size", "plateau_patience", "input_size"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if not 0 <= self.alpha <= 1:
            raise ContractError("alpha must lie in [0, 1]")
        if self.beta <= 0 or self.lr_scale <= 0 or self.finetune_factor <= 0:
            raise ContractError("beta, lr_scale and finetune_factor must be positive")

    @property
    def learning_rate(self) -> float:
        lr = self.lr if self.lr is not None else BASE_LR * self.lr_scale
        # every weight moves in the last stage: start gentler than the head-only stage
        return lr * self.finetune_factor if self.stage == "finetune" else lr


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: dict
    stage: str
    train_config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return h.hexdigest()


def model_state(model: BSNet) -> dict[str, np.ndarray]:
    return {name: p.data.astype(np.float32).copy() for name, p in model.named_parameters()}


def snapshot(model: BSNet, stage: str, cfg: TrainConfig | None = None, history=None) -> Checkpoint:
    return Checkpoint(model_state(model), model.config.to_dict(), stage, asdict(cfg) if cfg else {}, list(history or []))


def build_model(ckpt: Checkpoint) -> BSNet:
    model = BSNet(ModelConfig.from_dict(ckpt.model_config))
    load_state(model, ckpt.params)
    return model


def load_state(model: BSNet, params: dict[str, np.ndarray]) -> None:
    named = dict(model.named_parameters())
    missing = set(named) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in named.items():
        arr = params[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape} != model {p.shape}")
        p.data[...] = arr


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """Write ``manifest.json`` plus a raw little-endian float32 ``params.bin``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(d / "params.bin", "wb") as fh:
        for name, arr in ckpt.params.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "stage": ckpt.stage,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "history": ckpt.history,
        "params": entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{d}: unreadable manifest ({exc})") from exc
    blob = (d / "params.bin").read_bytes() if (d / "params.bin").exists() else b""
    params, seen, expected_offset = {}, set(), 0
    for e in manifest.get("params", []):
        name = e.get("name", "?")
        if name in seen:
            raise CheckpointError(f"manifest lists parameter {name} twice")
        seen.add(name)
        if e.get("dtype") != "f32":
            raise CheckpointError(f"parameter {name}: unsupported dtype {e.get('dtype')}")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["nbytes"] != 4 * count or e["offset"] != expected_offset:
            raise CheckpointError(f"parameter {name}: inconsistent offset/length in manifest")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"parameter {name}: blob truncated ({len(blob)} bytes, entry needs {end})")
        params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
        expected_offset = end
    if expected_offset != len(blob):
        raise CheckpointError(f"{d}: blob has {len(blob) - expected_offset} trailing bytes")
    return Checkpoint(params, manifest["model_config"], manifest["stage"], manifest.get("train_config", {}), manifest.get("history", []))


def require_stage(ckpt: Checkpoint | None, stage: str) -> None:
    need = PREREQUISITE[stage]
    if ckpt is None:
        raise ContractError(f"stage {stage!r} needs a {need!r} checkpoint")
    if STAGES.index(ckpt.stage) < STAGES.index(need):
        raise ContractError(f"stage {stage!r} needs a {need!r} checkpoint, got {ckpt.stage!r}")


def group_digest(model: BSNet, groups) -> str:
    h = hashlib.sha256()
    owned = model.groups()
    for g in groups:
        for p in owned[g]:
            h.update(p.data.tobytes())
    return h.hexdigest()


# -- data --------------------------------------------------------------------------

@dataclass
class Arrays:
    images: np.ndarray  # (N, S, S) float32
    masks: np.ndarray  # (N, S, S) float32 binary
    scores: np.ndarray  # (N, 3, 2) int
    ids: list


def prepare(records, input_size: int, preprocess: bool = True) -> Arrays:
    if not records:
        raise ContractError("empty dataset")
    imgs, masks = [], []
    for r in records:
        img, m = r.image, r.lung_mask
        if img.shape != (input_size, input_size):
            with no_grad():
                img = F.resize(Tensor(img[None, None].astype(np.float32)), input_size, input_size).data[0, 0]
                m = (F.resize(Tensor(m[None, None].astype(np.float32)), input_size, input_size).data[0, 0] > 0.5).astype(np.float32)
        imgs.append(imaging.normalize_cxr(img) if preprocess else np.asarray(img, np.float32))
        masks.append(np.asarray(m, np.float32))
    return Arrays(np.stack(imgs).astype(np.float32), np.stack(masks), np.stack([np.asarray(r.score) for r in records]).astype(np.int64), [r.id for r in records])


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng(_seed(seed, epoch, 7)).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _augmented(data: Arrays, idx, cfg: TrainConfig, epoch: int, aug: imaging.AugmentConfig):
    imgs, masks, scores = [], [], []
    for i in idx:
        im, m, s = imaging.augment(data.images[i], data.masks[i], data.scores[i], aug, _seed(cfg.seed, epoch, int(i)))
        imgs.append(im)
        masks.append(m)
        scores.append(s)
    return np.stack(imgs)[:, None], np.stack(masks)[:, None], np.stack(scores)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    history: list
    last: Checkpoint | None = None


def _model_from(init: Checkpoint | None, cfg: TrainConfig) -> BSNet:
    if init is None:
        return BSNet(ModelConfig(input_size=cfg.input_size, seed=cfg.seed))
    model = build_model(init)
    if model.config.input_size != cfg.input_size:
        raise ContractError(f"checkpoint input size {model.config.input_size} != config {cfg.input_size}")
    return model


# -- evaluation helpers ------------------------------------------------------------

def predict_masks(model: BSNet, images: np.ndarray, batch: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            m, _ = model.segment(images[i:i + batch, None])
            out.append(m.data[:, 0])
    return np.concatenate(out)


def segmentation_scores(model: BSNet, data: Arrays) -> tuple[float, float]:
    pred = predict_masks(model, data.images)
    dice, iou = zip(*(losses.overlap_metrics(p, t) for p, t in zip(pred, data.masks)))
    return float(np.mean(dice)), float(np.mean(iou))


def predict_distributions(model: BSNet, images: np.ndarray, mode: str = "ha", use_alignment: bool = True, batch: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            res = model.forward(images[i:i + batch, None], mode, use_alignment)
            out.append(res["dist"].data.astype(np.float64))
    return np.concatenate(out)


def scoring_mae(model: BSNet, data: Arrays, mode: str, use_alignment: bool = True) -> float:
    dists = predict_distributions(model, data.images, mode, use_alignment)
    return losses.region_mae(predict_score(dists), data.scores)


def misaligned_set(data: Arrays, seed: int, epoch: int = 0):
    """Warped images, warped masks and the true params for every sample."""
    imgs, wmasks, params = [], [], []
    for i in range(len(data.images)):
        rec = synthcxr.SampleRecord(data.images[i], data.masks[i], data.scores[i])
        wi, wm, _, p = synthcxr.gen_misaligned_pair(rec, _seed(seed, epoch, i, 11))
        imgs.append(wi)
        wmasks.append((wm > 0.5).astype(np.float32))
        params.append(p)
    return np.stack(imgs), np.stack(wmasks), np.stack(params)


def realign(mask_batch: np.ndarray | Tensor, theta) -> Tensor:
    m = mask_batch if isinstance(mask_batch, Tensor) else Tensor(mask_batch)
    h, w = m.shape[-2:]
    return F.grid_sample(m, F.affine_grid(theta, h, w))


def alignment_scores(model: BSNet, data: Arrays, seed: int, batch: int = 32) -> tuple[float, float]:
    """Mean (Dice, IoU) between original masks and estimated-realigned warped masks."""
    imgs, wmasks, _ = misaligned_set(data, seed, epoch=10_000)
    dice, iou = [], []
    with no_grad():
        for i in range(0, len(imgs), batch):
            pm, _ = model.segment(imgs[i:i + batch, None])
            theta, _ = model.estimate_affine(pm)
            re = realign(wmasks[i:i + batch, None], theta).data[:, 0]
            for r, t in zip(re, data.masks[i:i + batch]):
                d, j = losses.overlap_metrics(r, t)
                dice.append(d)
                iou.append(j)
    return float(np.mean(dice)), float(np.mean(iou))


# -- stages --------------------------------------------------------------------------

def _run_stage(model, params, cfg, epochs, step_fn, val_fn, stage, frozen_groups=(), history=None):
    opt = Adam(params, lr=cfg.learning_rate)
    sched = PlateauHalver(opt, cfg.plateau_patience, cfg.lr_factor)
    history = history if history is not None else []
    frozen_ref = group_digest(model, frozen_groups) if frozen_groups else None
    best_val, best = np.inf, snapshot(model, stage, cfg)
    for epoch in range(epochs):
        train_metric = step_fn(opt, epoch)
        val = val_fn()
        if frozen_ref is not None and group_digest(model, frozen_groups) != frozen_ref:
            raise RuntimeError(f"frozen groups {frozen_groups} changed during {stage} training")
        halved = sched.update(val["monitor"])
        entry = {"epoch": epoch, "lr": opt.lr, "halved": halved, **train_metric, **{k: v for k, v in val.items() if k != "monitor"}}
        history.append(entry)
        log.info("%s epoch %d %s", stage, epoch, entry)
        if val["monitor"] < best_val:
            best_val = val["monitor"]
            best = snapshot(model, stage, cfg, history)
    best.history = list(history)
    return best, snapshot(model, stage, cfg, history), history


def train_segmentation(train: Arrays, val: Arrays, cfg: TrainConfig, init: Checkpoint | None = None) -> StageResult:
    model = _model_from(init, cfg)
    aug = imaging.AugmentConfig.policy(cfg.augment)
    params = model.backbone.parameters() + model.decoder.parameters()

    def step(opt, epoch):
        dices = []
        for idx in _batches(len(train.images), cfg.batch_size, cfg.seed, epoch):
            x, m, _ = _augmented(train, idx, cfg, epoch, aug)
            target = (m > 0.5).astype(np.float32)
            opt.zero_grad()
            pred, _ = model.segment(x)
            loss = losses.dice_loss(pred, target)
            backward(loss)
            opt.step()
            dices.extend(losses.overlap_metrics(p, t)[0] for p, t in zip(pred.data, target))
        return {"train_dice": float(np.mean(dices))}

    def validate():
        d, j = segmentation_scores(model, val)
        return {"monitor": 1 - d, "val_dice": d, "val_iou": j}

    best, last, hist = _run_stage(model, params, cfg, cfg.epochs, step, validate, "segmentation")
    return StageResult(best, hist, last)


def train_alignment(train: Arrays, val: Arrays, cfg: TrainConfig, init: Checkpoint) -> StageResult:
    require_stage(init, "alignment")
    model = _model_from(init, cfg)
    params = model.aligner.parameters()

    def step(opt, epoch):
        imgs, wmasks, _ = misaligned_set(train, cfg.seed, epoch)
        with no_grad():
            pred = predict_masks(model, imgs)
        losses_ = []
        for idx in _batches(len(imgs), cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            theta = model.aligner(Tensor(pred[idx][:, None]))
            re = realign(wmasks[idx][:, None], theta)
            loss = losses.dice_loss(re, train.masks[idx][:, None])
            backward(loss)
            opt.step()
            losses_.append(loss.item())
        return {"train_dice_loss": float(np.mean(losses_))}

    def validate():
        d, j = alignment_scores(model, val, cfg.seed)
        return {"monitor": 1 - j, "val_dice": d, "val_iou": j}

    best, last, hist = _run_stage(model, params, cfg, cfg.epochs, step, validate, "alignment",
                                  frozen_groups=("backbone", "segmentation"))
    return StageResult(best, hist, last)


def _scoring_step(model, train, cfg, aug, trainable_all: bool):
    loss_cfg = losses.LossConfig(cfg.alpha, cfg.beta)

    def step(opt, epoch):
        vals, maes = [], []
        for idx in _batches(len(train.images), cfg.batch_size, cfg.seed, epoch):
            x, _, y = _augmented(train, idx, cfg, epoch, aug)
            opt.zero_grad()
            if trainable_all:
                dist = model.forward(x, cfg.mode)["dist"]
            else:
                with no_grad():
                    mask, feats = model.segment(x)
                    theta, _ = model.estimate_affine(mask)
                    aligned, _ = align_features(feats, mask, theta, cfg.mode)
                    regions = roi_pool(aligned)
                dist = model.score(regions)
            loss = losses.composite_loss(dist, y, loss_cfg)
            backward(loss)
            opt.step()
            vals.append(loss.item())
            maes.append(losses.region_mae(predict_score(dist.data), y))
        return {"train_loss": float(np.mean(vals)), "train_mae": float(np.mean(maes))}

    return step


def train_scoring(train: Arrays, val: Arrays, cfg: TrainConfig, init: Checkpoint) -> StageResult:
    require_stage(init, "scoring")
    model = _model_from(init, cfg)
    aug = imaging.AugmentConfig.policy(cfg.augment)

    def validate():
        mae = scoring_mae(model, val, cfg.mode)
        return {"monitor": mae, "val_mae": mae}

    history = [{"epoch": -1, "val_mae": scoring_mae(model, val, cfg.mode)}]
    best, last, hist = _run_stage(model, model.head.parameters(), cfg, cfg.epochs, _scoring_step(model, train, cfg, aug, False),
                                  validate, "scoring", frozen_groups=("backbone", "segmentation", "alignment"), history=history)
    return StageResult(best, hist, last)


def finetune_all(train: Arrays, val: Arrays, cfg: TrainConfig, init: Checkpoint) -> StageResult:
    """All weights trainable; returns best-validation and last-epoch checkpoints."""
    require_stage(init, "finetune")
    model = _model_from(init, cfg)
    aug = imaging.AugmentConfig.policy(cfg.augment)

    def validate():
        mae = scoring_mae(model, val, cfg.mode)
        return {"monitor": mae, "val_mae": mae}

    start = scoring_mae(model, val, cfg.mode)
    history = [{"epoch": -1, "val_mae": start}]
    best, last, hist = _run_stage(model, model.parameters(), cfg, cfg.epochs, _scoring_step(model, train, cfg, aug, True),
                                  validate, "finetune", history=history)
    if not any(h.get("val_mae", np.inf) < start for h in hist[1:]):
        # no epoch beat the starting point: the stage-3 weights are the best model
        best = Checkpoint(dict(init.params), init.model_config, "finetune", asdict(cfg), list(hist))
    return StageResult(best, hist, last)
