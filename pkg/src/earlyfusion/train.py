"""Training loop, evaluation, pseudo-image dumps and the ablation matrix."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import augment_misaligned, augment_pair, fuse_concat, sample_aug
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import ArrayDataset, dataset_exists, load_arrays, load_manifest, synth_dataset, write_pgm
from .errors import ConfigError, DivergenceError, IoError, UsageError
from .generator import GeneratorConfig, generate_pseudo, init_generator, interpolate_pseudo
from .losses import LossWeights, dice_loss, dice_metric, iou_metric, l1_roi_loss, threshold, total_loss
from .nn import Params, cast_params, grad_norm
from .tensor import Tensor
from .unet import UNetConfig, init_unet, unet_forward

log = logging.getLogger(__name__)


class Model:
    """Generator (when text is on) plus UNet, built from a :class:`RunConfig`."""

    def __init__(self, cfg: RunConfig, gen: Params | None, unet: Params):
        self.cfg = cfg
        self.gen_cfg = GeneratorConfig(cfg.image_size, cfg.channels)
        self.unet_cfg = UNetConfig(cfg.unet_in_channels, cfg.unet_depth, cfg.unet_width, cfg.image_size)
        self.gen = gen
        self.unet = unet

    @classmethod
    def init(cls, cfg: RunConfig) -> "Model":
        dtype = np.dtype(cfg.dtype)
        gen = None
        if cfg.text:
            gen = cast_params(init_generator(GeneratorConfig(cfg.image_size, cfg.channels), cfg.seed), dtype)
        unet_cfg = UNetConfig(cfg.unet_in_channels, cfg.unet_depth, cfg.unet_width, cfg.image_size)
        return cls(cfg, gen, cast_params(init_unet(unet_cfg, cfg.seed), dtype))

    def params(self) -> dict[str, Tensor]:
        out = {f"unet.{k}": v for k, v in self.unet.items()}
        if self.gen is not None:
            out.update({f"gen.{k}": v for k, v in self.gen.items()})
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params().items()}

    @classmethod
    def from_arrays(cls, cfg: RunConfig, arrays: dict[str, np.ndarray]) -> "Model":
        ref = cls.init(cfg.replace(epochs=0))
        expected = ref.arrays()
        if set(expected) != set(arrays):
            raise ConfigError("checkpoint parameters do not match its config")
        for k, arr in arrays.items():
            if arr.shape != expected[k].shape:
                raise ConfigError(f"parameter {k} has shape {arr.shape}, config implies {expected[k].shape}")
        gen = {k[4:]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("gen.")} or None
        unet = {k[5:]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("unet.")}
        return cls(cfg, gen, unet)

    def pseudo(self, embeddings: np.ndarray) -> Tensor:
        if self.gen is None:
            raise UsageError("text is off: this model has no generator")
        emb = np.asarray(embeddings, dtype=self.cfg.dtype)
        if self.cfg.fusion_mode == "interpolation":
            return interpolate_pseudo(self.gen, self.gen_cfg, emb)
        return generate_pseudo(self.gen, self.gen_cfg, emb)

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad = None


@dataclass
class StepLosses:
    total: Tensor
    dice: Tensor
    l1: Tensor


def pipeline_loss(model: Model, images: np.ndarray, masks: np.ndarray, embeddings: np.ndarray | None, augs=None) -> StepLosses:
    """One forward pass of the training pipeline.

    embed -> pseudo image -> channel fusion -> joint augmentation -> UNet ->
    Dice on the augmented mask + lambda * L1 on the un-augmented pseudo image.
    Losses are evaluated in float64 whatever the training dtype.
    """
    cfg = model.cfg
    img = Tensor(np.asarray(images, dtype=cfg.dtype))
    mask = Tensor(np.asarray(masks, dtype=cfg.dtype))
    pseudo = None
    x = img
    if cfg.text:
        pseudo = model.pseudo(embeddings)
        x = fuse_concat(img, pseudo)
    if augs is not None:
        if cfg.text and cfg.fusion_mode == "misaligned":
            x, mask = augment_misaligned(x, mask, augs, cfg.channels)
        else:
            x, mask = augment_pair(x, mask, augs)
    logits = unet_forward(model.unet, model.unet_cfg, x)
    dice = dice_loss(T.cast(logits, np.float64), T.cast(mask, np.float64))
    if pseudo is not None and cfg.fusion_mode != "interpolation":
        l1 = l1_roi_loss(T.cast(pseudo, np.float64), np.asarray(images, np.float64), np.asarray(masks, np.float64))
    else:
        l1 = Tensor(0.0)
    return StepLosses(total_loss(dice, l1, LossWeights(cfg.lam)), dice, l1)


class AdamW:
    """Adam with decoupled weight decay; constant learning rate."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data *= 1 - self.lr * self.wd
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    dice_mean: float
    dice_std: float
    miou: float
    miou_std: float
    per_image: list[dict]

    def to_dict(self) -> dict:
        return {
            "dice_mean": self.dice_mean,
            "dice_std": self.dice_std,
            "miou_mean": self.miou,
            "miou_std": self.miou_std,
            "per_image": self.per_image,
        }


def predict_masks(model: Model, data: ArrayDataset, batch_size: int = 32) -> np.ndarray:
    """Test-time pipeline (no augmentation), thresholded at probability 0.5."""
    preds = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        img = Tensor(data.images[sl].astype(model.cfg.dtype))
        x = fuse_concat(img, model.pseudo(data.embeddings[sl])) if model.cfg.text else img
        logits = unet_forward(model.unet, model.unet_cfg, x).data.astype(np.float64)
        preds.append(threshold(T.sigmoid(Tensor(logits)).data))
    return np.concatenate(preds)


def evaluate_model(model: Model, data: ArrayDataset) -> EvalResult:
    if len(data) == 0:
        raise UsageError("cannot evaluate on an empty manifest")
    if data.images.shape[1:] != (model.cfg.channels, model.cfg.image_size, model.cfg.image_size):
        raise ConfigError(
            f"dataset images {list(data.images.shape[1:])} incompatible with model "
            f"({model.cfg.channels}x{model.cfg.image_size}x{model.cfg.image_size})"
        )
    preds = predict_masks(model, data)
    rows = []
    for sid, p, g in zip(data.ids, preds, data.masks):
        rows.append({"id": sid, "dice": dice_metric(p, g), "iou": iou_metric(p, g)})
    dice = np.array([r["dice"] for r in rows])
    iou = np.array([r["iou"] for r in rows])
    return EvalResult(float(dice.mean()), float(dice.std()), float(iou.mean()), float(iou.std()), rows)


def load_model(checkpoint) -> Model:
    config, arrays = load_checkpoint(checkpoint)
    return Model.from_arrays(RunConfig.from_dict(config), arrays)


def evaluate(checkpoint, manifest) -> EvalResult:
    model = load_model(checkpoint)
    m = load_manifest(manifest)
    if len(m) == 0:
        raise UsageError(f"manifest {manifest} is empty")
    return evaluate_model(model, load_arrays(m, model.cfg.vocab_seed))


# ---------------------------------------------------------------------------
# training


def load_split(cfg: RunConfig, split: str) -> ArrayDataset:
    path = Path(cfg.data_dir) / f"{split}.jsonl"
    if not path.is_file():
        raise IoError(f"dataset split {path} not found (run `earlyfusion synth` first)")
    return load_arrays(load_manifest(path), cfg.vocab_seed)


def train_model(cfg: RunConfig, train: ArrayDataset, log_steps: list | None = None) -> tuple[Model, list[dict], float | None]:
    """Train from scratch; returns the model, per-epoch means and the step-1 generator grad norm."""
    if len(train) == 0:
        raise UsageError("training set is empty")
    if train.images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ConfigError(f"training images {list(train.images.shape[1:])} do not match config")
    model = Model.init(cfg)
    params = model.params()
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    epochs, gen_norm, step = [], None, 0
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(len(train))
        sums = np.zeros(3)
        n_steps = 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = np.sort(perm[start : start + cfg.batch_size])
            augs = [sample_aug(aug_rng, cfg.aug_enable, cfg.aug_ranges) for _ in idx] if cfg.aug else None
            losses = pipeline_loss(model, train.images[idx], train.masks[idx], train.embeddings[idx], augs)
            step += 1
            total, dice, l1 = losses.total.item(), losses.dice.item(), losses.l1.item()
            if not np.isfinite(total):
                raise DivergenceError(step, total)
            T.backward(losses.total)
            if step == 1 and model.gen is not None:
                gen_norm = grad_norm(model.gen)
            opt.step()
            model.zero_grad()
            if log_steps is not None:
                log_steps.append({"step": step, "dice": dice, "l1": l1, "total": total})
            sums += (dice, l1, total)
            n_steps += 1
        mean = sums / n_steps
        epochs.append({"epoch": epoch, "dice": mean[0], "l1": mean[1], "total": mean[2]})
        log.info("epoch %d/%d dice=%.4f l1=%.4f total=%.4f", epoch, cfg.epochs, *mean)
    return model, epochs, gen_norm


def train_run(cfg: RunConfig, train: ArrayDataset | None = None, test: ArrayDataset | None = None, out_dir=None) -> dict:
    """Train, evaluate on the test split, write ``checkpoint.bin`` and ``report.json``.

    The returned report holds everything written to ``report.json``; wall time
    lives under ``"timing"`` so the rest is reproducible bit for bit.
    """
    t0 = time.perf_counter()
    train = load_split(cfg, "train") if train is None else train
    test = load_split(cfg, "test") if test is None else test
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps: list[dict] = []
    model, epochs, gen_norm = train_model(cfg, train, steps)
    result = evaluate_model(model, test)
    digest = save_checkpoint(out / "checkpoint.bin", model.arrays(), cfg.to_dict())
    report = {
        "config": cfg.to_dict(),
        "epochs": epochs,
        "steps": steps,
        "test": result.to_dict(),
        "generator_grad_norm_step1": gen_norm,
        "checkpoint_sha256": digest,
        "timing": {"wall_seconds": time.perf_counter() - t0},
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    return report


# ---------------------------------------------------------------------------
# pseudo-image dumps


def pseudo_iou(model: Model, data: ArrayDataset) -> list[float]:
    out = []
    for start in range(0, len(data), 32):
        sl = slice(start, start + 32)
        pseudo = model.pseudo(data.embeddings[sl]).data.astype(np.float64)
        for p, g in zip(pseudo, data.masks[sl]):
            # a pixel counts as foreground when any pseudo channel clears 0.5
            out.append(iou_metric(threshold(p).max(axis=0, keepdims=True), g))
    return out


def dump_pseudo(checkpoint, manifest, out_dir) -> float:
    """Write image/mask/pseudo PGMs and the phrase per sample; returns mean pseudo-mask IoU."""
    model = load_model(checkpoint)
    if model.gen is None:
        raise UsageError("checkpoint was trained with text off; nothing to dump")
    m = load_manifest(manifest)
    if len(m) == 0:
        raise UsageError(f"manifest {manifest} is empty")
    data = load_arrays(m, model.cfg.vocab_seed)
    out = Path(out_dir)
    ious = pseudo_iou(model, data)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "pseudo_iou.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "text", "iou"])
            for i, sid in enumerate(data.ids):
                sample_dir = out / sid
                sample_dir.mkdir(exist_ok=True)
                pseudo = model.pseudo(data.embeddings[i : i + 1]).data.astype(np.float64)
                write_pgm(sample_dir / "image.pgm", data.images[i : i + 1])
                write_pgm(sample_dir / "mask.pgm", data.masks[i : i + 1])
                write_pgm(sample_dir / "pseudo.pgm", np.clip(pseudo, 0.0, 1.0))
                (sample_dir / "text.txt").write_text(data.texts[i] + "\n")
                writer.writerow([sid, data.texts[i], repr(ious[i])])
    except OSError as exc:
        raise IoError(f"cannot write pseudo dumps to {out}: {exc}") from exc
    return float(np.mean(ious))


# ---------------------------------------------------------------------------
# ablation matrix

CELLS = (
    ("aug-/text-", dict(aug=False, text=False)),
    ("aug+/text-", dict(aug=True, text=False)),
    ("aug-/text+", dict(aug=False, text=True, fusion_mode="early")),
    ("aug+/text+", dict(aug=True, text=True, fusion_mode="early")),
    ("aug+/text+/interpolation", dict(aug=True, text=True, fusion_mode="interpolation")),
    ("aug+/text+/misaligned", dict(aug=True, text=True, fusion_mode="misaligned")),
)
CSV_FIELDS = ["cell", "aug", "text", "fusion", "n_seeds", "dice_mean", "dice_std", "miou_mean", "miou_std", "per_seed_dice"]


def cell_dir(out_dir, cell: str, seed: int) -> Path:
    """Run directory of one (cell, seed) pair, e.g. ``aug_on_text_on/seed_0``."""
    safe = cell.replace("+", "_on").replace("-", "_off").replace("/", "_").replace("__", "_")
    return Path(out_dir) / safe / f"seed_{seed}"


def _write_matrix_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in CSV_FIELDS})


def experiment_matrix(base: RunConfig, seeds: list[int], out_dir=None) -> list[dict]:
    """Run every cell of the ablation over all seeds; ``matrix.csv`` is rewritten after each cell."""
    if len(seeds) < 2:
        raise UsageError("experiment_matrix needs at least two seeds")
    out = Path(base.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not dataset_exists(base.data_dir):
        log.info("no dataset in %s; generating one", base.data_dir)
        synth_dataset(base.synth_seed, base.n_train, base.n_val, base.n_test, base.image_size, base.data_dir, base.distractor, base.jitter)
    train, test = load_split(base, "train"), load_split(base, "test")
    rows: list[dict] = []
    for name, overrides in CELLS:
        dices, mious = [], []
        for seed in seeds:
            cfg = base.replace(seed=seed, **overrides)
            run_dir = cell_dir(out, name, seed)
            report = train_run(cfg, train, test, run_dir)
            dices.append(report["test"]["dice_mean"])
            mious.append(report["test"]["miou_mean"])
            log.info("%s seed %d: dice=%.4f miou=%.4f", name, seed, dices[-1], mious[-1])
        rows.append(
            {
                "cell": name,
                "aug": overrides["aug"],
                "text": overrides["text"],
                "fusion": overrides.get("fusion_mode", "none"),
                "n_seeds": len(seeds),
                "dice_mean": float(np.mean(dices)),
                "dice_std": float(np.std(dices)),
                "miou_mean": float(np.mean(mious)),
                "miou_std": float(np.std(mious)),
                "per_seed_dice": " ".join(repr(d) for d in dices),
            }
        )
        _write_matrix_csv(out / "matrix.csv", rows)
    return rows
