"""Training loop, evaluation pipeline, ablation matrix and throughput measurement."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from lsnet import gridcodec, postprocess
from lsnet.errors import ConfigError, ContractError, DivergenceError
from lsnet.gridcodec import GRID_CLASSES, LineSegment
from lsnet.loss import LossConfig, multitask_loss_from_logits
from lsnet.metrics import EvalResult, evaluate_dataset, format_table
from lsnet.model import (
    LSNet, ModelConfig, class_probabilities, forward, init_model, load_checkpoint,
    named_parameters, save_checkpoint,
)
from lsnet.synthdata import AugmentConfig, ManifestEntry, SampleRecord, on_the_fly_augment

log = logging.getLogger(__name__)

DECODE_THRESHOLD = 0.5
DESK_LEARNING_RATE = 1e-3


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum1: float = 0.9
    momentum2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 10
    max_steps: Optional[int] = None
    max_seconds: Optional[float] = None
    early_stop_patience: int = 5
    eval_interval: int = 100
    tau_len: float = gridcodec.DEFAULT_TAU_LEN
    grids: tuple = GRID_CLASSES
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.grids = gridcodec.parse_grid_classes(self.grids)
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("momentum1", "momentum2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_interval < 1 or self.early_stop_patience < 1:
            raise ConfigError("eval_interval and early_stop_patience must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU preset: batch 4 and a larger step size so a 30 minute budget suffices."""
        base = dict(learning_rate=DESK_LEARNING_RATE, batch_size=4, max_epochs=1000,
                    eval_interval=100, early_stop_patience=1000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grids"] = list(self.grids)
        return d


@dataclass
class TrainResult:
    model: LSNet
    log: list
    step: int
    best_val: float
    best_step: int
    checkpoint: Optional[Path] = None
    stopped: str = ""


def _as_records(data) -> list:
    out = []
    for item in data:
        out.append(item.load() if isinstance(item, ManifestEntry) else item)
    if not out:
        raise ContractError("dataset is empty")
    return out


def grid_spec_for(cfg: ModelConfig) -> gridcodec.GridSpec:
    return gridcodec.build_grid_spec(cfg.input_size, cfg.cell_size)


def prepare_batch(records, spec, tau_len, augment=None, rng=None):
    """Stack images and encode targets, augmenting each record first when ``augment`` is set."""
    images, labels, coords = [], [], []
    for rec in records:
        if augment is not None:
            rec = on_the_fly_augment(rec, augment, rng)
        if rec.image.shape[:2] != (spec.image_height, spec.image_width):
            raise ContractError(f"image {rec.image.shape} does not match model input {spec.image_width}")
        tgt = gridcodec.encode_targets(rec.segments, spec, tau_len)
        images.append(rec.image.astype(np.float32))
        labels.append(tgt.labels)
        coords.append(tgt.coords)
    return (
        torch.from_numpy(np.stack(images)),
        torch.from_numpy(np.stack(labels).astype(np.int64)),
        torch.from_numpy(np.stack(coords).astype(np.float32)),
    )


def _cell_mask(grids, lattice):
    return torch.from_numpy(gridcodec.parity_mask((lattice, lattice), grids))


def validation_loss(model, records, train_cfg: TrainConfig, batch_size: int = 8) -> dict:
    """Loss over a whole (unaugmented) set: classification averaged over cells,
    regression averaged over positive cells."""
    spec = grid_spec_for(model.config)
    mask = _cell_mask(train_cfg.grids, spec.lattice_rows)
    cls_sum = reg_sum = 0.0
    n_cells = n_pos = 0
    for i in range(0, len(records), batch_size):
        x, y, t = prepare_batch(records[i:i + batch_size], spec, train_cfg.tau_len)
        logits, reg = forward(model, x, "eval")
        rep = multitask_loss_from_logits(logits, y, reg, t, train_cfg.loss, mask)
        cells = int(mask.sum()) * x.shape[0]
        cls_sum += float(rep.cls_term) * cells
        reg_sum += float(rep.reg_term) * rep.positive_cell_count
        n_cells += cells
        n_pos += rep.positive_cell_count
    cls = cls_sum / n_cells
    reg = reg_sum / n_pos if n_pos else 0.0
    return {"cls": cls, "reg": reg, "total": cls + train_cfg.loss.lam * reg}


def _optimizer_state(opt, model) -> dict:
    names = {id(p): n for n, p in named_parameters(model).items()}
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"optim.{n}.m"] = st["exp_avg"].detach().numpy().copy()
            out[f"optim.{n}.v"] = st["exp_avg_sq"].detach().numpy().copy()
            out[f"optim.{n}.step"] = np.array(float(st["step"]))
    return out


def _restore_optimizer(opt, model, archive):
    params = named_parameters(model)
    for n, p in params.items():
        if f"optim.{n}.m" in archive:
            opt.state[p] = {
                "step": torch.tensor(float(archive[f"optim.{n}.step"])),
                "exp_avg": torch.from_numpy(archive[f"optim.{n}.m"].copy()),
                "exp_avg_sq": torch.from_numpy(archive[f"optim.{n}.v"].copy()),
            }


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=(cfg.momentum1, cfg.momentum2), eps=cfg.adam_eps)


def train(train_data, val_data, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir=None, resume=None, callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train with Adam and early stopping on validation loss.

    ``train_data`` / ``val_data`` are SampleRecords or ManifestEntries. When
    ``out_dir`` is given it receives the JSON-lines log plus two checkpoints:
    ``checkpoint.npz`` holds the best validation state and ``last.npz`` the
    final one. ``resume`` names a checkpoint whose full training state
    (Adam moments included) is restored before continuing.
    """
    train_records = _as_records(train_data)
    val_records = _as_records(val_data)
    torch.manual_seed(train_cfg.seed)
    step = 0
    if resume is not None:
        model, step, archive = load_checkpoint(resume)
        model_cfg = model.config
    else:
        model = init_model(model_cfg, train_cfg.seed)
        archive = None
    opt = make_optimizer(model, train_cfg)
    if archive is not None:
        _restore_optimizer(opt, model, archive)

    spec = grid_spec_for(model_cfg)
    mask = _cell_mask(train_cfg.grids, spec.lattice_rows)
    rng = np.random.default_rng([train_cfg.seed, step])
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a" if resume else "w")

    entries = []
    best_val, best_step, best_state = math.inf, step, None
    bad_evals = 0
    start = time.monotonic()
    stopped = "max_epochs"
    run_cls, run_reg, run_n = 0.0, 0.0, 0

    def emit(entry):
        entries.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry) + "\n")
            log_fh.flush()
        if callback is not None:
            callback(entry)

    try:
        done = False
        for epoch in range(train_cfg.max_epochs):
            order = rng.permutation(len(train_records))
            for i in range(0, len(order), train_cfg.batch_size):
                batch = [train_records[j] for j in order[i:i + train_cfg.batch_size]]
                x, y, t = prepare_batch(batch, spec, train_cfg.tau_len, train_cfg.augment, rng)
                logits, reg = forward(model, x, "train")
                rep = multitask_loss_from_logits(logits, y, reg, t, train_cfg.loss, mask)
                if not torch.isfinite(rep.total):
                    raise DivergenceError(
                        f"non-finite loss at step {step + 1}: cls={float(rep.cls_term.detach())} reg={float(rep.reg_term.detach())}"
                    )
                opt.zero_grad()
                rep.total.backward()
                opt.step()
                step += 1
                run_cls += float(rep.cls_term.detach())
                run_reg += float(rep.reg_term.detach())
                run_n += 1

                if step % train_cfg.eval_interval == 0:
                    val = validation_loss(model, val_records, train_cfg)
                    entry = {
                        "step": step, "epoch": epoch,
                        "train_cls": run_cls / run_n, "train_reg": run_reg / run_n,
                        "train_total": (run_cls + train_cfg.loss.lam * run_reg) / run_n,
                        "val_cls": val["cls"], "val_reg": val["reg"], "val_total": val["total"],
                        "lr": train_cfg.learning_rate, "timestamp": time.time(),
                    }
                    run_cls, run_reg, run_n = 0.0, 0.0, 0
                    if not math.isfinite(val["total"]):
                        raise DivergenceError(f"non-finite validation loss at step {step}")
                    if val["total"] < best_val:
                        best_val, best_step, bad_evals = val["total"], step, 0
                        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                        if out_dir is not None:
                            save_checkpoint(out_dir / "checkpoint.npz", model, step, _optimizer_state(opt, model))
                    else:
                        bad_evals += 1
                    entry["best_val"] = best_val
                    emit(entry)
                    if bad_evals >= train_cfg.early_stop_patience:
                        stopped, done = "early_stop", True
                if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                    stopped, done = "max_steps", True
                if train_cfg.max_seconds is not None and time.monotonic() - start > train_cfg.max_seconds:
                    stopped, done = "max_seconds", True
                if done:
                    break
            if done:
                break

        # final evaluation if the last steps were not covered
        if run_n:
            val = validation_loss(model, val_records, train_cfg)
            entry = {
                "step": step, "epoch": epoch,
                "train_cls": run_cls / run_n, "train_reg": run_reg / run_n,
                "train_total": (run_cls + train_cfg.loss.lam * run_reg) / run_n,
                "val_cls": val["cls"], "val_reg": val["reg"], "val_total": val["total"],
                "lr": train_cfg.learning_rate, "timestamp": time.time(),
            }
            if not math.isfinite(val["total"]):
                raise DivergenceError(f"non-finite validation loss at step {step}")
            if val["total"] < best_val:
                best_val, best_step = val["total"], step
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if out_dir is not None:
                    save_checkpoint(out_dir / "checkpoint.npz", model, step, _optimizer_state(opt, model))
            entry["best_val"] = best_val
            emit(entry)
        if out_dir is not None:
            save_checkpoint(out_dir / "last.npz", model, step, _optimizer_state(opt, model))
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    log.info("training stopped (%s) at step %d; best val %.6f at step %d", stopped, step, best_val, best_step)
    return TrainResult(model=model, log=entries, step=step, best_val=best_val, best_step=best_step,
                       checkpoint=(out_dir / "checkpoint.npz") if out_dir is not None else None,
                       stopped=stopped)


# ----------------------------------------------------------------------------
# inference and evaluation


def _load_model(model_or_path) -> LSNet:
    if isinstance(model_or_path, LSNet):
        return model_or_path
    return load_checkpoint(model_or_path)[0]


def predict(model, images, grids=GRID_CLASSES, batch_size: int = 8):
    """Per-image ``(probabilities [L, L], coords [L, L, 4])`` with unselected grids zeroed."""
    model = _load_model(model)
    images = np.asarray(images, dtype=np.float32)
    lattice = model.config.lattice_size
    mask = gridcodec.parity_mask((lattice, lattice), grids)
    out = []
    for i in range(0, len(images), batch_size):
        logits, reg = forward(model, images[i:i + batch_size], "eval")
        probs = class_probabilities(logits.double()).numpy()
        reg = reg.double().numpy()
        for p, r in zip(probs, reg):
            p = np.where(mask, p, 0.0)
            out.append((p, r))
    return out


def detect_segments(model, images, grids=GRID_CLASSES, conf_threshold: float = DECODE_THRESHOLD) -> list:
    """Decoded segment list for each image."""
    model = _load_model(model)
    spec = grid_spec_for(model.config)
    return [gridcodec.decode_predictions(p, r, spec, conf_threshold) for p, r in predict(model, images, grids)]


def gt_binary_map(segments, wl: int, size: int) -> np.ndarray:
    segs = [LineSegment(*s) for s in np.asarray(segments, dtype=np.float64).reshape(-1, 4)]
    return postprocess.rasterize_segments(segs, wl, size).values > 0


def evaluate_segments(pred_segments, gt_segments_or_masks, size: int, wl: int = 2, binarize="otsu",
                      sigma_s: float = postprocess.DEFAULT_SMOOTH_SIGMA,
                      kernel_size: int = postprocess.DEFAULT_SMOOTH_KERNEL) -> EvalResult:
    """Pixel-level evaluation of segment lists against GT segments (rasterized at ``wl``) or binary masks."""
    preds, gts = [], []
    for segs, gt in zip(pred_segments, gt_segments_or_masks):
        preds.append(postprocess.segments_to_binary(segs, wl, size, binarize, sigma_s, kernel_size).values)
        gt = np.asarray(gt)
        if gt.ndim == 2 and gt.shape == (size, size) and gt.shape[-1] != 4:
            gts.append(gt.astype(bool))
        else:
            gts.append(gt_binary_map(gt, wl, size))
    return evaluate_dataset(preds, gts)


def evaluate_model(model_or_checkpoint, eval_data, wl: int = 2, binarization="otsu",
                   sigma_s: float = postprocess.DEFAULT_SMOOTH_SIGMA, grids=GRID_CLASSES,
                   conf_threshold: float = DECODE_THRESHOLD, gt_masks=None, batch_size: int = 8) -> EvalResult:
    """forward -> probabilities -> decode -> rasterize -> smooth -> binarize -> metrics.

    ``binarization`` is ``"otsu"`` or a float threshold. Ground truth is the
    records' segments rasterized at ``wl`` unless ``gt_masks`` are supplied.
    """
    model = _load_model(model_or_checkpoint)
    entries = list(eval_data)
    if not entries:
        raise ContractError("evaluation set is empty")
    missing = [str(e.path) for e in entries if isinstance(e, ManifestEntry) and not e.path.is_file()]
    if missing:
        raise FileNotFoundError("missing evaluation images: " + ", ".join(missing))
    records = _as_records(entries)
    size = model.config.input_size
    preds = []
    for i in range(0, len(records), batch_size):
        imgs = np.stack([r.image for r in records[i:i + batch_size]])
        preds += detect_segments(model, imgs, grids, conf_threshold)
    gts = gt_masks if gt_masks is not None else [r.segments for r in records]
    return evaluate_segments(preds, gts, size, wl, binarization, sigma_s)


# ----------------------------------------------------------------------------
# ablations

GRID_VARIANTS = ("M", "MH", "MV", "MC", "MHC", "MVC", "MVH", "MHVC")
REG_LOSS_VARIANTS = (("LS-Net-2 (L2)", "l2"), ("LS-Net-1 (L1)", "l1"),
                     ("LS-Net-S (Smooth L1)", "smooth_l1"), ("LS-Net-W (Wing loss)", "wing"))
CLS_LOSS_VARIANTS = (("LS-Net-CE (Cross Entropy loss)", "cross_entropy"), ("LS-Net-FL (Focal Loss)", "focal"))
DOWNSAMPLING_VARIANTS = (("LS-Net-P", "max_pool"), ("LS-Net-S", "strided_conv"))


@dataclass
class Variant:
    name: str
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)


def grid_variant_name(letters: str) -> str:
    return f"LS-Net-{len(letters)}-{letters}"


def ablation_variants(axis: str) -> list:
    """Variant list for one ablation axis: grids, regloss, clsloss or downsampling."""
    if axis == "grids":
        return [Variant(grid_variant_name(g), train={"grids": g}) for g in GRID_VARIANTS]
    if axis == "regloss":
        return [Variant(n, loss={"reg_variant": v}) for n, v in REG_LOSS_VARIANTS]
    if axis == "clsloss":
        return [Variant(n, loss={"cls_variant": v}) for n, v in CLS_LOSS_VARIANTS]
    if axis == "downsampling":
        return [Variant(n, model={"downsampling_mode": v}) for n, v in DOWNSAMPLING_VARIANTS]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected grids, regloss, clsloss or downsampling")


def apply_variant(model_cfg: ModelConfig, train_cfg: TrainConfig, variant: Variant):
    mcfg = ModelConfig.from_dict({**model_cfg.to_dict(), **variant.model})
    loss = replace(train_cfg.loss, **variant.loss)
    tcfg = replace(train_cfg, loss=loss, **variant.train)
    return mcfg, tcfg


@dataclass
class AblationRow:
    name: str
    results: list  # one EvalResult per seed
    grids: tuple = GRID_CLASSES

    def mean(self) -> EvalResult:
        return EvalResult(
            apr=float(np.mean([r.apr for r in self.results])),
            arr=float(np.mean([r.arr for r in self.results])),
            f1=float(np.mean([r.f1 for r in self.results])),
            per_image=[],
        )

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.results])


def run_ablation_matrix(model_cfg: ModelConfig, train_cfg: TrainConfig, variants, train_data, val_data,
                        eval_data, seeds=(0,), wl: int = 1, binarization=0.5, sigma_s: float = 0.0,
                        out_dir=None) -> list:
    """Train and evaluate every variant under identical data, once per seed.

    Evaluation defaults follow the ablation protocol: ``W_l = 1`` and a fixed
    0.5 threshold (smoothing off).
    """
    rows = []
    for variant in variants:
        mcfg, tcfg = apply_variant(model_cfg, train_cfg, variant)
        results = []
        for seed in seeds:
            run_dir = None if out_dir is None else Path(out_dir) / f"{variant.name}-seed{seed}".replace(" ", "_")
            res = train(train_data, val_data, mcfg, replace(tcfg, seed=seed), out_dir=run_dir)
            results.append(evaluate_model(res.model, eval_data, wl, binarization, sigma_s, grids=tcfg.grids))
            log.info("%s seed %d: %s", variant.name, seed, results[-1].f1)
        rows.append(AblationRow(variant.name, results, tcfg.grids))
    return rows


def ablation_table(rows, title: str = "") -> str:
    return format_table([(r.name, r.mean()) for r in rows], title)


# ----------------------------------------------------------------------------
# throughput


def measure_fps(model_or_checkpoint, input_size: Optional[int] = None, n_iterations: int = 20,
                warmup: int = 3) -> float:
    """Forward-only frames per second at batch size 1 (warm-up iterations discarded)."""
    if n_iterations < 10:
        raise ConfigError(f"n_iterations must be >= 10, got {n_iterations}")
    model = _load_model(model_or_checkpoint)
    if input_size is not None and input_size != model.config.input_size:
        cfg = ModelConfig.from_dict({**model.config.to_dict(), "input_size": int(input_size)})
        resized = LSNet(cfg)
        resized.load_state_dict(model.state_dict())
        model = resized
    s = model.config.input_size
    x = torch.rand(1, s, s, model.config.input_channels, generator=torch.Generator().manual_seed(0))
    for _ in range(warmup):
        forward(model, x, "eval")
    t0 = time.perf_counter()
    for _ in range(n_iterations):
        forward(model, x, "eval")
    return n_iterations / (time.perf_counter() - t0)
