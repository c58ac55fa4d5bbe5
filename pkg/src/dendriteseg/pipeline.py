"""Patch extraction and stitching, augmentation, dataset splits, the
training loop, fine-tuning, and whole-volume segmentation.

Datasets are lists of (GrayVolume, LabelVolume) pairs. Patches are float32
(depth, height, width) arrays with intensities in [0, 1]; labels stay u8.
Stitching accumulates logits with per-voxel coverage counts, averages,
applies the sigmoid, and thresholds at 0.5.

Every stochastic step is a pure function of seeds: epoch shuffling and
augmentation draws derive from (config.seed, epoch, position), so training
is reproducible and a run paused at an epoch boundary and resumed produces
bitwise-identical weights to an uninterrupted one.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import (
    ArchitectureMismatch,
    BadFractions,
    ConfigInvalid,
    EmptyDataset,
    FrozenHyperparamChanged,
    GridMismatch,
    IndivisibleInput,
    NonFiniteLoss,
    PatchTooLarge,
    ShapeMismatch,
)
from .models import Model, ModelCheckpoint
from .volumeio import GrayVolume, LabelVolume

# ---------------------------------------------------------------------------
# patch planning


@dataclass(frozen=True)
class PatchGrid:
    volume_dims: tuple  # (w, h, d)
    patch_dims: tuple  # (w, h, d)
    overlap: tuple  # (x, y, z)
    origins: tuple  # ((x, y, z), ...)

    @property
    def patch_count(self):
        return len(self.origins)


def _axis_origins(dim, patch, stride):
    count = math.ceil((dim - patch) / stride) + 1
    origins = [i * stride for i in range(count)]
    if origins[-1] + patch > dim:
        origins[-1] = dim - patch
    return sorted(set(origins))


def plan_patches(volume_dims, patch_dims, overlap=(0, 0, 0)) -> PatchGrid:
    """Origins 0, s, 2s, ... per axis with s = patch - overlap; the last
    origin is clamped to dim - patch so the union always covers the volume.
    """
    volume_dims = tuple(int(v) for v in volume_dims)
    patch_dims = tuple(int(v) for v in patch_dims)
    overlap = tuple(int(v) for v in overlap)
    for dim, patch, ov in zip(volume_dims, patch_dims, overlap):
        if patch > dim:
            raise PatchTooLarge(f"patch {patch_dims} exceeds volume {volume_dims}")
        if patch < 1 or not 0 <= ov < patch:
            raise ConfigInvalid(f"need 0 <= overlap < patch, got {ov} vs {patch}")
    per_axis = [
        _axis_origins(dim, patch, patch - ov)
        for dim, patch, ov in zip(volume_dims, patch_dims, overlap)
    ]
    origins = tuple(
        (x, y, z) for z in per_axis[2] for y in per_axis[1] for x in per_axis[0]
    )
    return PatchGrid(
        volume_dims=volume_dims, patch_dims=patch_dims, overlap=overlap, origins=origins
    )


def extract_patches(volume, grid: PatchGrid):
    """Patch list in grid order; grayscale volumes come out normalized f32."""
    if volume.dims != grid.volume_dims:
        raise GridMismatch(f"grid for {grid.volume_dims}, volume is {volume.dims}")
    data = volume.normalized() if isinstance(volume, GrayVolume) else volume.data
    pw, ph, pd = grid.patch_dims
    return [
        np.ascontiguousarray(data[z : z + pd, y : y + ph, x : x + pw])
        for (x, y, z) in grid.origins
    ]


def stitch(logit_patches, grid: PatchGrid, volume_dims) -> LabelVolume:
    """Mean logit per voxel over covering patches, then sigmoid >= 0.5."""
    volume_dims = tuple(int(v) for v in volume_dims)
    if volume_dims != grid.volume_dims:
        raise GridMismatch(f"grid for {grid.volume_dims}, asked to stitch {volume_dims}")
    if len(logit_patches) != len(grid.origins):
        raise GridMismatch(f"{len(logit_patches)} patches for {len(grid.origins)} origins")
    w, h, d = volume_dims
    pw, ph, pd = grid.patch_dims
    acc = np.zeros((d, h, w), dtype=np.float64)
    cnt = np.zeros((d, h, w), dtype=np.int64)
    for patch, (x, y, z) in zip(logit_patches, grid.origins):
        patch = np.asarray(patch)
        if patch.shape != (pd, ph, pw):
            raise GridMismatch(f"patch shape {patch.shape} != {(pd, ph, pw)}")
        acc[z : z + pd, y : y + ph, x : x + pw] += patch
        cnt[z : z + pd, y : y + ph, x : x + pw] += 1
    if (cnt == 0).any():
        raise GridMismatch("grid does not cover the volume")
    mean = acc / cnt
    prob = 1.0 / (1.0 + np.exp(-np.clip(mean, -60, 60)))
    return LabelVolume((prob >= 0.5).astype(np.uint8))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    flips: tuple = ()  # subset of ("x", "y", "z"), each applied with p=1/2
    rotation_max_deg: float = 0.0  # xy-plane, up to 45
    shear_max_deg: float = 0.0  # xy-plane, up to 30
    brightness_delta: float = 0.0  # absolute, intensities are in [0, 1]
    contrast_range: tuple = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not set(self.flips) <= {"x", "y", "z"}:
            raise ConfigInvalid(f"flips must be a subset of x/y/z, got {self.flips}")
        if not 0 <= self.rotation_max_deg <= 45:
            raise ConfigInvalid("rotation_max_deg must be within [0, 45]")
        if not 0 <= self.shear_max_deg <= 30:
            raise ConfigInvalid("shear_max_deg must be within [0, 30]")
        if not 0 <= self.brightness_delta <= 1:
            raise ConfigInvalid("brightness_delta must be within [0, 1]")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi:
            raise ConfigInvalid(f"bad contrast range {self.contrast_range}")


def _bilinear_sample(img, sx, sy, fill):
    h, w = img.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    dx = (sx - x0).astype(img.dtype)
    dy = (sy - y0).astype(img.dtype)
    out = np.zeros(sx.shape, dtype=img.dtype)
    for oy, ox, wgt in (
        (0, 0, (1 - dy) * (1 - dx)),
        (0, 1, (1 - dy) * dx),
        (1, 0, dy * (1 - dx)),
        (1, 1, dy * dx),
    ):
        xs = x0 + ox
        ys = y0 + oy
        valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        vals = np.where(valid, img[np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1)], fill)
        out += wgt * vals
    return out


def augment(image, label, spec: AugmentationSpec, draw_seed: int):
    """One seeded draw of (flips, rotation, shear, brightness, contrast).

    Geometric transforms hit image and label identically (bilinear vs
    nearest resampling); out-of-bounds image samples fill with the patch
    median, labels with background.
    """
    image = np.asarray(image, dtype=np.float32)
    label = np.asarray(label, dtype=np.uint8)
    if image.shape != label.shape:
        raise ShapeMismatch(f"image {image.shape} vs label {label.shape}")
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(draw_seed)]))
    flip_axes = []
    for axis in ("x", "y", "z"):
        if axis in spec.flips and rng.random() < 0.5:
            flip_axes.append(axis)
    theta = math.radians(rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg))
    phi = math.radians(rng.uniform(-spec.shear_max_deg, spec.shear_max_deg))
    contrast = rng.uniform(*spec.contrast_range)
    brightness = rng.uniform(-spec.brightness_delta, spec.brightness_delta)

    ax_map = {"x": 2, "y": 1, "z": 0}
    for axis in flip_axes:
        image = np.flip(image, axis=ax_map[axis])
        label = np.flip(label, axis=ax_map[axis])
    image = np.ascontiguousarray(image)
    label = np.ascontiguousarray(label)

    if theta != 0.0 or phi != 0.0:
        rot = np.array(
            [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
        )
        shear = np.array([[1.0, math.tan(phi)], [0.0, 1.0]])
        inv = np.linalg.inv(rot @ shear)
        d, h, w = image.shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w]
        rel = np.stack([xx - cx, yy - cy])
        src = np.tensordot(inv, rel, axes=1)
        sx = src[0] + cx
        sy = src[1] + cy
        fill = float(np.median(image))
        img_out = np.empty_like(image)
        for z in range(d):
            img_out[z] = _bilinear_sample(image[z], sx, sy, fill)
        nx = np.rint(sx).astype(np.int64)
        ny = np.rint(sy).astype(np.int64)
        valid = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
        lab_out = np.zeros_like(label)
        cy_idx = np.clip(ny, 0, h - 1)
        cx_idx = np.clip(nx, 0, w - 1)
        for z in range(d):
            lab_out[z] = np.where(valid, label[z][cy_idx, cx_idx], 0)
        image, label = img_out, lab_out

    if contrast != 1.0 or brightness != 0.0:
        image = np.clip(
            image * np.float32(contrast) + np.float32(brightness), 0.0, 1.0
        ).astype(np.float32)
    return image, label


# ---------------------------------------------------------------------------
# dataset splitting


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "fraction"  # or "grouped"
    fractions: tuple = (0.7, 0.2, 0.1)
    group_ids: tuple = ()  # grouped mode: one group id per item
    group_counts: tuple = ()  # grouped mode: (train, val, test) group counts
    seed: int = 0


def split_dataset(items, spec: SplitSpec):
    """Disjoint, exhaustive (train, val, test) lists."""
    items = list(items)
    if not items:
        raise EmptyDataset("cannot split zero items")
    if spec.mode == "fraction":
        fr = spec.fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise BadFractions(f"fractions {fr} must be >= 0 and sum to 1")
        n = len(items)
        n_val = math.floor(fr[1] * n)
        n_test = math.floor(fr[2] * n)
        n_train = n - n_val - n_test  # remainder goes to train
        perm = np.random.default_rng(spec.seed).permutation(n)
        train = [items[i] for i in perm[:n_train]]
        val = [items[i] for i in perm[n_train : n_train + n_val]]
        test = [items[i] for i in perm[n_train + n_val :]]
        return train, val, test
    if spec.mode == "grouped":
        if len(spec.group_ids) != len(items):
            raise BadFractions(
                f"{len(spec.group_ids)} group ids for {len(items)} items"
            )
        groups = sorted(set(spec.group_ids))
        if len(spec.group_counts) != 3 or sum(spec.group_counts) != len(groups):
            raise BadFractions(
                f"group counts {spec.group_counts} must partition {len(groups)} groups"
            )
        perm = np.random.default_rng(spec.seed).permutation(len(groups))
        shuffled = [groups[i] for i in perm]
        n_tr, n_va, _ = spec.group_counts
        assign = {}
        for rank, gid in enumerate(shuffled):
            assign[gid] = 0 if rank < n_tr else (1 if rank < n_tr + n_va else 2)
        out = ([], [], [])
        for item, gid in zip(items, spec.group_ids):
            out[assign[gid]].append(item)
        return out
    raise BadFractions(f"unknown split mode {spec.mode!r}")


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 4
    patch_dims: tuple = (64, 64, 4)  # (w, h, d)
    overlap: tuple = (0, 0, 0)
    augment: AugmentationSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigInvalid("learning_rate/batch_size/epochs out of range")
        if any(p < 1 for p in self.patch_dims):
            raise ConfigInvalid(f"bad patch dims {self.patch_dims}")

    def hyperparameters(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "patch_dims": list(self.patch_dims),
            "overlap": list(self.overlap),
            "augment": bool(self.augment is not None),
            "seed": self.seed,
        }


@dataclass
class TrainState:
    """Everything needed to resume training at an epoch boundary."""

    epoch: int = 0
    adam_t: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    best_score: float = -math.inf
    best_epoch: int = 0
    best_arrays: dict | None = None
    history: list = field(default_factory=list)

    def snapshot(self, model: Model) -> "TrainState":
        return TrainState(
            epoch=self.epoch,
            adam_t=self.adam_t,
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            best_score=self.best_score,
            best_epoch=self.best_epoch,
            best_arrays=None
            if self.best_arrays is None
            else {k: v.copy() for k, v in self.best_arrays.items()},
            history=[dict(r) for r in self.history],
        )


def _check_patch_compat(model: Model, config: TrainConfig):
    pw, ph, pd = config.patch_dims
    if model.config.dims == 2:
        if pd != 1:
            raise IndivisibleInput("2D models need depth-1 patches")
    div = 2**model.config.levels
    if pw % div or ph % div:
        raise IndivisibleInput(
            f"patch xy dims {pw}x{ph} must be divisible by {div}"
        )


def _dataset_patches(dataset, config: TrainConfig):
    images, labels = [], []
    for vol, lab in dataset:
        if vol.dims != lab.dims:
            raise ShapeMismatch(f"volume {vol.dims} vs label {lab.dims}")
        grid = plan_patches(vol.dims, config.patch_dims, config.overlap)
        images.extend(extract_patches(vol, grid))
        labels.extend(extract_patches(lab, grid))
    return images, labels


def _to_model_input(patches, dims):
    x = np.stack(patches)[:, None]  # (B, 1, D, H, W)
    if dims == 2:
        x = x[:, :, 0]
    return np.ascontiguousarray(x)


def _forward_logits(model, image_patches):
    """Logit patches (D, H, W) for a list of image patches, without grad."""
    with T.no_grad():
        x = _to_model_input(image_patches, model.config.dims)
        logits = model.forward(T.tensor(x)).data
    if model.config.dims == 2:
        logits = logits[:, :, None]
    return [np.asarray(p[0], dtype=np.float64) for p in logits]


def _validate(model, val_images, val_labels, batch_size):
    losses = []
    tp = fp = fn = 0
    for start in range(0, len(val_images), batch_size):
        imgs = val_images[start : start + batch_size]
        labs = val_labels[start : start + batch_size]
        with T.no_grad():
            x = _to_model_input(imgs, model.config.dims)
            t = _to_model_input(labs, model.config.dims).astype(np.float32)
            logits = model.forward(T.tensor(x))
            losses.append(float(T.bce_with_logits(logits, T.tensor(t)).data))
            pred = logits.data >= 0.0  # sigmoid(z) >= 0.5 iff z >= 0
        truth = t >= 0.5
        tp += int(np.count_nonzero(pred & truth))
        fp += int(np.count_nonzero(pred & ~truth))
        fn += int(np.count_nonzero(~pred & truth))
    union = tp + fp + fn
    val_iou = 1.0 if union == 0 else tp / union
    return float(np.mean(losses)) if losses else math.nan, val_iou


def run_epochs(model, state, config, train_patches, val_patches, until_epoch):
    """Advance training from state.epoch to until_epoch (inclusive).

    Epoch shuffles and augmentation draws are pure functions of
    (config.seed, epoch, position), so resuming from a snapshot replays the
    identical stream.
    """
    train_images, train_labels = train_patches
    val_images, val_labels = val_patches
    if not train_images:
        raise EmptyDataset("no training patches")
    params = model.parameters()
    names = [n for n, _ in model.named_parameters()]
    adam = T.AdamState(lr=config.learning_rate)
    adam.t = state.adam_t
    if state.adam_m:
        adam.m = [state.adam_m[n] for n in names]
        adam.v = [state.adam_v[n] for n in names]
    else:
        adam.m = [np.zeros_like(p.data) for p in params]
        adam.v = [np.zeros_like(p.data) for p in params]
    state.adam_m = dict(zip(names, adam.m))
    state.adam_v = dict(zip(names, adam.v))
    if state.best_arrays is None:
        state.best_arrays = model.param_arrays()
    n = len(train_images)
    for epoch in range(state.epoch + 1, until_epoch + 1):
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed) & 0x7FFFFFFF, epoch]))
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            imgs, labs = [], []
            for offset, i in enumerate(idx):
                img, lab = train_images[i], train_labels[i]
                if config.augment is not None:
                    img, lab = augment(
                        img, lab, config.augment, draw_seed=epoch * 1_000_003 + start + offset
                    )
                imgs.append(img)
                labs.append(lab)
            x = _to_model_input(imgs, model.config.dims)
            t = _to_model_input(labs, model.config.dims).astype(np.float32)
            loss = T.bce_with_logits(model.forward(T.tensor(x)), T.tensor(t))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}")
            T.backward(loss)
            T.adam_step(params, adam)
            batch_losses.append(value)
        state.adam_t = adam.t
        val_loss, val_iou = _validate(model, val_images, val_labels, config.batch_size)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)),
            "val_loss": val_loss,
            "val_iou": val_iou,
        }
        state.history.append(record)
        if val_iou > state.best_score:
            state.best_score = val_iou
            state.best_epoch = epoch
            state.best_arrays = model.param_arrays()
        state.epoch = epoch
    return state


def train(model: Model, train_set, val_set, config: TrainConfig, dataset_tag: str = ""):
    """Full training run; returns (best checkpoint, history records)."""
    _check_patch_compat(model, config)
    train_patches = _dataset_patches(train_set, config)
    val_patches = _dataset_patches(val_set, config)
    state = TrainState()
    state.best_arrays = model.param_arrays()
    run_epochs(model, state, config, train_patches, val_patches, config.epochs)
    provenance = {
        "dataset": dataset_tag,
        "epochs_trained": state.epoch,
        "best_epoch": state.best_epoch,
        "hyperparameters": config.hyperparameters(),
        "parent": None,
    }
    ckpt = ModelCheckpoint(
        architecture=model.architecture,
        config=ModelCheckpoint.from_model(model).config,
        arrays={k: v.copy() for k, v in state.best_arrays.items()},
        provenance=provenance,
    )
    return ckpt, state.history


def finetune(
    checkpoint: ModelCheckpoint,
    train_set,
    val_set,
    config: TrainConfig,
    dataset_tag: str = "",
    architecture: str | None = None,
):
    """Continue training from a checkpoint.

    Learning rate, epochs, and augmentations may change; patch dims and
    batch size are frozen to the parent's values.
    """
    if architecture is not None and architecture != checkpoint.architecture:
        raise ArchitectureMismatch(
            f"checkpoint is {checkpoint.architecture}, requested {architecture}"
        )
    parent_hp = checkpoint.provenance.get("hyperparameters", {})
    if "patch_dims" in parent_hp and list(config.patch_dims) != list(parent_hp["patch_dims"]):
        raise FrozenHyperparamChanged(
            f"patch dims {list(config.patch_dims)} != parent {parent_hp['patch_dims']}"
        )
    if "batch_size" in parent_hp and config.batch_size != parent_hp["batch_size"]:
        raise FrozenHyperparamChanged(
            f"batch size {config.batch_size} != parent {parent_hp['batch_size']}"
        )
    model = checkpoint.to_model()
    ckpt, history = train(model, train_set, val_set, config, dataset_tag=dataset_tag)
    ckpt.provenance["parent"] = checkpoint.checkpoint_id()
    return ckpt, history


def segment_volume(model_or_checkpoint, volume: GrayVolume, patch_dims, overlap=(0, 0, 0), batch_size: int = 4) -> LabelVolume:
    """plan -> extract -> forward -> stitch; deterministic."""
    model = (
        model_or_checkpoint.to_model()
        if isinstance(model_or_checkpoint, ModelCheckpoint)
        else model_or_checkpoint
    )
    pw, ph, pd = patch_dims
    if model.config.dims == 2 and pd != 1:
        raise IndivisibleInput("2D models need depth-1 patches")
    grid = plan_patches(volume.dims, patch_dims, overlap)
    patches = extract_patches(volume, grid)
    logits = []
    for start in range(0, len(patches), batch_size):
        logits.extend(_forward_logits(model, patches[start : start + batch_size]))
    return stitch(logits, grid, volume.dims)


def history_jsonl(history) -> str:
    """History records as JSON lines."""
    import json

    return "\n".join(
        json.dumps(
            {
                "epoch": r["epoch"],
                "train_loss": r["train_loss"],
                "val_loss": r["val_loss"],
                "val_iou": r["val_iou"],
            }
        )
        for r in history
    )
