"""Training of the artifact-reduction prior: L1 residual loss, Adam,
patch extraction with an 80/20 split, and a plateau learning-rate schedule.

The target of the network is the residual between the center slice of the
degraded input stack and the matching slice of the clean reference volume;
validation quality is the NRMSE of the denoised center slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .projector import Volume
from .unet import (PriorArchitecture, PriorParams, backward_batch, forward_batch,
                   init_params, stack_slices)


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its gradient w.r.t. the prediction."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: PriorParams) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.tensors.items()},
                   v={k: np.zeros_like(p) for k, p in params.tensors.items()})


def adam_step(params: PriorParams, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new (params, state)."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.tensors.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return PriorParams(params.arch, new_p), AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class PatchDataset:
    """Stacked input patches with matching center-slice targets."""

    inputs: np.ndarray  # (n, 2h+1, ph, pw)
    targets: np.ndarray  # (n, ph, pw)
    n_train: int

    @property
    def n_patches(self) -> int:
        return self.inputs.shape[0]

    def train(self):
        return self.inputs[:self.n_train], self.targets[:self.n_train]

    def validation(self):
        return self.inputs[self.n_train:], self.targets[self.n_train:]


def _collect_patches(input_vol: Volume, target_vol: Volume,
                     patch_shape: tuple[int, int, int], stride: int):
    if input_vol.data.shape != target_vol.data.shape:
        raise ShapeError("input and target volumes must be aligned and equally shaped")
    ch, ph, pw = patch_shape
    if ch % 2 == 0:
        raise ShapeError(f"channel count must be odd, got {ch}")
    nz, ny, nx = input_vol.data.shape
    if ph > ny or pw > nx:
        raise ShapeError(f"patch {ph}x{pw} larger than slices {ny}x{nx}")
    h = ch // 2
    xs, ys = [], []
    for z in range(nz):
        stack = stack_slices(input_vol, z, h)
        for y0 in range(0, ny - ph + 1, stride):
            for x0 in range(0, nx - pw + 1, stride):
                xs.append(stack[:, y0:y0 + ph, x0:x0 + pw])
                ys.append(target_vol.data[z, y0:y0 + ph, x0:x0 + pw])
    return np.asarray(xs), np.asarray(ys)


def extract_patches(input_vol: Volume, target_vol: Volume,
                    patch_shape: tuple[int, int, int], stride: int | None,
                    seed: int, split: float = 0.8) -> PatchDataset:
    """Regularly strided patches, seeded shuffle, first `split` fraction trains."""
    return build_dataset([(input_vol, target_vol)], patch_shape, stride, seed, split)


def build_dataset(pairs, patch_shape, stride, seed, split: float = 0.8) -> PatchDataset:
    if not 0.0 < split < 1.0:
        raise DataError(f"split must lie in (0, 1), got {split}")
    if stride is None:
        stride = patch_shape[1]
    xs, ys = [], []
    for input_vol, target_vol in pairs:
        x, y = _collect_patches(input_vol, target_vol, patch_shape, stride)
        xs.append(x)
        ys.append(y)
    inputs = np.concatenate(xs)
    targets = np.concatenate(ys)
    rng = np.random.Generator(np.random.Philox(seed))
    perm = rng.permutation(inputs.shape[0])
    return PatchDataset(inputs[perm], targets[perm],
                        n_train=int(inputs.shape[0] * split))


# ---------------------------------------------------------------------------
# schedule and training loop
# ---------------------------------------------------------------------------

class PlateauSchedule:
    """Cut the learning rate by `factor` whenever the validation metric has
    not improved for `patience` epochs since the best epoch or last cut."""

    def __init__(self, lr0: float, factor: float = 2.0, patience: int = 10):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.last_cut = 0

    def update(self, epoch: int, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.best_epoch = epoch
        elif epoch - max(self.best_epoch, self.last_cut) >= self.patience:
            self.lr /= self.factor
            self.last_cut = epoch
        return self.lr


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 2.0
    plateau_patience: int = 10
    patch_shape: tuple[int, int, int] = (5, 256, 256)
    stride: int | None = None
    split: float = 0.8
    batch_size: int = 16
    seed: int = 0
    precision: str = "f64"  # f64 for exactly testable runs, f32 for speed

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.split < 1.0:
            raise DataError(f"split must lie in (0, 1), got {self.split}")
        if self.precision not in ("f32", "f64"):
            raise DataError(f"precision must be 'f32' or 'f64', got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_nrmse: float
    lr: float


def _val_nrmse(params: PriorParams, dataset: PatchDataset, batch: int) -> float:
    """NRMSE of denoised center slices over the validation patches."""
    inputs, targets = dataset.validation()
    h = params.arch.half_width
    num = 0.0
    den = 0.0
    for lo in range(0, inputs.shape[0], batch):
        xb = inputs[lo:lo + batch]
        tb = targets[lo:lo + batch]
        res, _ = forward_batch(params, xb)
        denoised = xb[:, h] - res
        num += float(np.sum((denoised - tb) ** 2))
        den += float(np.sum(tb ** 2))
    if den == 0.0:
        raise DataError("validation targets are identically zero")
    return math.sqrt(num / den)


def train_prior(dataset: PatchDataset, config: TrainConfig,
                arch: PriorArchitecture) -> tuple[PriorParams, list[EpochLog]]:
    """Minimize the L1 residual loss with Adam; keep the best-validation epoch."""
    if dataset.n_patches == 0 or dataset.n_train == 0 \
            or dataset.n_train == dataset.n_patches:
        raise DataError("dataset must hold at least one training and one validation patch")
    if dataset.inputs.shape[1] != arch.in_channels:
        raise ShapeError(f"dataset stacks have {dataset.inputs.shape[1]} channels, "
                         f"architecture wants {arch.in_channels}")
    if dataset.inputs.dtype != config.dtype:
        dataset = PatchDataset(dataset.inputs.astype(config.dtype),
                               dataset.targets.astype(config.dtype), dataset.n_train)
    params = init_params(arch, config.seed, dtype=config.dtype)
    state = AdamState.for_params(params)
    schedule = PlateauSchedule(config.lr, config.plateau_factor, config.plateau_patience)
    rng = np.random.Generator(np.random.Philox(config.seed + 1))
    h = arch.half_width

    best_params = params.copy()
    best_val = math.inf
    log: list[EpochLog] = []
    train_x, train_y = dataset.train()
    lr = config.lr
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(train_x.shape[0])
        losses = []
        for lo in range(0, perm.size, config.batch_size):
            sel = perm[lo:lo + config.batch_size]
            xb = train_x[sel]
            residual_target = xb[:, h] - train_y[sel]
            pred, cache = forward_batch(params, xb)
            loss, dpred = l1_loss(pred, residual_target)
            grads, _ = backward_batch(params, cache, dpred)
            params, state = adam_step(params, grads, state, lr,
                                      config.beta1, config.beta2, config.eps)
            losses.append(loss)
        val = _val_nrmse(params, dataset, config.batch_size)
        log.append(EpochLog(epoch, float(np.mean(losses)), val, lr))
        if val < best_val:
            best_val = val
            best_params = params.copy()
        lr = schedule.update(epoch, val)
    return best_params, log
