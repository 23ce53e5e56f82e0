"""2.5D residual artifact-reduction network.

A stack of 2h+1 adjacent z-slices enters as channels; the network predicts
the residual between the center slice and the clean target, so subtracting
the prediction from the center slice denoises that slice.  The architecture
is an encoder/decoder with skip connections: per level two 3x3 conv+ReLU
then 2x2 max-pool, a two-conv bottleneck, and per decoder level nearest 2x
upsampling, a channel-halving 3x3 conv, skip concatenation and two
conv+ReLU, closed by a 1x1 projection to one channel.

Everything is plain numpy with hand-written reverse-mode gradients; the
backward pass is exact (finite-difference checked) including max-pool
argmax routing and the concatenation splits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .projector import Volume


@dataclass(frozen=True)
class PriorArchitecture:
    levels: int = 2
    base_features: int = 8
    half_width: int = 2

    @property
    def in_channels(self) -> int:
        return 2 * self.half_width + 1

    def features(self, level: int) -> int:
        return self.base_features * (1 << level)


@dataclass
class PriorParams:
    arch: PriorArchitecture
    tensors: dict[str, np.ndarray]  # insertion order is the declaration order

    def copy(self) -> "PriorParams":
        return PriorParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})


def tensor_shapes(arch: PriorArchitecture) -> dict[str, tuple]:
    """Kernel/bias shapes in declaration order."""
    shapes: dict[str, tuple] = {}

    def conv(name, c_in, c_out, k=3):
        shapes[f"{name}_w"] = (c_out, c_in, k, k)
        shapes[f"{name}_b"] = (c_out,)

    c = arch.in_channels
    for i in range(arch.levels):
        f = arch.features(i)
        conv(f"enc{i}_conv1", c, f)
        conv(f"enc{i}_conv2", f, f)
        c = f
    fb = arch.features(arch.levels)
    conv("bot_conv1", c, fb)
    conv("bot_conv2", fb, fb)
    c = fb
    for i in reversed(range(arch.levels)):
        f = arch.features(i)
        conv(f"dec{i}_up", c, f)
        conv(f"dec{i}_conv1", 2 * f, f)
        conv(f"dec{i}_conv2", f, f)
        c = f
    conv("out", c, 1, k=1)
    return shapes


def init_params(arch: PriorArchitecture, seed: int, dtype=np.float64) -> PriorParams:
    """Kernels and biases uniform in +-sqrt(1/fan_in), Philox-seeded.

    Nonzero bias init keeps pre-activations off the exact ReLU kink, which
    would otherwise break finite-difference gradient checks.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    tensors = {}
    shapes = tensor_shapes(arch)
    for name, shape in shapes.items():
        if name.endswith("_w"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(1.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            kernel = shapes[name[:-2] + "_w"]
            bound = np.sqrt(1.0 / (kernel[1] * kernel[2] * kernel[3]))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return PriorParams(arch, tensors)


def zero_params(arch: PriorArchitecture, dtype=np.float64) -> PriorParams:
    """All-zero parameters: the denoiser becomes an exact identity."""
    return PriorParams(arch, {name: np.zeros(shape, dtype=dtype)
                              for name, shape in tensor_shapes(arch).items()})


# ---------------------------------------------------------------------------
# layer primitives (batched, NCHW)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, k, k, h, w), (s[0], s[1], s[2], s[3], s[2], s[3]))
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(b * h * w, c * k * k)


def _conv_cols(x: np.ndarray, w: np.ndarray, bias: np.ndarray):
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    cols = _im2col(x, k)
    y = cols @ w.reshape(o, -1).T + bias
    return y.reshape(b, h, wd, o).transpose(0, 3, 1, 2), cols


def _conv(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return _conv_cols(x, w, bias)[0]


def _conv_backward(cols, n_in, w, dy):
    b, o, h, wd = dy.shape
    dy_m = dy.transpose(0, 2, 3, 1).reshape(b * h * wd, o)
    dw = (dy_m.T @ cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    # gradient w.r.t. input: same-pad convolution with the flipped kernel
    w_flip = w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    dx = _conv(dy, np.ascontiguousarray(w_flip), np.zeros(n_in, dtype=dy.dtype))
    return dx, dw, db


def _maxpool(x):
    b, c, h, w = x.shape
    xr = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = xr.reshape(b, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)  # first max wins: ties go to the smallest flat index
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(dy, idx, shape):
    b, c, h, w = shape
    flat = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
    return flat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
               .reshape(b, c, h, w)


def _upsample(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample_backward(dy):
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# network forward / backward
# ---------------------------------------------------------------------------

def _check_input(params: PriorParams, x: np.ndarray):
    arch = params.arch
    if x.ndim != 4:
        raise ShapeError(f"expected (batch, channels, h, w), got {x.shape}")
    if x.shape[1] != arch.in_channels:
        raise ShapeError(f"stack has {x.shape[1]} channels, network wants {arch.in_channels}")
    div = 1 << arch.levels
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {div}")


def forward_batch(params: PriorParams, x: np.ndarray):
    """Residual prediction for a batch of stacks; returns (out, cache)."""
    _check_input(params, x)
    arch, t = params.arch, params.tensors
    cache = {"x": x, "pre": {}, "pool": {}, "skip_shape": {}}

    def conv_relu(name, a):
        pre, cols = _conv_cols(a, t[f"{name}_w"], t[f"{name}_b"])
        cache["pre"][name] = (cols, a.shape[1], pre)
        return np.maximum(pre, 0.0)

    a = x
    skips = []
    for i in range(arch.levels):
        a = conv_relu(f"enc{i}_conv1", a)
        a = conv_relu(f"enc{i}_conv2", a)
        skips.append(a)
        pooled, idx = _maxpool(a)
        cache["pool"][i] = (idx, a.shape)
        a = pooled
    a = conv_relu("bot_conv1", a)
    a = conv_relu("bot_conv2", a)
    for i in reversed(range(arch.levels)):
        up = _upsample(a)
        pre, cols = _conv_cols(up, t[f"dec{i}_up_w"], t[f"dec{i}_up_b"])
        cache["pre"][f"dec{i}_up"] = (cols, up.shape[1], pre)
        a = np.concatenate([pre, skips[i]], axis=1)
        cache["skip_shape"][i] = pre.shape[1]
        a = conv_relu(f"dec{i}_conv1", a)
        a = conv_relu(f"dec{i}_conv2", a)
    out, cols = _conv_cols(a, t["out_w"], t["out_b"])
    cache["pre"]["out"] = (cols, a.shape[1], out)
    return out[:, 0], cache


def backward_batch(params: PriorParams, cache, dout: np.ndarray):
    """Exact gradients of every tensor given d(loss)/d(residual)."""
    arch, t = params.arch, params.tensors
    grads = {}

    def conv_relu_bwd(name, da):
        cols, n_in, pre = cache["pre"][name]
        da = da * (pre > 0)
        dx, dw, db = _conv_backward(cols, n_in, t[f"{name}_w"], da)
        grads[f"{name}_w"] = dw
        grads[f"{name}_b"] = db
        return dx

    cols, n_in, _ = cache["pre"]["out"]
    dx, dw, db = _conv_backward(cols, n_in, t["out_w"], dout[:, None])
    grads["out_w"] = dw
    grads["out_b"] = db
    da = dx
    dskips = {}
    for i in range(arch.levels):
        da = conv_relu_bwd(f"dec{i}_conv2", da)
        da = conv_relu_bwd(f"dec{i}_conv1", da)
        n_up = cache["skip_shape"][i]
        d_up_out, dskips[i] = da[:, :n_up], da[:, n_up:]
        cols, n_in, _ = cache["pre"][f"dec{i}_up"]
        d_up, dw, db = _conv_backward(cols, n_in, t[f"dec{i}_up_w"], d_up_out)
        grads[f"dec{i}_up_w"] = dw
        grads[f"dec{i}_up_b"] = db
        da = _upsample_backward(d_up)
    da = conv_relu_bwd("bot_conv2", da)
    da = conv_relu_bwd("bot_conv1", da)
    for i in reversed(range(arch.levels)):
        idx, shape = cache["pool"][i]
        da = _maxpool_backward(da, idx, shape) + dskips[i]
        da = conv_relu_bwd(f"enc{i}_conv2", da)
        da = conv_relu_bwd(f"enc{i}_conv1", da)
    return grads, da


def net_forward(params: PriorParams, stack: np.ndarray) -> np.ndarray:
    """Residual slice for one (2h+1, H, W) stack."""
    out, _ = forward_batch(params, stack[None])
    return out[0]


def net_backward(params: PriorParams, stack: np.ndarray, upstream: np.ndarray):
    """Parameter gradients for one stack given d(loss)/d(residual)."""
    _, cache = forward_batch(params, stack[None])
    grads, _ = backward_batch(params, cache, upstream[None])
    return grads


# ---------------------------------------------------------------------------
# volume-level use
# ---------------------------------------------------------------------------

def stack_slices(vol: Volume, z: int, h: int) -> np.ndarray:
    """Channels z-h..z+h with out-of-range indices clamped to the boundary."""
    nz = vol.data.shape[0]
    if not 0 <= z < nz:
        raise ShapeError(f"slice {z} outside volume with {nz} slices")
    idx = np.clip(np.arange(z - h, z + h + 1), 0, nz - 1)
    return vol.data[idx]


def _pad_to_multiple(x: np.ndarray, div: int):
    h, w = x.shape[-2:]
    ph = (-h) % div
    pw = (-w) % div
    if ph == 0 and pw == 0:
        return x, (0, 0)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad, mode="reflect"), (ph, pw)


def denoise_volume(params: PriorParams, vol: Volume, h: int | None = None,
                   batch: int = 1) -> Volume:
    """Apply the prior slice-by-slice: output z = center slice - residual.

    The default batch of one slice keeps the arithmetic identical to a
    single-stack :func:`net_forward` call (and is no slower at typical
    slice sizes, where per-slice GEMMs stay cache-resident).
    """
    arch = params.arch
    if h is None:
        h = arch.half_width
    if h != arch.half_width:
        raise ShapeError(f"half-width {h} does not match network ({arch.half_width})")
    nz, ny, nx = vol.data.shape
    div = 1 << arch.levels
    dtype = next(iter(params.tensors.values())).dtype
    out = np.empty_like(vol.data)
    for lo in range(0, nz, batch):
        zs = range(lo, min(lo + batch, nz))
        stacks = np.stack([stack_slices(vol, z, h) for z in zs])
        padded, (ph, pw) = _pad_to_multiple(stacks.astype(dtype, copy=False), div)
        res, _ = forward_batch(params, padded)
        if ph or pw:
            res = res[:, :ny, :nx]
        out[lo:lo + len(zs)] = stacks[:, h] - res
    return Volume(out, vol.voxel_size_mm)
