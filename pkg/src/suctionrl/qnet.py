"""Pixel-wise Q-network with hand-written forward and backward passes.

Structure: a small fully-convolutional encoder (3x3 convolutions, the first
two with stride 2), each stage followed by spatial batch normalization and
ReLU, a 1x1 head to a single channel, and a bilinear upsample back to the
input size.  The output Q map always has the same height/width as the input
heightmaps.

Parameters are immutable value objects; every update returns a new version.
All tensors are float64 so gradients can be checked against central finite
differences tightly.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .heightmap import Heightmap

_CHECKPOINT_MAGIC = b"SQNET1"

# The depth channel (meters, ~0-0.15) is rescaled to roughly unit range so the
# first convolution sees comparable dynamic ranges across channels.
DEPTH_INPUT_SCALE = 10.0


class BadInputError(ValueError):
    """Input state has the wrong shape ("bad input shape")."""


class BadGradientError(ValueError):
    """Gradient set does not match the parameters ("bad gradient")."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or mismatched ("bad checkpoint")."""


@dataclass(frozen=True)
class ArchConfig:
    """Network hyperparameters.

    The product of ``strides`` is the downsampling factor undone by the final
    bilinear upsample, so input sides must be divisible by it.
    """

    in_channels: int = 4
    channels: tuple[int, ...] = (32, 64, 64, 64)
    strides: tuple[int, ...] = (2, 2, 1, 1)
    kernel: int = 3
    bn_momentum: float = 0.99
    # Caps the 1/sigma gradient amplification of flat channels; heightmaps are
    # mostly constant, so a larger epsilon than the usual 1e-5 keeps the
    # backward pass well-conditioned.
    bn_eps: float = 1e-3
    head_init_scale: float = 1.0

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")

    @property
    def downsample(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out


@dataclass(frozen=True)
class QMap:
    values: np.ndarray  # (H, W) float64
    source_version: int


@dataclass(frozen=True)
class QNetworkParams:
    """All tensors of the network plus an update counter.

    ``tensors`` maps a fixed name set to float64 arrays.  Learnable entries
    are conv kernels/biases and normalization scale/shift; running mean/var
    buffers ride along but receive no gradients.
    """

    arch: ArchConfig
    tensors: dict[str, np.ndarray]
    version: int = 0

    def learnable_names(self) -> list[str]:
        return [n for n in self.tensors if not n.endswith(("_mean", "_var"))]


GradientSet = dict


def _tensor_layout(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    c_in = arch.in_channels
    for i, c_out in enumerate(arch.channels):
        layout.append((f"conv{i}_w", (c_out, c_in, arch.kernel, arch.kernel)))
        layout.append((f"conv{i}_b", (c_out,)))
        layout.append((f"bn{i}_gamma", (c_out,)))
        layout.append((f"bn{i}_beta", (c_out,)))
        layout.append((f"bn{i}_mean", (c_out,)))
        layout.append((f"bn{i}_var", (c_out,)))
        c_in = c_out
    layout.append(("head_w", (1, c_in, 1, 1)))
    layout.append(("head_b", (1,)))
    return layout


def init_params(arch: ArchConfig, seed: int) -> QNetworkParams:
    """Kaiming-style fan-in initialization from a seeded generator."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_layout(arch):
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            if name == "head_w":
                std *= arch.head_init_scale
            tensors[name] = rng.normal(0.0, std, size=shape)
        elif name.endswith("_gamma") or name.endswith("_var"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return QNetworkParams(arch, tensors, version=0)


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (c, k, k, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride)
    )
    return np.ascontiguousarray(windows).reshape(c * k * k, ho * wo), (ho, wo)


def _col2im(dcol: np.ndarray, x_shape, k: int, stride: int, pad: int, out_hw):
    c, h, w = x_shape
    ho, wo = out_hw
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    dwin = dcol.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[:, i, j]
    return dxp[:, pad : pad + h, pad : pad + w]


def _conv_forward(x, w, b, stride, pad):
    c_out = w.shape[0]
    col, (ho, wo) = _im2col(x, w.shape[2], stride, pad)
    w2d = w.reshape(c_out, -1)
    out = (w2d @ col + b[:, None]).reshape(c_out, ho, wo)
    return out, (col, x.shape, (ho, wo))


def _conv_backward(dout, w, cache, stride, pad):
    col, x_shape, out_hw = cache
    c_out = w.shape[0]
    d2d = dout.reshape(c_out, -1)
    dw = (d2d @ col.T).reshape(w.shape)
    db = d2d.sum(axis=1)
    dcol = w.reshape(c_out, -1).T @ d2d
    dx = _col2im(dcol, x_shape, w.shape[2], stride, pad, out_hw)
    return dx, dw, db


def _bn_forward(x, gamma, beta, running_mean, running_var, training: bool, eps: float):
    if training and x.shape[1] * x.shape[2] > 1:
        mu = x.mean(axis=(1, 2))
        var = x.var(axis=(1, 2))
    else:
        # Degenerate statistics: fall back to the running estimates.
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[:, None, None]) * inv_std[:, None, None]
    out = gamma[:, None, None] * xhat + beta[:, None, None]
    return out, (xhat, inv_std, training and x.shape[1] * x.shape[2] > 1)


def _bn_backward(dout, gamma, cache):
    xhat, inv_std, used_batch_stats = cache
    dgamma = (dout * xhat).sum(axis=(1, 2))
    dbeta = dout.sum(axis=(1, 2))
    dxhat = dout * gamma[:, None, None]
    if used_batch_stats:
        m1 = dxhat.mean(axis=(1, 2), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(1, 2), keepdims=True)
        dx = inv_std[:, None, None] * (dxhat - m1 - xhat * m2)
    else:
        dx = inv_std[:, None, None] * dxhat
    return dx, dgamma, dbeta


_upsample_cache: dict[tuple[int, int], np.ndarray] = {}


def _upsample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic bilinear interpolation matrix with half-pixel alignment."""
    key = (n_out, n_in)
    if key not in _upsample_cache:
        scale = n_out / n_in
        mat = np.zeros((n_out, n_in))
        for i in range(n_out):
            s = (i + 0.5) / scale - 0.5
            i0 = int(np.floor(s))
            t = s - i0
            a = min(max(i0, 0), n_in - 1)
            b = min(max(i0 + 1, 0), n_in - 1)
            mat[i, a] += 1.0 - t
            mat[i, b] += t
        _upsample_cache[key] = mat
    return _upsample_cache[key]


def bilinear_upsample(low: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsample of a 2-D map (exact on constants and interior ramps)."""
    u_r = _upsample_matrix(out_h, low.shape[0])
    u_c = _upsample_matrix(out_w, low.shape[1])
    return u_r @ low @ u_c.T


def _bilinear_backward(dout: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    u_r = _upsample_matrix(dout.shape[0], in_h)
    u_c = _upsample_matrix(dout.shape[1], in_w)
    return u_r.T @ dout @ u_c


# ---------------------------------------------------------------------------
# Network forward / backward
# ---------------------------------------------------------------------------


def _state_to_input(state: Heightmap | np.ndarray, arch: ArchConfig) -> np.ndarray:
    if isinstance(state, Heightmap):
        x = np.concatenate(
            [np.moveaxis(state.color, 2, 0), DEPTH_INPUT_SCALE * state.depth[None, :, :]],
            axis=0,
        ).astype(np.float64)
    else:
        x = np.asarray(state, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != arch.in_channels:
        raise BadInputError(
            f"bad input shape {x.shape}; expected ({arch.in_channels}, H, W)"
        )
    if x.shape[1] % arch.downsample or x.shape[2] % arch.downsample:
        raise BadInputError(
            f"bad input shape {x.shape}; sides must divide by {arch.downsample}"
        )
    return x


def _forward_full(params: QNetworkParams, state, training: bool):
    arch = params.arch
    t = params.tensors
    x = _state_to_input(state, arch)
    in_h, in_w = x.shape[1], x.shape[2]
    pad = arch.kernel // 2
    caches = []
    for i in range(len(arch.channels)):
        z, conv_cache = _conv_forward(x, t[f"conv{i}_w"], t[f"conv{i}_b"], arch.strides[i], pad)
        n, bn_cache = _bn_forward(
            z, t[f"bn{i}_gamma"], t[f"bn{i}_beta"], t[f"bn{i}_mean"], t[f"bn{i}_var"],
            training, arch.bn_eps,
        )
        a = np.maximum(n, 0.0)
        caches.append((conv_cache, bn_cache, n))
        x = a
    head, head_cache = _conv_forward(x, t["head_w"], t["head_b"], 1, 0)
    low = head[0]
    q = bilinear_upsample(low, in_h, in_w)
    return q, (caches, head_cache, low.shape, (in_h, in_w))


def forward(params: QNetworkParams, state: Heightmap | np.ndarray) -> QMap:
    """Inference-mode Q map (running normalization statistics)."""
    q, _ = _forward_full(params, state, training=False)
    return QMap(q, params.version)


def _backprop(params: QNetworkParams, q: np.ndarray, cache, pixel: tuple[int, int], seed_grad: float) -> GradientSet:
    caches, head_cache, low_shape, _ = cache
    arch = params.arch
    t = params.tensors
    grads: GradientSet = {}

    dq = np.zeros_like(q)
    dq[pixel] = seed_grad
    dlow = _bilinear_backward(dq, low_shape[0], low_shape[1])[None, :, :]
    dx, dw, db = _conv_backward(dlow, t["head_w"], head_cache, 1, 0)
    grads["head_w"] = dw
    grads["head_b"] = db
    pad = arch.kernel // 2
    for i in reversed(range(len(arch.channels))):
        conv_cache, bn_cache, pre_relu = caches[i]
        dn = dx * (pre_relu > 0)
        dz, dgamma, dbeta = _bn_backward(dn, t[f"bn{i}_gamma"], bn_cache)
        dx, dw, db = _conv_backward(dz, t[f"conv{i}_w"], conv_cache, arch.strides[i], pad)
        grads[f"bn{i}_gamma"] = dgamma
        grads[f"bn{i}_beta"] = dbeta
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
    return grads


def _check_pixel(pixel: tuple[int, int], shape) -> None:
    row, col = pixel
    if not (0 <= row < shape[0] and 0 <= col < shape[1]):
        raise IndexError(f"pixel ({row}, {col}) out of bounds for {shape}")


def backward_at_pixel(
    params: QNetworkParams,
    state: Heightmap | np.ndarray,
    pixel: tuple[int, int],
    td_error: float,
) -> GradientSet:
    """Gradients of the squared TD loss attached to one output pixel.

    The loss is 0.5 * td_error**2 with td_error = Q(pixel) - target, so the
    output-side seed gradient is td_error itself.  Uses training-mode
    normalization (batch statistics), matching the statistics an update sees.
    """
    q, cache = _forward_full(params, state, training=True)
    _check_pixel(pixel, q.shape)
    return _backprop(params, q, cache, pixel, td_error)


def value_and_grads_at_pixel(
    params: QNetworkParams,
    state: Heightmap | np.ndarray,
    pixel: tuple[int, int],
    target: float,
) -> tuple[float, float, GradientSet]:
    """One training forward + backward: returns (q_value, td_error, grads)."""
    q, cache = _forward_full(params, state, training=True)
    _check_pixel(pixel, q.shape)
    xi = float(q[pixel]) - target
    return float(q[pixel]), xi, _backprop(params, q, cache, pixel, xi)


def pixel_loss(params: QNetworkParams, state, pixel: tuple[int, int], target: float) -> float:
    """0.5 * (Q(pixel) - target)^2 under training-mode normalization.

    The finite-difference oracle for gradient checking differentiates exactly
    this scalar.
    """
    q, _ = _forward_full(params, state, training=True)
    return 0.5 * (q[pixel] - target) ** 2


def apply_update(params: QNetworkParams, grads: GradientSet, learning_rate: float) -> QNetworkParams:
    """Plain gradient descent step; returns a new parameter version."""
    new_tensors: dict[str, np.ndarray] = {}
    for name, value in params.tensors.items():
        if name in grads:
            g = grads[name]
            if g.shape != value.shape:
                raise BadGradientError(f"bad gradient shape for {name}: {g.shape} vs {value.shape}")
            new_tensors[name] = value - learning_rate * g
        else:
            new_tensors[name] = value.copy()
    for name in grads:
        if name not in params.tensors:
            raise BadGradientError(f"bad gradient: unknown tensor {name}")
    for name, value in new_tensors.items():
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite values in {name} after update")
    return QNetworkParams(params.arch, new_tensors, params.version + 1)


def update_running_stats(params: QNetworkParams, state) -> QNetworkParams:
    """Fold one state's batch statistics into the running mean/var buffers."""
    arch = params.arch
    t = dict(params.tensors)
    m = arch.bn_momentum
    x = _state_to_input(state, arch)
    pad = arch.kernel // 2
    for i in range(len(arch.channels)):
        z, _ = _conv_forward(x, t[f"conv{i}_w"], t[f"conv{i}_b"], arch.strides[i], pad)
        mu = z.mean(axis=(1, 2))
        var = z.var(axis=(1, 2))
        t[f"bn{i}_mean"] = m * t[f"bn{i}_mean"] + (1.0 - m) * mu
        t[f"bn{i}_var"] = m * t[f"bn{i}_var"] + (1.0 - m) * var
        n, _ = _bn_forward(
            z, t[f"bn{i}_gamma"], t[f"bn{i}_beta"], t[f"bn{i}_mean"], t[f"bn{i}_var"],
            True, arch.bn_eps,
        )
        x = np.maximum(n, 0.0)
    return QNetworkParams(arch, t, params.version)


def snapshot_target(params: QNetworkParams) -> QNetworkParams:
    """Deep, independent copy used as the bootstrap target network."""
    return QNetworkParams(
        params.arch, {k: v.copy() for k, v in params.tensors.items()}, params.version
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_params(params: QNetworkParams, path) -> None:
    """Binary checkpoint: magic, length-prefixed JSON header, raw tensors."""
    header = {
        "arch": {
            "in_channels": params.arch.in_channels,
            "channels": list(params.arch.channels),
            "strides": list(params.arch.strides),
            "kernel": params.arch.kernel,
            "bn_momentum": params.arch.bn_momentum,
            "bn_eps": params.arch.bn_eps,
            "head_init_scale": params.arch.head_init_scale,
        },
        "version": params.version,
        "tensor_order": list(params.tensors.keys()),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    for name, value in params.tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", 0, value.ndim))  # dtype tag 0 = float64
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_params(path) -> QNetworkParams:
    data = open(path, "rb").read()
    view = memoryview(data)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError("bad checkpoint: truncated file")
        piece = view[off : off + n]
        off += n
        return piece

    if bytes(take(len(_CHECKPOINT_MAGIC))) != _CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint: magic mismatch")
    (blob_len,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(bytes(take(blob_len)).decode("utf-8"))
        arch = ArchConfig(
            in_channels=int(header["arch"]["in_channels"]),
            channels=tuple(header["arch"]["channels"]),
            strides=tuple(header["arch"]["strides"]),
            kernel=int(header["arch"]["kernel"]),
            bn_momentum=float(header["arch"]["bn_momentum"]),
            bn_eps=float(header["arch"]["bn_eps"]),
            head_init_scale=float(header["arch"]["head_init_scale"]),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint: invalid header ({exc})") from exc

    tensors: dict[str, np.ndarray] = {}
    for expected_name in header["tensor_order"]:
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        if name != expected_name:
            raise CheckpointError("bad checkpoint: tensor order mismatch")
        dtype_tag, rank = struct.unpack("<BB", take(2))
        if dtype_tag != 0:
            raise CheckpointError(f"bad checkpoint: unknown dtype tag {dtype_tag}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = take(8 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if off != len(view):
        raise CheckpointError("bad checkpoint: trailing bytes")

    expected = {name for name, _ in _tensor_layout(arch)}
    if set(tensors) != expected:
        raise CheckpointError("bad checkpoint: tensor set mismatch")
    for name, shape in _tensor_layout(arch):
        if tensors[name].shape != shape:
            raise CheckpointError(f"bad checkpoint: shape mismatch for {name}")
    return QNetworkParams(arch, tensors, int(header["version"]))
