"""Small reverse-mode differentiation engine for sequential CNNs.

Tensors are plain ``float32`` numpy arrays. A model is a flat list of
:class:`Layer` records plus a ``ParamSet`` (``dict[str, ndarray]``). Images
enter in channels-first layout ``(N, C, H, W)``; convolutional stages run
channels-last internally, which keeps every convolution a single matmul.

The supported layer inventory is: 3x3 "same" convolution, ReLU, tanh, 2x2
max-pool, global average pool, flatten and dense. Batch losses are
mean-reduced unless a function says otherwise.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

REAL, FAKE = 0, 1
CLASS_NAMES = ("real", "fake")

ParamSet = dict[str, np.ndarray]

_LAYER_KINDS = ("conv", "relu", "tanh", "maxpool", "gap", "flatten", "dense")
# Layers through which the guided-ReLU rule is well defined.
_GUIDED_OK = {"conv", "relu", "maxpool", "gap", "flatten", "dense"}


class ShapeError(ValueError):
    """Input shape does not match what a model or operation expects."""


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str = ""
    n_in: int = 0
    n_out: int = 0
    k: int = 3

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "dense") and not self.name:
            raise ValueError(f"{self.kind} layer needs a parameter name")
        if self.kind == "conv" and self.k % 2 != 1:
            raise ValueError("conv kernels must have odd size for 'same' padding")


@dataclass
class ModelBundle:
    """Architecture plus parameters of one sequential network."""

    arch: str
    layers: tuple[Layer, ...]
    params: ParamSet
    input_shape: tuple[int, ...]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.arch,
            self.layers,
            {k: v.copy() for k, v in self.params.items()},
            self.input_shape,
            self.seed,
            dict(self.meta),
        )


@dataclass(frozen=True)
class LossSpec:
    """Scalar objective on a model's two logits.

    ``kind`` is one of

    * ``margin_real`` -- hinge ``max(Z_fake - Z_real, 0)``; zero once the
      input is classified real.
    * ``margin`` -- the same hinge toward ``target`` (a class index).
    * ``cross_entropy`` -- softmax cross-entropy against per-example labels.
    * ``bce_to_class`` -- binary cross-entropy of ``p(target)`` against 1.
    * ``logit`` -- the raw logit ``Z_target``.
    * ``xai_l2_distance`` -- L2 distance between the input's gradient map and
      a fixed reference map; ``target`` is ``(reference, cls, times_input)``.
    """

    kind: str
    target: object = None

    def __post_init__(self):
        needs = {"margin_real": False, "margin": True, "cross_entropy": True,
                 "bce_to_class": True, "logit": True, "xai_l2_distance": True}
        if self.kind not in needs:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if needs[self.kind] != (self.target is not None):
            state = "requires" if needs[self.kind] else "takes no"
            raise ValueError(f"loss {self.kind!r} {state} a target")


# --------------------------------------------------------------------------
# layer kernels (channels-last)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n,h,w,c,k,k
    return win.reshape(n * h * w, c * k * k)


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    n, h, wd, _ = x.shape
    cout, _, k, _ = w.shape
    cols = _im2col(x, k)
    out = cols @ w.reshape(cout, -1).T
    if b is not None:
        out += b
    return out.reshape(n, h, wd, cout), cols


def _fwd(layer: Layer, params: Mapping[str, np.ndarray], x: np.ndarray):
    kind = layer.kind
    if kind == "conv":
        out, cols = _conv(x, params[layer.name + ".w"], params[layer.name + ".b"])
        return out, cols
    if kind == "relu":
        out = np.maximum(x, 0)
        return out, out
    if kind == "tanh":
        y = np.tanh(x)
        return y, y
    if kind == "maxpool":
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max-pool needs even spatial dims, got {h}x{w}")
        out = np.maximum(np.maximum(x[:, 0::2, 0::2], x[:, 0::2, 1::2]),
                         np.maximum(x[:, 1::2, 0::2], x[:, 1::2, 1::2]))
        return out, (x, out)
    if kind == "gap":
        return x.mean(axis=(1, 2)), x.shape
    if kind == "flatten":
        if x.ndim == 4:
            return x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1), x.shape
        return x.reshape(x.shape[0], -1), x.shape
    # dense
    if x.ndim != 2:
        raise ShapeError(f"dense layer {layer.name!r} needs flat input; add a flatten layer")
    return x @ params[layer.name + ".w"] + params[layer.name + ".b"], x


def _bwd(layer: Layer, params, cache, g: np.ndarray, pgrads: dict | None,
         guided: bool, need_input: bool):
    kind = layer.kind
    if kind == "conv":
        w = params[layer.name + ".w"]
        cout, cin, k, _ = w.shape
        n, h, wd, _ = g.shape
        g2 = g.reshape(-1, cout)
        if pgrads is not None:
            pgrads[layer.name + ".w"] = (g2.T @ cache).reshape(w.shape)
            pgrads[layer.name + ".b"] = g2.sum(axis=0)
        if not need_input:
            return None
        if cin > cout:
            # correlation with the spatially flipped, transposed kernel
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx, _ = _conv(g, wf, None)
            return dx
        # col2im: scatter the column gradients back onto the padded input
        # (channel-major so each add runs along contiguous image rows)
        p = k // 2
        dcols = (w.reshape(cout, -1).T @ g2.T).reshape(cin, k, k, n, h, wd)
        dxp = np.zeros((cin, n, h + 2 * p, wd + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + wd] += dcols[:, i, j]
        return dxp[:, :, p:p + h, p:p + wd].transpose(1, 2, 3, 0)
    if kind == "relu":
        keep = cache > 0
        if guided:
            keep &= g > 0
        return g * keep
    if kind == "tanh":
        return g * (1.0 - cache * cache)
    if kind == "maxpool":
        x, out = cache
        dx = np.zeros_like(x)
        # route to the first maximal entry of each window (row-major order)
        free = np.ones(out.shape, dtype=bool)
        for i in (0, 1):
            for j in (0, 1):
                hit = free & (x[:, i::2, j::2] == out)
                dx[:, i::2, j::2] = g * hit
                free &= ~hit
        return dx
    if kind == "gap":
        n, h, w, c = cache
        return np.broadcast_to(g[:, None, None, :] / np.float32(h * w), cache).copy()
    if kind == "flatten":
        shape = cache
        if len(shape) == 4:
            n, h, w, c = shape
            return g.reshape(n, c, h, w).transpose(0, 2, 3, 1)
        return g.reshape(shape)
    # dense
    x = cache
    wname = layer.name + ".w"
    if pgrads is not None:
        pgrads[wname] = x.T @ g
        pgrads[layer.name + ".b"] = g.sum(axis=0)
    if not need_input:
        return None
    return g @ params[wname].T


# --------------------------------------------------------------------------
# network passes


def _to_internal(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)) if x.ndim == 4 else x


def _to_external(g: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(g.transpose(0, 3, 1, 2)) if g.ndim == 4 else g


def _check_batch(model: ModelBundle, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    shape = tuple(model.input_shape)
    if x.shape == shape:
        return x[None], True
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, False
    raise ShapeError(
        f"{model.arch}: expected input of shape {shape} or (N, *{shape}), got {x.shape}"
    )


def run_layers(layers: Iterable[Layer], params, x: np.ndarray):
    """Forward through ``layers`` on internal-layout ``x``; returns (out, caches)."""
    caches = []
    for layer in layers:
        x, c = _fwd(layer, params, x)
        caches.append(c)
    return x, caches


def backprop_layers(layers, params, caches, g, *, guided=False, want_params=False,
                    need_input=True):
    """Reverse pass matching :func:`run_layers`; returns (input_grad, param_grads)."""
    layers = list(layers)
    if guided:
        bad = sorted({l.kind for l in layers} - _GUIDED_OK)
        if bad:
            raise ValueError(f"guided backpropagation undefined for layers: {', '.join(bad)}")
    pgrads: dict | None = {} if want_params else None
    last = len(layers) - 1
    for i in range(last, -1, -1):
        keep_going = need_input or i > 0
        g = _bwd(layers[i], params, caches[i], g, pgrads, guided, keep_going)
        if g is None:
            break
    return g, (pgrads or {})


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


def forward(model: ModelBundle, batch) -> np.ndarray:
    """Logits of ``model`` on ``batch``; a single unbatched input returns shape (2,)."""
    x, single = _check_batch(model, batch)
    out, _ = run_layers(model.layers, model.params, _to_internal(x))
    out = _finite(out.astype(np.float32, copy=False), "logits")
    return out[0] if single else out


# --------------------------------------------------------------------------
# losses on logits: per-example values and d(value)/d(logits)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _class_vector(target, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(target, dtype=np.int64), (n,))
    if np.any((t < 0) | (t > 1)):
        raise ValueError(f"class targets must be 0 (real) or 1 (fake), got {np.unique(t)}")
    return t


def logit_loss(z: np.ndarray, loss: LossSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-example loss values and their gradient w.r.t. the logits ``z`` (N, 2)."""
    n = z.shape[0]
    rows = np.arange(n)
    g = np.zeros_like(z)
    if loss.kind in ("margin_real", "margin"):
        t = _class_vector(REAL if loss.kind == "margin_real" else loss.target, n)
        o = 1 - t
        gap = z[rows, o] - z[rows, t]
        active = gap > 0
        g[rows, o] = active
        g[rows, t] = -active.astype(z.dtype)
        return np.maximum(gap, 0.0), g
    if loss.kind in ("cross_entropy", "bce_to_class"):
        t = _class_vector(loss.target, n)
        o = 1 - t
        gap = (z[rows, o] - z[rows, t]).astype(np.float64)
        s = _sigmoid(gap).astype(z.dtype)
        g[rows, o] = s
        g[rows, t] = -s
        return _softplus(gap), g
    if loss.kind == "logit":
        t = _class_vector(loss.target, n)
        g[rows, t] = 1.0
        return z[rows, t].astype(np.float64), g
    raise ValueError(f"loss {loss.kind!r} is not a function of the logits alone")


def _value_and_grad(model, x, loss: LossSpec, guided=False):
    xi = _to_internal(x)
    z, caches = run_layers(model.layers, model.params, xi)
    vals, gz = logit_loss(z, loss)
    gx, _ = backprop_layers(model.layers, model.params, caches, gz.astype(np.float32),
                            guided=guided)
    return vals, z, _to_external(gx)


def value_and_input_grad(model: ModelBundle, x, loss: LossSpec):
    """Per-example losses, logits and per-example input gradients.

    Row ``i`` of the gradient is the derivative of example ``i``'s own loss,
    i.e. the gradient of the summed (not mean) batch loss.
    """
    xb, single = _check_batch(model, x)
    if loss.kind == "xai_l2_distance":
        vals, z, g = _xai_distance_grad(model, xb, loss)
    else:
        vals, z, g = _value_and_grad(model, xb, loss)
    _finite(g, "input gradient")
    if single:
        return vals[0], z[0], g[0]
    return vals, z, g


def input_gradient(model: ModelBundle, x, loss: LossSpec) -> np.ndarray:
    """Gradient of the (mean-reduced) loss w.r.t. the input; same shape as ``x``."""
    xb, single = _check_batch(model, x)
    _, _, g = value_and_input_grad(model, xb, loss)
    if single:
        return g[0]
    return g / np.float32(xb.shape[0])


def logit_input_gradient(model: ModelBundle, x, target, *, guided=False) -> tuple[np.ndarray, np.ndarray]:
    """Per-example gradient of ``Z_target`` w.r.t. the input, plus the logits."""
    xb, single = _check_batch(model, x)
    _, z, g = _value_and_grad(model, xb, LossSpec("logit", np.asarray(target)), guided)
    _finite(g, "input gradient")
    return (g[0], z[0]) if single else (g, z)


def guided_input_gradient(model: ModelBundle, x, target) -> np.ndarray:
    """Input gradient of ``Z_target`` with the guided-ReLU backward rule.

    Every ReLU passes gradient only where its forward input was positive and
    the incoming gradient is positive.
    """
    return logit_input_gradient(model, x, target, guided=True)[0]


def _xai_distance_grad(model, x, loss: LossSpec):
    # The layer inventory is piecewise linear, so the input gradient of a
    # logit is locally constant: its own derivative w.r.t. x vanishes almost
    # everywhere. Differentiating ||map(x) - ref|| therefore only sees the
    # explicit x factor of input-times-gradient maps.
    ref, cls, times_input = loss.target
    if any(l.kind == "tanh" for l in model.layers):
        raise ValueError("xai_l2_distance needs a piecewise-linear model (no tanh)")
    grad, z = logit_input_gradient(model, x, np.asarray(cls))
    if grad.ndim == x.ndim - 1:
        grad = grad[None]
    m = grad * x if times_input else grad
    diff = (m - np.asarray(ref, dtype=np.float32)).reshape(x.shape[0], -1).astype(np.float64)
    norm = np.sqrt((diff * diff).sum(axis=1))
    if not times_input:
        return norm, z, np.zeros_like(x)
    unit = np.divide(diff, norm[:, None], out=np.zeros_like(diff), where=norm[:, None] > 0)
    g = (unit.reshape(x.shape) * grad).astype(np.float32)
    return norm, z, g


def param_gradients(model: ModelBundle, batch, labels, loss: LossSpec | None = None) -> ParamSet:
    """Mean-reduced parameter gradients; ``loss`` defaults to cross-entropy on ``labels``."""
    xb, _ = _check_batch(model, batch)
    labels = np.asarray(labels)
    if labels.shape[0] != xb.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {xb.shape[0]}")
    loss = loss or LossSpec("cross_entropy", labels)
    z, caches = run_layers(model.layers, model.params, _to_internal(xb))
    _, gz = logit_loss(z, loss)
    gz = (gz / np.float32(xb.shape[0])).astype(np.float32)
    _, grads = backprop_layers(model.layers, model.params, caches, gz,
                               want_params=True, need_input=False)
    for k, v in grads.items():
        _finite(v, f"gradient of {k}")
    return grads


def mean_loss(model: ModelBundle, batch, loss: LossSpec) -> float:
    z = forward(model, batch)
    z = z[None] if z.ndim == 1 else z
    vals, _ = logit_loss(z, loss)
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamSet:
    """Bias-corrected Adam update; returns new parameters and advances ``state.t``.

    Parameters absent from ``grads`` are left untouched.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    new = dict(params)
    for k, g in grads.items():
        m = state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new[k] = (params[k] - step).astype(np.float32)
    return new


# --------------------------------------------------------------------------
# XADF tensor container

XADF_MAGIC = b"XADF"
XADF_VERSION = 1
_DTYPE_F32 = 0


def write_xadf(target: str | Path | BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    """Serialize named float32 tensors.

    Layout: ``b"XADF"``, u16 version, then per record: u16 name length, UTF-8
    name, u8 dtype (0 = f32), u8 rank, rank x u32 dims, little-endian payload.
    """
    buf = io.BytesIO()
    buf.write(XADF_MAGIC)
    buf.write(struct.pack("<H", XADF_VERSION))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: XADF stores float32 only, got {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = buf.getvalue()
    if isinstance(target, (str, Path)):
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        Path(target).write_bytes(data)
    else:
        target.write(data)


def read_xadf(source: str | Path | BinaryIO | bytes) -> dict[str, np.ndarray]:
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    if data[:4] != XADF_MAGIC:
        raise ValueError("not an XADF container (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != XADF_VERSION:
        raise ValueError(f"unsupported XADF version {version}")
    pos, out = 6, {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        dtype, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if dtype != _DTYPE_F32:
            raise ValueError(f"{name}: unknown dtype code {dtype}")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name in out:
            raise ValueError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(np.float32)
    return out
