"""Gradient attribution maps: Saliency, Input x Gradient, Integrated Gradients, Guided Backprop.

Maps are signed, have the shape of their input image, and explain the logit
of the class the model predicts at that input.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .gradcore import ModelBundle

METHODS = ("saliency", "input_x_grad", "integrated_grad", "guided_backprop")
METHOD_ALIASES = {
    "ixg": "input_x_grad",
    "ig": "integrated_grad",
    "gbp": "guided_backprop",
    "inputxgradient": "input_x_grad",
}
SHORT_NAMES = {"saliency": "saliency", "input_x_grad": "ixg",
               "integrated_grad": "ig", "guided_backprop": "gbp"}


def canonical_method(name: str) -> str:
    name = METHOD_ALIASES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown XAI method {name!r}; choose from {METHODS}")
    return name


@dataclass
class XaiMap:
    values: np.ndarray
    method: str
    target: np.ndarray | int | None = None

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class IgConfig:
    steps: int = 64
    baseline: np.ndarray | None = None  # all-zeros when None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("integrated gradients needs at least one step")


def predicted_class(model: ModelBundle, x) -> np.ndarray:
    z = gc.forward(model, x)
    return (z[..., gc.FAKE] > z[..., gc.REAL]).astype(np.int64)


def _targets(model, x, target):
    xb, single = gc._check_batch(model, x)
    if target is None:
        t = predicted_class(model, xb)
    else:
        t = np.broadcast_to(np.asarray(target, dtype=np.int64), (xb.shape[0],)).copy()
        if np.any((t < 0) | (t > 1)):
            raise ValueError(f"invalid target class {target!r}; expected 0 (real) or 1 (fake)")
    return xb, t, single


def _wrap(values, method, t, single):
    if single:
        return XaiMap(values[0], method, int(t[0]))
    return XaiMap(values, method, t)


def saliency(model: ModelBundle, x, target=None) -> XaiMap:
    """Raw gradient of the target logit w.r.t. the input."""
    xb, t, single = _targets(model, x, target)
    g, _ = gc.logit_input_gradient(model, xb, t)
    return _wrap(g, "saliency", t, single)


def input_x_gradient(model: ModelBundle, x, target=None) -> XaiMap:
    xb, t, single = _targets(model, x, target)
    g, _ = gc.logit_input_gradient(model, xb, t)
    return _wrap(xb * g, "input_x_grad", t, single)


def _ig_baseline(cfg: IgConfig, xb: np.ndarray) -> np.ndarray:
    if cfg.baseline is None:
        return np.zeros_like(xb)
    b = np.asarray(cfg.baseline, dtype=np.float32)
    if b.shape != xb.shape[1:] and b.shape != xb.shape:
        raise gc.ShapeError(f"baseline shape {b.shape} does not match image shape {xb.shape[1:]}")
    return np.broadcast_to(b, xb.shape).astype(np.float32)


def _ig_mean_gradient(model, xb, b, t, steps, chunk=256):
    """Average target-logit gradient over the right-Riemann points b + k/m (x - b)."""
    n = xb.shape[0]
    alphas = (np.arange(1, steps + 1, dtype=np.float32) / np.float32(steps))
    total = np.zeros_like(xb, dtype=np.float64)
    per = max(1, chunk // steps)
    for i in range(0, n, per):
        xs, bs, ts = xb[i:i + per], b[i:i + per], t[i:i + per]
        k = len(xs)
        path = bs[:, None] + alphas[None, :, None, None, None] * (xs - bs)[:, None]
        g, _ = gc.logit_input_gradient(model, path.reshape((-1,) + xs.shape[1:]), np.repeat(ts, steps))
        total[i:i + k] = g.reshape((k, steps) + xs.shape[1:]).astype(np.float64).mean(axis=1)
    return total.astype(np.float32)


def integrated_gradients(model: ModelBundle, x, target=None, cfg: IgConfig | None = None) -> XaiMap:
    """``(x - b) * mean_k grad Z_t(b + k/m (x - b))`` with a right-endpoint Riemann sum."""
    cfg = cfg or IgConfig()
    xb, t, single = _targets(model, x, target)
    b = _ig_baseline(cfg, xb)
    avg = _ig_mean_gradient(model, xb, b, t, cfg.steps)
    return _wrap((xb - b) * avg, "integrated_grad", t, single)


def guided_backprop_map(model: ModelBundle, x, target=None) -> XaiMap:
    xb, t, single = _targets(model, x, target)
    g = gc.guided_input_gradient(model, xb, t)
    return _wrap(g, "guided_backprop", t, single)


_FUNCS = {
    "saliency": saliency,
    "input_x_grad": input_x_gradient,
    "guided_backprop": guided_backprop_map,
}


def compute_map(model: ModelBundle, x, method: str, target=None,
                ig: IgConfig | None = None) -> XaiMap:
    method = canonical_method(method)
    if method == "integrated_grad":
        return integrated_gradients(model, x, target, ig)
    return _FUNCS[method](model, x, target)


def compute_maps(model: ModelBundle, frames: np.ndarray, method: str,
                 ig: IgConfig | None = None, batch_size: int = 128) -> np.ndarray:
    """Raw maps for a stack of frames, chunked to bound memory."""
    frames = np.asarray(frames, dtype=np.float32)
    out = np.empty_like(frames)
    for i in range(0, len(frames), batch_size):
        out[i:i + batch_size] = compute_map(model, frames[i:i + batch_size], method, ig=ig).values
    return out


def normalize_map(m):
    """Scale by ``1 / max|v|`` (per image for a batch); all-zero maps pass through."""
    if isinstance(m, XaiMap):
        return XaiMap(normalize_map(m.values), m.method, m.target)
    v = np.asarray(m, dtype=np.float32)
    if v.ndim <= 3:
        peak = np.max(np.abs(v)) if v.size else 0.0
        return v / peak if peak > 0 else v.copy()
    peak = np.abs(v).reshape(len(v), -1).max(axis=1)
    scale = np.where(peak > 0, peak, 1.0).astype(np.float32)
    return v / scale.reshape((-1,) + (1,) * (v.ndim - 1))


def normalize_map_vjp(v: np.ndarray, cot: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of per-image :func:`normalize_map` on a batch."""
    n = len(v)
    flat = v.reshape(n, -1).astype(np.float64)
    c = cot.reshape(n, -1).astype(np.float64)
    k = np.abs(flat).argmax(axis=1)
    rows = np.arange(n)
    peak = np.abs(flat[rows, k])
    out = c.copy()
    live = peak > 0
    s = np.where(live, peak, 1.0)
    out[live] = c[live] / s[live, None]
    corr = (c * flat).sum(axis=1) / (s * s)
    out[rows[live], k[live]] -= corr[live] * np.sign(flat[rows[live], k[live]])
    return out.reshape(v.shape).astype(np.float32)


def black_map(shape) -> XaiMap:
    """All-zero stand-in map used by the black-map (PGD-B) ablation."""
    return XaiMap(np.zeros(tuple(shape), dtype=np.float32), "black", None)


def map_input_vjp(model: ModelBundle, x: np.ndarray, method: str, cot: np.ndarray,
                  ig: IgConfig | None = None) -> np.ndarray:
    """``d <cot, map(x)> / dx`` for a batch, exact almost everywhere.

    The detectors are piecewise linear (ReLU, max-pool, affine layers), so
    every logit gradient is locally constant in ``x``. Saliency and guided
    maps therefore have zero input-Jacobian; Input x Gradient and Integrated
    Gradients keep only their explicit multiplicative ``x`` factor.
    """
    method = canonical_method(method)
    xb = np.asarray(x, dtype=np.float32)
    if method in ("saliency", "guided_backprop"):
        return np.zeros_like(xb)
    t = predicted_class(model, xb)
    if method == "input_x_grad":
        g, _ = gc.logit_input_gradient(model, xb, t)
        return cot * g
    cfg = ig or IgConfig()
    b = _ig_baseline(cfg, xb)
    return cot * _ig_mean_gradient(model, xb, b, t, cfg.steps)


def save_map_png(m, path: str | Path) -> None:
    """``|map|`` rescaled to 0..255 as an RGB PNG (channels-first input)."""
    from PIL import Image

    v = np.abs(m.values if isinstance(m, XaiMap) else np.asarray(m))
    peak = v.max()
    v = v / peak if peak > 0 else v
    img = np.round(255 * v).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img, mode="RGB").save(path)
