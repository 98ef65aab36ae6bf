"""Toy deepfake detectors, the backbone embedder and the adversarial-detector head."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Layer, LossSpec, ModelBundle

logger = logging.getLogger(__name__)

INPUT_SHAPE = (3, 32, 32)
EMBED_DIM = 64
HEAD_HIDDEN = 32
UNATTACKED, ATTACKED = 0, 1
ATTACK_NAMES = ("unattacked", "attacked")

ARCHS: dict[str, tuple[Layer, ...]] = {
    # three conv blocks, flattened into a dense embedding
    "arch-A": (
        Layer("conv", "conv1", 3, 8), Layer("relu"), Layer("maxpool"),
        Layer("conv", "conv2", 8, 16), Layer("relu"), Layer("maxpool"),
        Layer("conv", "conv3", 16, 32), Layer("relu"), Layer("maxpool"),
        Layer("flatten"),
        Layer("dense", "embed", 32 * 4 * 4, EMBED_DIM), Layer("relu"),
        Layer("dense", "fc", EMBED_DIM, 2),
    ),
    # four convs with global pooling before a dense embedding
    "arch-B": (
        Layer("conv", "conv1", 3, 8), Layer("relu"), Layer("maxpool"),
        Layer("conv", "conv2", 8, 16), Layer("relu"),
        Layer("conv", "conv3", 16, 16), Layer("relu"), Layer("maxpool"),
        Layer("conv", "conv4", 16, 32), Layer("relu"), Layer("maxpool"),
        Layer("gap"),
        Layer("dense", "embed", 32, EMBED_DIM), Layer("relu"),
        Layer("dense", "fc", EMBED_DIM, 2),
    ),
}
ARCH_ALIASES = {"A": "arch-A", "B": "arch-B"}


def canonical_arch(name: str) -> str:
    name = ARCH_ALIASES.get(name, name)
    if name not in ARCHS:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHS)}")
    return name


def _init_params(layers: Sequence[Layer], rng: np.random.Generator) -> gc.ParamSet:
    params: gc.ParamSet = {}
    for layer in layers:
        if layer.kind == "conv":
            fan_in = layer.n_in * layer.k * layer.k
            shape = (layer.n_out, layer.n_in, layer.k, layer.k)
        elif layer.kind == "dense":
            fan_in = layer.n_in
            shape = (layer.n_in, layer.n_out)
        else:
            continue
        limit = np.sqrt(6.0 / fan_in)
        params[layer.name + ".w"] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        params[layer.name + ".b"] = np.zeros(layer.n_out, dtype=np.float32)
    return params


def build(arch: str, seed: int) -> ModelBundle:
    """He-uniform initialised detector; identical seeds give identical weights."""
    arch = canonical_arch(arch)
    layers = ARCHS[arch]
    params = _init_params(layers, np.random.default_rng(seed))
    return ModelBundle(arch, layers, params, INPUT_SHAPE, seed)


def predict(model: ModelBundle, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for a stack of frames, evaluated in fixed-size chunks."""
    frames = np.asarray(frames, dtype=np.float32)
    out = [gc.forward(model, frames[i:i + batch_size]) for i in range(0, len(frames), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 2), np.float32)


def deepfake_labels(logits: np.ndarray) -> np.ndarray:
    """0 = real, 1 = fake; a logit tie counts as real (the margin loss is zero there)."""
    logits = np.asarray(logits)
    return (logits[..., gc.FAKE] > logits[..., gc.REAL]).astype(np.int64)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 600
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


def _batches(n: int, hyper: TrainHyper):
    rng = np.random.default_rng(hyper.seed)
    order = rng.permutation(n)
    pos = 0
    for _ in range(hyper.steps):
        if pos + hyper.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + hyper.batch_size]
        pos += hyper.batch_size
        yield idx


def train_deepfake_detector(model: ModelBundle, frames: np.ndarray, labels: np.ndarray,
                            hyper: TrainHyper | None = None) -> tuple[ModelBundle, list[float]]:
    """Minibatch Adam on softmax cross-entropy. Returns a trained copy and the loss history."""
    hyper = hyper or TrainHyper()
    frames = np.asarray(frames, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(frames) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(frames) != len(labels):
        raise gc.ShapeError(f"{len(frames)} frames but {len(labels)} labels")
    model = model.copy()
    state = gc.AdamState.zeros_like(model.params)
    history = []
    for idx in _batches(len(frames), hyper):
        xb, yb = frames[idx], labels[idx]
        history.append(gc.mean_loss(model, xb, LossSpec("cross_entropy", yb)))
        grads = gc.param_gradients(model, xb, yb)
        model.params = gc.adam_step(model.params, grads, state, hyper.lr,
                                    hyper.beta1, hyper.beta2, hyper.eps)
    model.meta["train"] = {"lr": hyper.lr, "batch_size": hyper.batch_size,
                           "steps": hyper.steps, "seed": hyper.seed}
    return model, history


# --------------------------------------------------------------------------
# backbone embedder and adversarial detector


@dataclass
class BackboneEmbedder:
    layers: tuple[Layer, ...]
    params: gc.ParamSet
    input_shape: tuple[int, ...] = INPUT_SHAPE
    dim: int = EMBED_DIM
    frozen: bool = False

    @classmethod
    def from_detector(cls, model: ModelBundle) -> "BackboneEmbedder":
        """The detector's trunk: every layer before its final dense classifier."""
        cut = max(i for i, l in enumerate(model.layers) if l.kind == "dense")
        layers = model.layers[:cut]
        names = {l.name for l in layers if l.name}
        params = {k: v.copy() for k, v in model.params.items() if k.split(".")[0] in names}
        return cls(layers, params, tuple(model.input_shape), model.layers[cut].n_in)

    def as_bundle(self) -> ModelBundle:
        return ModelBundle("backbone", self.layers, self.params, self.input_shape)


def embed(backbone: BackboneEmbedder, image) -> np.ndarray:
    """Embedding of one image ``(D,)`` or a batch ``(N, D)``."""
    x, single = gc._check_batch(backbone.as_bundle(), image)
    out, _ = gc.run_layers(backbone.layers, backbone.params, gc._to_internal(x))
    return out[0] if single else out


def _head_layers(dim: int, hidden: int) -> tuple[Layer, ...]:
    return (Layer("dense", "h1", 2 * dim, hidden), Layer("relu"), Layer("dense", "h2", hidden, 2))


@dataclass
class AdvDetector:
    """Binary attacked/unattacked classifier over (image, XAI map) pairs.

    Both inputs go through the same backbone; the image embedding fills
    head-input indices ``[0, D)`` and the map embedding ``[D, 2D)``.
    """

    backbone: BackboneEmbedder
    head: gc.ParamSet
    hidden: int = HEAD_HIDDEN
    regime: str = "full_finetune"
    meta: dict = field(default_factory=dict)

    @property
    def head_layers(self) -> tuple[Layer, ...]:
        return _head_layers(self.backbone.dim, self.hidden)

    def copy(self) -> "AdvDetector":
        bb = BackboneEmbedder(self.backbone.layers,
                              {k: v.copy() for k, v in self.backbone.params.items()},
                              self.backbone.input_shape, self.backbone.dim, self.backbone.frozen)
        return AdvDetector(bb, {k: v.copy() for k, v in self.head.items()},
                           self.hidden, self.regime, dict(self.meta))


REGIMES = ("full_finetune", "head_only")
REGIME_ALIASES = {"full": "full_finetune", "head": "head_only"}


def canonical_regime(name: str) -> str:
    name = REGIME_ALIASES.get(name, name)
    if name not in REGIMES:
        raise ValueError(f"unknown training regime {name!r}; choose from {REGIMES}")
    return name


def build_adv_detector(deepfake_model: ModelBundle, seed: int, hidden: int = HEAD_HIDDEN,
                       regime: str = "full_finetune") -> AdvDetector:
    backbone = BackboneEmbedder.from_detector(deepfake_model)
    head = _init_params(_head_layers(backbone.dim, hidden), np.random.default_rng(seed))
    det = AdvDetector(backbone, head, hidden, canonical_regime(regime))
    det.meta["source_arch"] = deepfake_model.arch
    return det


def _check_pair(det: AdvDetector, images, maps):
    bundle = det.backbone.as_bundle()
    x, single = gc._check_batch(bundle, images)
    m, single_m = gc._check_batch(bundle, maps)
    if x.shape != m.shape:
        raise gc.ShapeError(f"map shape {m.shape} does not match image shape {x.shape}")
    return x, m, single


def _adv_forward(det: AdvDetector, x: np.ndarray, m: np.ndarray):
    n = x.shape[0]
    both = np.concatenate([x, m])
    emb, bb_cache = gc.run_layers(det.backbone.layers, det.backbone.params, gc._to_internal(both))
    feats = np.concatenate([emb[:n], emb[n:]], axis=1)
    z, head_cache = gc.run_layers(det.head_layers, det.head, feats)
    return z, (bb_cache, head_cache)


def adv_logits(det: AdvDetector, images, maps, batch_size: int = 256) -> np.ndarray:
    x, m, single = _check_pair(det, images, maps)
    out = [_adv_forward(det, x[i:i + batch_size], m[i:i + batch_size])[0]
           for i in range(0, len(x), batch_size)]
    z = np.concatenate(out)
    return z[0] if single else z


def attacked_probability(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(z[..., UNATTACKED] - z[..., ATTACKED]))


def adv_detect(det: AdvDetector, image, xai_map, threshold: float | None = None):
    """Logits and attack verdict(s); 0 = unattacked, 1 = attacked.

    Without ``threshold`` the verdict is the argmax with ties going to
    unattacked; with it, attacked iff ``p(attacked) >= threshold``.
    """
    z = adv_logits(det, image, xai_map)
    if threshold is None:
        label = (z[..., ATTACKED] > z[..., UNATTACKED]).astype(np.int64)
    else:
        label = (attacked_probability(z) >= threshold).astype(np.int64)
    if np.ndim(label) == 0:
        label = int(label)
    return z, label


def adv_value_and_input_grads(det: AdvDetector, images, maps, target: int):
    """Per-example BCE toward ``target`` and its gradients w.r.t. the image and the map."""
    x, m, _ = _check_pair(det, images, maps)
    n = x.shape[0]
    z, (bb_cache, head_cache) = _adv_forward(det, x, m)
    vals, gz = gc.logit_loss(z, LossSpec("bce_to_class", target))
    gfeat, _ = gc.backprop_layers(det.head_layers, det.head, head_cache, gz.astype(np.float32))
    d = det.backbone.dim
    gemb = np.concatenate([gfeat[:, :d], gfeat[:, d:]])
    gin, _ = gc.backprop_layers(det.backbone.layers, det.backbone.params, bb_cache, gemb)
    gin = gc._to_external(gin)
    return vals, z, gin[:n], gin[n:]


def _adv_param_grads(det, x, m, labels, train_backbone: bool):
    n = x.shape[0]
    z, (bb_cache, head_cache) = _adv_forward(det, x, m)
    vals, gz = gc.logit_loss(z, LossSpec("cross_entropy", labels))
    gz = (gz / np.float32(n)).astype(np.float32)
    gfeat, hgrads = gc.backprop_layers(det.head_layers, det.head, head_cache, gz,
                                       want_params=True, need_input=train_backbone)
    bgrads = {}
    if train_backbone:
        d = det.backbone.dim
        gemb = np.concatenate([gfeat[:, :d], gfeat[:, d:]])
        _, bgrads = gc.backprop_layers(det.backbone.layers, det.backbone.params, bb_cache,
                                       gemb, want_params=True, need_input=False)
    return float(np.mean(vals)), hgrads, bgrads


def train_adv_detector(det: AdvDetector, images: np.ndarray, maps: np.ndarray,
                       labels: np.ndarray, regime: str | None = None,
                       hyper: TrainHyper | None = None) -> tuple[AdvDetector, list[float], list[str]]:
    """Train on (image, map, label) triples.

    ``head_only`` freezes the backbone bit-for-bit; ``full_finetune`` updates
    backbone and head together. Returns ``(detector, loss_history, warnings)``.
    """
    hyper = hyper or TrainHyper(steps=400)
    regime = canonical_regime(regime or det.regime)
    labels = np.asarray(labels, dtype=np.int64)
    images = np.asarray(images, dtype=np.float32)
    maps = np.asarray(maps, dtype=np.float32)
    if len(labels) == 0:
        raise ValueError("cannot train on an empty paired dataset")
    warnings = []
    frac = labels.mean()
    if not 0.4 <= frac <= 0.6:
        msg = f"class balance {frac:.1%} attacked is outside 40/60"
        logger.warning(msg)
        warnings.append(msg)
    det = det.copy()
    det.regime = regime
    det.backbone.frozen = regime == "head_only"
    train_bb = not det.backbone.frozen
    head_state = gc.AdamState.zeros_like(det.head)
    bb_state = gc.AdamState.zeros_like(det.backbone.params)
    history = []
    for idx in _batches(len(labels), hyper):
        loss, hgrads, bgrads = _adv_param_grads(det, images[idx], maps[idx], labels[idx], train_bb)
        history.append(loss)
        det.head = gc.adam_step(det.head, hgrads, head_state, hyper.lr,
                                hyper.beta1, hyper.beta2, hyper.eps)
        if train_bb:
            det.backbone.params = gc.adam_step(det.backbone.params, bgrads, bb_state, hyper.lr,
                                               hyper.beta1, hyper.beta2, hyper.eps)
    det.meta["train"] = {"lr": hyper.lr, "batch_size": hyper.batch_size,
                         "steps": hyper.steps, "seed": hyper.seed, "regime": regime}
    return det, history, warnings


# --------------------------------------------------------------------------
# persistence: XADF weights + JSON sidecar


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f4").tobytes())
    return h.hexdigest()


def _layers_to_json(layers):
    return [[l.kind, l.name, l.n_in, l.n_out, l.k] for l in layers]


def _layers_from_json(rows):
    return tuple(Layer(*row) for row in rows)


def save_model(path: str | Path, model: ModelBundle, extra: Mapping | None = None) -> dict:
    """Write ``<path>.xadf`` and ``<path>.json``; returns the manifest."""
    path = Path(path)
    gc.write_xadf(path.with_suffix(".xadf"), model.params)
    manifest = {
        "kind": "deepfake_detector",
        "arch": model.arch,
        "seed": model.seed,
        "input_shape": list(model.input_shape),
        "layers": _layers_to_json(model.layers),
        "param_count": model.param_count(),
        "params_sha256": params_digest(model.params),
        "meta": model.meta,
        **(extra or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_model(path: str | Path) -> tuple[ModelBundle, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    params = gc.read_xadf(path.with_suffix(".xadf"))
    model = ModelBundle(manifest["arch"], _layers_from_json(manifest["layers"]), params,
                        tuple(manifest["input_shape"]), manifest["seed"], manifest.get("meta", {}))
    return model, manifest


def save_adv_detector(path: str | Path, det: AdvDetector, extra: Mapping | None = None) -> dict:
    path = Path(path)
    tensors = {f"backbone/{k}": v for k, v in det.backbone.params.items()}
    tensors.update({f"head/{k}": v for k, v in det.head.items()})
    gc.write_xadf(path.with_suffix(".xadf"), tensors)
    manifest = {
        "kind": "adv_detector",
        "regime": det.regime,
        "hidden": det.hidden,
        "embed_dim": det.backbone.dim,
        "input_shape": list(det.backbone.input_shape),
        "backbone_layers": _layers_to_json(det.backbone.layers),
        "backbone_sha256": params_digest(det.backbone.params),
        "head_sha256": params_digest(det.head),
        "meta": det.meta,
        **(extra or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_adv_detector(path: str | Path) -> tuple[AdvDetector, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    tensors = gc.read_xadf(path.with_suffix(".xadf"))
    bb = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("backbone/")}
    head = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("head/")}
    backbone = BackboneEmbedder(_layers_from_json(manifest["backbone_layers"]), bb,
                                tuple(manifest["input_shape"]), manifest["embed_dim"],
                                manifest["regime"] == "head_only")
    det = AdvDetector(backbone, head, manifest["hidden"], manifest["regime"], manifest.get("meta", {}))
    return det, manifest
