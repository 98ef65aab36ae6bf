"""Procedural real/fake video corpus, leak-free splits, attacked twins and XAI pairing."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import attacks as atk
from . import gradcore as gc
from . import models as mdl
from . import xai
from .gradcore import FAKE, REAL, ModelBundle

logger = logging.getLogger(__name__)

FRAME_SIZE = 32
SEAM_BRIGHT = 0.12  # outer ring of the composited patch
SEAM_DARK = 0.12  # ring just inside it
POSE_JITTER = 0.7  # per-frame face offset, pixels
LIGHT_JITTER = 0.03  # per-frame global gain
ATTACK_TAGS = ("none", "pgd", "fgsm", "apgd", "nes", "square", "adaptive_std", "adaptive_xai")
LABEL_NAMES = gc.CLASS_NAMES


@dataclass
class VideoClip:
    video_id: str
    frames: np.ndarray  # (F, 3, H, W) float32 in [0, 1]
    label: int
    attack: str = "none"
    source_id: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or len(self.frames) < 1:
            raise ValueError(f"clip {self.video_id!r} needs frames shaped (F, C, H, W) with F >= 1")
        if self.label not in (REAL, FAKE):
            raise ValueError(f"clip {self.video_id!r}: label must be 0 (real) or 1 (fake)")
        if self.attack not in ATTACK_TAGS:
            raise ValueError(f"unknown attack tag {self.attack!r}")
        if self.attack != "none" and self.label != FAKE:
            raise ValueError("only fake clips can carry an attack tag")

    def __len__(self):
        return len(self.frames)


@dataclass
class Corpus:
    clips: list[VideoClip]
    manifest: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.clips)

    @property
    def ids(self) -> list[str]:
        return [c.video_id for c in self.clips]

    def frames(self) -> np.ndarray:
        if not self.clips:
            return np.zeros((0, 3, FRAME_SIZE, FRAME_SIZE), np.float32)
        return np.concatenate([c.frames for c in self.clips])

    def frame_labels(self) -> np.ndarray:
        return np.concatenate([np.full(len(c), c.label, np.int64) for c in self.clips]) \
            if self.clips else np.zeros(0, np.int64)

    def frame_video_ids(self) -> list[str]:
        return [c.video_id for c in self.clips for _ in range(len(c))]

    def subset(self, pred) -> "Corpus":
        return Corpus([c for c in self.clips if pred(c)], dict(self.manifest), list(self.records))

    def fingerprint(self) -> str:
        return corpus_fingerprint(self.clips)


def corpus_fingerprint(clips: Iterable[VideoClip]) -> str:
    h = hashlib.sha256()
    for c in clips:
        h.update(f"{c.video_id}|{c.label}|{c.attack}|{c.frames.shape}".encode())
        h.update(np.ascontiguousarray(c.frames, dtype="<f4").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# generation


def quantize(frames: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used by the on-disk PNG frames."""
    levels = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    return from_uint8(levels)


def from_uint8(levels: np.ndarray) -> np.ndarray:
    # float32 division on both the generation and PNG-load paths keeps values bit-identical
    return levels.astype(np.float32) / np.float32(255.0)


@dataclass(frozen=True)
class _Face:
    bg: np.ndarray
    skin: np.ndarray
    cy: float
    cx: float
    ry: float
    rx: float
    blobs: np.ndarray  # (k, 6): y, x, width, r, g, b amplitude
    patch: tuple[int, int, int]  # y0, x0, side of the fake compositing region
    shift: np.ndarray  # colour shift inside the composited patch


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _draw_video_params(rng: np.random.Generator, size: int) -> _Face:
    c = size / 2
    bg = rng.uniform(0.15, 0.75, 3)
    skin = np.array([rng.uniform(0.55, 0.9), rng.uniform(0.4, 0.7), rng.uniform(0.3, 0.6)])
    blobs = np.column_stack([
        rng.uniform(0, size, 4), rng.uniform(0, size, 4), rng.uniform(3, 8, 4),
        rng.uniform(-0.12, 0.12, (4, 3)),
    ])
    cy, cx = c + rng.uniform(-1.5, 1.5), c + rng.uniform(-1.5, 1.5)
    side = int(rng.integers(size * 3 // 8, size // 2 + 1))
    y0 = int(round(cy - side / 2)) + int(rng.integers(-1, 2))
    x0 = int(round(cx - side / 2)) + int(rng.integers(-1, 2))
    shift = np.array([0.06, -0.02, -0.05]) * rng.uniform(0.8, 1.2)
    return _Face(bg, skin, cy, cx,
                 size * rng.uniform(0.34, 0.4), size * rng.uniform(0.27, 0.33), blobs,
                 (y0, x0, side), shift)


def _render(p: _Face, rng: np.random.Generator, size: int, fake: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = rng.uniform(-POSE_JITTER, POSE_JITTER, 2)
    cy, cx = p.cy + dy, p.cx + dx
    img = np.broadcast_to(p.bg[:, None, None], (3, size, size)).copy()
    drift = rng.uniform(-2.0, 2.0, (len(p.blobs), 2))
    for (by, bx, bw, *amp), (ey, ex) in zip(p.blobs, drift):
        img += np.asarray(amp)[:, None, None] * np.exp(-((yy - by - ey) ** 2 + (xx - bx - ex) ** 2)
                                                       / (2 * bw * bw))
    r = np.sqrt(((yy - cy) / p.ry) ** 2 + ((xx - cx) / p.rx) ** 2)
    face = 1.0 - _smoothstep((r - 0.9) / 0.2)
    img = img * (1 - face) + p.skin[:, None, None] * face
    shade = 0.08 * (xx - cx) / p.rx
    img = img + face * shade
    for ex in (-0.4, 0.4):
        e = np.exp(-((yy - (cy - 0.25 * p.ry)) ** 2 + (xx - (cx + ex * p.rx)) ** 2) / 2.2)
        img = img * (1 - 0.7 * e)
    mouth = np.exp(-((yy - (cy + 0.5 * p.ry)) ** 2) / 1.0 - ((xx - cx) ** 2) / (2 * (0.35 * p.rx) ** 2))
    img = img * (1 - 0.45 * mouth) + mouth * 0.45 * np.array([0.6, 0.15, 0.2])[:, None, None]
    if fake:
        y0, x0, side = p.patch
        y0 += int(round(dy))
        x0 += int(round(dx))
        inside = ((yy >= y0) & (yy < y0 + side) & (xx >= x0) & (xx < x0 + side)).astype(np.float64)
        core = ((yy >= y0 + 1) & (yy < y0 + side - 1)
                & (xx >= x0 + 1) & (xx < x0 + side - 1)).astype(np.float64)
        inner = core - ((yy >= y0 + 2) & (yy < y0 + side - 2)
                        & (xx >= x0 + 2) & (xx < x0 + side - 2)).astype(np.float64)
        ring = inside - core
        # composited region: colour shift plus a bright/dark boundary seam
        img = img + inside * p.shift[:, None, None] + SEAM_BRIGHT * ring - SEAM_DARK * inner
    img = img + rng.normal(0.0, 0.01, img.shape)
    img *= 1.0 + rng.uniform(-LIGHT_JITTER, LIGHT_JITTER)
    return np.clip(img, 0.0, 1.0)


def generate_corpus(seed: int, n_videos: int = 60, frames_per_video: int = 16,
                    frame_size: int = FRAME_SIZE) -> Corpus:
    """Balanced real/fake clips; frames are quantised to the 8-bit grid.

    Real and fake videos draw faces from the same distribution; fake frames
    additionally carry a composited square patch with a colour shift and a
    one-pixel seam at its border.
    """
    if n_videos < 2 or n_videos % 2:
        raise ValueError(f"n_videos must be a positive even number, got {n_videos}")
    if frames_per_video < 1:
        raise ValueError("frames_per_video must be >= 1")
    if frame_size < FRAME_SIZE:
        raise ValueError(f"frame_size must be >= {FRAME_SIZE}")
    label_ss, *video_ss = np.random.SeedSequence(seed).spawn(n_videos + 1)
    labels = np.array([REAL] * (n_videos // 2) + [FAKE] * (n_videos // 2))
    labels = labels[np.random.default_rng(label_ss).permutation(n_videos)]
    clips = []
    for i, (ss, lab) in enumerate(zip(video_ss, labels)):
        rng = np.random.default_rng(ss)
        p = _draw_video_params(rng, frame_size)
        frames = np.stack([_render(p, rng, frame_size, lab == FAKE) for _ in range(frames_per_video)])
        clips.append(VideoClip(f"vid{i:03d}", quantize(frames), int(lab)))
    corpus = Corpus(clips)
    corpus.manifest = {
        "generator_seed": int(seed),
        "n_videos": n_videos,
        "clips_per_class": {"real": int((labels == REAL).sum()), "fake": int((labels == FAKE).sum())},
        "frames_per_video": frames_per_video,
        "frame_size": frame_size,
        "split": {},
        "attacks": {},
        "checksums": {c.video_id: clip_checksum(c) for c in clips},
        "fingerprint": corpus.fingerprint(),
    }
    return corpus


def clip_checksum(clip: VideoClip) -> str:
    return hashlib.sha256(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()).hexdigest()


def face_crop(frame, size: int = FRAME_SIZE) -> np.ndarray:
    """Deterministic centre crop standing in for a face detector."""
    f = np.asarray(frame, dtype=np.float32)
    h, w = f.shape[-2:]
    if h < size or w < size:
        raise gc.ShapeError(f"frame {h}x{w} is smaller than the {size}x{size} crop")
    top, left = (h - size) // 2, (w - size) // 2
    return f[..., top:top + size, left:left + size]


def split(corpus: Corpus, train_frac: float = 5 / 6, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Video-level split, stratified by class so both sides stay balanced."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie strictly between 0 and 1, got {train_frac}")
    rng = np.random.default_rng(seed)
    train_ids: set[str] = set()
    for lab in (REAL, FAKE):
        ids = sorted(c.video_id for c in corpus.clips if c.label == lab and c.attack == "none")
        k = int(round(len(ids) * train_frac))
        if k == 0 or k == len(ids):
            raise ValueError(f"split leaves an empty side for class {LABEL_NAMES[lab]!r} "
                             f"({len(ids)} videos, train_frac={train_frac})")
        train_ids.update(np.asarray(ids)[rng.permutation(len(ids))[:k]].tolist())

    def root_id(c):
        return c.source_id or c.video_id

    train = [c for c in corpus.clips if root_id(c) in train_ids]
    test = [c for c in corpus.clips if root_id(c) not in train_ids]
    man = dict(corpus.manifest)
    man["split"] = {"seed": int(seed), "train_frac": train_frac,
                    "train": sorted(train_ids), "test": sorted({root_id(c) for c in test})}
    return Corpus(train, dict(man)), Corpus(test, dict(man))


def apply_split(corpus: Corpus, train_ids: Iterable[str]) -> tuple[Corpus, Corpus]:
    """Re-create a recorded split; twins follow their source video."""
    keep = set(train_ids)
    unknown = keep - {c.video_id for c in corpus.clips}
    if unknown:
        raise ValueError(f"split names videos missing from the corpus: {sorted(unknown)[:3]}")
    root = [c.source_id or c.video_id for c in corpus.clips]
    train = [c for c, r in zip(corpus.clips, root) if r in keep]
    test = [c for c, r in zip(corpus.clips, root) if r not in keep]
    return Corpus(train, dict(corpus.manifest)), Corpus(test, dict(corpus.manifest))


# --------------------------------------------------------------------------
# attacked twins and XAI pairs


def build_attacked_corpus(corpus: Corpus, model: ModelBundle, attack: str,
                          cfg: atk.AttackConfig | None = None, det: mdl.AdvDetector | None = None,
                          method: str = "saliency") -> Corpus:
    """Add an attacked twin for every clean fake clip (per-frame attack, order kept).

    The twin frames are the float attack outputs. Frames the attack fails on
    stay in the twin with ``success=False`` in the records.
    """
    if attack not in ATTACK_TAGS or attack == "none":
        raise ValueError(f"unknown attack {attack!r}")
    cfg = cfg or atk.default_config(attack)
    sources = [c for c in corpus.clips if c.label == FAKE and c.attack == "none"]
    twins, records = [], []
    if sources:
        x = np.concatenate([face_crop(c.frames) for c in sources])
        res = atk.run_attack(attack, model, x, cfg, det=det, method=method)
        ids = [f"{c.video_id}/{k}" for c in sources for k in range(len(c))]
        records = res.records(ids)
        pos = 0
        for c in sources:
            n = len(c)
            twins.append(VideoClip(f"{c.video_id}__{attack}", res.x_adv[pos:pos + n], FAKE,
                                   attack, c.video_id))
            pos += n
    man = dict(corpus.manifest)
    man["attacks"] = {**man.get("attacks", {}), attack: cfg.to_dict()}
    return Corpus(list(corpus.clips) + twins, man, list(corpus.records) + records)


@dataclass
class PairedSet:
    images: np.ndarray
    maps: np.ndarray
    labels: np.ndarray  # 0 unattacked, 1 attacked
    video_ids: list[str]
    method: str
    attacks: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def with_black_maps(self) -> "PairedSet":
        return replace(self, maps=np.zeros_like(self.maps), method="black")

    def select(self, mask) -> "PairedSet":
        idx = np.flatnonzero(mask)
        return PairedSet(self.images[idx], self.maps[idx], self.labels[idx],
                         [self.video_ids[i] for i in idx], self.method,
                         [self.attacks[i] for i in idx] if self.attacks else [])

    def balance(self) -> tuple[float, float]:
        n = max(len(self), 1)
        return float((self.labels == mdl.UNATTACKED).sum() / n), float((self.labels == mdl.ATTACKED).sum() / n)


def pair_with_xai(corpus: Corpus, model: ModelBundle, method: str, include_black: bool = False,
                  ig: xai.IgConfig | None = None, clips: Sequence[VideoClip] | None = None) -> PairedSet:
    """Frames the deepfake detector calls real, with their normalised maps and attack labels."""
    clips = list(corpus.clips if clips is None else clips)
    if not clips:
        return PairedSet(np.zeros((0, 3, FRAME_SIZE, FRAME_SIZE), np.float32),
                         np.zeros((0, 3, FRAME_SIZE, FRAME_SIZE), np.float32),
                         np.zeros(0, np.int64), [], "black" if include_black else xai.canonical_method(method))
    x = np.concatenate([face_crop(c.frames) for c in clips])
    lab = np.concatenate([np.full(len(c), mdl.ATTACKED if c.attack != "none" else mdl.UNATTACKED)
                          for c in clips])
    vids = [c.video_id for c in clips for _ in range(len(c))]
    tags = [c.attack for c in clips for _ in range(len(c))]
    keep = mdl.deepfake_labels(mdl.predict(model, x)) == REAL
    x, lab = x[keep], lab[keep]
    vids = [v for v, k in zip(vids, keep) if k]
    tags = [t for t, k in zip(tags, keep) if k]
    if include_black:
        maps, tag = np.zeros_like(x), "black"
    else:
        tag = xai.canonical_method(method)
        maps = xai.normalize_map(xai.compute_maps(model, x, tag, ig=ig)) if len(x) else np.zeros_like(x)
    return PairedSet(x, maps.astype(np.float32), lab.astype(np.int64), vids, tag, tags)


# --------------------------------------------------------------------------
# persistence


def save_corpus(corpus: Corpus, root: str | Path) -> Path:
    """Clean clips as 8-bit PNG directories plus ``manifest.json``."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    listing = []
    for c in corpus.clips:
        if c.attack != "none":
            raise ValueError("attacked clips are stored with save_attacked, not as PNG")
        d = root / c.video_id
        d.mkdir(exist_ok=True)
        for k, f in enumerate(c.frames):
            px = np.round(np.clip(f, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(px, mode="RGB").save(d / f"frame_{k:03d}.png")
        listing.append({"video_id": c.video_id, "label": LABEL_NAMES[c.label], "frames": len(c)})
    man = {**corpus.manifest, "clips": listing,
           "checksums": {c.video_id: clip_checksum(c) for c in corpus.clips},
           "fingerprint": corpus.fingerprint()}
    (root / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return root / "manifest.json"


def load_corpus(root: str | Path, verify: bool = True) -> Corpus:
    from PIL import Image

    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    man = json.loads(path.read_text())
    clips = []
    for row in man["clips"]:
        d = root / row["video_id"]
        frames = [from_uint8(np.asarray(Image.open(d / f"frame_{k:03d}.png").convert("RGB"))
                             .transpose(2, 0, 1)) for k in range(row["frames"])]
        clip = VideoClip(row["video_id"], np.stack(frames), LABEL_NAMES.index(row["label"]))
        if verify and man["checksums"].get(clip.video_id) != clip_checksum(clip):
            raise ValueError(f"checksum mismatch for clip {clip.video_id!r}")
        clips.append(clip)
    man.pop("clips", None)
    return Corpus(clips, man)


def save_attacked(corpus: Corpus, path: str | Path) -> dict:
    """Attacked twins as float tensors in one XADF file plus a JSON sidecar with records."""
    path = Path(path)
    twins = [c for c in corpus.clips if c.attack != "none"]
    gc.write_xadf(path, {c.video_id: c.frames for c in twins})
    meta = {
        "clips": [{"video_id": c.video_id, "source_id": c.source_id, "attack": c.attack} for c in twins],
        "attacks": corpus.manifest.get("attacks", {}),
        "records": corpus.records,
        "fingerprint": corpus_fingerprint(twins),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def load_attacked(path: str | Path) -> tuple[list[VideoClip], dict]:
    path = Path(path)
    tensors = gc.read_xadf(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    clips = [VideoClip(r["video_id"], tensors[r["video_id"]], FAKE, r["attack"], r["source_id"])
             for r in meta["clips"]]
    if corpus_fingerprint(clips) != meta["fingerprint"]:
        raise ValueError(f"fingerprint mismatch in {path}")
    return clips, meta
