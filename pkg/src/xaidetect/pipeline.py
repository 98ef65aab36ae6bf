"""Cascade inference, Vid/F2F metrics, ROC analysis, transfer evaluation and timing."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import data as dt
from . import models as mdl
from . import xai
from .gradcore import FAKE, REAL, ModelBundle

NO_ATTACK_LABEL = -1


# --------------------------------------------------------------------------
# cascade


class CountingDetector:
    """Wraps an adversarial detector and counts the frames it scores."""

    def __init__(self, det: mdl.AdvDetector):
        self.det = det
        self.calls = 0
        self.frames = 0

    def logits(self, images, maps):
        self.calls += 1
        self.frames += len(images)
        return mdl.adv_logits(self.det, images, maps)


@dataclass
class CascadeVerdict:
    deepfake: np.ndarray          # 0 real, 1 fake
    attack: np.ndarray            # 0/1 for frames called real, -1 otherwise
    score: np.ndarray             # p(attacked) for frames called real, NaN otherwise
    logits: np.ndarray            # deepfake-detector logits

    def __len__(self):
        return len(self.deepfake)


def classify_frames(frames, g: ModelBundle, d: mdl.AdvDetector | CountingDetector | None = None,
                    method: str = "saliency", crop: Callable = dt.face_crop, threshold: float = 0.5,
                    ig: xai.IgConfig | None = None, black: bool = False) -> CascadeVerdict:
    """crop -> g; frames g calls real get an XAI map and go to d."""
    x = crop(np.asarray(frames, dtype=np.float32))
    if x.ndim == 3:
        x = x[None]
    z = mdl.predict(g, x)
    df = mdl.deepfake_labels(z)
    attack = np.full(len(x), NO_ATTACK_LABEL, dtype=np.int64)
    score = np.full(len(x), np.nan)
    live = np.flatnonzero(df == REAL)
    if d is not None and len(live):
        xr = x[live]
        if black:
            maps = np.zeros_like(xr)
        else:
            maps = xai.normalize_map(xai.compute_maps(g, xr, method, ig=ig))
        zl = d.logits(xr, maps) if isinstance(d, CountingDetector) else mdl.adv_logits(d, xr, maps)
        p = mdl.attacked_probability(zl)
        score[live] = p
        attack[live] = (p >= threshold).astype(np.int64)
    return CascadeVerdict(df, attack, score, z)


def classify_frame(frame, g: ModelBundle, d=None, method: str = "saliency",
                   crop: Callable = dt.face_crop, threshold: float = 0.5,
                   ig: xai.IgConfig | None = None) -> dict:
    """Single-frame cascade verdict as a plain record."""
    v = classify_frames(np.asarray(frame)[None], g, d, method, crop, threshold, ig)
    out = {"deepfake": dt.LABEL_NAMES[int(v.deepfake[0])]}
    if v.deepfake[0] == REAL and d is not None:
        out["attack"] = mdl.ATTACK_NAMES[int(v.attack[0])]
        out["score"] = float(v.score[0])
    return out


# --------------------------------------------------------------------------
# metrics


def video_label(frame_labels) -> int:
    """Fake iff strictly more than half of the frames are fake."""
    f = np.asarray(frame_labels)
    if f.size == 0:
        raise ValueError("cannot aggregate an empty clip")
    return FAKE if 2 * int((f == FAKE).sum()) > f.size else REAL


def vid_metric(clips: Sequence[dt.VideoClip] | Sequence[int], verdicts: Sequence) -> float:
    """Video-level accuracy of majority-voted frame labels."""
    if len(clips) != len(verdicts):
        raise ValueError(f"{len(clips)} clips but {len(verdicts)} verdict lists")
    if not clips:
        raise ValueError("no clips to score")
    truth = [c.label if isinstance(c, dt.VideoClip) else int(c) for c in clips]
    for c, v in zip(clips, verdicts):
        if isinstance(c, dt.VideoClip) and len(c) != len(v):
            raise ValueError(f"clip {c.video_id!r} has {len(c)} frames but {len(v)} verdicts")
    pred = [video_label(v) for v in verdicts]
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


def f2f_metric(truth, predicted) -> float:
    t, p = np.asarray(truth), np.asarray(predicted)
    if t.size == 0:
        raise ValueError("no frames to score")
    if t.shape != p.shape:
        raise ValueError(f"{t.size} labels but {p.size} predictions")
    return float(np.mean(t == p))


def deepfake_scores(g: ModelBundle, clips: Sequence[dt.VideoClip]) -> dict:
    """F2F and Vid accuracy of the deepfake detector alone on a set of clips."""
    per_clip = [mdl.deepfake_labels(mdl.predict(g, dt.face_crop(c.frames))) for c in clips]
    truth = np.concatenate([np.full(len(c), c.label) for c in clips])
    return {
        "f2f": f2f_metric(truth, np.concatenate(per_clip)),
        "vid": vid_metric(list(clips), per_clip),
        "n_frames": int(truth.size),
        "n_videos": len(clips),
    }


# --------------------------------------------------------------------------
# ROC


@dataclass
class RocResult:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float | None
    n_pos: int
    n_neg: int

    @property
    def defined(self) -> bool:
        return self.auc is not None

    def point(self, threshold: float) -> tuple[float, float]:
        hit = np.flatnonzero(self.thresholds == threshold)
        if not len(hit):
            raise KeyError(f"threshold {threshold} is not on the curve")
        return float(self.fpr[hit[0]]), float(self.tpr[hit[0]])

    def accuracy_at(self, threshold: float = 0.5) -> float:
        fpr, tpr = self.point(threshold)
        # a missing class has an undefined rate but contributes no frames
        hits = (tpr * self.n_pos if self.n_pos else 0.0) + ((1.0 - fpr) * self.n_neg if self.n_neg else 0.0)
        return hits / (self.n_pos + self.n_neg)

    def rows(self) -> list[dict]:
        return [{"threshold": float(t), "fpr": float(f), "tpr": float(r)}
                for t, f, r in zip(self.thresholds, self.fpr, self.tpr)]

    def to_csv(self) -> str:
        return rows_to_csv(self.rows(), ["threshold", "fpr", "tpr"])


def roc_curve(scores, labels, extra_thresholds: Sequence[float] = (0.5,)) -> RocResult:
    """Sweep ``predict positive iff score >= t`` over every distinct score.

    Sentinels ``-inf`` (everything positive) and ``+inf`` (nothing positive)
    close the curve; ``extra_thresholds`` are always included. Points are
    sorted by threshold. AUC is the trapezoid area, or ``None`` when only one
    class is present.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("ROC scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("ROC labels must be binary 0/1")
    pos, neg = int((y == 1).sum()), int((y == 0).sum())
    th = np.unique(np.concatenate([s, np.asarray(extra_thresholds, dtype=np.float64),
                                   [-np.inf, np.inf]]))
    s_pos, s_neg = np.sort(s[y == 1]), np.sort(s[y == 0])
    tp = pos - np.searchsorted(s_pos, th, side="left")
    fp = neg - np.searchsorted(s_neg, th, side="left")
    tpr = tp / pos if pos else np.full(len(th), np.nan)
    fpr = fp / neg if neg else np.full(len(th), np.nan)
    auc = None
    if pos and neg:
        # thresholds ascend, so (fpr, tpr) descend; integrate in increasing fpr
        auc = float(np.trapezoid(tpr[::-1], fpr[::-1]))
        auc = min(max(auc, 0.0), 1.0)
    return RocResult(th, fpr, tpr, auc, pos, neg)


# --------------------------------------------------------------------------
# adversarial-detector evaluation


@dataclass
class EvalReport:
    """Per-attack results plus optional ROC, PGD-B and timing sections."""

    tag: str
    rows: dict[str, dict] = field(default_factory=dict)
    roc: dict[str, RocResult] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def accuracy(self, attack: str) -> float:
        return self.rows[attack]["accuracy"]

    def to_dict(self) -> dict:
        out = {"tag": self.tag, "meta": self.meta,
               "rows": {k: self.rows[k] for k in sorted(self.rows)}}
        if self.roc:
            out["roc"] = {k: {"auc": r.auc, "n_pos": r.n_pos, "n_neg": r.n_neg, "points": r.rows()}
                          for k, r in sorted(self.roc.items())}
        if self.timing:
            out["timing"] = self.timing
        return out

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        cols = sorted({k for r in self.rows.values() for k in r})
        return rows_to_csv([{"attack": a, **self.rows[a]} for a in sorted(self.rows)], ["attack"] + cols)


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return o


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _score_pairs(det: mdl.AdvDetector, pairs: dt.PairedSet, black: bool) -> np.ndarray:
    maps = np.zeros_like(pairs.maps) if black else pairs.maps
    return mdl.attacked_probability(mdl.adv_logits(det, pairs.images, maps))


def evaluate_adv_detector(det: mdl.AdvDetector, test_sets: Mapping[str, dt.PairedSet],
                          black_maps: bool = False, threshold: float = 0.5,
                          tag: str = "eval", with_roc: bool = True) -> EvalReport:
    """Accuracy at ``threshold`` per attack; ``black_maps`` adds the zero-map ablation.

    With the ablation each row also carries ``accuracy_black`` and
    ``delta = accuracy - accuracy_black``; images are untouched.
    """
    if not test_sets:
        raise ValueError("no test sets to evaluate")
    rep = EvalReport(tag, meta={"threshold": threshold, "regime": det.regime})
    for name, pairs in test_sets.items():
        if len(pairs) == 0:
            raise ValueError(f"test set {name!r} is empty")
        p = _score_pairs(det, pairs, black=False)
        pred = (p >= threshold).astype(np.int64)
        row = {
            "accuracy": f2f_metric(pairs.labels, pred),
            "n": len(pairs),
            "n_attacked": int((pairs.labels == mdl.ATTACKED).sum()),
            "n_unattacked": int((pairs.labels == mdl.UNATTACKED).sum()),
            "method": pairs.method,
        }
        if with_roc:
            roc = roc_curve(p, pairs.labels, (threshold,))
            rep.roc[name] = roc
            row["auc"] = roc.auc
        if black_maps:
            pb = _score_pairs(det, pairs, black=True)
            row["accuracy_black"] = f2f_metric(pairs.labels, (pb >= threshold).astype(np.int64))
            row["delta"] = row["accuracy"] - row["accuracy_black"]
        rep.rows[name] = row
    return rep


def transfer_eval(det: mdl.AdvDetector, target_model: ModelBundle,
                  attacked_corpora: Mapping[str, dt.Corpus], method: str,
                  source: str, target: str, ig: xai.IgConfig | None = None,
                  threshold: float = 0.5) -> EvalReport:
    """Evaluate ``det`` on corpora attacked against ``target_model``.

    Frames are paired through ``target_model``: it decides which frames pass
    as real and supplies their XAI maps.
    """
    sets = {a: dt.pair_with_xai(c, target_model, method, ig=ig) for a, c in attacked_corpora.items()}
    sets = {a: s for a, s in sets.items() if len(s)}
    rep = evaluate_adv_detector(det, sets, threshold=threshold, tag=f"{source}->{target}")
    rep.meta.update({"source": source, "target": target, "method": xai.canonical_method(method)})
    return rep


# --------------------------------------------------------------------------
# overhead


def overhead_benchmark(g: ModelBundle, d: mdl.AdvDetector, frames: np.ndarray,
                       methods: Sequence[str] = xai.METHODS, repeats: int = 3,
                       ig: xai.IgConfig | None = None, min_frames: int = 50,
                       min_repeats: int = 3, timer: Callable[[], float] = time.perf_counter) -> dict:
    """Per-frame wall time of the full cascade, with a black map as the no-XAI baseline.

    Each frame runs through the cascade on its own, one after the other.
    ``repeats`` passes are made per configuration; min, mean and median of
    the per-pass mean are reported in milliseconds, along with the
    percentage over the baseline mean.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if len(frames) < min_frames:
        raise ValueError(f"overhead benchmark needs at least {min_frames} frames, got {len(frames)}")
    if repeats < min_repeats:
        raise ValueError(f"overhead benchmark needs at least {min_repeats} repeats, got {repeats}")
    res_info = time.get_clock_info("perf_counter")
    configs = [("baseline", None)] + [(xai.canonical_method(m), xai.canonical_method(m)) for m in methods]
    # warm-up pass per configuration
    for _, m in configs:
        classify_frames(frames[:1], g, d, m or "saliency", ig=ig, black=m is None)
    table = {}
    for name, m in configs:
        passes = []
        for _ in range(repeats):
            t0 = timer()
            for f in frames:
                classify_frames(f[None], g, d, m or "saliency", ig=ig, black=m is None)
            passes.append((timer() - t0) * 1000.0 / len(frames))
        table[name] = {"min_ms": min(passes), "mean_ms": statistics.fmean(passes),
                       "median_ms": statistics.median(passes), "passes_ms": passes}
    base = table["baseline"]["mean_ms"]
    for row in table.values():
        row["overhead_pct"] = 100.0 * (row["mean_ms"] - base) / base
    return {
        "n_frames": len(frames),
        "repeats": repeats,
        "ig_steps": (ig or xai.IgConfig()).steps,
        "timer_resolution_s": res_info.resolution,
        "timer_coarse": res_info.resolution > 1e-3,
        "table": table,
    }
