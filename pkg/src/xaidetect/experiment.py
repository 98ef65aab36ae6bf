"""Run configuration and the on-disk experiment stages driven by the CLI.

Every stage reads its inputs from and writes its outputs to one run
directory, so stages can be invoked separately or chained by ``repro``::

    corpus/                 PNG frames + manifest.json
    models/                 deepfake detectors (XADF + JSON)
    attacks/<arch>/         attacked twins (XADF + JSON) and per-image records
    adv/                    adversarial detectors per arch x method x regime
    reports/                deterministic JSON/CSV reports and ROC tables
    figures/                PNG figures
    timing/                 wall-clock measurements (not deterministic)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import attacks as atk
from . import data as dt
from . import models as mdl
from . import pipeline as pl
from . import plotting
from . import xai
from .gradcore import FAKE, REAL

logger = logging.getLogger(__name__)

TEST_ATTACKS = ("pgd", "fgsm", "apgd", "nes", "square")
ADAPTIVE_ATTACKS = ("adaptive_std", "adaptive_xai")
SELECTORS = ("attack", "xai", "regime", "arch", "black_xai")


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"config field {field_name!r}: {msg}")
        self.field = field_name


class MissingArtifact(RuntimeError):
    pass


class HashMismatch(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    # corpus
    n_videos: int = 60
    frames_per_video: int = 16
    train_frac: float = 5 / 6
    # deepfake detectors
    archs: list = field(default_factory=lambda: ["arch-A", "arch-B"])
    detector_steps: int = 600
    detector_lr: float = 1e-3
    batch_size: int = 16
    # attacks
    epsilon: float = 16 / 255
    test_attacks: list = field(default_factory=lambda: list(TEST_ATTACKS))
    attack_overrides: dict = field(default_factory=dict)
    attack_frames: int = 0  # 0 = every test fake frame
    # XAI and adversarial detectors
    xai_methods: list = field(default_factory=lambda: list(xai.METHODS))
    ig_steps: int = 64
    regimes: list = field(default_factory=lambda: list(mdl.REGIMES))
    adv_steps: int = 400
    adv_lr: float = 1e-3
    head_hidden: int = mdl.HEAD_HIDDEN
    # adaptive attacks, transfer, timing
    adaptive_attacks: list = field(default_factory=lambda: list(ADAPTIVE_ATTACKS))
    adaptive_method: str = "saliency"
    adaptive_iters: int = 100
    transfer_method: str = "saliency"
    transfer_regime: str = "full_finetune"
    bench_frames: int = 50
    bench_repeats: int = 3
    bench_arch: str = "arch-A"
    figures: bool = True
    # command selectors: narrow a single command, never hashed
    attack: str | None = None
    xai: str | None = None
    regime: str | None = None
    arch: str | None = None
    black_xai: bool = False

    # ---------------------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for k in raw:
            if k not in names:
                raise ConfigError(k, "unknown field")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"file {str(p)!r} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{p} is not valid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a JSON object")
        raw.update(overrides or {})
        return cls.from_dict(raw)

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a non-negative integer")
        need(isinstance(self.n_videos, int) and self.n_videos >= 4 and self.n_videos % 2 == 0,
             "n_videos", "must be an even integer >= 4")
        need(isinstance(self.frames_per_video, int) and self.frames_per_video >= 1,
             "frames_per_video", "must be >= 1")
        need(0 < self.train_frac < 1, "train_frac", "must lie strictly between 0 and 1")
        need(isinstance(self.archs, list) and self.archs, "archs", "must be a non-empty list")
        for i, a in enumerate(self.archs):
            try:
                self.archs[i] = mdl.canonical_arch(a)
            except ValueError as e:
                raise ConfigError("archs", str(e)) from None
        need(self.detector_steps >= 0, "detector_steps", "must be >= 0")
        need(self.adv_steps >= 0, "adv_steps", "must be >= 0")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(0 <= self.epsilon <= 1, "epsilon", "must lie in [0, 1]")
        for a in self.test_attacks:
            need(a in TEST_ATTACKS, "test_attacks", f"unknown attack {a!r}")
        need("pgd" in self.test_attacks, "test_attacks", "must include pgd (the training attack)")
        for a, ov in self.attack_overrides.items():
            need(a in atk.ATTACKS, "attack_overrides", f"unknown attack {a!r}")
            bad = set(ov) - {f.name for f in dataclasses.fields(atk.AttackConfig)}
            need(not bad, "attack_overrides", f"unknown AttackConfig fields {sorted(bad)}")
        for i, m in enumerate(self.xai_methods):
            try:
                self.xai_methods[i] = xai.canonical_method(m)
            except ValueError as e:
                raise ConfigError("xai_methods", str(e)) from None
        for i, r in enumerate(self.regimes):
            try:
                self.regimes[i] = mdl.canonical_regime(r)
            except ValueError as e:
                raise ConfigError("regimes", str(e)) from None
        need(self.ig_steps >= 1, "ig_steps", "must be >= 1")
        for a in self.adaptive_attacks:
            need(a in ADAPTIVE_ATTACKS, "adaptive_attacks", f"unknown adaptive attack {a!r}")
        try:
            self.adaptive_method = xai.canonical_method(self.adaptive_method)
            self.transfer_method = xai.canonical_method(self.transfer_method)
        except ValueError as e:
            raise ConfigError("adaptive_method/transfer_method", str(e)) from None
        need(self.adaptive_method in atk.XAI_ADAPTIVE_METHODS, "adaptive_method",
             f"must be one of {atk.XAI_ADAPTIVE_METHODS}")
        try:
            self.transfer_regime = mdl.canonical_regime(self.transfer_regime)
            self.bench_arch = mdl.canonical_arch(self.bench_arch)
        except ValueError as e:
            raise ConfigError("transfer_regime/bench_arch", str(e)) from None
        need(self.bench_frames >= 1 and self.bench_repeats >= 1, "bench_frames", "must be >= 1")
        if self.attack is not None:
            need(self.attack in atk.ATTACKS, "attack", f"unknown attack {self.attack!r}")
        if self.xai is not None:
            try:
                self.xai = xai.canonical_method(self.xai)
            except ValueError as e:
                raise ConfigError("xai", str(e)) from None
        if self.regime is not None:
            try:
                self.regime = mdl.canonical_regime(self.regime)
            except ValueError as e:
                raise ConfigError("regime", str(e)) from None
        if self.arch is not None:
            try:
                self.arch = mdl.canonical_arch(self.arch)
            except ValueError as e:
                raise ConfigError("arch", str(e)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hashed_fields(self) -> dict:
        d = self.to_dict()
        for k in SELECTORS + ("out", "figures"):
            d.pop(k)
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_fields(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # selectors ------------------------------------------------------------
    def sel_archs(self) -> list[str]:
        return [self.arch] if self.arch else list(self.archs)

    def sel_methods(self) -> list[str]:
        return [self.xai] if self.xai else list(self.xai_methods)

    def sel_regimes(self) -> list[str]:
        return [self.regime] if self.regime else list(self.regimes)

    def sel_attacks(self) -> list[str]:
        if self.attack and self.attack in TEST_ATTACKS:
            return [self.attack]
        return [] if self.attack else list(self.test_attacks)

    def sel_adaptive(self) -> list[str]:
        if self.attack:
            return [self.attack] if self.attack in ADAPTIVE_ATTACKS else []
        return list(self.adaptive_attacks)

    def attack_config(self, name: str, seed: int) -> atk.AttackConfig:
        return atk.default_config(name, epsilon=self.epsilon, seed=seed,
                                  **self.attack_overrides.get(name, {}))

    def ig(self) -> xai.IgConfig:
        return xai.IgConfig(steps=self.ig_steps)


def stage_seed(root: int, stage: str) -> int:
    """Seed for a named stage, forked from the root seed independently of call order."""
    ss = np.random.SeedSequence([root, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# --------------------------------------------------------------------------
# run directory


class Run:
    def __init__(self, cfg: RunConfig, allow_mismatch: bool = False):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.allow_mismatch = allow_mismatch
        self._corpus: dt.Corpus | None = None
        self._models: dict[str, mdl.ModelBundle] = {}
        self.timings: dict[str, float] = {}

    # paths
    def p(self, *parts) -> Path:
        path = self.root.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.cfg.config_hash}

    def write_json(self, rel: str, obj: Any) -> Path:
        path = self.p(rel)
        body = {**self.stamp, **obj} if isinstance(obj, dict) else {**self.stamp, "data": obj}
        path.write_text(json.dumps(pl._jsonable(body), indent=2, sort_keys=True) + "\n")
        return path

    def write_csv(self, rel: str, text: str) -> Path:
        path = self.p(rel)
        path.write_text(f"# config_hash={self.cfg.config_hash}\n" + text)
        return path

    def write_timing(self, name: str, obj: dict) -> Path:
        return self.write_json(f"timing/{name}.json", obj)

    def _check(self, what: str, recorded: dict) -> None:
        problems = []
        if recorded.get("config_hash") != self.cfg.config_hash:
            problems.append(f"config hash {recorded.get('config_hash')} != {self.cfg.config_hash}")
        fp = recorded.get("corpus_fingerprint")
        if fp is not None and fp != self.corpus().fingerprint():
            problems.append("corpus fingerprint differs from the corpus on disk")
        if problems:
            msg = f"{what}: " + "; ".join(problems)
            if not self.allow_mismatch:
                raise HashMismatch(msg + " (pass --allow-hash-mismatch to override)")
            logger.warning(msg)

    # corpus
    def corpus(self) -> dt.Corpus:
        if self._corpus is None:
            path = self.root / "corpus"
            if not (path / "manifest.json").exists():
                raise MissingArtifact(f"no corpus under {path}; run gen-data first")
            self._corpus = dt.load_corpus(path)
        return self._corpus

    def splits(self) -> tuple[dt.Corpus, dt.Corpus]:
        c = self.corpus()
        return dt.apply_split(c, c.manifest["split"]["train"])

    # models
    def model(self, arch: str) -> mdl.ModelBundle:
        if arch not in self._models:
            path = self.root / "models" / f"deepfake_{arch}"
            if not path.with_suffix(".json").exists():
                raise MissingArtifact(f"no trained {arch} detector at {path}.json; run train-detector first")
            m, man = mdl.load_model(path)
            self._check(f"model {arch}", man)
            self._models[arch] = m
        return self._models[arch]

    def adv_path(self, arch, method, regime) -> Path:
        return self.root / "adv" / f"{arch}_{xai.SHORT_NAMES[method]}_{regime}"

    def adv_detector(self, arch, method, regime) -> mdl.AdvDetector:
        path = self.adv_path(arch, method, regime)
        if not path.with_suffix(".json").exists():
            raise MissingArtifact(f"no adversarial detector at {path}.json; run train-adv first")
        det, man = mdl.load_adv_detector(path)
        self._check(f"adversarial detector {path.name}", man)
        return det

    def attacked(self, arch: str, split: str, attack: str) -> list[dt.VideoClip]:
        path = self.root / "attacks" / arch / f"{split}_{attack}.xadf"
        if not path.exists():
            raise MissingArtifact(f"no attacked corpus at {path}; run attack first")
        clips, meta = dt.load_attacked(path)
        self._check(f"attacked corpus {path.name}", meta)
        return clips

    def timed(self, name):
        run = self

        class _T:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = run.timings.get(name, 0.0) + time.perf_counter() - self.t0

        return _T()


# --------------------------------------------------------------------------
# stages


def gen_data(run: Run) -> dt.Corpus:
    cfg = run.cfg
    corpus = dt.generate_corpus(stage_seed(cfg.seed, "corpus"), cfg.n_videos, cfg.frames_per_video)
    train, _ = dt.split(corpus, cfg.train_frac, stage_seed(cfg.seed, "split"))
    corpus.manifest["split"] = train.manifest["split"]
    corpus.manifest.update(run.stamp)
    dt.save_corpus(corpus, run.root / "corpus")
    run._corpus = dt.load_corpus(run.root / "corpus")
    return run._corpus


def train_detectors(run: Run) -> dict:
    cfg = run.cfg
    train, test = run.splits()
    out = {}
    for arch in cfg.sel_archs():
        with run.timed(f"train_detector/{arch}"):
            hyper = mdl.TrainHyper(lr=cfg.detector_lr, batch_size=cfg.batch_size,
                                   steps=cfg.detector_steps, seed=stage_seed(cfg.seed, f"batches/{arch}"))
            model = mdl.build(arch, stage_seed(cfg.seed, f"init/{arch}"))
            model, history = mdl.train_deepfake_detector(model, train.frames(), train.frame_labels(), hyper)
        scores = {"train": pl.deepfake_scores(model, train.clips), "test": pl.deepfake_scores(model, test.clips)}
        mdl.save_model(run.root / "models" / f"deepfake_{arch}", model,
                       {**run.stamp, "corpus_fingerprint": run.corpus().fingerprint(), "scores": scores,
                        "loss_first": history[0] if history else None,
                        "loss_last": history[-1] if history else None})
        run._models.pop(arch, None)
        run.write_json(f"reports/deepfake_{arch}.json", {"arch": arch, "param_count": model.param_count(),
                                                          "scores": scores,
                                                          "loss_history_every_50": history[::50]})
        out[arch] = scores
    return out


def _attack_frames(cfg: RunConfig, clips: list[dt.VideoClip]) -> list[dt.VideoClip]:
    if cfg.attack_frames <= 0:
        return clips
    return [dt.VideoClip(c.video_id, c.frames[:cfg.attack_frames], c.label) for c in clips]


def _save_attack(run: Run, arch: str, split: str, attack: str, corpus: dt.Corpus, tag: str | None = None):
    name = f"{split}_{tag or attack}"
    meta = dt.save_attacked(corpus, run.p("attacks", arch, f"{name}.xadf"))
    # fold provenance into the sidecar
    side = run.root / "attacks" / arch / f"{name}.json"
    body = json.loads(side.read_text())
    body.update(run.stamp)
    side.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    rows = corpus.records
    cols = ["attack", "id", "seed", "epsilon", "iterations", "queries", "success", "final_margin_loss"]
    run.write_csv(f"attacks/{arch}/{name}_records.csv", pl.rows_to_csv(rows, cols))
    return meta


def _twin_summary(g, twins: list[dt.VideoClip], records: list[dict], sources: list[dt.VideoClip]) -> dict:
    sc = pl.deepfake_scores(g, twins)
    delta = np.concatenate([t.frames - s.frames[:len(t)] for t, s in zip(twins, sources)])
    adv = np.concatenate([t.frames for t in twins])
    return {
        "f2f": sc["f2f"], "vid": sc["vid"], "n_frames": sc["n_frames"],
        "success_rate": float(np.mean([r["success"] for r in records])),
        "mean_queries": float(np.mean([r["queries"] for r in records])),
        "mean_iterations": float(np.mean([r["iterations"] for r in records])),
        "max_linf": float(np.abs(delta).max()),
        "min_pixel": float(adv.min()), "max_pixel": float(adv.max()),
    }


def run_attacks(run: Run) -> dict:
    """PGD twins of the training fakes and every selected test attack on the test fakes."""
    cfg = run.cfg
    train, test = run.splits()
    report = {}
    for arch in cfg.sel_archs():
        g = run.model(arch)
        rows = {}
        if cfg.attack in (None, "pgd"):
            src = [c for c in train.clips if c.label == FAKE]
            with run.timed(f"attack/{arch}/train_pgd"):
                c = dt.build_attacked_corpus(dt.Corpus(src),
                                             g, "pgd", cfg.attack_config("pgd", stage_seed(cfg.seed, f"atk/{arch}/train/pgd")))
            _save_attack(run, arch, "train", "pgd", c)
        test_src = _attack_frames(cfg, [c for c in test.clips if c.label == FAKE])
        for name in cfg.sel_attacks():
            with run.timed(f"attack/{arch}/test_{name}"):
                c = dt.build_attacked_corpus(dt.Corpus(test_src), g, name,
                                             cfg.attack_config(name, stage_seed(cfg.seed, f"atk/{arch}/test/{name}")))
            _save_attack(run, arch, "test", name, c)
            twins = [t for t in c.clips if t.attack != "none"]
            rows[name] = _twin_summary(g, twins, c.records, test_src)
        clean = pl.deepfake_scores(g, [c for c in test.clips if c.label == FAKE])
        rows["none"] = {"f2f": clean["f2f"], "vid": clean["vid"], "n_frames": clean["n_frames"]}
        report[arch] = rows
        if rows:
            rep = pl.EvalReport(f"attacks_{arch}", rows, meta={"arch": arch, "epsilon": cfg.epsilon})
            run.write_json(f"reports/attacks_{arch}.json", rep.to_dict())
            run.write_csv(f"reports/attacks_{arch}.csv", rep.to_csv())
    return report


def _pairs(run: Run, arch: str, method: str, split: str, attack: str, clips_real, cache: dict) -> dt.PairedSet:
    key = (arch, method, split, attack)
    if key not in cache:
        twins = run.attacked(arch, split, attack)
        g = run.model(arch)
        cache[key] = dt.pair_with_xai(dt.Corpus([]), g, method, ig=run.cfg.ig(), clips=list(clips_real) + twins)
    return cache[key]


def train_adv(run: Run, cache: dict | None = None) -> dict:
    cfg = run.cfg
    cache = {} if cache is None else cache
    train, _ = run.splits()
    real = [c for c in train.clips if c.label == REAL]
    out = {}
    for arch in cfg.sel_archs():
        g = run.model(arch)
        for method in cfg.sel_methods():
            with run.timed(f"maps/{arch}/{method}/train"):
                pairs = _pairs(run, arch, method, "train", "pgd", real, cache)
            for regime in cfg.sel_regimes():
                tag = f"{arch}/{method}/{regime}"
                with run.timed(f"train_adv/{tag}"):
                    det = mdl.build_adv_detector(g, stage_seed(cfg.seed, f"head/{tag}"), cfg.head_hidden, regime)
                    hyper = mdl.TrainHyper(lr=cfg.adv_lr, batch_size=cfg.batch_size, steps=cfg.adv_steps,
                                           seed=stage_seed(cfg.seed, f"advbatches/{tag}"))
                    det, hist, warns = mdl.train_adv_detector(det, pairs.images, pairs.maps, pairs.labels,
                                                              regime, hyper)
                det.meta.update({"method": method, "arch": arch})
                mdl.save_adv_detector(run.adv_path(arch, method, regime), det,
                                      {**run.stamp, "corpus_fingerprint": run.corpus().fingerprint(),
                                       "warnings": warns, "n_pairs": len(pairs),
                                       "balance": pairs.balance(),
                                       "loss_last": hist[-1] if hist else None})
                out[tag] = {"n_pairs": len(pairs), "warnings": warns}
    return out


def _test_sets(run: Run, arch: str, method: str, attacks, cache: dict) -> dict[str, dt.PairedSet]:
    _, test = run.splits()
    real = [c for c in test.clips if c.label == REAL]
    sets = {}
    for a in attacks:
        with run.timed(f"maps/{arch}/{method}/test"):
            sets[a] = _pairs(run, arch, method, "test", a, real, cache)
    return sets


def _adaptive_sets(run: Run, arch: str, method: str, regime: str, det: mdl.AdvDetector) -> dict:
    """Adaptive attacks on the test fakes, paired like any other attack."""
    cfg = run.cfg
    out = {}
    if method != cfg.adaptive_method:
        return out
    _, test = run.splits()
    real = [c for c in test.clips if c.label == REAL]
    src = _attack_frames(cfg, [c for c in test.clips if c.label == FAKE])
    g = run.model(arch)
    for name in cfg.sel_adaptive():
        tag = f"{name}_{xai.SHORT_NAMES[method]}" + (f"_{regime}" if name == "adaptive_std" else "")
        attack_cfg = cfg.attack_config(name, stage_seed(cfg.seed, f"atk/{arch}/test/{tag}"))
        attack_cfg = dataclasses.replace(attack_cfg, max_iters=cfg.adaptive_iters)
        path = run.root / "attacks" / arch / f"test_{tag}.xadf"
        if path.exists():
            twins, _ = dt.load_attacked(path)
        else:
            with run.timed(f"attack/{arch}/test_{tag}"):
                c = dt.build_attacked_corpus(dt.Corpus(src), g, name, attack_cfg, det=det, method=method)
            _save_attack(run, arch, "test", name, c, tag=tag)
            twins = [t for t in c.clips if t.attack != "none"]
        ps = dt.pair_with_xai(dt.Corpus([]), g, method, ig=cfg.ig(), clips=real + twins)
        out[name] = (ps, pl.deepfake_scores(g, twins))
    return out


def evaluate(run: Run, cache: dict | None = None) -> dict:
    cfg = run.cfg
    cache = {} if cache is None else cache
    out = {}
    attacks = cfg.sel_attacks()
    for arch in cfg.sel_archs():
        for method in cfg.sel_methods():
            sets = _test_sets(run, arch, method, attacks, cache)
            for regime in cfg.sel_regimes():
                det = run.adv_detector(arch, method, regime)
                tag = f"{arch}_{xai.SHORT_NAMES[method]}_{regime}"
                empty = sorted(a for a, ps in sets.items() if len(ps) == 0)
                live = {a: ps for a, ps in sets.items() if len(ps)}
                if not live:
                    raise MissingArtifact(f"{tag}: every test pairing is empty; no frame passes as real")
                with run.timed(f"eval/{tag}"):
                    rep = pl.evaluate_adv_detector(det, live, black_maps=True, tag=tag)
                    adaptive = _adaptive_sets(run, arch, method, regime, det)
                    for name, (ps, df_scores) in adaptive.items():
                        if len(ps):
                            sub = pl.evaluate_adv_detector(det, {name: ps}, black_maps=True, tag=tag)
                            rep.rows[name] = {**sub.rows[name], "deepfake_f2f": df_scores["f2f"]}
                            rep.roc[name] = sub.roc[name]
                rep.meta.update({"arch": arch, "method": method, "regime": regime, "empty_sets": empty})
                run.write_json(f"reports/eval_{tag}.json", rep.to_dict())
                run.write_csv(f"reports/eval_{tag}.csv", rep.to_csv())
                score_rows = []
                for name, ps in {**sets, **{k: v[0] for k, v in adaptive.items()}}.items():
                    if len(ps) == 0:
                        continue
                    p = mdl.attacked_probability(mdl.adv_logits(det, ps.images, ps.maps))
                    score_rows += [{"attack": name, "label": int(l), "score": float(s)}
                                   for l, s in zip(ps.labels, p)]
                run.write_csv(f"reports/scores_{tag}.csv",
                              pl.rows_to_csv(score_rows, ["attack", "label", "score"]))
                out[tag] = rep
    return out


def transfer(run: Run) -> dict:
    cfg = run.cfg
    archs = list(cfg.archs)
    out = {}
    if len(archs) < 2:
        return out
    method, regime = cfg.transfer_method, cfg.transfer_regime
    pairs = [(archs[0], archs[1]), (archs[1], archs[0])]
    if cfg.arch:
        pairs = [p for p in pairs if p[0] == cfg.arch]
    _, test = run.splits()
    real = [c for c in test.clips if c.label == REAL]
    for src, tgt in pairs:
        det = run.adv_detector(src, method, regime)
        g_t = run.model(tgt)
        corpora = {a: dt.Corpus(real + run.attacked(tgt, "test", a)) for a in cfg.sel_attacks()}
        with run.timed(f"transfer/{src}->{tgt}"):
            rep = pl.transfer_eval(det, g_t, corpora, method, src, tgt, cfg.ig())
        tag = f"transfer_{src}_to_{tgt}"
        rep.meta["regime"] = regime
        run.write_json(f"reports/{tag}.json", rep.to_dict())
        run.write_csv(f"reports/{tag}.csv", rep.to_csv())
        out[f"{src}->{tgt}"] = rep
    return out


def _read_scores(path: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    import csv

    rows = [r for r in csv.DictReader(l for l in path.read_text().splitlines() if not l.startswith("#"))]
    out: dict[str, list] = {}
    for r in rows:
        out.setdefault(r["attack"], []).append((float(r["score"]), int(r["label"])))
    return {k: (np.array([s for s, _ in v]), np.array([l for _, l in v])) for k, v in out.items()}


def roc(run: Run) -> dict:
    cfg = run.cfg
    out = {}
    for arch in cfg.sel_archs():
        for method in cfg.sel_methods():
            for regime in cfg.sel_regimes():
                tag = f"{arch}_{xai.SHORT_NAMES[method]}_{regime}"
                path = run.root / "reports" / f"scores_{tag}.csv"
                if not path.exists():
                    raise MissingArtifact(f"no detector scores at {path}; run eval first")
                curves = {}
                for attack, (s, y) in sorted(_read_scores(path).items()):
                    if cfg.attack and attack != cfg.attack:
                        continue
                    r = pl.roc_curve(s, y)
                    curves[attack] = r
                    run.write_csv(f"reports/roc/{tag}_{attack}.csv", r.to_csv())
                if cfg.figures and curves:
                    plotting.plot_roc(curves, run.p("figures", f"roc_{tag}.png"), title=tag)
                out[tag] = {a: r.auc for a, r in curves.items()}
    run.write_json("reports/roc_summary.json", {"auc": out})
    return out


def bench(run: Run) -> dict:
    cfg = run.cfg
    arch = cfg.arch or cfg.bench_arch
    g = run.model(arch)
    regime = cfg.regime or cfg.transfer_regime
    det = run.adv_detector(arch, cfg.adaptive_method if cfg.adaptive_method in cfg.xai_methods
                           else cfg.xai_methods[0], regime)
    _, test = run.splits()
    frames = np.concatenate([c.frames for c in test.clips if c.label == REAL])
    frames = frames[mdl.deepfake_labels(mdl.predict(g, frames)) == REAL]
    if len(frames) == 0:
        raise MissingArtifact("no test frames pass as real; cannot time the full cascade")
    idx = np.arange(cfg.bench_frames) % len(frames)
    res = pl.overhead_benchmark(g, det, frames[idx], cfg.sel_methods(), cfg.bench_repeats, cfg.ig(),
                                min_frames=min(50, cfg.bench_frames), min_repeats=min(3, cfg.bench_repeats))
    res.update({"arch": arch, "regime": regime})
    run.write_timing(f"bench_{arch}", res)
    rows = [{"config": k, **{c: v[c] for c in ("min_ms", "mean_ms", "median_ms", "overhead_pct")}}
            for k, v in res["table"].items()]
    run.p("timing", f"bench_{arch}.csv").write_text(
        pl.rows_to_csv(rows, ["config", "min_ms", "mean_ms", "median_ms", "overhead_pct"]))
    if cfg.figures:
        plotting.plot_overhead(res["table"], run.p("figures", f"overhead_{arch}.png"),
                               title=f"per-frame cascade time ({arch})")
    return res


def xai_grid(run: Run) -> Path | None:
    """Example images with their maps: one clean real, one PGD twin per arch."""
    cfg = run.cfg
    if not cfg.figures:
        return None
    _, test = run.splits()
    paths = None
    for arch in cfg.sel_archs():
        g = run.model(arch)
        real = next(c for c in test.clips if c.label == REAL).frames[0]
        rows = [("real", real)]
        for a in cfg.sel_attacks():
            twins = run.attacked(arch, "test", a)
            rows.append((a, twins[0].frames[0]))
        grid = []
        for label, img in rows:
            maps = {xai.SHORT_NAMES[m]: xai.compute_map(g, img, m, ig=cfg.ig()).values for m in cfg.sel_methods()}
            grid.append((label, img, maps))
        paths = plotting.plot_xai_grid(grid, run.p("figures", f"xai_grid_{arch}.png"), title=arch)
    return paths


# --------------------------------------------------------------------------
# summary


def _pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.2f}%"


def summarize(run: Run, df: dict, attacks: dict, evals: dict, transfers: dict) -> dict:
    cfg = run.cfg
    lines = ["# Reproduction summary", "", f"config hash `{cfg.config_hash}`, root seed {cfg.seed}", ""]
    lines += ["## Deepfake detectors on clean test clips", "", "| arch | F2F | Vid |", "|---|---|---|"]
    for arch, s in df.items():
        lines.append(f"| {arch} | {_pct(s['test']['f2f'])} | {_pct(s['test']['vid'])} |")
    lines += ["", "## Deepfake detectors on attacked test fakes", "",
              "| arch | attack | F2F | Vid | success | max L-inf x255 |", "|---|---|---|---|---|---|"]
    for arch, rows in attacks.items():
        for a in ["none"] + [k for k in rows if k != "none"]:
            r = rows[a]
            linf = "" if "max_linf" not in r else f"{255 * r['max_linf']:.4f}"
            lines.append(f"| {arch} | {a} | {_pct(r['f2f'])} | {_pct(r['vid'])} | "
                         f"{_pct(r.get('success_rate'))} | {linf} |")
    for regime in cfg.regimes:
        lines += ["", f"## Adversarial detector accuracy, {regime}", ""]
        for arch in cfg.archs:
            reps = {m: evals.get(f"{arch}_{xai.SHORT_NAMES[m]}_{regime}") for m in cfg.xai_methods}
            reps = {m: r for m, r in reps.items() if r is not None}
            if not reps:
                continue
            names = sorted({a for r in reps.values() for a in r.rows})
            lines += [f"### {arch}", "", "| attack | " + " | ".join(xai.SHORT_NAMES[m] for m in reps) + " |",
                      "|---|" + "---|" * len(reps)]
            for a in names:
                cells = [_pct(r.rows[a]["accuracy"]) if a in r.rows else "" for r in reps.values()]
                lines.append(f"| {a} | " + " | ".join(cells) + " |")
            pgd_b = [_pct(r.rows["pgd"].get("accuracy_black")) for r in reps.values()]
            lines.append("| pgd-B | " + " | ".join(pgd_b) + " |")
            lines.append("")
    if transfers:
        lines += ["## Transfer", "", "| direction | attack | accuracy |", "|---|---|---|"]
        for k, rep in transfers.items():
            for a in sorted(rep.rows):
                lines.append(f"| {k} | {a} | {_pct(rep.rows[a]['accuracy'])} |")
    text = "\n".join(lines) + "\n"
    run.p("reports", "summary.md").write_text(text)
    summary = {
        "deepfake": df,
        "attacks": attacks,
        "eval": {k: r.to_dict()["rows"] for k, r in evals.items()},
        "transfer": {k: r.to_dict()["rows"] for k, r in transfers.items()},
    }
    run.write_json("reports/summary.json", summary)
    return summary


def repro(run: Run) -> dict:
    with run.timed("gen_data"):
        gen_data(run)
    df = train_detectors(run)
    attacks = run_attacks(run)
    cache: dict = {}
    train_adv(run, cache)
    evals = evaluate(run, cache)
    with run.timed("transfer_total"):
        transfers = transfer(run)
    roc(run)
    with run.timed("bench"):
        bench(run)
    xai_grid(run)
    summary = summarize(run, df, attacks, evals, transfers)
    run.write_timing("stages", {"seconds": run.timings})
    return summary
