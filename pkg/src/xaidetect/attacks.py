"""L-infinity attacks that push fake face crops toward the ``real`` label.

All attacks work on batches ``(N, C, H, W)`` and keep every iterate inside
``[x - eps, x + eps] ∩ [0, 1]``. White-box attacks take a
:class:`~xaidetect.gradcore.ModelBundle`; black-box attacks only get a
query function returning logits (see :class:`QueryModel`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import gradcore as gc
from . import models as mdl
from . import xai
from .gradcore import REAL, LossSpec, ModelBundle

logger = logging.getLogger(__name__)

ATTACKS = ("pgd", "fgsm", "apgd", "nes", "square", "adaptive_std", "adaptive_xai")
BLACK_BOX = ("nes", "square")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    alpha: float | None = None
    max_iters: int = 100
    restarts: int = 1
    query_budget: int | None = None
    n_samples: int = 50
    sigma: float = 0.01
    p_init: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def default_config(name: str, **overrides) -> AttackConfig:
    """Per-attack defaults: 100 iterations for PGD/APGD/NES, 5 restarts for
    APGD and NES, a 1/255 NES step and 5000 Square iterations."""
    eps = overrides.get("epsilon", 16 / 255)
    base = {
        "pgd": dict(alpha=eps / 4, max_iters=100),
        "fgsm": dict(alpha=eps, max_iters=1),
        "apgd": dict(max_iters=100, restarts=5),
        "nes": dict(alpha=1 / 255, max_iters=100, restarts=5, n_samples=50, sigma=0.01),
        "square": dict(max_iters=5000, p_init=0.8),
        "adaptive_std": dict(alpha=eps / 4, max_iters=100),
        "adaptive_xai": dict(alpha=eps / 4, max_iters=100),
    }
    if name not in base:
        raise ValueError(f"unknown attack {name!r}; choose from {ATTACKS}")
    return AttackConfig(**{**base[name], **overrides})


@dataclass
class AttackResult:
    """Batched outcome; ``success`` means the deepfake detector now says real."""

    name: str
    x: np.ndarray
    x_adv: np.ndarray
    success: np.ndarray
    iterations: np.ndarray
    queries: np.ndarray
    final_loss: np.ndarray
    config: AttackConfig
    extra: dict = field(default_factory=dict)

    @property
    def delta(self) -> np.ndarray:
        return self.x_adv - self.x

    def records(self, ids=None) -> list[dict]:
        ids = ids if ids is not None else range(len(self.x_adv))
        return [
            {
                "attack": self.name,
                "id": str(i),
                "seed": self.config.seed,
                "epsilon": self.config.epsilon,
                "iterations": int(self.iterations[k]),
                "queries": int(self.queries[k]),
                "success": bool(self.success[k]),
                "final_margin_loss": float(self.final_loss[k]),
            }
            for k, i in enumerate(ids)
        ]


# --------------------------------------------------------------------------
# objective


def margin_loss(logits, target: int = REAL) -> np.ndarray:
    """Hinge ``max(Z_other - Z_target, 0)``; zero exactly when ``target`` wins or ties.

    With ``target=FAKE`` this is ``max(Z_real - Z_fake, 0)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    return np.maximum(z[..., 1 - target] - z[..., target], 0.0)


def _sign(g: np.ndarray) -> np.ndarray:
    return np.sign(g).astype(np.float32)  # sign(0) == 0


def _project(x_new, x, eps):
    return np.clip(np.clip(x_new, x - eps, x + eps), 0.0, 1.0).astype(np.float32)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    return x


def _margin_value_grad(model: ModelBundle):
    spec = LossSpec("margin_real")

    def vg(xb):
        vals, _, g = gc.value_and_input_grad(model, xb, spec)
        return np.asarray(vals, dtype=np.float64), g

    return vg


def _loss_only(model: ModelBundle):
    def f(xb):
        return margin_loss(mdl.predict(model, xb))
    return f


# --------------------------------------------------------------------------
# generic projected sign-gradient descent


def pgd_minimize(value_grad: Callable, x: np.ndarray, eps: float, alpha: float, iters: int,
                 *, start: np.ndarray | None = None, is_done: Callable | None = None,
                 trace: list | None = None):
    """Minimise a batched objective by projected sign steps.

    ``value_grad(xb) -> (values, grads)``; ``is_done(values)`` marks
    examples that may stop early (default: value <= 0). Returns
    ``(x_final, values, iterations)``.
    """
    is_done = is_done or (lambda v: v <= 0)
    cur = (x if start is None else start).astype(np.float32).copy()
    n = len(x)
    iters_used = np.zeros(n, dtype=np.int64)
    vals = np.full(n, np.inf)
    active = np.arange(n)
    for it in range(iters):
        v, g = value_grad(cur[active])
        vals[active] = v
        if trace is not None:
            trace.append({"iter": it, "loss": vals.copy(),
                          "linf": np.abs(cur - x).reshape(n, -1).max(axis=1)})
        keep = ~is_done(v)
        active, g = active[keep], g[keep]
        if len(active) == 0:
            break
        cur[active] = _project(cur[active] - alpha * _sign(g), x[active], eps)
        iters_used[active] += 1
    else:
        if len(active):
            vals[active], _ = value_grad(cur[active])
    if trace is not None:
        trace.append({"iter": int(iters_used.max(initial=0)), "loss": vals.copy(),
                      "linf": np.abs(cur - x).reshape(n, -1).max(axis=1)})
    return cur, vals, iters_used


def fgsm(model: ModelBundle, x, cfg: AttackConfig | None = None) -> AttackResult:
    """One signed-gradient step of size ``epsilon`` on the margin loss."""
    cfg = cfg or default_config("fgsm")
    x = _as_batch(x)
    _, g = _margin_value_grad(model)(x)
    x_adv = np.clip(x - np.float32(cfg.epsilon) * _sign(g), 0.0, 1.0).astype(np.float32)
    loss = _loss_only(model)(x_adv)
    n = len(x)
    return AttackResult("fgsm", x, x_adv, loss <= 0, np.ones(n, np.int64),
                        np.zeros(n, np.int64), loss, cfg)


def pgd(model: ModelBundle, x, cfg: AttackConfig | None = None, trace: list | None = None) -> AttackResult:
    """Projected gradient descent from ``x`` with early exit once real."""
    cfg = cfg or default_config("pgd")
    x = _as_batch(x)
    alpha = cfg.alpha if cfg.alpha is not None else cfg.epsilon / 4
    x_adv, vals, iters = pgd_minimize(_margin_value_grad(model), x, cfg.epsilon, alpha,
                                      cfg.max_iters, trace=trace)
    if cfg.max_iters == 0:
        vals = _loss_only(model)(x_adv)
    return AttackResult("pgd", x, x_adv, vals <= 0, iters, np.zeros(len(x), np.int64), vals, cfg)


# --------------------------------------------------------------------------
# APGD


def apgd_checkpoints(n_iter: int) -> list[int]:
    """Iteration indices where the step size may be halved."""
    p = [0.0, 0.22]
    while p[-1] < 1.0:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    # round first so 0.57 * 100 lands on 57, not 58
    cps = {int(math.ceil(round(q * n_iter, 9))) for q in p[1:]}
    return sorted(c for c in cps if c < n_iter)


def apgd_minimize(value_grad: Callable, x: np.ndarray, eps: float, n_iter: int, restarts: int,
                  rng: np.random.Generator, *, is_done: Callable | None = None,
                  momentum: float = 0.75, rho: float = 0.75, trace: list | None = None):
    """Auto-PGD with step-size halving at checkpoints and best-point restarts.

    Each restart starts uniformly at random inside the eps-ball. Returns
    ``(x_best, f_best, iterations, restarts_run)``.
    """
    is_done = is_done or (lambda v: v <= 0)
    n = len(x)
    checkpoints = apgd_checkpoints(n_iter)
    x_best_all = x.copy()
    f_best_all = np.full(n, np.inf)
    iters_used = np.zeros(n, dtype=np.int64)
    restarts_run = np.zeros(n, dtype=np.int64)
    todo = np.arange(n)
    for r in range(restarts):
        if len(todo) == 0:
            break
        restarts_run[todo] += 1
        x0 = x[todo]
        start = _project(x0 + rng.uniform(-eps, eps, size=x0.shape).astype(np.float32), x0, eps)
        f_cur, g_cur = value_grad(start)
        x_cur, f_best, x_best, g_best = start, f_cur.copy(), start.copy(), g_cur.copy()
        x_prev = x_cur.copy()
        eta = np.full(len(todo), 2.0 * eps, dtype=np.float32)
        eta_at_cp = eta.copy()
        fbest_at_cp = f_best.copy()
        improved = np.zeros(len(todo), dtype=np.int64)
        last_cp = 0
        running = ~is_done(f_best)
        for k in range(n_iter):
            live = np.flatnonzero(running)
            if len(live) == 0:
                break
            e = eta[live, None, None, None]
            z = _project(x_cur[live] - e * _sign(g_cur[live]), x0[live], eps)
            if k == 0:
                x_new = z
            else:
                x_new = _project(x_cur[live] + momentum * (z - x_cur[live])
                                 + (1 - momentum) * (x_cur[live] - x_prev[live]), x0[live], eps)
            f_new, g_new = value_grad(x_new)
            iters_used[todo[live]] += 1
            improved[live] += f_new < f_cur[live]
            better = f_new < f_best[live]
            bl = live[better]
            f_best[bl], x_best[bl], g_best[bl] = f_new[better], x_new[better], g_new[better]
            x_prev[live], x_cur[live] = x_cur[live], x_new
            f_cur[live], g_cur[live] = f_new, g_new
            if trace is not None:
                trace.append({"restart": r, "iter": k, "eta": eta.copy(), "f": f_cur.copy(),
                              "linf": np.abs(x_cur - x0).reshape(len(x0), -1).max(axis=1)})
            running[live] = ~is_done(f_best[live])
            if k + 1 in checkpoints:
                window = k + 1 - last_cp
                cond1 = improved < rho * window
                cond2 = (eta_at_cp == eta) & (fbest_at_cp == f_best)
                halve = (cond1 | cond2) & running
                eta_at_cp = eta.copy()
                fbest_at_cp = f_best.copy()
                eta[halve] /= 2.0
                x_cur[halve], f_cur[halve], g_cur[halve] = x_best[halve], f_best[halve], g_best[halve]
                x_prev[halve] = x_cur[halve]
                improved[:] = 0
                last_cp = k + 1
        win = f_best < f_best_all[todo]
        f_best_all[todo[win]] = f_best[win]
        x_best_all[todo[win]] = x_best[win]
        todo = todo[~is_done(f_best_all[todo])]
    return x_best_all, f_best_all, iters_used, restarts_run


def apgd(model: ModelBundle, x, cfg: AttackConfig | None = None, trace: list | None = None) -> AttackResult:
    cfg = cfg or default_config("apgd")
    x = _as_batch(x)
    rng = np.random.default_rng(cfg.seed)
    x_adv, f, iters, runs = apgd_minimize(_margin_value_grad(model), x, cfg.epsilon,
                                          cfg.max_iters, cfg.restarts, rng, trace=trace)
    if cfg.max_iters == 0:
        x_adv, f = x.copy(), _loss_only(model)(x)
    return AttackResult("apgd", x, x_adv, f <= 0, iters, np.zeros(len(x), np.int64), f, cfg,
                        {"restarts_run": runs})


# --------------------------------------------------------------------------
# black-box attacks


class QueryModel:
    """Logit oracle around a detector; counts queried images, exposes nothing else."""

    __slots__ = ("_predict", "queries")

    def __init__(self, model: ModelBundle):
        self._predict = lambda xb: mdl.predict(model, xb)
        self.queries = 0

    def __call__(self, xb: np.ndarray) -> np.ndarray:
        xb = np.asarray(xb, dtype=np.float32)
        self.queries += len(xb)
        return self._predict(xb)


def _directions(rng: np.random.Generator, d: int, pairs: int, sampling: str) -> np.ndarray:
    if sampling == "gaussian":
        return rng.standard_normal((pairs, d))
    if sampling != "orthogonal":
        raise ValueError(f"unknown NES sampling {sampling!r}")
    # blocks of orthonormal directions scaled to the typical Gaussian norm sqrt(d)
    out, left = [], pairs
    while left > 0:
        k = min(left, d)
        q, r = np.linalg.qr(rng.standard_normal((d, k)))
        q *= np.sign(np.diag(r))
        out.append(q.T * math.sqrt(d))
        left -= k
    return np.concatenate(out)


def nes_gradient(query_fn: Callable, x, n_samples: int = 50, sigma: float = 0.01,
                 seed: int | np.random.Generator = 0, sampling: str = "orthogonal") -> np.ndarray:
    """Antithetic NES estimate of ``grad loss(x)`` from loss queries alone.

    ``query_fn(batch) -> per-example loss``. Each of the ``n_samples / 2``
    directions ``u`` is evaluated at ``x + sigma u`` and ``x - sigma u``;
    the estimate is ``1/(n sigma) * sum_k loss(x + sigma u_k) u_k`` over all
    ``n`` signed directions. ``sampling="orthogonal"`` draws the directions
    of each example as orthogonal vectors of norm ``sqrt(d)``; ``"gaussian"``
    uses i.i.d. standard normals.
    """
    if n_samples < 2 or n_samples % 2:
        raise ValueError(f"n_samples must be a positive even number, got {n_samples}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim in (1, 3)  # one flat vector or one CHW image
    xb = x[None] if single else x
    n, shape = len(xb), xb.shape[1:]
    d = int(np.prod(shape))
    pairs = n_samples // 2
    u = np.stack([_directions(rng, d, pairs, sampling) for _ in range(n)])  # n, pairs, d
    u = u.astype(np.float32).reshape((n, pairs) + shape)
    probes = np.concatenate([xb[:, None] + sigma * u, xb[:, None] - sigma * u], axis=1)
    losses = np.asarray(query_fn(probes.reshape((-1,) + shape)), dtype=np.float64)
    losses = losses.reshape(n, 2 * pairs)
    diff = losses[:, :pairs] - losses[:, pairs:]
    est = np.einsum("np,np...->n...", diff, u.astype(np.float64)) / (n_samples * sigma)
    est = est.astype(np.float32)
    return est[0] if single else est


def _margin_oracle(query_fn):
    return lambda xb: margin_loss(query_fn(xb))


def nes_attack(query_fn: Callable, x, cfg: AttackConfig | None = None,
               sampling: str = "orthogonal") -> AttackResult:
    """Sign-step descent driven by NES estimates, with random restarts.

    Each iteration spends ``n_samples`` queries on the estimate and one on
    checking the new point. Restarts after the first start uniformly inside
    the eps-ball.
    """
    cfg = cfg or default_config("nes")
    x = _as_batch(x)
    n = len(x)
    alpha = cfg.alpha if cfg.alpha is not None else 1 / 255
    per_iter = cfg.n_samples + 1
    budget = cfg.query_budget if cfg.query_budget is not None else \
        cfg.restarts * (1 + cfg.max_iters * per_iter)
    rng = np.random.default_rng(cfg.seed)
    loss_fn = _margin_oracle(query_fn)
    x_best = x.copy()
    f_best = np.full(n, np.inf)
    queries = np.zeros(n, dtype=np.int64)
    iters = np.zeros(n, dtype=np.int64)
    todo = np.arange(n)
    for r in range(cfg.restarts):
        todo = todo[queries[todo] < budget]
        if len(todo) == 0:
            break
        x0 = x[todo]
        if r == 0:
            cur = x0.copy()
        else:
            cur = _project(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, x0.shape).astype(np.float32),
                           x0, cfg.epsilon)
        f = loss_fn(cur)
        queries[todo] += 1
        live = np.arange(len(todo))
        for _ in range(cfg.max_iters):
            live = live[(f[live] > 0) & (queries[todo[live]] + per_iter <= budget)]
            if len(live) == 0:
                break
            g = nes_gradient(loss_fn, cur[live], cfg.n_samples, cfg.sigma, rng, sampling)
            cur[live] = _project(cur[live] - np.float32(alpha) * _sign(g), x0[live], cfg.epsilon)
            f[live] = loss_fn(cur[live])
            queries[todo[live]] += per_iter
            iters[todo[live]] += 1
        win = f < f_best[todo]
        f_best[todo[win]] = f[win]
        x_best[todo[win]] = cur[win]
        todo = todo[f_best[todo] > 0]
    never = ~np.isfinite(f_best)
    f_best[never] = np.nan
    return AttackResult("nes", x, x_best, f_best <= 0, iters, queries, f_best, cfg)


def square_p_selection(p_init: float, it: int, n_iters: int) -> float:
    """Square-size fraction, following the piecewise schedule rescaled to ``n_iters``."""
    it = int(it / n_iters * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32),
                       (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def square_attack(query_fn: Callable, x, cfg: AttackConfig | None = None,
                  trace: list | None = None) -> AttackResult:
    """Random-search attack with +-eps square patches and greedy acceptance."""
    cfg = cfg or default_config("square")
    x = _as_batch(x)
    n, c, h, w = x.shape
    eps = np.float32(cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    loss_fn = _margin_oracle(query_fn)
    budget = cfg.query_budget if cfg.query_budget is not None else cfg.max_iters + 1
    queries = np.zeros(n, dtype=np.int64)
    iters = np.zeros(n, dtype=np.int64)
    if budget <= 0:
        return AttackResult("square", x, x.copy(), np.zeros(n, bool), iters, queries,
                            np.full(n, np.nan), cfg)
    x_best = np.clip(x + eps * rng.choice([-1.0, 1.0], size=(n, c, 1, w)).astype(np.float32),
                     0.0, 1.0).astype(np.float32)
    f_best = loss_fn(x_best)
    queries += 1
    if trace is not None:
        trace.append(f_best.copy())
    n_features = c * h * w
    for i in range(cfg.max_iters):
        live = np.flatnonzero((f_best > 0) & (queries < budget))
        if len(live) == 0:
            break
        p = square_p_selection(cfg.p_init, i, cfg.max_iters)
        s = int(round(math.sqrt(p * n_features / c)))
        s = min(max(s, 1), h - 1)
        vh = int(rng.integers(0, h - s + 1))
        vw = int(rng.integers(0, w - s + 1))
        xs = x[live]
        xb = x_best[live]
        delta = xb - xs
        win_x = xs[:, :, vh:vh + s, vw:vw + s]
        win_best = xb[:, :, vh:vh + s, vw:vw + s]
        patch = eps * rng.choice([-1.0, 1.0], size=(len(live), c, 1, 1)).astype(np.float32)
        for _ in range(16):
            same = np.all(np.abs(np.clip(win_x + patch, 0, 1) - win_best) < 1e-7, axis=(1, 2, 3))
            if not same.any():
                break
            patch[same] = eps * rng.choice([-1.0, 1.0], size=(int(same.sum()), c, 1, 1))
        delta[:, :, vh:vh + s, vw:vw + s] = patch
        x_new = _project(xs + delta, xs, cfg.epsilon)
        f_new = loss_fn(x_new)
        queries[live] += 1
        iters[live] += 1
        acc = f_new < f_best[live]
        x_best[live[acc]] = x_new[acc]
        f_best[live[acc]] = f_new[acc]
        if trace is not None:
            trace.append(f_best.copy())
    return AttackResult("square", x, x_best, f_best <= 0, iters, queries, f_best, cfg)


# --------------------------------------------------------------------------
# adaptive attacks


def _bce(z: np.ndarray, target) -> np.ndarray:
    vals, _ = gc.logit_loss(np.asarray(z, dtype=np.float32), LossSpec("bce_to_class", target))
    return vals


def standard_adaptive_objective(f: ModelBundle, det: mdl.AdvDetector, method: str, x,
                                ig: xai.IgConfig | None = None, with_grad: bool = True):
    """``BCE(f(x), real) + BCE(d(x, map_f(x)), unattacked)`` per example, and its input gradient.

    The gradient flows through the detector's image branch and its XAI-map
    branch, including map normalisation.
    """
    xb = _as_batch(x)
    v1, z1, g1 = gc.value_and_input_grad(f, xb, LossSpec("bce_to_class", REAL))
    raw = xai.compute_map(f, xb, method, ig=ig).values
    nmap = xai.normalize_map(raw)
    v2, z2, g_img, g_map = mdl.adv_value_and_input_grads(det, xb, nmap, mdl.UNATTACKED)
    total = np.asarray(v1, np.float64) + np.asarray(v2, np.float64)
    if not with_grad:
        return total, (v1, v2, z1, z2)
    g_raw = xai.normalize_map_vjp(raw, g_map)
    g_x = g1 + g_img + xai.map_input_vjp(f, xb, method, g_raw, ig)
    return total, g_x, (v1, v2, z1, z2)


def adaptive_standard_attack(f: ModelBundle, det: mdl.AdvDetector, x, cfg: AttackConfig | None = None,
                             method: str = "saliency", threshold: float = 0.5,
                             ig: xai.IgConfig | None = None, trace: list | None = None) -> AttackResult:
    """PGD on the summed BCE of the deepfake detector and the adversarial detector.

    Succeeds when the deepfake detector says real and the adversarial detector
    scores ``p(attacked) < threshold``.
    """
    cfg = cfg or default_config("adaptive_std")
    x = _as_batch(x)
    alpha = cfg.alpha if cfg.alpha is not None else cfg.epsilon / 4
    state = {}

    def vg(xb):
        total, g, (v1, v2, z1, z2) = standard_adaptive_objective(f, det, method, xb, ig)
        fooled = (mdl.deepfake_labels(z1) == REAL) & (mdl.attacked_probability(z2) < threshold)
        state["fooled"] = fooled
        return np.where(fooled, -np.inf, total), g

    x_adv, _, iters = pgd_minimize(vg, x, cfg.epsilon, alpha, cfg.max_iters,
                                   is_done=lambda v: np.isneginf(v), trace=trace)
    total, (v1, v2, z1, z2) = standard_adaptive_objective(f, det, method, x_adv, ig, with_grad=False)
    success = (mdl.deepfake_labels(z1) == REAL) & (mdl.attacked_probability(z2) < threshold)
    return AttackResult("adaptive_std", x, x_adv, success, iters, np.zeros(len(x), np.int64),
                        total, cfg, {"method": xai.canonical_method(method),
                                     "bce_deepfake": v1, "bce_adv": v2})


XAI_ADAPTIVE_METHODS = ("saliency", "input_x_grad")


def xai_adaptive_objective(f: ModelBundle, method: str, x, reference: np.ndarray):
    """``BCE(f(x), real) + ||XAI(x; f) - reference||_2`` per example and its input gradient."""
    method = xai.canonical_method(method)
    if method not in XAI_ADAPTIVE_METHODS:
        raise ValueError(
            f"XAI-adaptive attack needs a map that is differentiable through the engine; "
            f"{method!r} is not supported (use one of {XAI_ADAPTIVE_METHODS})")
    xb = _as_batch(x)
    v1, z, g1 = gc.value_and_input_grad(f, xb, LossSpec("bce_to_class", REAL))
    cls = mdl.deepfake_labels(z)
    spec = LossSpec("xai_l2_distance", (reference, cls, method == "input_x_grad"))
    v2, _, g2 = gc.value_and_input_grad(f, xb, spec)
    return np.asarray(v1, np.float64) + np.asarray(v2, np.float64), g1 + g2, (v1, v2, z)


def adaptive_xai_attack(f: ModelBundle, method: str, x, cfg: AttackConfig | None = None,
                        trace: list | None = None) -> AttackResult:
    """PGD on ``BCE(f(x+d), real) + ||XAI(x+d) - XAI(x)||``; returns the lowest-objective iterate."""
    cfg = cfg or default_config("adaptive_xai")
    method = xai.canonical_method(method)
    if method not in XAI_ADAPTIVE_METHODS:
        xai_adaptive_objective(f, method, np.zeros((1,) + tuple(f.input_shape), np.float32), None)
    x = _as_batch(x)
    reference = xai.compute_map(f, x, method).values
    alpha = cfg.alpha if cfg.alpha is not None else cfg.epsilon / 4
    best_x, best_v = x.copy(), np.full(len(x), np.inf)
    cur = x.copy()

    def vg(xb, rows):
        v, g, _ = xai_adaptive_objective(f, method, xb, reference[rows])
        return v, g

    rows = np.arange(len(x))
    for it in range(cfg.max_iters + 1):
        v, g = vg(cur, rows)
        better = v < best_v
        best_v[better], best_x[better] = v[better], cur[better]
        if trace is not None:
            trace.append(v.copy())
        if it == cfg.max_iters:
            break
        cur = _project(cur - np.float32(alpha) * _sign(g), x, cfg.epsilon)
    z = mdl.predict(f, best_x)
    success = mdl.deepfake_labels(z) == REAL
    n = len(x)
    return AttackResult("adaptive_xai", x, best_x, success, np.full(n, cfg.max_iters),
                        np.zeros(n, np.int64), best_v, cfg, {"method": method})


# --------------------------------------------------------------------------
# dispatch


def run_attack(name: str, model: ModelBundle, x, cfg: AttackConfig | None = None,
               det: mdl.AdvDetector | None = None, method: str = "saliency") -> AttackResult:
    """Run any attack by name; black-box attacks see ``model`` only through :class:`QueryModel`."""
    cfg = cfg or default_config(name)
    if name == "pgd":
        return pgd(model, x, cfg)
    if name == "fgsm":
        return fgsm(model, x, cfg)
    if name == "apgd":
        return apgd(model, x, cfg)
    if name in BLACK_BOX:
        q = QueryModel(model)
        res = nes_attack(q, x, cfg) if name == "nes" else square_attack(q, x, cfg)
        res.extra["oracle_queries"] = q.queries
        return res
    if name == "adaptive_std":
        if det is None:
            raise ValueError("adaptive_std needs the adversarial detector")
        return adaptive_standard_attack(model, det, x, cfg, method)
    if name == "adaptive_xai":
        return adaptive_xai_attack(model, method, x, cfg)
    raise ValueError(f"unknown attack {name!r}; choose from {ATTACKS}")
