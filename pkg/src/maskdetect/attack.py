"""Adversarial example generation against the toy ASV: BIM, PGD and CW.

All loops run batched over trials.  Work is split into fixed-size chunks
(independent of the number of worker threads) so that results are
bit-identical whatever ``jobs`` is.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import asv as asv_mod
from .asv import AsvModel, ScoreGraph
from .corpus import Trial
from .dsp import INT16_MAX, INT16_MIN, Waveform, add_white_noise_at_snr, snr_db

log = logging.getLogger(__name__)


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackGoal:
    kind: str  # "impersonation" | "evasion"

    @property
    def sign(self) -> int:
        return 1 if self.kind == "impersonation" else -1

    @classmethod
    def for_trial(cls, trial: Trial) -> "AttackGoal":
        return cls("evasion" if trial.is_target else "impersonation")

    def check(self, trial: Trial):
        if self.kind not in ("impersonation", "evasion"):
            raise AttackError(f"unknown goal {self.kind!r}")
        if (self.kind == "impersonation") == trial.is_target:
            raise AttackError(f"{self.kind} does not apply to a {'target' if trial.is_target else 'non-target'} trial")


@dataclass
class AttackConfig:
    algorithm: str = "BIM"
    alpha: float = 1.0
    n_iter: int = 10
    kappa: float = 0.0
    n_binary_search: int = 9
    cw_lr: float = 1.0  # Adam learning rate on the 16-bit sample scale
    cw_c_init: float = 0.01
    cw_c_upper: float = 1e4
    seed: int = 0
    quantize: bool = True
    chunk: int = 25

    def __post_init__(self):
        self.algorithm = self.algorithm.upper()
        if self.algorithm not in ("BIM", "PGD", "CW"):
            raise AttackError(f"unknown algorithm {self.algorithm!r}")
        if self.alpha <= 0 or self.n_iter < 0 or self.kappa < 0:
            raise AttackError("need alpha > 0, n_iter >= 0, kappa >= 0")

    @property
    def epsilon(self) -> float:
        return self.n_iter * self.alpha

    @property
    def grid_value(self):
        return self.kappa if self.algorithm == "CW" else self.n_iter


@dataclass
class AdversarialExample:
    waveform: Waveform
    trial: Trial
    goal: AttackGoal
    snr_db: float
    success: bool
    score: float
    iterations_used: int
    cw_c: float | None = None
    events: list = field(default_factory=list)


def _success(scores, k, eta, kappa=None):
    """Decision flipped in the goal's direction; with ``kappa`` the CW margin must also hold."""
    if kappa is None:
        return np.where(k > 0, scores > eta, scores < eta)
    return np.where(k > 0, scores >= eta + kappa, scores <= eta - kappa)


def _clip(x):
    return np.clip(x, INT16_MIN, INT16_MAX)


# --- batched cores ---------------------------------------------------------------

def bim_batch(graph: ScoreGraph, x0: np.ndarray, k: np.ndarray, alpha: float, n_iter: int):
    eps = n_iter * alpha
    x = x0.copy()
    lo, hi = x0 - eps, x0 + eps
    for _ in range(n_iter):
        _, g = graph.value_and_grad(x)
        x = _clip(np.clip(x + k[:, None] * alpha * np.sign(g), lo, hi))
    return x, n_iter


def pgd_batch(graph: ScoreGraph, x0: np.ndarray, k: np.ndarray, alpha: float, n_iter: int, seeds):
    eps = n_iter * alpha
    b, length = x0.shape
    delta = np.zeros_like(x0)
    for i, s in enumerate(seeds):
        rng = np.random.default_rng([int(s), 0x9D])
        d = rng.standard_normal(length)
        radius = eps * rng.uniform() ** (1.0 / length)
        delta[i] = d / np.linalg.norm(d) * radius
    x = _clip(x0 + delta)
    events = [[] for _ in range(b)]
    for n in range(n_iter):
        _, g = graph.value_and_grad(x)
        norms = np.linalg.norm(g, axis=1)
        step = np.zeros_like(g)
        ok = norms > 0
        step[ok] = g[ok] / norms[ok, None]
        for i in np.flatnonzero(~ok):
            events[i].append(f"zero gradient at iteration {n}; step skipped")
        d = x + k[:, None] * alpha * step - x0
        dn = np.linalg.norm(d, axis=1)
        d *= np.minimum(1.0, eps / np.maximum(dn, 1e-300))[:, None]
        x = _clip(x0 + d)
    return x, n_iter, events


def _quantize_l2(x0, x, eps):
    """Round the perturbation to the integer grid without leaving the L2 ball."""
    d = np.round(x - x0)
    over = np.linalg.norm(d, axis=1) > eps
    d[over] = np.trunc((x - x0)[over])
    return _clip(x0 + d)


def cw_batch(graph: ScoreGraph, x0: np.ndarray, k: np.ndarray, eta: float, cfg: AttackConfig):
    """Minimize ||d||_2 / sqrt(L) + c * J(x0 + d) with a per-trial binary search over c.

    The inner loop runs Adam on the perturbation.  With ``cfg.quantize``
    every iterate is scored on the integer grid (the gradient is taken at
    the rounded point and applied to the continuous perturbation).
    """
    b, length = x0.shape
    c = np.full(b, cfg.cw_c_init)
    lower = np.zeros(b)
    upper = np.full(b, cfg.cw_c_upper)
    ever = np.zeros(b, bool)
    best_rms = np.full(b, np.inf)
    best_x = x0.copy()
    best_c = np.full(b, np.nan)
    near_j = np.full(b, np.inf)
    near_x = x0.copy()
    target = np.where(k > 0, eta + cfg.kappa, eta - cfg.kappa)
    iters = 0
    sqrt_l = np.sqrt(length)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    for _ in range(cfg.n_binary_search):
        delta = np.zeros_like(x0)
        m = np.zeros_like(x0)
        v = np.zeros_like(x0)
        won = np.zeros(b, bool)
        for it in range(cfg.n_iter + 1):
            dq = np.round(delta) if cfg.quantize else delta
            x = _clip(x0 + dq)
            dq = x - x0
            if it == cfg.n_iter:
                s = graph.value(x)
            else:
                s, gs = graph.value_and_grad(x, seed=-c * k.astype(float))  # dJ/ds = -k on the active hinge
            j = np.maximum(0.0, k * (target - s))
            rms = np.linalg.norm(dq, axis=1) / sqrt_l
            ok = j == 0
            won |= ok
            better = ok & (rms < best_rms)
            best_rms[better], best_x[better], best_c[better] = rms[better], x[better], c[better]
            closer = ~ever & (j < near_j)
            near_j[closer], near_x[closer] = j[closer], x[closer]
            if it == cfg.n_iter:
                break
            dn = np.linalg.norm(dq, axis=1, keepdims=True)
            g = np.divide(dq, dn * sqrt_l, out=np.zeros_like(dq), where=dn > 0)
            g += np.where((j > 0)[:, None], gs, 0.0)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            mh = m / (1 - beta1 ** (it + 1))
            vh = v / (1 - beta2 ** (it + 1))
            delta = delta - cfg.cw_lr * mh / (np.sqrt(vh) + adam_eps)
            iters += 1
        ever |= won
        upper = np.where(won, np.minimum(upper, c), upper)
        lower = np.where(won, lower, np.maximum(lower, c))
        grow = ~won & ~ever & (lower >= upper / 2)
        upper = np.where(grow, upper * 10.0, upper)
        c = (lower + upper) / 2.0
    out = np.where(ever[:, None], best_x, near_x)
    return out, iters, np.where(ever, best_c, c)


# --- trial-level API ------------------------------------------------------------------

@dataclass
class AttackContext:
    """Everything an attack needs about the victim and (for transfer) the source model."""
    victim: AsvModel
    eta: float
    wave_of: object  # callable uid -> Waveform
    source: AsvModel | None = None
    transform: object = None  # (tape, node) -> node, adaptive attacks only

    @property
    def source_model(self) -> AsvModel:
        return self.victim if self.source is None else self.source


def _trial_seed(cfg: AttackConfig, index: int) -> int:
    return int(np.random.SeedSequence([int(cfg.seed), int(index), cfg.n_iter]).generate_state(1)[0])


def _run_chunk(ctx: AttackContext, cfg: AttackConfig, trials, indices):
    x0 = np.stack([ctx.wave_of(t.test_id).samples for t in trials])
    k = np.array([AttackGoal.for_trial(t).sign for t in trials])
    src = ctx.source_model
    e_src = asv_mod.embed_waves([ctx.wave_of(t.enroll_id) for t in trials], src)
    graph = ScoreGraph(src, e_src, transform=ctx.transform)
    events = [[] for _ in trials]
    cw_c = [None] * len(trials)
    if cfg.algorithm == "BIM":
        x, used = bim_batch(graph, x0, k, cfg.alpha, cfg.n_iter)
        if cfg.quantize:
            x = _clip(x0 + np.trunc(x - x0))
    elif cfg.algorithm == "PGD":
        x, used, events = pgd_batch(graph, x0, k, cfg.alpha, cfg.n_iter, [_trial_seed(cfg, i) for i in indices])
        if cfg.quantize:
            x = _quantize_l2(x0, x, cfg.epsilon)
    else:
        # the hinge threshold lives on the source model's scale; transfer attacks reuse eta
        x, used, cs = cw_batch(graph, x0, k, ctx.eta, cfg)
        cw_c = [float(v) for v in cs]
    if src is ctx.victim and ctx.transform is None:
        scores = graph.value(x)
    else:
        e_vic = asv_mod.embed_waves([ctx.wave_of(t.enroll_id) for t in trials], ctx.victim)
        scores = ScoreGraph(ctx.victim, e_vic).value(x)
    ok = _success(scores, k, ctx.eta, cfg.kappa if cfg.algorithm == "CW" else None)
    out = []
    for i, t in enumerate(trials):
        out.append(AdversarialExample(Waveform(x[i]), t, AttackGoal.for_trial(t), snr_db(x0[i], x[i]),
                                      bool(ok[i]), float(scores[i]), used, cw_c[i], events[i]))
    return out


def run_attack(trials, ctx: AttackContext, cfg: AttackConfig, jobs: int = 1) -> list:
    trials = list(trials)
    chunks = [(trials[i:i + cfg.chunk], list(range(i, min(i + cfg.chunk, len(trials)))))
              for i in range(0, len(trials), cfg.chunk)]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda c: _run_chunk(ctx, cfg, *c), chunks))
    else:
        parts = [_run_chunk(ctx, cfg, *c) for c in chunks]
    return [ex for part in parts for ex in part]


def _single(trial, ctx, goal, cfg):
    goal = AttackGoal(goal) if isinstance(goal, str) else goal
    goal.check(trial)
    return run_attack([trial], ctx, cfg)[0]


def bim(trial: Trial, ctx: AttackContext, goal, alpha: float = 1.0, n_iter: int = 10, **kw) -> AdversarialExample:
    return _single(trial, ctx, goal, AttackConfig("BIM", alpha=alpha, n_iter=n_iter, **kw))


def pgd(trial: Trial, ctx: AttackContext, goal, alpha: float = 300.0, n_iter: int = 10, **kw) -> AdversarialExample:
    return _single(trial, ctx, goal, AttackConfig("PGD", alpha=alpha, n_iter=n_iter, **kw))


def cw(trial: Trial, ctx: AttackContext, goal, kappa: float = 0.0, n_iter: int = 100,
       n_bs: int = 9, **kw) -> AdversarialExample:
    return _single(trial, ctx, goal, AttackConfig("CW", kappa=kappa, n_iter=n_iter, n_binary_search=n_bs, **kw))


def attack_through_transform(trial: Trial, ctx: AttackContext, detector, goal, cfg: AttackConfig):
    """Adaptive attack: the loss is the victim score of the detector-transformed utterance."""
    from .detect import transform_node
    actx = AttackContext(ctx.victim, ctx.eta, ctx.wave_of, ctx.source, transform=transform_node(detector))
    goal = AttackGoal(goal) if isinstance(goal, str) else goal
    goal.check(trial)
    return run_attack([trial], actx, cfg)[0]


# --- evaluation trial sets ------------------------------------------------------------------

@dataclass
class GenuineExample:
    waveform: Waveform
    trial: Trial
    snr_db: float


@dataclass
class TrialSet:
    name: str
    grid_value: float
    adversarial: list  # AdversarialExample
    genuine: list  # GenuineExample


def matched_noise(clean: Waveform, target_snr: float, seed: int, quantize: bool = True) -> Waveform:
    """White noise at the target SNR, re-scaled so the SNR still holds after 16-bit rounding."""
    if target_snr >= 200.0:
        return Waveform(clean.samples.copy())
    rng_seed = int(seed)
    noisy = add_white_noise_at_snr(clean, target_snr, rng_seed)
    if not quantize:
        return noisy
    goal = target_snr
    for _ in range(6):
        q = Waveform(np.round(noisy.samples))
        got = snr_db(clean, q)
        if abs(got - target_snr) <= 0.02:
            return q
        goal += target_snr - got
        noisy = add_white_noise_at_snr(clean, goal, rng_seed)
    return Waveform(np.round(noisy.samples))


def build_adversarial_sets(trials, ctx: AttackContext, configs: list, seed: int, name: str = "set",
                           jobs: int = 1, quantize: bool = True) -> list:
    """One adversarial set per config (grid point) plus a noise-matched genuine set."""
    trials = list(trials)
    sets = []
    for cfg in configs:
        adv = run_attack(trials, ctx, cfg, jobs=jobs)
        gen = []
        for i, ex in enumerate(adv):
            clean = ctx.wave_of(ex.trial.test_id)
            nseed = int(np.random.SeedSequence([int(seed), i, int(round(1000 * cfg.grid_value))]).generate_state(1)[0])
            w = matched_noise(clean, ex.snr_db, nseed, quantize)
            gen.append(GenuineExample(w, ex.trial, snr_db(clean, w)))
        sets.append(TrialSet(name, cfg.grid_value, adv, gen))
    return sets


def mixture(sets: list) -> TrialSet:
    return TrialSet(sets[0].name + "-mix", float("nan"),
                    [a for s in sets for a in s.adversarial], [g for s in sets for g in s.genuine])
