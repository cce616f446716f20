"""Evaluation mathematics: variation sets, EER, DSR, SNR-budget EER, DET, minDCF, ASR.

Conventions shared by every routine here:

* the *positive* class scores high (adversarial variations for the
  detector, target-trial scores for the ASV);
* a threshold ``tau`` flags ``v > tau`` as positive, so
  ``FAR(tau) = mean(neg > tau)`` and ``FRR(tau) = mean(pos <= tau)``;
* candidate thresholds are ``-inf``, the midpoints between consecutive
  distinct pooled values, and ``+inf`` -- one per distinct (FAR, FRR) state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class VariationSet:
    values: np.ndarray
    origin: str  # "genuine" | "adversarial"
    trial_ids: list = field(default_factory=list)
    snrs: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise MetricError("variations must be finite and non-negative")
        if self.snrs is not None:
            self.snrs = np.asarray(self.snrs, dtype=np.float64)

    def __len__(self):
        return self.values.size


def _arr(v):
    a = np.asarray(v.values if isinstance(v, VariationSet) else v, dtype=np.float64).ravel()
    if a.size == 0:
        raise MetricError("empty score set")
    return a


def candidate_thresholds(neg, pos) -> np.ndarray:
    u = np.unique(np.concatenate([_arr(neg), _arr(pos)]))
    return np.concatenate([[-np.inf], 0.5 * (u[:-1] + u[1:]), [np.inf]])


def rates(neg, pos, taus) -> tuple:
    """(FAR, FRR) arrays at each threshold."""
    neg, pos = np.sort(_arr(neg)), np.sort(_arr(pos))
    taus = np.asarray(taus, dtype=np.float64)
    far = (neg.size - np.searchsorted(neg, taus, side="right")) / neg.size
    frr = np.searchsorted(pos, taus, side="right") / pos.size
    return far, frr


def eer(v_gen, v_adv) -> tuple:
    """Equal error rate and its threshold.

    Scans candidate thresholds for the first sign change of FAR - FRR and
    interpolates linearly between the bracketing candidates.
    """
    taus = candidate_thresholds(v_gen, v_adv)
    far, frr = rates(v_gen, v_adv, taus)
    d = far - frr
    i = int(np.argmax(d <= 0))  # d[0] = 1 > 0 and d[-1] = -1, so a crossing exists
    if d[i] == 0:
        return float(far[i]), float(taus[i])
    t = d[i - 1] / (d[i - 1] - d[i])
    rate = far[i - 1] + t * (far[i] - far[i - 1])
    lo, hi = taus[i - 1], taus[i]
    if np.isinf(lo):
        tau = hi
    elif np.isinf(hi):
        tau = lo
    else:
        tau = lo + t * (hi - lo)
    return float(rate), float(tau)


def asv_eer(target_scores, nontarget_scores) -> tuple:
    return eer(nontarget_scores, target_scores)


def dsr_at_far(v_gen, v_adv, far_given: float) -> tuple:
    """Detection success rate at the threshold whose FAR is closest to ``far_given``.

    Ties between different FAR levels go to the larger threshold (lower
    FAR); within one FAR level the lowest threshold reaching it is used.
    """
    if not 0.0 <= far_given <= 1.0:
        raise MetricError("far_given must lie in [0, 1]")
    taus = candidate_thresholds(v_gen, v_adv)
    far, _ = rates(v_gen, v_adv, taus)
    gap = np.abs(far - far_given)
    # FAR levels are multiples of 1/n; equal distances may differ in the last bit
    best_far = far[gap <= gap.min() + 1e-12].min()
    i = int(np.argmax(far == best_far))
    tau = taus[i]
    dsr = float(np.mean(_arr(v_adv) > tau))
    return dsr, float(tau)


def snr_budget_eer(v_gen, v_adv, snr_gen, snr_adv, budget: float, mode: str = "or"):
    """EER over the trial pairs admitted by an SNR budget; ``None`` if nothing is left."""
    g, a = _arr(v_gen), _arr(v_adv)
    sg, sa = np.asarray(snr_gen, float), np.asarray(snr_adv, float)
    if not (g.size == a.size == sg.size == sa.size):
        raise MetricError("budget evaluation needs paired sets of equal length")
    if mode == "or":
        keep = (sa >= budget) | (sg >= budget)
    elif mode == "and":
        keep = (sa >= budget) & (sg >= budget)
    else:
        raise MetricError(f"unknown budget mode {mode!r}")
    if not keep.any():
        return None
    return eer(g[keep], a[keep])[0]


def snr_budget_curve(v_gen, v_adv, snr_gen, snr_adv, budgets, mode="or") -> list:
    out = []
    for b in budgets:
        e = snr_budget_eer(v_gen, v_adv, snr_gen, snr_adv, b, mode)
        if e is None:
            break
        out.append((float(b), e))
    return out


def det_curve(v_gen, v_adv) -> list:
    """(FAR, FRR) at every candidate threshold, in increasing threshold order."""
    taus = candidate_thresholds(v_gen, v_adv)
    far, frr = rates(v_gen, v_adv, taus)
    return [(float(a), float(b)) for a, b in zip(far, frr)]


def min_dcf(target_scores, nontarget_scores, p_target: float = 0.01,
            c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    taus = candidate_thresholds(nontarget_scores, target_scores)
    p_fa, p_miss = rates(nontarget_scores, target_scores, taus)
    cost = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def asr(scores, goals, eta: float) -> float:
    """Fraction of examples whose score strictly crosses ``eta`` in the goal direction.

    ``goals`` holds +1 (impersonation) or -1 (evasion) per example.
    """
    s = np.asarray(scores, float)
    k = np.asarray(goals, float)
    if s.size == 0:
        raise MetricError("empty adversarial set")
    success = np.where(k > 0, s > eta, s < eta)
    return float(np.mean(success))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (metric, condition, value)

    def add(self, metric: str, condition: str, value):
        if value is not None and metric in ("eer", "dsr", "asr", "far", "frr") and not 0 <= value <= 1:
            raise MetricError(f"{metric} out of [0, 1]: {value}")
        self.rows.append((metric, condition, value))

    def get(self, metric, condition):
        for m, c, v in self.rows:
            if m == metric and c == condition:
                return v
        raise KeyError((metric, condition))

    def to_text(self) -> str:
        lines = [f"{'metric':<14}{'condition':<48}value"]
        for m, c, v in self.rows:
            val = "NA" if v is None else f"{v:.6f}"
            lines.append(f"{m:<14}{c:<48}{val}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"rows": [{"metric": m, "condition": c, "value": v} for m, c, v in self.rows]}


# --- model-dependent evaluations -------------------------------------------------------

def score_variation_set(tests, enroll_emb, model, detector, origin: str, trial_ids=None, snrs=None,
                        chunk: int = 25) -> VariationSet:
    """|s - s_hat| for every test waveform against its (fixed) enrollment embedding."""
    from .detect import score_pairs
    x = np.stack([getattr(t, "samples", t) for t in tests])
    s, s_hat = score_pairs(x, np.asarray(enroll_emb), model, detector, chunk)
    return VariationSet(np.abs(s - s_hat), origin, list(trial_ids or []), snrs)


def purification_eer(trials, wave_of, model, detector, test_override: dict | None = None) -> float:
    """ASV EER when every test utterance passes through the detector's transform first."""
    from . import asv as asv_mod
    from .detect import transform_batch
    trials = list(trials)
    test_override = test_override or {}
    tests = np.stack([(test_override[i] if i in test_override else wave_of(t.test_id)).samples
                      for i, t in enumerate(trials)])
    e_enr = asv_mod.embed_waves([wave_of(t.enroll_id) for t in trials], model)
    out = []
    for i in range(0, len(tests), 25):
        out.append(asv_mod.embed_waves(transform_batch(tests[i:i + 25], detector), model))
    s = asv_mod.cosine(np.concatenate(out), e_enr)
    lab = np.array([t.is_target for t in trials])
    if lab.all() or not lab.any():
        raise MetricError("purification EER needs both trial types")
    return asv_eer(s[lab], s[~lab])[0]
