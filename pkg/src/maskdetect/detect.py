"""Transform-and-compare detection with time-frequency masks.

A detector maps the test utterance through ``istft(M * stft(x))`` and
flags the trial when the ASV score moves by more than ``tau_det``.  The
mask comes from a hand-crafted rule (MCS-H: drop the top ``l`` frequency
rows; MCS-D: keep bins where the frequency-axis first difference of the
magnitude exceeds ``xi``) or from a small convolutional mask network (LMD)
trained on genuine speech only.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import asv as asv_mod
from . import checkpoint
from .asv import AsvModel
from .diffgraph import Tape
from .dsp import HANN, MaskMatrix, StftConfig, Waveform, istft_array, stft_array
from .optim import Adam

log = logging.getLogger(__name__)


class DetectError(ValueError):
    pass


# --- hand-crafted masks ---------------------------------------------------------

def mcs_h_mask(n_freq: int, n_frames: int, l: int) -> MaskMatrix:
    """All ones except the ``l`` highest-frequency rows."""
    if not 0 <= l <= n_freq:
        raise DetectError(f"l={l} outside [0, {n_freq}]")
    m = np.ones((n_freq, n_frames))
    m[n_freq - l:] = 0.0
    return MaskMatrix(m, "binary")


def _mcs_d_values(mag: np.ndarray, xi: float) -> np.ndarray:
    # mag (..., F, T); row F-1 (highest frequency) has no successor and stays zero
    out = np.zeros_like(mag)
    out[..., :-1, :] = (np.abs(np.diff(mag, axis=-2)) > xi).astype(float)
    return out


def mcs_d_mask(magnitude: np.ndarray, xi: float) -> MaskMatrix:
    if xi < 0:
        raise DetectError("xi must be >= 0")
    return MaskMatrix(_mcs_d_values(np.asarray(magnitude, float), xi), "binary")


# --- mask network ------------------------------------------------------------------

@dataclass(frozen=True)
class LmdArch:
    hidden: int = 8
    kernel: int = 3
    level_offset: float = 15.0  # natural-log power offset/scale of the level input plane
    level_scale: float = 6.0
    out_bias: float = 0.0


@dataclass
class LmdModel:
    params: dict
    arch: LmdArch = LmdArch()
    stft: StftConfig = HANN
    hyper: dict = field(default_factory=dict)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def save(self, path):
        header = {"kind": "lmd", "arch": asdict(self.arch), "stft": asdict(self.stft),
                  "hyper": self.hyper, "seed": self.seed, "meta": self.meta}
        checkpoint.save(path, self.params, header)

    @classmethod
    def load(cls, path) -> "LmdModel":
        params, h = checkpoint.load(path)
        if h.get("kind") != "lmd":
            raise DetectError(f"{path} is not an LMD checkpoint")
        return cls(params, LmdArch(**h["arch"]), StftConfig(**h["stft"]), h["hyper"], h["seed"], h.get("meta", {}))


def init_lmd(seed: int, arch: LmdArch = LmdArch()) -> LmdModel:
    rng = np.random.default_rng([int(seed), 0x11D])
    h, k = arch.hidden, arch.kernel
    params = {
        "conv1.w_phase": rng.standard_normal((h, 2, k, k)) / np.sqrt(3 * k * k),
        "conv1.w_level": rng.standard_normal((h, 1, k, k)) / np.sqrt(3 * k * k),
        "conv1.b": np.zeros(h),
        "conv2.w": rng.standard_normal((2, h, k, k)) / np.sqrt(h * k * k),
        "conv2.b": np.full(2, arch.out_bias),
    }
    return LmdModel(params, arch, HANN, {}, seed)


def lmd_mask_nodes(tape: Tape, spec, p: dict, arch: LmdArch):
    """(B, F, T, 2) spectrogram node -> (B, F, T, 2) mask node with entries in (0, 1).

    The network sees three planes: the unit-modulus real/imaginary parts
    and a normalized log power, so its input scale does not depend on the
    16-bit amplitude convention.
    """
    power = tape.sum(tape.square(spec), axis=-1, keepdims=True)  # (B, F, T, 1)
    unit = tape.mul(spec, tape.pow(tape.add(power, tape.const(1.0)), e=-0.5))
    level = tape.scale(tape.sub(tape.log(power, eps=1.0), tape.const(arch.level_offset)), c=1.0 / arch.level_scale)
    unit_p = tape.transpose(unit, axes=(0, 3, 1, 2))  # (B, 2, F, T)
    level_p = tape.transpose(level, axes=(0, 3, 1, 2))  # (B, 1, F, T)
    zero = tape.const(np.zeros(arch.hidden))
    h = tape.add(tape.conv2d(unit_p, p["conv1.w_phase"], p["conv1.b"]),
                 tape.conv2d(level_p, p["conv1.w_level"], zero))
    h = tape.tanh(h)
    out = tape.sigmoid(tape.conv2d(h, p["conv2.w"], p["conv2.b"]))
    return tape.transpose(out, axes=(0, 2, 3, 1))


# --- detector kinds ------------------------------------------------------------------

@dataclass(frozen=True)
class Identity:
    name = "identity"


@dataclass(frozen=True)
class MCSH:
    l: int
    name = "mcs-h"

    def __post_init__(self):
        if self.l < 0:
            raise DetectError("l must be >= 0")


@dataclass(frozen=True)
class MCSD:
    xi: float
    name = "mcs-d"

    def __post_init__(self):
        if self.xi < 0:
            raise DetectError("xi must be >= 0")


@dataclass
class LMD:
    model: LmdModel
    name = "lmd"


def mask_node(tape: Tape, spec, detector):
    """The detector's mask for a (B, F, T, 2) spectrogram node; None for the identity."""
    if isinstance(detector, Identity):
        return None
    if isinstance(detector, MCSH):
        def rows(x):
            f = x.shape[-3]
            if detector.l > f:
                raise DetectError(f"l={detector.l} outside [0, {f}]")
            m = np.ones(f)
            m[f - detector.l:] = 0.0
            return np.broadcast_to(m[:, None, None], x.shape[-3:-1] + (1,)).copy()
        return tape.nondiff(spec, fn=rows)
    if isinstance(detector, MCSD):
        def dmask(x):
            return _mcs_d_values(np.sqrt(np.sum(x * x, axis=-1)), detector.xi)[..., None]
        return tape.nondiff(spec, fn=dmask)
    if isinstance(detector, LMD):
        p = asv_mod.param_nodes(tape, detector.model.params)
        return lmd_mask_nodes(tape, spec, p, detector.model.arch)
    raise DetectError(f"unknown detector {detector!r}")


def masked_spec_node(tape: Tape, spec, detector):
    m = mask_node(tape, spec, detector)
    return spec if m is None else tape.mul(spec, m)


def transform_node(detector, cfg: StftConfig = HANN):
    """Differentiable waveform transform, ``(tape, wave_node) -> wave_node``.

    Hand-crafted masks enter as constants recomputed on every forward pass,
    so gradients flow through the product with the spectrogram only.
    """
    def fn(tape: Tape, x):
        spec = tape.stft(x, cfg=cfg)
        return tape.istft_like(masked_spec_node(tape, spec, detector), x, cfg=cfg)
    return fn


def mask_array(spec: np.ndarray, detector) -> np.ndarray:
    """Mask for a stacked (..., F, T, 2) spectrogram, broadcastable against it."""
    if isinstance(detector, Identity):
        return np.ones(spec.shape[:-1] + (1,))
    tape = Tape()
    node = mask_node(tape, tape.leaf("s"), detector)
    return tape.forward({"s": spec}, node)


def transform_batch(x: np.ndarray, detector, cfg: StftConfig = HANN) -> np.ndarray:
    if isinstance(detector, Identity):
        return np.array(x, dtype=float, copy=True)
    spec = stft_array(x, cfg)
    return istft_array(spec * mask_array(spec, detector), cfg, x.shape[-1])


def transform(wave: Waveform, detector, cfg: StftConfig = HANN) -> Waveform:
    return Waveform(transform_batch(wave.samples[None, :], detector, cfg)[0], wave.sample_rate)


# --- detection -----------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionResult:
    s: float
    s_hat: float
    variation: float
    is_adversarial: bool
    tau_det: float


def score_pairs(tests: np.ndarray, enroll_emb: np.ndarray, model: AsvModel, detector, chunk: int = 25):
    """Raw and transformed scores for a batch of test waveforms against fixed enrollments."""
    tests = np.atleast_2d(tests)
    s, s_hat = [], []
    for i in range(0, len(tests), chunk):
        xb = tests[i:i + chunk]
        eb = enroll_emb[i:i + chunk]
        s.append(asv_mod.cosine(asv_mod.embed_waves(xb, model), eb))
        s_hat.append(asv_mod.cosine(asv_mod.embed_waves(transform_batch(xb, detector), model), eb))
    return np.concatenate(s), np.concatenate(s_hat)


def detect(test: Waveform, enroll: Waveform, model: AsvModel, detector, tau_det: float) -> DetectionResult:
    e = asv_mod.embed_waves(enroll, model)
    s, s_hat = score_pairs(test.samples[None, :], e, model, detector)
    v = float(abs(s[0] - s_hat[0]))
    return DetectionResult(float(s[0]), float(s_hat[0]), v, v > tau_det, float(tau_det))


# --- LMD loss and training ----------------------------------------------------------------

def lmd_loss(s, s_hat, mask, m: float, lambda_s: float, lambda_b: float, reduction: str = "sum"):
    """(L, L_m, L_s, L_b) for one trial; ``reduction="mean"`` divides L_m and L_b by the mask size."""
    mv = mask.values if isinstance(mask, MaskMatrix) else np.asarray(mask, float)
    if mv.size and (mv.min() < 0 or mv.max() > 1):
        raise DetectError("mask entries must lie in [0, 1]")
    l_s = max(0.0, abs(float(s) - float(s_hat)) - m)
    l_b = float(np.sum((mv * (1.0 - mv)) ** 2))
    l_m = float(np.sum(np.abs(mv)))
    if reduction == "mean":
        l_b /= mv.size
        l_m /= mv.size
    elif reduction != "sum":
        raise DetectError(f"unknown reduction {reduction!r}")
    return l_m + lambda_s * l_s + lambda_b * l_b, l_m, l_s, l_b


@dataclass
class LmdTrainConfig:
    steps: int = 3000
    batch: int = 32
    crop_frames: int = 100
    lr: float = 0.002
    lr_decay: float = 0.9
    decay_every: int = 1000
    val_every: int = 1000
    m: float = 0.05
    lambda_s: float = 1.0
    lambda_b: float = 15.0
    reduction: str = "mean"
    seed: int = 0


def build_lmd_tape(asv_model: AsvModel, arch: LmdArch, crop_len: int, cfg: LmdTrainConfig, param_leaves=True):
    """Training objective averaged over the minibatch, returned with its three components."""
    tape = Tape()
    p = asv_mod.param_nodes(tape, _param_template(arch), leaves=param_leaves)
    x = tape.leaf("x")
    e = tape.leaf("e")
    s = tape.leaf("s")
    spec = tape.stft(x, cfg=HANN)
    mask = lmd_mask_nodes(tape, spec, p, arch)
    xh = tape.istft(tape.mul(spec, mask), cfg=HANN, length=crop_len)
    ap = asv_mod.param_nodes(tape, asv_model.params)
    emb = asv_mod.encoder_nodes(tape, asv_mod.feature_nodes(tape, xh, asv_model.features), ap)
    s_hat = tape.cosine(emb, e)
    l_s = tape.mean(tape.relu(tape.sub(tape.abs(tape.sub(s_hat, s)), tape.const(cfg.m))))
    red = tape.mean if cfg.reduction == "mean" else (lambda n: tape.scale(tape.sum(n), c=1.0 / cfg.batch))
    l_m = red(mask)
    l_b = red(tape.square(tape.sub(mask, tape.square(mask))))
    total = tape.add(tape.add(l_m, tape.scale(l_s, c=cfg.lambda_s)), tape.scale(l_b, c=cfg.lambda_b))
    return tape, {"total": total, "m": l_m, "s": l_s, "b": l_b, "mask": mask, "s_hat": s_hat}


def _param_template(arch: LmdArch) -> dict:
    return init_lmd(0, arch).params


def crop_len_for(frames: int, cfg: StftConfig = HANN) -> int:
    return (frames - 1) * cfg.hop


def _crop(rng, w: np.ndarray, n: int) -> np.ndarray:
    start = int(rng.integers(0, len(w) - n + 1))
    return w[start:start + n]


def train_lmd(train_ids: list, val_ids: list, wave_of, asv_model: AsvModel, cfg: LmdTrainConfig = LmdTrainConfig(),
              arch: LmdArch = LmdArch()) -> LmdModel:
    """Minibatch training on genuine utterances; returns the best-validation parameters.

    Enrollments are other utterances of the test speaker drawn from the
    training split; the clean score ``s`` is a constant of the mask network.
    """
    from .corpus import speaker_of
    by_spk: dict = {}
    for u in train_ids:
        by_spk.setdefault(speaker_of(u), []).append(u)
    usable = [u for u in train_ids if len(by_spk[speaker_of(u)]) >= 2]
    if not usable:
        raise DetectError("no training speaker has two utterances")
    rng = np.random.default_rng([int(cfg.seed), 0x1A1])
    model = init_lmd(cfg.seed, arch)
    n = crop_len_for(cfg.crop_frames)
    emb = dict(zip(train_ids, asv_mod.embed_waves([wave_of(u) for u in train_ids], asv_model)))

    def enroll_for(u, r):
        pool = [v for v in by_spk[speaker_of(u)] if v != u]
        return emb[pool[int(r.integers(len(pool)))]]

    def batch_from(ids, r):
        x = np.stack([_crop(r, wave_of(u).samples, n) for u in ids])
        e = np.stack([enroll_for(u, r) for u in ids])
        s = asv_mod.cosine(asv_mod.embed_waves(x, asv_model), e)
        return {"x": x, "e": e, "s": s}

    vrng = np.random.default_rng([int(cfg.seed), 0x7A1])
    val_ids = [u for u in val_ids if len(by_spk.get(speaker_of(u), [])) >= 1]
    val_batches = [batch_from(val_ids[i:i + cfg.batch], vrng) for i in range(0, len(val_ids), cfg.batch)]
    tape, nodes = build_lmd_tape(asv_model, arch, n, cfg)
    # the loss averages over a fixed batch size; validation batches use their own tapes
    vtapes = {}

    def val_loss(params):
        tot = []
        for vb in val_batches:
            b = len(vb["x"])
            if b not in vtapes:
                vtapes[b] = build_lmd_tape(asv_model, arch, n, _with_batch(cfg, b))
            vt, vn = vtapes[b]
            vt.forward(dict(params, **vb))
            tot.append(float(vt.value(vn["total"])) * b)
        return sum(tot) / max(1, sum(len(vb["x"]) for vb in val_batches))

    opt = Adam(model.params, lr=cfg.lr)
    best = {k: v.copy() for k, v in model.params.items()}
    best_val = val_loss(model.params) if val_batches else np.inf
    best_step = 0
    history = {"train": [], "validation": [(0, best_val)]}
    for step in range(1, cfg.steps + 1):
        ids = [usable[i] for i in rng.choice(len(usable), size=min(cfg.batch, len(usable)), replace=False)]
        b = batch_from(ids, rng)
        t, nd = (tape, nodes) if len(ids) == cfg.batch else build_lmd_tape(asv_model, arch, n, _with_batch(cfg, len(ids)))
        t.forward(dict(model.params, **b))
        value = float(t.value(nd["total"]))
        if not np.isfinite(value):
            raise DetectError(f"non-finite LMD loss at step {step}")
        grads = t.backward(1.0, nd["total"], wrt=list(model.params))
        lr = cfg.lr * cfg.lr_decay ** ((step - 1) // cfg.decay_every)
        opt.step(grads, lr)
        history["train"].append((value, float(t.value(nd["m"])), float(t.value(nd["s"])), float(t.value(nd["b"]))))
        if val_batches and (step % cfg.val_every == 0 or step == cfg.steps):
            v = val_loss(model.params)
            history["validation"].append((step, v))
            log.debug("lmd step %d train %.4f val %.4f", step, value, v)
            if v < best_val:
                best_val, best_step = v, step
                best = {k: w.copy() for k, w in model.params.items()}
    model.params = best
    model.hyper = {"m": cfg.m, "lambda_s": cfg.lambda_s, "lambda_b": cfg.lambda_b, "reduction": cfg.reduction}
    model.meta = {"train_config": asdict(cfg), "optimizer": opt.settings(), "best_step": best_step,
                  "best_validation": best_val, "history": history}
    return model


def _with_batch(cfg: LmdTrainConfig, b: int) -> LmdTrainConfig:
    d = asdict(cfg)
    d["batch"] = b
    return LmdTrainConfig(**d)


# --- hyperparameter search for the hand-crafted masks --------------------------------------

@dataclass
class SearchResult:
    p: float
    iterations: int
    history: list  # (p_lower, p_upper, (L1, L2, L3))


def quadrisection(loss3, p_lower: float, p_upper: float, max_iter: int = 12) -> SearchResult:
    """Shrink ``[p_lower, p_upper]`` by comparing the loss at its quartiles.

    ``loss3(ps, iteration)`` returns the three losses for ``ps = (p1, p2, p3)``.
    Ties resolve in the order: first quartile, third quartile, middle.
    """
    hist = []
    it = 0
    while it < max_iter and abs(p_upper - p_lower) >= 1:
        q = (p_upper - p_lower) / 4.0
        ps = (p_lower + q, p_lower + 2 * q, p_lower + 3 * q)
        l1, l2, l3 = (float(v) for v in loss3(ps, it))
        hist.append((p_lower, p_upper, (l1, l2, l3)))
        lo = min(l1, l2, l3)
        if l1 == lo:
            p_upper = ps[1]
        elif l3 == lo:
            p_lower = ps[1]
        else:
            p_lower, p_upper = ps[0], ps[2]
        it += 1
    return SearchResult(float(round((p_lower + p_upper) / 2.0)), it, hist)


SEARCH_UPPER = {"H": 257.0, "D": 1e5}


def mcs_loss(x: np.ndarray, enroll_emb: np.ndarray, s: np.ndarray, model: AsvModel, detector,
             m: float = 0.1, lambda_s: float = 10.0, lambda_b: float = 0.0) -> float:
    """Minibatch-averaged mean-reduced training objective of a hand-crafted mask."""
    spec = stft_array(x, HANN)
    mask = mask_array(spec, detector)
    xh = istft_array(spec * mask, HANN, x.shape[-1])
    s_hat = asv_mod.cosine(asv_mod.embed_waves(xh, model), enroll_emb)
    full = np.broadcast_to(mask, spec.shape)
    tot = [lmd_loss(s[i], s_hat[i], full[i], m, lambda_s, lambda_b, reduction="mean")[0] for i in range(len(x))]
    return float(np.mean(tot))


def search_mcs(variant: str, model: AsvModel, train_ids: list, wave_of, seed: int, batch: int = 32,
               crop_frames: int = 100, max_iter: int = 12, p_upper: float | None = None) -> SearchResult:
    from .corpus import speaker_of
    variant = variant.upper()
    if variant not in SEARCH_UPPER:
        raise DetectError("variant must be 'H' or 'D'")
    by_spk: dict = {}
    for u in train_ids:
        by_spk.setdefault(speaker_of(u), []).append(u)
    usable = [u for u in train_ids if len(by_spk[speaker_of(u)]) >= 2]
    if not usable:
        raise DetectError("empty training data")
    rng = np.random.default_rng([int(seed), 0x5EA])
    n = crop_len_for(crop_frames)

    def loss3(ps, it):
        ids = [usable[i] for i in rng.choice(len(usable), size=min(batch, len(usable)), replace=False)]
        x = np.stack([_crop(rng, wave_of(u).samples, n) for u in ids])
        enr = []
        for u in ids:
            pool = [v for v in by_spk[speaker_of(u)] if v != u]
            enr.append(wave_of(pool[int(rng.integers(len(pool)))]))
        e = asv_mod.embed_waves(enr, model)
        s = asv_mod.cosine(asv_mod.embed_waves(x, model), e)
        make = (lambda p: MCSH(int(round(p)))) if variant == "H" else (lambda p: MCSD(float(p)))
        return [mcs_loss(x, e, s, model, make(p)) for p in ps]

    upper = SEARCH_UPPER[variant] if p_upper is None else p_upper
    return quadrisection(loss3, 0.0, upper, max_iter)
