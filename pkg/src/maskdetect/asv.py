"""Toy differentiable speaker verification: LogFBank + CMVN, a two-layer 1-D
convolutional encoder with temporal average pooling, and cosine scoring."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint, metrics
from .diffgraph import Tape
from .dsp import HAMMING, SAMPLE_RATE, StftConfig, Waveform
from .optim import Adam

log = logging.getLogger(__name__)


class AsvError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    n_filters: int = 24
    stft: StftConfig = HAMMING
    cmvn: bool = True
    log_floor: float = 1e-6
    var_floor: float = 1e-12

    def __post_init__(self):
        if self.n_filters < 8:
            raise AsvError("n_filters must be >= 8")


@dataclass(frozen=True)
class AsvArch:
    channels: int = 32
    kernel: int = 5
    emb_dim: int = 32

    @property
    def receptive_field(self) -> int:
        return 2 * (self.kernel - 1) + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, fft_size: int = 512, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel-spaced filters, shape (n_filters, fft_size // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def filter_centers(n_filters: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_filters + 2))[1:-1]


@dataclass
class AsvModel:
    params: dict
    arch: AsvArch = AsvArch()
    features: FeatureConfig = FeatureConfig()
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {"kind": "asv", "seed": self.seed, "arch": asdict(self.arch),
                "features": {"n_filters": self.features.n_filters, "cmvn": self.features.cmvn,
                             "log_floor": self.features.log_floor, "var_floor": self.features.var_floor,
                             "stft": asdict(self.features.stft)},
                "meta": self.meta}

    def save(self, path):
        checkpoint.save(path, self.params, self.header())

    @classmethod
    def load(cls, path) -> "AsvModel":
        params, h = checkpoint.load(path)
        if h.get("kind") != "asv":
            raise AsvError(f"{path} is not an ASV checkpoint")
        f = h["features"]
        feats = FeatureConfig(n_filters=f["n_filters"], stft=StftConfig(**f["stft"]), cmvn=f["cmvn"],
                              log_floor=f["log_floor"], var_floor=f["var_floor"])
        return cls(params, AsvArch(**h["arch"]), feats, h["seed"], h.get("meta", {}))


def init_asv(seed: int, arch: AsvArch = AsvArch(), features: FeatureConfig = FeatureConfig()) -> AsvModel:
    rng = np.random.default_rng([int(seed), 0xA5F])
    n, c, k, d = features.n_filters, arch.channels, arch.kernel, arch.emb_dim
    params = {
        "conv1.w": rng.standard_normal((c, n, k)) / np.sqrt(n * k),
        "conv1.b": np.zeros(c),
        "conv2.w": rng.standard_normal((c, c, k)) / np.sqrt(c * k),
        "conv2.b": np.zeros(c),
        "proj.w": rng.standard_normal((d, c)) / np.sqrt(c),
        "proj.b": np.zeros(d),
    }
    return AsvModel(params, arch, features, seed)


# --- graph builders ------------------------------------------------------------

def param_nodes(tape: Tape, params: dict, leaves: bool = False, prefix: str = "") -> dict:
    if leaves:
        return {k: tape.leaf(prefix + k) for k in params}
    return {k: tape.const(v) for k, v in params.items()}


def feature_nodes(tape: Tape, wave, cfg: FeatureConfig, cmvn: bool | None = None):
    """(B, L) waveform node -> (B, n_filters, T) log filterbank (optionally CMVN'd)."""
    spec = tape.stft(wave, cfg=cfg.stft)
    power = tape.sum(tape.square(spec), axis=-1)
    fbank = tape.matmul(tape.const(mel_filterbank(cfg.n_filters, cfg.stft.fft_size)), power)
    feats = tape.log(fbank, eps=cfg.log_floor)
    if cfg.cmvn if cmvn is None else cmvn:
        feats = tape.cmvn(feats, floor=cfg.var_floor)
    return feats


def encoder_nodes(tape: Tape, feats, p: dict):
    """(B, n_filters, T) -> unit-norm (B, emb_dim) embeddings."""
    h = tape.tanh(tape.conv1d(feats, p["conv1.w"], p["conv1.b"]))
    h = tape.tanh(tape.conv1d(h, p["conv2.w"], p["conv2.b"]))
    pooled = tape.mean(h, axis=-1)
    e = tape.add(tape.matmul(pooled, tape.transpose(p["proj.w"], axes=(1, 0))), p["proj.b"])
    return tape.l2normalize(e)


def _batch(waves) -> np.ndarray:
    if isinstance(waves, Waveform):
        return waves.samples[None, :]
    if isinstance(waves, np.ndarray):
        return waves if waves.ndim == 2 else waves[None, :]
    arrs = [w.samples if isinstance(w, Waveform) else np.asarray(w, float) for w in waves]
    if len({a.shape for a in arrs}) != 1:
        raise AsvError("batched waveforms must share one length")
    return np.stack(arrs)


# --- public operations ---------------------------------------------------------

def logfbank(wave, cfg: FeatureConfig = FeatureConfig(), cmvn: bool | None = None) -> np.ndarray:
    x = _batch(wave)
    if x.shape[-1] < cfg.stft.win_length:
        raise AsvError("waveform shorter than one analysis window")
    tape = Tape()
    feature_nodes(tape, tape.leaf("x"), cfg, cmvn)
    out = tape.forward({"x": x})
    single = isinstance(wave, Waveform) or (isinstance(wave, np.ndarray) and wave.ndim == 1)
    return out[0] if single else out


def embed(features: np.ndarray, model: AsvModel) -> np.ndarray:
    f = np.asarray(features, float)
    single = f.ndim == 2
    if single:
        f = f[None]
    if f.shape[-1] < model.arch.receptive_field:
        raise AsvError(f"need at least {model.arch.receptive_field} frames, got {f.shape[-1]}")
    tape = Tape()
    encoder_nodes(tape, tape.leaf("f"), param_nodes(tape, model.params))
    e = tape.forward({"f": f})
    return e[0] if single else e


def embed_waves(waves, model: AsvModel, chunk: int = 32) -> np.ndarray:
    x = _batch(waves)
    out = []
    for i in range(0, x.shape[0], chunk):
        tape = Tape()
        encoder_nodes(tape, feature_nodes(tape, tape.leaf("x"), model.features), param_nodes(tape, model.params))
        out.append(tape.forward({"x": x[i:i + chunk]}))
    return np.concatenate(out)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)


def score(test: Waveform, enroll: Waveform, model: AsvModel) -> float:
    et = embed_waves(test, model)[0]
    ee = embed_waves(enroll, model)[0]
    return float(cosine(et, ee))


class ScoreGraph:
    """Batched score ``cos(embed(T(x_b)), e_b)`` with the enrollment embeddings held constant.

    ``transform`` optionally inserts a differentiable waveform-to-waveform
    stage (e.g. a detector's mask transform) in front of the ASV; it is a
    callable ``(tape, wave_node) -> wave_node``.
    """

    def __init__(self, model: AsvModel, enroll_emb: np.ndarray, transform=None):
        self.tape = Tape()
        self.x = self.tape.leaf("x")
        wave = self.x if transform is None else transform(self.tape, self.x)
        p = param_nodes(self.tape, model.params)
        emb = encoder_nodes(self.tape, feature_nodes(self.tape, wave, model.features), p)
        self.score = self.tape.cosine(emb, self.tape.const(np.atleast_2d(enroll_emb)))

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.tape.forward({"x": x}, self.score).copy()

    def value_and_grad(self, x: np.ndarray, seed=1.0):
        s = self.tape.forward({"x": x}, self.score).copy()
        g = self.tape.backward(seed, self.score, wrt=["x"])["x"]
        return s, g


def score_grad(test: Waveform, enroll: Waveform, model: AsvModel, seed: float = 1.0) -> np.ndarray:
    e = embed_waves(enroll, model)
    _, g = ScoreGraph(model, e).value_and_grad(test.samples[None, :], seed)
    return g[0]


# --- training ------------------------------------------------------------------

@dataclass
class AsvTrainConfig:
    steps: int = 600
    batch_speakers: int = 16
    crop_frames: int = 100
    lr: float = 0.005
    lr_decay: float = 0.5
    lr_decay_every: int = 250
    margin: float = 0.2
    val_every: int = 50
    noise_prob: float = 0.8  # additive white-noise augmentation
    noise_snr: tuple = (10.0, 50.0)
    seed: int = 0


def _build_train_tape(model: AsvModel, batch: int, margin: float):
    tape = Tape()
    p = param_nodes(tape, model.params, leaves=True)
    fa = tape.cmvn(tape.leaf("fa"), floor=model.features.var_floor)
    fp = tape.cmvn(tape.leaf("fp"), floor=model.features.var_floor)
    ea = encoder_nodes(tape, fa, p)
    ep = encoder_nodes(tape, fp, p)
    sim = tape.matmul(ea, tape.transpose(ep, axes=(1, 0)))  # (B, B)
    eye = np.eye(batch)
    pos = tape.scale(tape.sum(tape.mul(sim, tape.const(eye))), c=-1.0 / batch)
    off = tape.mul(tape.relu(tape.sub(sim, tape.const(margin))), tape.const(1.0 - eye))
    neg = tape.scale(tape.sum(off), c=1.0 / (batch * (batch - 1)))
    loss = tape.add(tape.add(pos, neg), tape.const(1.0))
    return tape, loss


def _augment(rng, x: np.ndarray, cfg: AsvTrainConfig) -> np.ndarray:
    x = x.copy()
    for i in range(len(x)):
        if rng.uniform() < cfg.noise_prob:
            snr = rng.uniform(*cfg.noise_snr)
            p = np.mean(x[i] ** 2)
            x[i] += np.sqrt(p / 10.0 ** (snr / 10.0)) * rng.standard_normal(x.shape[1])
    return x


def _sample_pairs(rng, utts_by_spk: dict, speakers: list, batch: int, crop: int, fixed: bool = False):
    """Two equal-length crops from two utterances of each of ``batch`` speakers."""
    chosen = rng.choice(len(speakers), size=batch, replace=False)
    xa, xp = [], []
    for ci in chosen:
        utts = utts_by_spk[speakers[ci]]
        i, j = (0, 1) if fixed else rng.choice(len(utts), size=2, replace=False)
        for w, dst in ((utts[i], xa), (utts[j], xp)):
            start = int(rng.integers(0, len(w) - crop + 1))
            dst.append(w[start:start + crop])
    return np.stack(xa), np.stack(xp)


def train_asv(waves_by_speaker: dict, cfg: AsvTrainConfig = AsvTrainConfig(), arch: AsvArch = AsvArch(),
              features: FeatureConfig = FeatureConfig(), val_fraction: float = 0.05) -> AsvModel:
    """Cosine-margin contrastive training on random crops with noise augmentation.

    ``waves_by_speaker`` maps speaker id -> list of waveforms.  Every
    speaker keeps one utterance in twenty (at least one) for the
    validation loss, which pairs it with one of the speaker's training
    utterances.
    """
    speakers = sorted(waves_by_speaker)
    if any(len(v) < 2 for v in waves_by_speaker.values()):
        raise AsvError("need at least 2 utterances per training speaker")
    batch = min(cfg.batch_speakers, len(speakers))
    if batch < 2:
        raise AsvError("need at least 2 training speakers")
    rng = np.random.default_rng([int(cfg.seed), 0x7EA1])
    model = init_asv(cfg.seed, arch, features)
    crop = (cfg.crop_frames - 1) * features.stft.hop

    train_w, val_w = {}, {}
    for s in speakers:
        w = [x.samples if isinstance(x, Waveform) else np.asarray(x, float) for x in waves_by_speaker[s]]
        if min(len(x) for x in w) < crop:
            raise AsvError("utterances shorter than the training crop")
        n_val = max(1, int(round(len(w) * val_fraction))) if len(w) >= 4 else 0
        order = rng.permutation(len(w))
        val_w[s] = [w[i] for i in order[:n_val]]
        train_w[s] = [w[i] for i in order[n_val:]]
    val_speakers = [s for s in speakers if val_w[s] and train_w[s]]

    tape, loss = _build_train_tape(model, batch, cfg.margin)
    opt = Adam(model.params, lr=cfg.lr)
    val_rng = np.random.default_rng([int(cfg.seed), 0x7A1])
    val_batches = []
    if len(val_speakers) >= batch:
        mixed = {s: [val_w[s][0], train_w[s][0]] for s in val_speakers}
        for _ in range(4):
            xa, xp = _sample_pairs(val_rng, mixed, val_speakers, batch, crop, fixed=True)
            val_batches.append((logfbank(_augment(val_rng, xa, cfg), features, cmvn=False),
                                logfbank(_augment(val_rng, xp, cfg), features, cmvn=False)))

    history = {"train": [], "validation": []}
    for step in range(1, cfg.steps + 1):
        xa, xp = _sample_pairs(rng, train_w, speakers, batch, crop)
        fa = logfbank(_augment(rng, xa, cfg), features, cmvn=False)
        fp = logfbank(_augment(rng, xp, cfg), features, cmvn=False)
        value = float(tape.forward(dict(model.params, fa=fa, fp=fp), loss))
        if not np.isfinite(value):
            raise AsvError(f"training diverged at step {step}")
        grads = tape.backward(1.0, loss, wrt=list(model.params))
        lr = cfg.lr * cfg.lr_decay ** ((step - 1) // cfg.lr_decay_every)
        opt.step(grads, lr)
        history["train"].append(value)
        if val_batches and (step % cfg.val_every == 0 or step == cfg.steps):
            vl = np.mean([float(tape.forward(dict(model.params, fa=a, fp=b), loss)) for a, b in val_batches])
            history["validation"].append((step, float(vl)))
            log.debug("asv step %d train %.4f val %.4f", step, value, vl)
    meta_cfg = asdict(cfg)
    meta_cfg["noise_snr"] = list(cfg.noise_snr)
    model.meta = {"train_config": meta_cfg, "history": history}
    return model


# --- trial scoring and calibration ------------------------------------------------

def score_trials(trials, corpus_wave, model: AsvModel, test_override: dict | None = None) -> np.ndarray:
    """Scores for a list of trials.  ``corpus_wave(uid)`` returns a Waveform;
    ``test_override`` optionally maps trial index -> replacement test waveform."""
    uids = sorted({t.enroll_id for t in trials} | {t.test_id for t in trials})
    emb = dict(zip(uids, embed_waves([corpus_wave(u) for u in uids], model)))
    test_emb = np.stack([emb[t.test_id] for t in trials])
    if test_override:
        idx = sorted(test_override)
        test_emb[idx] = embed_waves([test_override[i] for i in idx], model)
    enroll_emb = np.stack([emb[t.enroll_id] for t in trials])
    return cosine(test_emb, enroll_emb)


@dataclass(frozen=True)
class DecisionThreshold:
    eta: float
    eer: float


def calibrate_threshold(scores, labels) -> DecisionThreshold:
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    if labels.all() or not labels.any():
        raise AsvError("calibration needs both target and non-target trials")
    e, tau = metrics.asv_eer(scores[labels], scores[~labels])
    if not np.isfinite(tau):
        raise AsvError("degenerate score sets: no finite EER threshold")
    return DecisionThreshold(float(tau), float(e))
