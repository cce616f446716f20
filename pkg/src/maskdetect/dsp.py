"""STFT analysis/synthesis, spectrogram masking and SNR utilities.

Waveforms live on the signed 16-bit amplitude scale (floats, not normalized).
Spectrograms carry real and imaginary planes stacked on a trailing axis of
size 2, i.e. shape ``(..., F, T, 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 16000
INT16_MIN = -32768.0
INT16_MAX = 32767.0
SNR_CAP_DB = 200.0


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 400
    hop: int = 160
    fft_size: int = 512
    window: str = "hann"
    center_padding: bool = True

    def __post_init__(self):
        if not (0 < self.hop <= self.win_length <= self.fft_size):
            raise DspError("need 0 < hop <= win_length <= fft_size")
        if self.window not in ("hann", "hamming"):
            raise DspError(f"unsupported window {self.window!r}")

    @property
    def n_freq(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        return self.win_length // 2 if self.center_padding else 0

    def window_array(self) -> np.ndarray:
        # periodic (DFT-even) windows, as used by most STFT front-ends
        return get_window(self.window, self.win_length, fftbins=True).astype(np.float64)

    def n_frames(self, length: int) -> int:
        padded = length + 2 * self.pad
        if length < self.win_length or padded < self.win_length:
            raise DspError(f"input of {length} samples is shorter than one window ({self.win_length})")
        return 1 + (padded - self.win_length) // self.hop


HANN = StftConfig(window="hann")
HAMMING = StftConfig(window="hamming")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DspError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(self.samples)):
            raise DspError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    real: np.ndarray
    imag: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    source_length: int = 0

    @property
    def shape(self):
        return self.real.shape

    def stacked(self) -> np.ndarray:
        return np.stack([self.real, self.imag], axis=-1)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)

    @classmethod
    def from_stacked(cls, arr, config, source_length):
        return cls(arr[..., 0].copy(), arr[..., 1].copy(), config, source_length)


@dataclass
class MaskMatrix:
    values: np.ndarray
    kind: str = "ratio"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim not in (2, 3) or (v.ndim == 3 and v.shape[-1] != 2):
            raise DspError(f"mask must be FxT or FxTx2, got shape {v.shape}")
        if np.any(v < 0) or np.any(v > 1):
            raise DspError("mask entries must lie in [0, 1]")
        if self.kind == "binary" and not np.all((v == 0) | (v == 1)):
            raise DspError("binary mask must contain only 0 and 1")
        if self.kind not in ("binary", "ratio"):
            raise DspError(f"unknown mask kind {self.kind!r}")
        self.values = v


# --- raw array kernels (shared with the differentiable ops) -----------------

def reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    if x.shape[-1] <= pad:
        raise DspError("signal too short for reflect padding")
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    return np.pad(x, widths, mode="reflect")


def reflect_pad_adjoint(g: np.ndarray, pad: int, length: int) -> np.ndarray:
    if pad == 0:
        return g
    out = g[..., pad:pad + length].copy()
    out[..., 1:pad + 1] += g[..., :pad][..., ::-1]
    out[..., length - 1 - pad:length - 1] += g[..., pad + length:][..., ::-1]
    return out


def frame_signal(x: np.ndarray, win: int, hop: int, n_frames: int) -> np.ndarray:
    idx = hop * np.arange(n_frames)[:, None] + np.arange(win)[None, :]
    return x[..., idx]


def overlap_add(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    n_frames, win = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + (length,))
    for t in range(n_frames):
        out[..., t * hop:t * hop + win] += frames[..., t, :]
    return out


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(..., L) -> (..., F, T, 2)"""
    length = x.shape[-1]
    n_frames = cfg.n_frames(length)
    xp = reflect_pad(x, cfg.pad)
    frames = frame_signal(xp, cfg.win_length, cfg.hop, n_frames) * cfg.window_array()
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)  # (..., T, F)
    spec = np.swapaxes(spec, -1, -2)
    return np.stack([spec.real, spec.imag], axis=-1)


def stft_adjoint(g: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Transpose of :func:`stft_array` applied to ``g`` of shape (..., F, T, 2)."""
    n = cfg.fft_size
    z = np.swapaxes(g[..., 0] + 1j * g[..., 1], -1, -2)  # (..., T, F)
    z = z.copy()
    z[..., 1:n // 2] *= 0.5
    frames = n * np.fft.irfft(z, n=n, axis=-1)[..., :cfg.win_length]
    frames *= cfg.window_array()
    padded = overlap_add(frames, cfg.hop, length + 2 * cfg.pad)
    return reflect_pad_adjoint(padded, cfg.pad, length)


def _ola_norm(cfg: StftConfig, n_frames: int, length: int) -> np.ndarray:
    w2 = cfg.window_array() ** 2
    padded_len = length + 2 * cfg.pad
    norm = overlap_add(np.broadcast_to(w2, (n_frames, cfg.win_length)), cfg.hop,
                       max(padded_len, (n_frames - 1) * cfg.hop + cfg.win_length))
    norm = norm[cfg.pad:cfg.pad + length]
    if np.any(norm < 1e-10):
        raise DspError("overlap-add normalization below 1e-10; window/hop pair cannot be inverted")
    return norm


def istft_array(spec: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """(..., F, T, 2) -> (..., length), windowed overlap-add with squared-window normalization."""
    n_frames = spec.shape[-2]
    z = np.swapaxes(spec[..., 0] + 1j * spec[..., 1], -1, -2)
    frames = np.fft.irfft(z, n=cfg.fft_size, axis=-1)[..., :cfg.win_length] * cfg.window_array()
    total = max(length + 2 * cfg.pad, (n_frames - 1) * cfg.hop + cfg.win_length)
    y = overlap_add(frames, cfg.hop, total)[..., cfg.pad:cfg.pad + length]
    return y / _ola_norm(cfg, n_frames, length)


def istft_adjoint(g: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Transpose of :func:`istft_array`: (..., length) -> (..., F, T, 2)."""
    length = g.shape[-1]
    n = cfg.fft_size
    g = g / _ola_norm(cfg, n_frames, length)
    total = max(length + 2 * cfg.pad, (n_frames - 1) * cfg.hop + cfg.win_length)
    gp = np.zeros(g.shape[:-1] + (total,))
    gp[..., cfg.pad:cfg.pad + length] = g
    frames = frame_signal(gp, cfg.win_length, cfg.hop, n_frames) * cfg.window_array()
    z = np.fft.rfft(frames, n=n, axis=-1) / n
    z[..., 1:n // 2] *= 2.0
    z = np.swapaxes(z, -1, -2)
    return np.stack([z.real, z.imag], axis=-1)


# --- public operations -------------------------------------------------------

def stft(wave: Waveform, cfg: StftConfig = HANN) -> ComplexSpectrogram:
    arr = stft_array(wave.samples, cfg)
    return ComplexSpectrogram.from_stacked(arr, cfg, len(wave))


def istft(spec: ComplexSpectrogram, target_length: int | None = None) -> Waveform:
    length = spec.source_length if target_length is None else int(target_length)
    y = istft_array(spec.stacked(), spec.config, length)
    return Waveform(y)


def apply_mask(spec: ComplexSpectrogram, mask: MaskMatrix | np.ndarray) -> ComplexSpectrogram:
    m = mask.values if isinstance(mask, MaskMatrix) else np.asarray(mask, dtype=np.float64)
    if m.shape == spec.shape:
        return replace(spec, real=spec.real * m, imag=spec.imag * m)
    if m.shape == spec.shape + (2,):
        return replace(spec, real=spec.real * m[..., 0], imag=spec.imag * m[..., 1])
    raise DspError(f"mask shape {m.shape} does not match spectrogram {spec.shape}")


def snr_db(reference: Waveform | np.ndarray, perturbed: Waveform | np.ndarray) -> float:
    """10*log10(|x|^2 / |x - x~|^2), capped at 200 dB."""
    x = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, float)
    y = perturbed.samples if isinstance(perturbed, Waveform) else np.asarray(perturbed, float)
    if x.shape != y.shape:
        raise DspError(f"length mismatch: {x.shape} vs {y.shape}")
    signal = float(np.sum(x * x))
    if signal == 0.0:
        raise DspError("reference is all zeros")
    noise = float(np.sum((x - y) ** 2))
    if noise == 0.0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * np.log10(signal / noise))


def clip_amplitude(x: np.ndarray) -> np.ndarray:
    return np.clip(x, INT16_MIN, INT16_MAX)


def add_white_noise_at_snr(wave: Waveform, target_snr_db: float, seed: int) -> Waveform:
    if not np.isfinite(target_snr_db):
        raise DspError("target SNR must be finite")
    rng = np.random.default_rng(seed)
    x = wave.samples
    noise = rng.standard_normal(x.shape)
    signal_power = float(np.sum(x * x))
    scale = np.sqrt(signal_power / (np.sum(noise * noise) * 10.0 ** (target_snr_db / 10.0)))
    return Waveform(clip_amplitude(x + scale * noise), wave.sample_rate)
