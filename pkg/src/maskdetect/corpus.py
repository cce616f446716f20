"""Deterministic synthetic multi-speaker corpus, WAV I/O and trial lists.

Speakers are harmonic sources shaped by three formant resonators and a
spectral tilt.  Utterances are sequences of voiced syllables separated by
short pauses, so the log-spectral features vary over time and survive
per-utterance mean/variance normalization.
"""
from __future__ import annotations

import wave as _wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import INT16_MAX, INT16_MIN, SAMPLE_RATE, Waveform


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    f0_base: float
    formants: tuple  # ((center_hz, bandwidth_hz),) * 3, centers increasing
    spectral_tilt: float  # dB / octave
    vibrato_rate: float
    vibrato_depth: float  # cents
    fricative: tuple = (5000.0, 1500.0, -14.0)  # (center_hz, bandwidth_hz, level_db vs voiced rms)


def synth_speaker(corpus_seed: int, speaker_id: int) -> SpeakerProfile:
    if speaker_id < 0:
        raise CorpusError("speaker_id must be >= 0")
    rng = np.random.default_rng([int(corpus_seed), int(speaker_id), 0x5EED])
    f0 = float(rng.uniform(85.0, 290.0))
    f1 = float(rng.uniform(300.0, 850.0))
    f2 = float(rng.uniform(max(950.0, f1 + 250.0), 2300.0))
    f3 = float(rng.uniform(max(2400.0, f2 + 300.0), 3400.0))
    bws = rng.uniform([60.0, 80.0, 110.0], [110.0, 150.0, 220.0])
    return SpeakerProfile(
        speaker_id=int(speaker_id),
        f0_base=f0,
        formants=((f1, float(bws[0])), (f2, float(bws[1])), (f3, float(bws[2]))),
        spectral_tilt=float(rng.uniform(-12.0, -5.0)),
        vibrato_rate=float(rng.uniform(4.0, 7.0)),
        vibrato_depth=float(rng.uniform(10.0, 40.0)),
        fricative=(float(rng.uniform(3000.0, 6800.0)), float(rng.uniform(800.0, 2200.0)),
                   float(rng.uniform(-18.0, -8.0))),
    )


def _formant_gain(freqs: np.ndarray, formants) -> np.ndarray:
    gain = np.ones_like(freqs)
    for fc, bw in formants:
        # magnitude of a second-order resonance, unity at DC
        gain = gain / np.sqrt((1.0 - (freqs / fc) ** 2) ** 2 + (freqs * bw / fc ** 2) ** 2)
    return gain


def synth_utterance(profile: SpeakerProfile, duration_s: float, utt_seed: int,
                    noise_floor: float = 20.0) -> Waveform:
    """Render one utterance, quantized to the 16-bit grid."""
    if not 0.5 <= duration_s <= 5.0:
        raise CorpusError(f"duration {duration_s} s outside [0.5, 5.0]")
    rng = np.random.default_rng([int(profile.speaker_id), int(utt_seed), 0xA0D10])
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    # f0 contour: slow random drift (a few knots) plus vibrato
    knots = rng.uniform(-0.08, 0.08, size=5)
    drift = np.interp(t, np.linspace(0, t[-1], knots.size), knots)
    vib = (profile.vibrato_depth / 1200.0) * np.log(2) * np.sin(
        2 * np.pi * profile.vibrato_rate * t + rng.uniform(0, 2 * np.pi))
    f0 = profile.f0_base * np.exp(drift + vib)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    n_harm = int(7800.0 // (profile.f0_base * 0.85))
    h = np.arange(1, n_harm + 1)[:, None]
    # harmonic amplitudes vary slowly; evaluate on a coarse grid and interpolate
    coarse = np.arange(0, n + 32, 32)
    inst = h * np.interp(coarse, np.arange(n), f0)[None, :]
    amp_c = _formant_gain(inst, profile.formants) * (inst / 100.0) ** (profile.spectral_tilt / 6.02)
    amp_c = np.where(inst < 7900.0, amp_c, 0.0)
    idx = np.arange(n) / 32.0
    lo = idx.astype(int)
    frac = idx - lo
    amp = amp_c[:, lo] * (1.0 - frac) + amp_c[:, lo + 1] * frac
    harm_phase = rng.uniform(0, 2 * np.pi, size=(n_harm, 1))
    voiced = np.einsum("hn,hn->n", amp, np.sin(h * phase[None, :] + harm_phase))

    # syllabic envelope: raised-cosine bursts separated by short pauses
    env = np.zeros(n)
    onsets = []
    pos = int(rng.uniform(0.02, 0.08) * SAMPLE_RATE)
    while pos < n:
        onsets.append(pos)
        length = int(rng.uniform(0.12, 0.32) * SAMPLE_RATE)
        seg = np.sin(np.pi * np.arange(length) / length) ** 0.7 * rng.uniform(0.5, 1.0)
        end = min(n, pos + length)
        env[pos:end] = seg[:end - pos]
        pos = end + int(rng.uniform(0.03, 0.12) * SAMPLE_RATE)

    x = voiced * env

    # fricative bursts: speaker-shaped band noise at some syllable onsets
    fc, fbw, level = profile.fricative
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    noise = np.fft.irfft(spec * np.exp(-0.5 * ((freqs - fc) / fbw) ** 2), n)
    noise /= np.sqrt(np.mean(noise ** 2)) + 1e-12
    fenv = np.zeros(n)
    for start in onsets:
        if rng.uniform() < 0.6:
            length = int(rng.uniform(0.04, 0.10) * SAMPLE_RATE)
            end = min(n, start + length)
            fenv[start:end] = np.hanning(length)[:end - start]
    voiced_rms = np.sqrt(np.mean(x[env > 0.1] ** 2)) if np.any(env > 0.1) else 1.0
    x = x + voiced_rms * 10.0 ** (level / 20.0) * noise * fenv

    peak = np.max(np.abs(x))
    if peak > 0:
        x *= rng.uniform(0.3, 0.5) * INT16_MAX / peak
    x += noise_floor * rng.standard_normal(n)
    x = np.clip(np.round(x), -0.5 * INT16_MAX, 0.5 * INT16_MAX)
    return Waveform(np.round(x))


# --- WAV ---------------------------------------------------------------------

def write_wav(path, wave: Waveform) -> None:
    data = np.clip(np.round(wave.samples), INT16_MIN, INT16_MAX).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wave.sample_rate))
        fh.writeframes(data.tobytes())


def read_wav(path) -> Waveform:
    try:
        fh = _wave.open(str(path), "rb")
    except _wave.Error as exc:
        raise CorpusError(f"unsupported format: {exc}") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise CorpusError("unsupported channel count")
        if fh.getsampwidth() != 2:
            raise CorpusError("unsupported sample width (need 16-bit PCM)")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64), rate)


# --- trial lists -------------------------------------------------------------

def utt_id(speaker_id: int, index: int) -> str:
    return f"spk{speaker_id:03d}/utt{index:03d}"


def speaker_of(uid: str) -> int:
    return int(uid.split("/")[0][3:])


@dataclass(frozen=True)
class Trial:
    test_id: str
    enroll_id: str
    is_target: bool

    def __post_init__(self):
        if self.test_id == self.enroll_id:
            raise CorpusError("test and enrollment utterance must differ")
        if self.is_target != (speaker_of(self.test_id) == speaker_of(self.enroll_id)):
            raise CorpusError(f"label inconsistent with speakers: {self}")


@dataclass
class TrialList:
    trials: list
    role: str

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def to_text(self, path_of=lambda uid: uid) -> str:
        return "".join(f"{path_of(t.test_id)} {path_of(t.enroll_id)} {int(t.is_target)}\n"
                       for t in self.trials)

    @classmethod
    def from_text(cls, text: str, role: str, id_of=lambda p: p):
        trials = []
        for line in text.splitlines():
            if not line.strip():
                continue
            test, enroll, label = line.split()
            trials.append(Trial(id_of(test), id_of(enroll), label == "1"))
        return cls(trials, role)


@dataclass
class UtteranceList:
    """Plain utterance split (detector train / validation)."""
    utterances: list
    role: str

    def __len__(self):
        return len(self.utterances)

    def by_speaker(self) -> dict:
        out: dict = {}
        for u in self.utterances:
            out.setdefault(speaker_of(u), []).append(u)
        return out


def build_trial_lists(test_speakers, dev_speakers, utts_per_speaker: int, n_attack_pairs: int, seed: int):
    """Attack, eval, detector-train and detector-validation lists.

    ``test_speakers`` feed the attack/eval lists, ``dev_speakers`` the
    detector training data; the two pools must be disjoint.  For every
    test speaker a quarter of the utterances (at least one) are reserved as
    eval-list enrollments and never used in the attack list.
    """
    test_speakers, dev_speakers = list(test_speakers), list(dev_speakers)
    if utts_per_speaker < 3:
        raise CorpusError("need at least 3 utterances per speaker")
    if set(test_speakers) & set(dev_speakers):
        raise CorpusError("detector-training speakers overlap attack/eval speakers")
    if len(test_speakers) < 2:
        raise CorpusError("need at least two test speakers for non-target trials")
    rng = np.random.default_rng([int(seed), 0x7A1])

    n_reserve = max(1, utts_per_speaker // 4)
    pool, reserve = {}, {}
    for s in test_speakers:
        ids = [utt_id(s, i) for i in rng.permutation(utts_per_speaker)]
        reserve[s], pool[s] = ids[:n_reserve], ids[n_reserve:]

    def target_pairs():
        pairs = [(a, b) for s in test_speakers for a in pool[s] for b in pool[s] if a != b]
        return pairs

    def nontarget_pairs():
        return [(a, b) for s in test_speakers for r in test_speakers if r != s
                for a in pool[s] for b in pool[r]]

    tp, ntp = target_pairs(), nontarget_pairs()
    if len(tp) < n_attack_pairs or len(ntp) < n_attack_pairs:
        raise CorpusError("insufficient utterances for the requested number of attack pairs")
    tsel = [tp[i] for i in rng.choice(len(tp), n_attack_pairs, replace=False)]
    nsel = [ntp[i] for i in rng.choice(len(ntp), n_attack_pairs, replace=False)]
    attack = [Trial(a, b, True) for a, b in tsel] + [Trial(a, b, False) for a, b in nsel]
    order = rng.permutation(len(attack))
    attack = [attack[i] for i in order]

    evals = []
    for t in attack:
        choices = reserve[speaker_of(t.enroll_id)]
        evals.append(Trial(t.test_id, choices[int(rng.integers(len(choices)))], t.is_target))

    dev_utts = [utt_id(s, i) for s in dev_speakers for i in range(utts_per_speaker)]
    perm = rng.permutation(len(dev_utts))
    n_val = max(1, int(round(len(dev_utts) / 20)))
    val = sorted(dev_utts[i] for i in perm[:n_val])
    train = sorted(dev_utts[i] for i in perm[n_val:])
    return (TrialList(attack, "attack"), TrialList(evals, "eval"),
            UtteranceList(train, "train"), UtteranceList(val, "validation"))


@dataclass
class Corpus:
    """In-memory corpus: utterance id -> waveform, plus the speaker pools."""
    seed: int
    waves: dict
    profiles: dict
    pools: dict  # name -> list of speaker ids

    def wave(self, uid: str) -> Waveform:
        return self.waves[uid]

    def utterances_of(self, speakers) -> list:
        sp = set(speakers)
        return sorted(u for u in self.waves if speaker_of(u) in sp)


def make_corpus(seed: int, pools: dict, utts_per_speaker: int, duration_s: float) -> Corpus:
    """``pools`` maps a pool name to a speaker count; ids are assigned consecutively."""
    waves, profiles, ids = {}, {}, {}
    next_id = 0
    for name, count in pools.items():
        ids[name] = list(range(next_id, next_id + count))
        next_id += count
    for name in pools:
        for s in ids[name]:
            prof = synth_speaker(seed, s)
            profiles[s] = prof
            for i in range(utts_per_speaker):
                waves[utt_id(s, i)] = synth_utterance(prof, duration_s, utt_seed=_utt_seed(seed, s, i))
    return Corpus(seed, waves, profiles, ids)


def _utt_seed(seed: int, speaker: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(speaker), int(index)]).generate_state(1)[0])
