import itertools
import wave as pywave

import numpy as np
import pytest
from hypothesis import given, strategies as st

from maskdetect import corpus
from maskdetect.corpus import CorpusError, Trial, TrialList
from maskdetect.dsp import Waveform


def test_speaker_determinism_and_separation():
    assert corpus.synth_speaker(7, 0) == corpus.synth_speaker(7, 0)
    profiles = [corpus.synth_speaker(7, i) for i in range(10)]
    a, b = profiles[0], profiles[1]
    assert a.f0_base != b.f0_base or a.formants != b.formants
    for p, q in itertools.combinations(profiles, 2):
        f_sep = max(abs(x[0] - y[0]) for x, y in zip(p.formants, q.formants))
        assert abs(p.f0_base - q.f0_base) >= 5.0 or f_sep >= 50.0


def test_utterance_length_and_determinism():
    prof = corpus.synth_speaker(7, 3)
    w = corpus.synth_utterance(prof, 1.0, utt_seed=5)
    assert len(w) == 16000
    assert np.array_equal(w.samples, corpus.synth_utterance(prof, 1.0, utt_seed=5).samples)
    assert np.all(w.samples == np.round(w.samples))
    with pytest.raises(CorpusError):
        corpus.synth_utterance(prof, 0.01, utt_seed=5)


def test_trial_lists_contract():
    att, ev, tr, val = corpus.build_trial_lists(range(8), range(8, 16), 20, 50, seed=3)
    assert len(att) == 100 and sum(t.is_target for t in att) == 50
    used = {u for t in att for u in (t.test_id, t.enroll_id)}
    assert not any(t.enroll_id in used for t in ev)
    assert [t.test_id for t in ev] == [t.test_id for t in att]
    assert [t.is_target for t in ev] == [t.is_target for t in att]
    assert len(tr) == 152 and len(val) == 8  # 160 utterances split 19:1
    dev_spk = {corpus.speaker_of(u) for u in tr.utterances + val.utterances}
    list_spk = {corpus.speaker_of(u) for t in att for u in (t.test_id, t.enroll_id)}
    assert not dev_spk & list_spk


def test_trial_list_errors():
    with pytest.raises(CorpusError):
        corpus.build_trial_lists(range(2), range(2, 4), 2, 1, seed=0)
    with pytest.raises(CorpusError):
        corpus.build_trial_lists(range(3), range(2, 5), 5, 1, seed=0)
    with pytest.raises(CorpusError):
        corpus.build_trial_lists(range(2), range(2, 4), 3, 500, seed=0)


def test_label_consistency_enforced():
    with pytest.raises(CorpusError):
        Trial("spk000/utt000", "spk001/utt000", True)


def test_trial_list_text_roundtrip():
    att, *_ = corpus.build_trial_lists(range(3), range(3, 5), 6, 5, seed=1)
    again = TrialList.from_text(att.to_text(), "attack")
    assert again.trials == att.trials


def test_wav_roundtrip_and_clamp(tmp_path):
    w = corpus.synth_utterance(corpus.synth_speaker(1, 1), 0.5, 2)
    p = tmp_path / "a.wav"
    corpus.write_wav(p, Waveform(w.samples + 0.3))
    assert np.max(np.abs(corpus.read_wav(p).samples - w.samples)) <= 0.5
    corpus.write_wav(p, Waveform(np.array([0.0, 40000.0, -40000.0])))
    np.testing.assert_array_equal(corpus.read_wav(p).samples, [0.0, 32767.0, -32768.0])


def test_stereo_rejected(tmp_path):
    p = tmp_path / "st.wav"
    with pywave.open(str(p), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(np.zeros(20, "<i2").tobytes())
    with pytest.raises(CorpusError, match="unsupported channel count"):
        corpus.read_wav(p)


def test_corpus_determinism(small_corpus):
    again = corpus.make_corpus(11, {"test": 2, "dev": 2, "asv": 2}, 6, 0.6)
    assert all(np.array_equal(small_corpus.waves[u].samples, again.waves[u].samples) for u in again.waves)
    assert small_corpus.pools == {"test": [0, 1], "dev": [2, 3], "asv": [4, 5]}


@given(st.integers(0, 2**31), st.integers(3, 8), st.integers(2, 4), st.integers(1, 6))
def test_trial_list_properties(seed, utts, n_spk, pairs):
    try:
        att, ev, tr, val = corpus.build_trial_lists(range(n_spk), range(n_spk, n_spk + 2), utts, pairs, seed)
    except CorpusError:
        return
    for t in list(att) + list(ev):
        assert t.is_target == (corpus.speaker_of(t.test_id) == corpus.speaker_of(t.enroll_id))
    assert set(tr.utterances).isdisjoint(val.utterances)
    assert len(tr) + len(val) == 2 * utts
