import numpy as np
import pytest

from maskdetect import asv
from maskdetect.asv import AsvError
from maskdetect.dsp import Waveform


def tone(freq, n=8000, amp=3000.0):
    return Waveform(amp * np.sin(2 * np.pi * freq * np.arange(n) / 16000))


def test_logfbank_cmvn_rows():
    f = asv.logfbank(tone(700.0))
    np.testing.assert_allclose(f.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(f.var(axis=1), 1.0, atol=1e-6)


def test_logfbank_zero_wave_is_floor():
    cfg = asv.FeatureConfig()
    f = asv.logfbank(Waveform(np.zeros(1600)), cfg, cmvn=False)
    np.testing.assert_allclose(f, np.log(cfg.log_floor))


def test_logfbank_peak_filter():
    cfg = asv.FeatureConfig()
    f = asv.logfbank(tone(1000.0), cfg, cmvn=False)
    centers = asv.filter_centers(cfg.n_filters)
    assert int(np.argmax(f.mean(axis=1))) == int(np.argmin(np.abs(centers - 1000.0)))


def test_logfbank_too_short():
    with pytest.raises(AsvError):
        asv.logfbank(Waveform(np.ones(100)))


def test_embedding_norm_and_determinism(tiny_model, small_corpus):
    w = small_corpus.wave("spk000/utt000")
    e1, e2 = asv.embed_waves(w, tiny_model), asv.embed_waves(w, tiny_model)
    assert np.linalg.norm(e1) == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(e1, e2)
    with pytest.raises(AsvError):
        asv.embed(np.zeros((10, 4)), tiny_model)


def test_score_properties(tiny_model, small_corpus):
    x, y = small_corpus.wave("spk000/utt000"), small_corpus.wave("spk001/utt002")
    assert asv.score(x, x, tiny_model) == pytest.approx(1.0, abs=1e-9)
    assert asv.score(x, y, tiny_model) == pytest.approx(asv.score(y, x, tiny_model), abs=1e-12)


def test_score_graph_matches_plain_scoring(tiny_model, small_corpus):
    x, y = small_corpus.wave("spk000/utt000"), small_corpus.wave("spk001/utt002")
    e = asv.embed_waves(y, tiny_model)
    s = asv.ScoreGraph(tiny_model, e).value(x.samples[None])[0]
    assert s == pytest.approx(asv.score(x, y, tiny_model), abs=1e-12)


def test_calibration_examples():
    th = asv.calibrate_threshold([0.8, 0.9, 0.1, 0.2], [1, 1, 0, 0])
    assert 0.2 < th.eta < 0.8 and th.eer == 0.0
    th = asv.calibrate_threshold([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
    assert th.eer == 1.0
    with pytest.raises(AsvError):
        asv.calibrate_threshold([0.1, 0.2], [1, 1])


def test_checkpoint_roundtrip(tiny_model, tmp_path):
    tiny_model.save(tmp_path / "m.ckpt")
    back = asv.AsvModel.load(tmp_path / "m.ckpt")
    assert back.arch == tiny_model.arch and back.features == tiny_model.features
    for k in tiny_model.params:
        assert np.array_equal(back.params[k], tiny_model.params[k])


def test_training_is_deterministic_and_learns(small_corpus):
    byspk = {s: [small_corpus.wave(u) for u in small_corpus.utterances_of([s])] for s in range(6)}
    cfg = asv.AsvTrainConfig(steps=40, batch_speakers=6, crop_frames=50, val_every=20, seed=5)
    arch, feats = asv.AsvArch(channels=8), asv.FeatureConfig(n_filters=12)
    m1 = asv.train_asv(byspk, cfg, arch, feats)
    m2 = asv.train_asv(byspk, cfg, arch, feats)
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])
    with pytest.raises(AsvError):
        asv.train_asv({0: byspk[0][:1], 1: byspk[1]}, cfg, arch, feats)
