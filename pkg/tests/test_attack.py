import numpy as np
import pytest

from maskdetect import asv, attack, detect
from maskdetect.attack import AttackConfig, AttackContext, AttackError, AttackGoal
from maskdetect.corpus import Trial
from maskdetect.dsp import snr_db


@pytest.fixture(scope="module")
def setup(tiny_model, small_corpus):
    utts = small_corpus.utterances_of([0, 1])
    trials = [Trial(utts[i], utts[j], False) for i, j in [(0, 6), (1, 7), (2, 8)]] + \
             [Trial(utts[i], utts[j], True) for i, j in [(0, 1), (6, 7), (3, 4)]]
    scores = asv.score_trials(trials, small_corpus.wave, tiny_model)
    eta = float(np.median(scores))
    return AttackContext(tiny_model, eta, small_corpus.wave), trials


def test_goal_rules():
    t = Trial("spk000/utt000", "spk001/utt000", False)
    assert AttackGoal.for_trial(t).kind == "impersonation" and AttackGoal.for_trial(t).sign == 1
    with pytest.raises(AttackError):
        AttackGoal("evasion").check(t)
    with pytest.raises(AttackError):
        AttackConfig("FGSM")


def test_bim_zero_iterations(setup):
    ctx, trials = setup
    ex = attack.bim(trials[0], ctx, "impersonation", n_iter=0)
    assert np.array_equal(ex.waveform.samples, ctx.wave_of(trials[0].test_id).samples)
    assert ex.snr_db == 200.0


def test_bim_linf_budget(setup):
    ctx, trials = setup
    for ex in attack.run_attack(trials, ctx, AttackConfig("BIM", alpha=1.0, n_iter=5)):
        d = ex.waveform.samples - ctx.wave_of(ex.trial.test_id).samples
        assert np.max(np.abs(d)) <= 5.0
        assert np.all(ex.waveform.samples == np.round(ex.waveform.samples))


def test_bim_moves_score_in_goal_direction(setup):
    ctx, trials = setup
    base = asv.score_trials(trials, ctx.wave_of, ctx.victim)
    adv = attack.run_attack(trials, ctx, AttackConfig("BIM", alpha=1.0, n_iter=10))
    for b, ex in zip(base, adv):
        assert (ex.score - b) * ex.goal.sign > 0


def test_pgd_l2_budget_and_determinism(setup):
    ctx, trials = setup
    cfg = AttackConfig("PGD", alpha=300.0, n_iter=3, seed=4)
    a = attack.run_attack(trials, ctx, cfg)
    b = attack.run_attack(trials, ctx, cfg)
    for x, y in zip(a, b):
        d = x.waveform.samples - ctx.wave_of(x.trial.test_id).samples
        assert np.linalg.norm(d) <= 900.0 + 1e-6
        assert np.array_equal(x.waveform.samples, y.waveform.samples)


def test_cw_success_margin(setup):
    ctx, trials = setup
    for kappa in (0.0, 0.05):
        for ex in attack.run_attack(trials[:3], ctx, AttackConfig("CW", kappa=kappa, n_iter=8, n_binary_search=3)):
            if ex.success:
                assert ex.score * ex.goal.sign >= (ctx.eta + ex.goal.sign * kappa) * ex.goal.sign - 1e-6


def test_cw_unreachable_margin_is_not_success(setup):
    ctx, trials = setup
    # cosine scores cannot exceed 1, so impersonation with eta + kappa > 1 never meets the margin
    kappa = 1.5 - ctx.eta
    for ex in attack.run_attack(trials[:3], ctx, AttackConfig("CW", kappa=kappa, n_iter=4, n_binary_search=2)):
        assert ex.goal.kind == "impersonation" and not ex.success


def test_cw_already_satisfied_input(setup):
    ctx, trials = setup
    tgt = trials[3]
    # an evasion goal that is already met: raise eta above the clean score
    clean = asv.score_trials([tgt], ctx.wave_of, ctx.victim)[0]
    easy = AttackContext(ctx.victim, clean + 0.5, ctx.wave_of)
    ex = attack.cw(tgt, easy, "evasion", kappa=0.0, n_iter=5, n_bs=2)
    assert ex.success
    d = ex.waveform.samples - ctx.wave_of(tgt.test_id).samples
    assert np.sqrt(np.mean(d ** 2)) <= 1.0


def test_identity_transform_reduces_to_plain_bim(setup):
    ctx, trials = setup
    cfg = AttackConfig("BIM", alpha=1.0, n_iter=4)
    plain = attack.run_attack([trials[0]], ctx, cfg)[0]
    adaptive = attack.attack_through_transform(trials[0], ctx, detect.Identity(), "impersonation", cfg)
    assert np.array_equal(plain.waveform.samples, adaptive.waveform.samples)


def test_matched_noise_sets(setup):
    ctx, trials = setup
    cfgs = [AttackConfig("BIM", alpha=1.0, n_iter=n) for n in (2, 8)]
    sets = attack.build_adversarial_sets(trials, ctx, cfgs, seed=3)
    assert [s.grid_value for s in sets] == [2, 8]
    for s in sets:
        assert len(s.adversarial) == len(s.genuine) == len(trials)
        for a, g in zip(s.adversarial, s.genuine):
            assert abs(a.snr_db - g.snr_db) <= 0.1
            assert g.snr_db == pytest.approx(snr_db(ctx.wave_of(g.trial.test_id), g.waveform))
    assert len(attack.mixture(sets).adversarial) == 2 * len(trials)
    m2, m8 = (np.mean([a.snr_db for a in s.adversarial]) for s in sets)
    assert m8 < m2


def test_parallel_jobs_match_serial(setup):
    ctx, trials = setup
    cfg = AttackConfig("PGD", alpha=300.0, n_iter=2, seed=1, chunk=2)
    a = attack.run_attack(trials, ctx, cfg, jobs=1)
    b = attack.run_attack(trials, ctx, cfg, jobs=3)
    assert all(np.array_equal(x.waveform.samples, y.waveform.samples) for x, y in zip(a, b))


def test_transfer_attack_rescored_on_victim(setup, small_corpus):
    ctx, trials = setup
    sub = asv.init_asv(99, asv.AsvArch(channels=5), asv.FeatureConfig(n_filters=10))
    tctx = AttackContext(ctx.victim, ctx.eta, ctx.wave_of, source=sub)
    ex = attack.run_attack(trials[:1], tctx, AttackConfig("BIM", n_iter=2))[0]
    assert ex.score == pytest.approx(asv.score(ex.waveform, small_corpus.wave(ex.trial.enroll_id), ctx.victim),
                                     abs=1e-12)
