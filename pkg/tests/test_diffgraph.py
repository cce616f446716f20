import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcases import OP_CASES, PROBES, op_errors, score_pipeline_error
from maskdetect import asv, detect
from maskdetect.diffgraph import OPS, GraphError, NonFiniteError, Tape, grad_check
from maskdetect.dsp import HANN, apply_mask, istft, stft, Waveform


def test_every_registered_op_has_a_case():
    covered = {c.split("_broadcast")[0] for c in OP_CASES} | {"nondiff"}
    assert set(OPS) <= covered


@pytest.mark.parametrize("kind", OP_CASES)
def test_op_gradient(kind):
    for leaf, (err, tol, n) in op_errors(kind).items():
        assert n >= min(PROBES, 1), leaf
        assert err <= tol, (kind, leaf, err)


def test_linear_ops_flagged():
    for k in ("add", "sub", "scale", "sum", "mean", "transpose", "reshape", "stft", "istft"):
        assert OPS[k].linear


def test_log_identity_and_fanout():
    t = Tape()
    x = t.leaf("x")
    y = t.log(x, eps=0.0)
    assert t.forward({"x": np.e}) == pytest.approx(1.0)
    t = Tape()
    x = t.leaf("x")
    y = x + x
    assert t.forward({"x": 3.0}) == 6.0
    assert t.backward(1.0)["x"] == 2.0


def test_log_derivative_with_floor():
    t = Tape()
    x = t.leaf("x")
    t.log(x, eps=1e-6)
    t.forward({"x": 1.0})
    assert t.backward()["x"] == pytest.approx(1.0 / (1.0 + 1e-6), rel=1e-15)


def test_log_floor_near_zero_stays_finite():
    t = Tape()
    x = t.leaf("x")
    out = t.log(x, eps=1e-6)
    err = grad_check(t, {"x": np.array([1e-12, 0.5])}, "x", step=1e-9, output=out, coords=[0, 1])
    assert np.isfinite(err)


def test_backward_before_forward():
    t = Tape()
    t.square(t.leaf("x"))
    with pytest.raises(GraphError):
        t.backward()


@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
def test_nonfinite_reports_index():
    t = Tape()
    x = t.leaf("x")
    t.log(x, eps=0.0)
    with pytest.raises(NonFiniteError) as exc:
        t.forward({"x": np.array([0.0])})
    assert exc.value.index == 1


def test_unbound_leaf_and_foreign_node():
    t = Tape()
    t.square(t.leaf("x"))
    with pytest.raises(GraphError):
        t.forward({})
    other = Tape().leaf("y")
    with pytest.raises(GraphError):
        t.add(t.const(1.0), other)


def test_nondiff_forward_and_zero_gradient():
    t = Tape()
    x = t.leaf("x")
    m = t.nondiff(x, fn=lambda a: (a > 0).astype(float))
    out = t.mul(x, m)
    v = np.array([-1.0, 2.0, 3.0])
    np.testing.assert_array_equal(t.forward({"x": v}), [0.0, 2.0, 3.0])
    np.testing.assert_array_equal(t.backward()["x"], [0.0, 1.0, 1.0])


def test_mask_pipeline_matches_dsp():
    x = 3000 * np.sin(2 * np.pi * 440 * np.arange(4000) / 16000)
    mask = np.random.default_rng(0).uniform(size=(257, 26))
    t = Tape()
    xl = t.leaf("x")
    spec = t.stft(xl, cfg=HANN)
    y = t.istft(t.mul(spec, t.const(mask[..., None])), cfg=HANN, length=4000)
    got = t.forward({"x": x}, y)
    ref = istft(apply_mask(stft(Waveform(x)), mask)).samples
    np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-9 * np.abs(ref).max())


def test_full_score_gradient(tiny_model):
    assert score_pipeline_error(tiny_model) <= 1e-4


@pytest.mark.parametrize("det", [detect.MCSH(60), detect.MCSD(50.0), detect.LMD(detect.init_lmd(4))])
def test_score_gradient_through_transform(tiny_model, det):
    assert score_pipeline_error(tiny_model, detector=det) <= 1e-4


def test_seed_scales_gradient(tiny_model):
    rng = np.random.default_rng(9)
    w, e = Waveform(rng.standard_normal(3000) * 1000), Waveform(rng.standard_normal(3000) * 1000)
    g1 = asv.score_grad(w, e, tiny_model, 1.0)
    g2 = asv.score_grad(w, e, tiny_model, 2.0)
    assert np.all(np.isfinite(g1))
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=0)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_mul_backward_property(a, b):
    t = Tape()
    x, y = t.leaf("x"), t.leaf("y")
    t.mul(x, y)
    t.forward({"x": a, "y": b})
    g = t.backward()
    assert g["x"] == b and g["y"] == a
