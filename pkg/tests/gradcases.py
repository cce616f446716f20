"""Finite-difference cases shared by the unit tests and the acceptance suite.

Every case returns ``(tape, leaf_values, output_node, linear)`` where the
output is ``op(...) * W`` for a fixed random weight ``W`` so that the
scalar under test, ``sum(output)``, depends on every output entry.
"""
import numpy as np

from maskdetect import asv, detect
from maskdetect.diffgraph import Tape, grad_check
from maskdetect.dsp import HANN

PROBES = 100


def _weighted(tape, y, shape, rng):
    return tape.mul(y, tape.const(rng.standard_normal(shape)))


def _case(kind, rng):
    t = Tape()
    x = t.leaf("x")
    vals = {}
    linear = False
    if kind in ("add", "sub", "mul"):
        y_leaf = t.leaf("y")
        vals = {"x": rng.standard_normal((12, 10)), "y": rng.standard_normal((12, 10))}
        out = t.apply(kind, x, y_leaf)
        linear = kind != "mul"
        shape = (12, 10)
    elif kind == "add_broadcast":
        y_leaf = t.leaf("y")
        vals = {"x": rng.standard_normal((12, 10)), "y": rng.standard_normal((10,))}
        out = t.add(x, y_leaf)
        linear, shape = True, (12, 10)
    elif kind == "scale":
        vals = {"x": rng.standard_normal((120,))}
        out, linear, shape = t.scale(x, c=-1.7), True, (120,)
    elif kind == "square":
        vals = {"x": rng.standard_normal((120,))}
        out, shape = t.square(x), (120,)
    elif kind == "pow":
        vals = {"x": rng.uniform(0.5, 2.0, (120,))}
        out, shape = t.pow(x, e=1.5), (120,)
    elif kind == "log":
        vals = {"x": rng.uniform(0.1, 5.0, (120,))}
        out, shape = t.log(x, eps=1e-6), (120,)
    elif kind in ("tanh", "sigmoid"):
        vals = {"x": rng.standard_normal((120,)) * 2}
        out, shape = t.apply(kind, x), (120,)
    elif kind in ("relu", "abs"):
        v = rng.standard_normal((120,))
        vals = {"x": v + 0.1 * np.sign(v)}  # keep clear of the kink
        out, shape = t.apply(kind, x), (120,)
    elif kind == "sum":
        vals = {"x": rng.standard_normal((12, 11))}
        out, linear, shape = t.sum(x, axis=1), True, (12,)
    elif kind == "mean":
        vals = {"x": rng.standard_normal((4, 12, 11))}
        out, linear, shape = t.mean(x, axis=(0, 2), keepdims=True), True, (1, 12, 1)
    elif kind == "matmul":
        y_leaf = t.leaf("y")
        vals = {"x": rng.standard_normal((11, 12)), "y": rng.standard_normal((3, 12, 10))}
        out, shape = t.matmul(x, y_leaf), (3, 11, 10)
    elif kind == "transpose":
        vals = {"x": rng.standard_normal((3, 5, 8))}
        out, linear, shape = t.transpose(x, axes=(2, 0, 1)), True, (8, 3, 5)
    elif kind == "reshape":
        vals = {"x": rng.standard_normal((6, 20))}
        out, linear, shape = t.reshape(x, shape=(3, 40)), True, (3, 40)
    elif kind == "stft":
        vals = {"x": rng.standard_normal((900,)) * 100}
        out, linear, shape = t.stft(x, cfg=HANN), True, (257, 6, 2)
    elif kind == "istft":
        vals = {"x": rng.standard_normal((257, 6, 2))}
        out, linear, shape = t.istft(x, cfg=HANN, length=900), True, (900,)
    elif kind == "istft_like":
        ref = t.const(np.zeros(900))
        vals = {"x": rng.standard_normal((257, 6, 2))}
        out, linear, shape = t.istft_like(x, ref, cfg=HANN), True, (900,)
    elif kind == "cmvn":
        vals = {"x": rng.standard_normal((4, 30))}
        out, shape = t.cmvn(x, floor=1e-8), (4, 30)
    elif kind == "conv1d":
        w, b = t.leaf("w"), t.leaf("b")
        vals = {"x": rng.standard_normal((2, 4, 20)), "w": rng.standard_normal((5, 4, 3)),
                "b": rng.standard_normal(5)}
        out, shape = t.conv1d(x, w, b), (2, 5, 18)
    elif kind == "conv2d":
        w, b = t.leaf("w"), t.leaf("b")
        vals = {"x": rng.standard_normal((2, 3, 7, 6)), "w": rng.standard_normal((4, 3, 3, 3)),
                "b": rng.standard_normal(4)}
        out, shape = t.conv2d(x, w, b), (2, 4, 7, 6)
    elif kind == "l2normalize":
        vals = {"x": rng.standard_normal((10, 16))}
        out, shape = t.l2normalize(x), (10, 16)
    elif kind == "cosine":
        y_leaf = t.leaf("y")
        vals = {"x": rng.standard_normal((10, 16)), "y": rng.standard_normal((10, 16))}
        out, shape = t.cosine(x, y_leaf), (10,)
    else:
        raise KeyError(kind)
    return t, vals, _weighted(t, out, shape, rng), linear


OP_CASES = ["add", "add_broadcast", "sub", "mul", "scale", "square", "pow", "log", "tanh", "sigmoid",
            "relu", "abs", "sum", "mean", "matmul", "transpose", "reshape", "stft", "istft", "istft_like",
            "cmvn", "conv1d", "conv2d", "l2normalize", "cosine"]


def op_errors(kind, seed=0, probes=PROBES):
    """{leaf: (worst relative error, tolerance, probes used)} for one op."""
    rng = np.random.default_rng(seed)
    tape, vals, out, linear = _case(kind, rng)
    tol = 1e-6 if linear else 1e-4
    step = 1.0 if linear else 1e-5
    res = {}
    for leaf in vals:
        n = vals[leaf].size
        coords = np.arange(n) if n <= probes else rng.choice(n, probes, replace=False)
        err = grad_check(tape, vals, leaf, step=step, output=out, coords=coords)
        res[leaf] = (err, tol, len(coords))
    return res


# Forward round-off of the score is ~1e-14, so a step of 1e-3 cannot resolve the
# smallest per-sample derivatives (~1e-8) to 1e-4; a tenth of one quantization
# level is still far inside the smooth regime of the pipeline.
PIPELINE_STEP = 0.1


def score_pipeline_error(model, wave_len=4000, probes=PROBES, detector=None, seed=0, step=PIPELINE_STEP):
    """Worst relative error of d score / d x for the full ASV score (optionally through a detector)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, wave_len)) * 2000
    e = asv.embed_waves(rng.standard_normal((1, wave_len)) * 2000, model)
    transform = None if detector is None else detect.transform_node(detector)
    g = asv.ScoreGraph(model, e, transform)
    coords = rng.choice(wave_len, probes, replace=False)
    return grad_check(g.tape, {"x": x}, "x", step=step, output=g.score, coords=coords)
