"""Structured-text parameter checkpoints.

Layout::

    # maskdetect-checkpoint 1
    # header {"kind": "asv", "seed": 3, ...}
    param conv1.w 32,24,5
    <row-major values, 17 significant digits, space separated>
    ...

17 significant digits round-trip every float64 exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "# maskdetect-checkpoint 1"


class CheckpointError(ValueError):
    pass


def dumps(params: dict, header: dict) -> str:
    lines = [MAGIC, "# header " + json.dumps(header, sort_keys=True)]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"param {name} {shape}")
        lines.append(" ".join(f"{v:.17g}" for v in arr.ravel()))
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple:
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError("not a maskdetect checkpoint")
    if not lines[1].startswith("# header "):
        raise CheckpointError("missing header line")
    header = json.loads(lines[1][len("# header "):])
    params = {}
    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        tag, name, shape_txt = lines[i].split()
        if tag != "param":
            raise CheckpointError(f"unexpected line {i + 1}: {lines[i][:40]!r}")
        shape = () if shape_txt == "scalar" else tuple(int(s) for s in shape_txt.split(","))
        values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"parameter {name}: expected {int(np.prod(shape))} values, got {values.size}")
        params[name] = values.reshape(shape)
        i += 2
    return params, header


def save(path, params: dict, header: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(params, header))


def load(path) -> tuple:
    return loads(Path(path).read_text())
