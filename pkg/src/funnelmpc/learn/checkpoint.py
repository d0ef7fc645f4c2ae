"""Plain-text model checkpoints for post-hoc audit.

Format::

    # fmpc-model v1
    kind linear
    m 1
    nu 2
    R 1 1 : <row-major values>
    ...
    bounds r_bar=... s_bar=...

Gray-box checkpoints store ``params theta m1 m2 k d z0_0 .. z0_3`` instead of
matrices.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

import numpy as np

from .certify import ClassBounds
from .graybox import GrayboxParams
from .surrogate import LinearSurrogate

HEADER = "# fmpc-model v1"
_BLOCKS = ("R", "S", "gamma", "D1", "Q", "P", "D2", "eta0")
_BOUND_KEYS = ("r_bar", "s_bar", "gamma_bar", "p_bar", "eta_bar", "rho_bar", "u_bar", "d2_bar")


class CheckpointError(ValueError):
    pass


def _fmt(a) -> str:
    return " ".join(f"{x:.17g}" for x in np.ravel(a))


def dumps(model: Union[LinearSurrogate, GrayboxParams], bounds: Optional[ClassBounds] = None,
          t: Optional[float] = None) -> str:
    lines = [HEADER]
    if t is not None:
        lines.append(f"t {t:.17g}")
    if isinstance(model, GrayboxParams):
        lines += ["kind graybox", "params " + _fmt(model.vector())]
    else:
        lines += ["kind linear", f"m {model.m}", f"nu {model.nu}"]
        for name, a in model.blocks().items():
            a2 = np.atleast_2d(a) if a.ndim == 2 else a.reshape(1, -1)
            lines.append(f"{name} {a2.shape[0]} {a2.shape[1]} : {_fmt(a)}")
    if bounds is not None:
        lines.append("bounds " + " ".join(f"{k}={getattr(bounds, k):.17g}" for k in _BOUND_KEYS))
    return "\n".join(lines) + "\n"


def write_model(path, model, bounds=None, t=None) -> Path:
    path = Path(path)
    path.write_text(dumps(model, bounds, t))
    return path


def loads(text: str):
    """Parse a checkpoint; returns ``(model, bounds_or_None)``."""
    rows = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not rows or rows[0] != HEADER:
        raise CheckpointError("missing or unsupported checkpoint header")
    kv, blocks, bounds = {}, {}, None
    for ln in rows[1:]:
        key, _, rest = ln.partition(" ")
        if key in _BLOCKS:
            shape, _, vals = rest.partition(":")
            r, c = (int(x) for x in shape.split())
            arr = np.array([float(x) for x in vals.split()], dtype=float)
            if arr.size != r * c:
                raise CheckpointError(f"block {key}: expected {r * c} values, got {arr.size}")
            blocks[key] = arr.reshape(r, c)
        elif key == "bounds":
            vals = dict(item.split("=") for item in rest.split())
            bounds = ClassBounds(**{k: float(vals[k]) for k in _BOUND_KEYS if k in vals})
        else:
            kv[key] = rest
    kind = kv.get("kind")
    if kind == "graybox":
        return GrayboxParams.from_vector([float(x) for x in kv["params"].split()]), bounds
    if kind != "linear":
        raise CheckpointError(f"unknown model kind {kind!r}")
    missing = [b for b in _BLOCKS if b not in blocks]
    if missing:
        raise CheckpointError("missing blocks: " + ", ".join(missing))
    m, nu = int(kv["m"]), int(kv["nu"])
    model = LinearSurrogate(blocks["R"], blocks["S"].reshape(m, nu), blocks["gamma"],
                            blocks["D1"].ravel(), blocks["Q"].reshape(nu, nu),
                            blocks["P"].reshape(nu, m), blocks["D2"].ravel(),
                            blocks["eta0"].ravel())
    return model, bounds


def read_model(path):
    return loads(Path(path).read_text())
