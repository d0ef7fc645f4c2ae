"""Small closed-loop setups shared by the runner and CLI tests."""

import copy
from dataclasses import replace

import numpy as np

from funnelmpc.config import build
from funnelmpc.plants import linear_plant

BASE = {
    "funnel": {"a": 1.0, "b": 1.0, "c": 1.0},
    "reference": {"kind": "constant", "params": {"value": 0.0}},
    "mpc": {"delta": 0.1, "horizon": 0.5, "u_bar": 5.0, "lambda_u": 1e-3},
    "learning": {"scheme": "none", "tau": 0.1, "every": 1},
    "plant": {"kind": "mass_on_car"},  # replaced by a linear plant
    "model": {"kind": "linear", "nu": 0, "R": [[-1.0]], "gamma": [[1.0]]},
    "fc": {"kind": "rd1", "activation": "relu", "beta_plus": 10.0, "threshold": 0.1},
    "sim": {"t_end": 0.5, "plant_step": 1e-3, "model_step": 0.01, "report_every": 1, "seed": 0},
}


def raw_config(**sections):
    raw = copy.deepcopy(BASE)
    for name, vals in sections.items():
        raw.setdefault(name, {}).update(vals)
    return raw


def perfect_setup(y0=0.5, disturbance=None, **sections):
    """Linear plant identical to the prediction model ``y' = -y + u``."""
    s = build(raw_config(**sections), digest="test")
    plant = linear_plant([[-1.0]], [[1.0]], [[1.0]], [y0])
    if disturbance is not None:
        plant = replace(plant, disturbance=disturbance)
    return replace(s, plant=plant)


def toml_text(raw):
    """Minimal TOML writer for the nested dicts above."""
    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, (list, tuple, np.ndarray)):
            return "[" + ", ".join(val(x) for x in v) + "]"
        if isinstance(v, dict):
            return "{ " + ", ".join(f"{k} = {val(x)}" for k, x in v.items()) + " }"
        return repr(float(v)) if isinstance(v, float) else str(v)

    lines = []
    for sec, body in raw.items():
        lines.append(f"[{sec}]")
        for k, v in body.items():
            lines.append(f"{k} = {val(v)}")
        lines.append("")
    return "\n".join(lines)
