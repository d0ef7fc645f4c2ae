"""Run configuration files (TOML).

Sections: ``[funnel] a, b, c``; ``[reference] kind, params``;
``[mpc] delta, horizon, u_bar, lambda_u``; ``[learning] scheme, tau, every``
with ``[learning.bounds] r_bar, s_bar, gamma_bar, p_bar, eta_bar, rho_bar``;
``[plant] kind, params, initial_state``; ``[sim] t_end, plant_step,
model_step``.  Optional ``[model]`` and ``[fc]`` sections choose the initial
prediction model and the funnel-controller law.
"""

from __future__ import annotations

import hashlib
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import FunnelSpec, ReferenceSignal, RunConfig, constant_reference, cosine_reference
from .fc import ActivationFn
from .learn.certify import ClassBounds, rho_bar as rho_bar_of
from .learn.graybox import GrayboxParams, MassOnCarModel
from .learn.linear import LearnScheme
from .learn.surrogate import LinearSurrogate
from .plants import (MassOnCarParams, PlantConfigError, PlantModel, ReactorParams,
                     mass_on_car_plant, reactor_plant)

log = logging.getLogger(__name__)

_MISSING = object()


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


class _Section:
    def __init__(self, data: dict, path: str):
        self.data = data
        self.path = path

    def key(self, name):
        return f"{self.path}.{name}" if self.path else name

    def get(self, name, default=_MISSING, kind=float):
        if name not in self.data:
            if default is _MISSING:
                raise ConfigError(self.key(name), "missing required key")
            return default
        val = self.data[name]
        try:
            if kind is float:
                if isinstance(val, bool):
                    raise TypeError
                out = float(val)
                if not math.isfinite(out):
                    raise ValueError
                return out
            if kind is int:
                if isinstance(val, bool) or int(val) != val:
                    raise TypeError
                return int(val)
            if kind is str:
                if not isinstance(val, str):
                    raise TypeError
                return val
            if kind is bool:
                if not isinstance(val, bool):
                    raise TypeError
                return val
            if kind is list:
                return np.asarray(val, dtype=float)
            return val
        except (TypeError, ValueError):
            raise ConfigError(self.key(name), f"expected {kind.__name__}, got {val!r}") from None

    def sub(self, name, required=True) -> Optional["_Section"]:
        # a missing section reads as empty, so errors cite its first required key
        if name not in self.data:
            return _Section({}, self.key(name))
        val = self.data[name]
        if not isinstance(val, dict):
            raise ConfigError(self.key(name), "expected a table")
        return _Section(val, self.key(name))


@dataclass
class Setup:
    """Everything a run needs, built from one configuration file."""

    run: RunConfig
    funnel: FunnelSpec
    reference: ReferenceSignal
    plant: PlantModel
    model: Any
    scheme: LearnScheme
    bounds: Optional[ClassBounds]
    fc_kind: str
    activation: ActivationFn
    eta_policy: str
    certify_initial: bool
    raw: dict
    digest: str
    source: Optional[str] = None


def _check(cond, key, msg):
    if not cond:
        raise ConfigError(key, msg)


def _reference(sec: _Section) -> ReferenceSignal:
    kind = sec.get("kind", kind=str)
    params = sec.sub("params", required=False)
    if kind == "constant":
        v = params.data.get("value", 0.0)
        return constant_reference(np.asarray(v, dtype=float))
    if kind == "cosine":
        return cosine_reference(params.get("amplitude", 1.0), params.get("omega", 1.0),
                                params.get("phase", 0.0), params.get("offset", 0.0))
    raise ConfigError(sec.key("kind"), f"unknown reference kind {kind!r}")


def _plant(sec: _Section) -> PlantModel:
    kind = sec.get("kind", kind=str)
    params = sec.sub("params", required=False).data
    x0 = sec.get("initial_state", None, kind=list)
    try:
        if kind == "reactor":
            p = dict(params)
            if x0 is not None:
                p["initial"] = tuple(x0)
            if "zeta_in" in p:
                p["zeta_in"] = tuple(p["zeta_in"])
            return reactor_plant(ReactorParams(**p))
        if kind == "mass_on_car":
            p = dict(params)
            if x0 is not None:
                p["initial"] = tuple(x0)
            return mass_on_car_plant(MassOnCarParams(**p))
    except TypeError as exc:
        raise ConfigError(sec.key("params"), str(exc)) from None
    except PlantConfigError as exc:
        raise ConfigError(sec.key("params"), str(exc)) from None
    raise ConfigError(sec.key("kind"), f"unknown plant kind {kind!r}")


def _model(sec: _Section, plant: PlantModel):
    kind = sec.get("kind", "linear", kind=str)
    if kind == "linear":
        m = plant.m
        nu = sec.get("nu", 0, kind=int)
        _check(nu >= 0, sec.key("nu"), "must be >= 0")
        blocks = {}
        shapes = dict(R=(m, m), S=(m, nu), gamma=(m, m), D1=(m,), Q=(nu, nu), P=(nu, m),
                      D2=(nu,), eta0=(nu,))
        for name, shape in shapes.items():
            if name in sec.data:
                arr = sec.get(name, kind=list)
                try:
                    blocks[name] = arr.reshape(shape)
                except ValueError:
                    raise ConfigError(sec.key(name), f"expected shape {shape}") from None
        try:
            return LinearSurrogate(blocks.get("R", np.zeros((m, m))),
                                   blocks.get("S", np.zeros((m, nu))),
                                   blocks.get("gamma", np.eye(m)),
                                   blocks.get("D1", np.zeros(m)),
                                   blocks.get("Q", np.zeros((nu, nu))),
                                   blocks.get("P", np.zeros((nu, m))),
                                   blocks.get("D2", np.zeros(nu)),
                                   blocks.get("eta0", np.zeros(nu)))
        except ValueError as exc:
            raise ConfigError(sec.path, str(exc)) from None
    if kind == "graybox":
        g = GrayboxParams.initial_guess()
        vals = {n: sec.get(n, getattr(g, n)) for n in ("theta", "m1", "m2", "k", "d")}
        z0 = sec.get("z0", np.asarray(g.z0), kind=list)
        _check(z0.shape == (4,), sec.key("z0"), "expected four entries")
        return MassOnCarModel(GrayboxParams(**vals, z0=tuple(float(x) for x in z0)))
    raise ConfigError(sec.key("kind"), f"unknown model kind {kind!r}")


def build(raw: dict, digest: str = "", source: Optional[str] = None, seed=None) -> Setup:
    root = _Section(raw, "")
    fs = root.sub("funnel")
    a, b, c = fs.get("a"), fs.get("b"), fs.get("c")
    _check(a > 0, fs.key("a"), "must be positive")
    _check(b >= 0, fs.key("b"), "must be nonnegative")
    _check(c > 0, fs.key("c"), "must be positive")
    funnel = FunnelSpec(a, b, c)
    reference = _reference(root.sub("reference"))

    mpc = root.sub("mpc")
    delta, horizon = mpc.get("delta"), mpc.get("horizon")
    u_bar, lambda_u = mpc.get("u_bar"), mpc.get("lambda_u")
    _check(delta > 0, mpc.key("delta"), "must be positive")
    _check(u_bar >= 0, mpc.key("u_bar"), "must be nonnegative")
    _check(lambda_u >= 0, mpc.key("lambda_u"), "must be nonnegative")

    lrn = root.sub("learning")
    scheme_kind = lrn.get("scheme", kind=str)
    tau = lrn.get("tau")
    every = lrn.get("every", kind=int)
    _check(every >= 1, lrn.key("every"), "must be >= 1")

    sim = root.sub("sim")
    t_end = sim.get("t_end")
    _check(t_end > 0, sim.key("t_end"), "must be positive")
    plant_step, model_step = sim.get("plant_step"), sim.get("model_step")
    report_every = sim.get("report_every", 1, kind=int)
    seed = sim.get("seed", 0, kind=int) if seed is None else int(seed)

    for key, num, den in ((mpc.key("horizon"), horizon, delta), (lrn.key("tau"), delta, tau),
                          (sim.key("plant_step"), delta, plant_step),
                          (sim.key("model_step"), delta, model_step)):
        _check(den > 0, key, "must be positive")
        r = num / den
        _check(round(r) >= 1 and abs(r - round(r)) <= 1e-9 * max(1.0, r), key,
               f"must divide evenly (ratio {r:.12g})")
    run = RunConfig(delta, horizon, u_bar, lambda_u, tau, every, t_end, plant_step, model_step,
                    seed=seed, report_every=report_every)

    plant = _plant(root.sub("plant"))
    model = _model(root.sub("model", required=False), plant)
    eta_policy = root.sub("model", required=False).get(
        "eta_policy", "predicted" if isinstance(model, MassOnCarModel) else "reset", kind=str)
    _check(eta_policy in ("reset", "predicted"), "model.eta_policy", "must be reset or predicted")
    certify_initial = root.sub("model", required=False).get("certify", True, kind=bool)

    bounds = None
    bsec = lrn.sub("bounds", required=False)
    if bsec.data:
        if u_bar > 0:
            rho = bsec.get("rho_bar", None)
            if rho is None:
                rho = rho_bar_of(funnel, reference)
            try:
                bounds = ClassBounds(bsec.get("r_bar"), bsec.get("s_bar"), bsec.get("gamma_bar"),
                                     bsec.get("p_bar"), bsec.get("eta_bar"), rho, u_bar,
                                     bsec.get("d2_bar", math.inf))
            except ValueError as exc:
                raise ConfigError(bsec.path, str(exc)) from None
        else:
            log.warning("u_bar = 0: model-class bounds are undefined, learning disabled")

    weights = lrn.get("weights", None, kind=list)
    pbox = lrn.sub("param_box", required=False).data or None
    zbox = lrn.get("z0_box", None, kind=list)
    try:
        scheme = LearnScheme(
            kind=scheme_kind, window=lrn.get("window", None, kind=int),
            weights=None if weights is None else tuple(weights),
            reg_weights={k: float(v) for k, v in lrn.sub("reg_weights", required=False).data.items()},
            fix_gamma=lrn.get("fix_gamma", False, kind=bool),
            restarts=lrn.get("restarts", 3, kind=int), seed=seed,
            max_iter=lrn.get("max_iter", 200, kind=int),
            param_box={k: tuple(v) for k, v in pbox.items()} if pbox else None,
            z0_box=None if zbox is None else tuple(map(tuple, zbox)))
    except ValueError as exc:
        raise ConfigError(lrn.key("scheme"), str(exc)) from None
    if scheme.kind in ("mhe", "last_point", "regularized"):
        _check(isinstance(model, LinearSurrogate), lrn.key("scheme"),
               "linear schemes need a linear initial model")
        if bounds is None and u_bar > 0:
            raise ConfigError(bsec.key("r_bar"), "linear learning schemes need class bounds")
    if scheme.kind == "graybox":
        _check(isinstance(model, MassOnCarModel), lrn.key("scheme"),
               "graybox learning needs a graybox initial model")

    fcs = root.sub("fc", required=False)
    default_fc = "rd2" if plant.relative_degree == 2 else "rd1"
    fc_kind = fcs.get("kind", default_fc, kind=str)
    _check(fc_kind in ("rd1", "rd2"), fcs.key("kind"), "must be rd1 or rd2")
    _check(not (fc_kind == "rd2" and plant.output_rate is None), fcs.key("kind"),
           "rd2 needs a plant with an output-rate map")
    try:
        act = ActivationFn(fcs.get("activation", "constant", kind=str),
                           fcs.get("beta_plus", 10.0), fcs.get("threshold", 0.0))
    except ValueError as exc:
        raise ConfigError(fcs.path, str(exc)) from None

    y0 = np.atleast_1d(plant.output(plant.initial_state))
    if not np.linalg.norm(y0 - reference(0.0)) < funnel(0.0):
        raise ConfigError("plant.initial_state", "initial output lies outside the funnel")
    return Setup(run, funnel, reference, plant, model, scheme, bounds, fc_kind, act, eta_policy,
                 certify_initial, raw, digest, source)


def load(path, seed=None) -> Setup:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from None
    try:
        raw = tomllib.loads(data.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError("<file>", f"parse error: {exc}") from None
    return build(raw, hashlib.sha256(data).hexdigest(), str(path), seed=seed)


def bundled(name: str) -> Path:
    """Path of a configuration shipped with the package (``reactor``, ``mass_on_car``)."""
    p = Path(__file__).with_name("configs") / f"{name}.toml"
    if not p.exists():
        raise FileNotFoundError(p)
    return p
