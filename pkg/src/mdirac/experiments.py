"""Registered experiments behind the command-line runner.

Each experiment consumes a validated :class:`ExperimentConfig`, runs a
set of named quantitative checks, and returns a JSON-ready report plus
optional artifacts (trajectory tables, normal-form data).  Reports are
deterministic for a fixed config and seed: every number comes from
seeded sampling or closed-form evaluation, and the serializer sorts
keys, so identical inputs give byte-identical report files.

The registry covers the full battery: bracket axioms and the
closed-form sphere brackets, the double-spherical-pendulum spinning
cases with their slice, normal-form and flow checks, the static-stratum
and Kustaanheimo-Stiefel refusal diagnostics, the Neumann and separable
Moser models, the quartic-oscillator normal-form oracle, and the
numerical hygiene audit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.linalg

from .poly import (
    DEFAULT_MAX_DEGREE,
    CanonicalStructure,
    TruncatedPoly,
    poisson_bracket,
)
from .smooth import SmoothMap, hamiltonian_vector_field
from .dirac import (
    ConstraintSet,
    DiracContext,
    dirac_bracket,
    dirac_field_callable,
    dirac_project,
    moser_multipliers,
    sample_probes,
    singularity_diagnostics,
)
from .symmetry import NotLocallyFreeError, stationarity_test
from .birkhoff import run_normal_form_report
from .models import (
    AZ,
    CallableConstraints,
    DspParams,
    dsp_action,
    dsp_case_configuration,
    dsp_equilibria,
    dsp_full_callables,
    dsp_gradient,
    dsp_hamiltonian,
    dsp_locked_inertia,
    dsp_pipeline,
    dsp_slice,
    dsp_spheres,
    dsp_sphere_callables,
    ks_model,
    moser_filter_integrals,
    neumann_model,
    quaternion_product,
    separable_oscillator_model,
)
from .dynamics import (
    Trajectory,
    conserved_monitor,
    flow_compare,
    integrate,
    relatedness_check,
)


class ConfigError(ValueError):
    """Configuration problem: unknown keys, bad types, bad values."""


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Validated run request: experiment name, model parameters,
    numerical overrides, output directory and probe seed."""

    experiment: str
    seed: int = 0
    output_dir: str | None = None
    model: dict = field(default_factory=dict)
    numerics: dict = field(default_factory=dict)


_TOP_KEYS = {"experiment", "seed", "output_dir", "model", "numerics"}


def parse_config(data) -> ExperimentConfig:
    """Build an ExperimentConfig from a decoded JSON object.

    Raises ConfigError on unknown keys, missing or unregistered
    experiment names, and ill-typed fields.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError("unknown config keys: %s" % ", ".join(unknown))
    if "experiment" not in data:
        raise ConfigError("config needs an 'experiment' name")
    name = data["experiment"]
    if not isinstance(name, str) or name not in EXPERIMENTS:
        raise ConfigError(
            "unknown experiment %r; run 'list' for the registry" % (name,))
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    out = data.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output_dir must be a string path")
    model = data.get("model", {})
    numerics = data.get("numerics", {})
    if not isinstance(model, dict):
        raise ConfigError("model must be an object")
    if not isinstance(numerics, dict):
        raise ConfigError("numerics must be an object")
    return ExperimentConfig(experiment=name, seed=seed, output_dir=out,
                            model=dict(model), numerics=dict(numerics))


def _merge_numerics(cfg: ExperimentConfig, defaults: dict) -> dict:
    """Overlay config numerics on experiment defaults, rejecting
    unknown keys and non-positive tolerance overrides."""
    num = dict(defaults)
    num["tolerances"] = dict(defaults.get("tolerances", {}))
    for key, val in cfg.numerics.items():
        if key == "tolerances":
            if not isinstance(val, dict):
                raise ConfigError("tolerances must be an object")
            for nm, tol in val.items():
                if not isinstance(tol, (int, float)) or tol <= 0.0:
                    raise ConfigError(
                        "tolerance %r must be a positive number" % nm)
                num["tolerances"][nm] = float(tol)
        elif key in defaults and key != "tolerances":
            if isinstance(defaults[key], list):
                if not isinstance(val, list):
                    raise ConfigError("numerics key %r must be a list" % key)
                num[key] = [float(v) for v in val]
            elif not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError("numerics key %r must be a number" % key)
            else:
                num[key] = type(defaults[key])(val)
        else:
            raise ConfigError("unknown numerics key %r for %s"
                              % (key, cfg.experiment))
    return num


def _model_params(cfg: ExperimentConfig, allowed: dict) -> dict:
    """Overlay config model parameters on defaults (same key policy)."""
    params = dict(allowed)
    for key, val in cfg.model.items():
        if key not in allowed:
            raise ConfigError("unknown model key %r for %s"
                              % (key, cfg.experiment))
        params[key] = val
    return params


class CheckSet:
    """Accumulates named pass/fail checks with override-able tolerances.

    ``bound`` passes when value < tol, ``exceeds`` when value > floor
    (negative controls), ``flag`` records a boolean outcome.  Tolerance
    overrides that never match a check name are configuration typos and
    raise at ``finalize``.
    """

    def __init__(self, overrides=None):
        self.table = {}
        self._over = dict(overrides or {})
        self._used = set()

    def _tol(self, name, default):
        if name in self._over:
            self._used.add(name)
            return self._over[name]
        return default

    def bound(self, name, value, tol):
        tol = self._tol(name, tol)
        self.table[name] = {"value": float(value), "tol": float(tol),
                            "kind": "max", "passed": bool(value < tol)}

    def exceeds(self, name, value, floor):
        floor = self._tol(name, floor)
        self.table[name] = {"value": float(value), "tol": float(floor),
                            "kind": "min", "passed": bool(value > floor)}

    def flag(self, name, ok, detail=None):
        entry = {"kind": "flag", "passed": bool(ok)}
        if detail is not None:
            entry["detail"] = detail
        self.table[name] = entry

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.table.values())

    def finalize(self):
        unused = sorted(set(self._over) - self._used)
        if unused:
            raise ConfigError("tolerance overrides match no check: %s"
                              % ", ".join(unused))


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays and tuple keys so the
    report serializes with the stock json encoder."""
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            if isinstance(k, tuple):
                k = ",".join(str(t) for t in k)
            elif not isinstance(k, str):
                k = str(k)
            out[k] = to_jsonable(v)
        return out
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def _report(cfg: ExperimentConfig, checks: CheckSet, extra=None) -> dict:
    checks.finalize()
    rep = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "checks": checks.table,
        "passed": checks.passed,
    }
    if extra:
        rep.update(extra)
    return to_jsonable(rep)


# ----------------------------------------------------------------------
# shared model plumbing
# ----------------------------------------------------------------------


_DSP_MODEL_DEFAULTS = {
    2: dict(m1=1.0, m2=1.0, l1=1.0, l2=1.0, g=0.0, omega=1.0, mu=None),
    3: dict(m1=1.0, m2=1.0, l1=1.0, l2=1.0, g=0.0, omega=None, mu=1.0),
    4: dict(m1=1.5, m2=1.0, l1=1.0, l2=0.8, g=0.0, omega=0.7, mu=None),
}


def _dsp_setup(cfg: ExperimentConfig, case_id: int):
    mp = _model_params(cfg, _DSP_MODEL_DEFAULTS[case_id])
    if (mp["mu"] is None) == (mp["omega"] is None):
        raise ConfigError("give exactly one of model.mu / model.omega")
    p = DspParams(m1=mp["m1"], m2=mp["m2"], l1=mp["l1"], l2=mp["l2"],
                  g=mp["g"])
    kw = {"mu": mp["mu"]} if mp["mu"] is not None else {"omega": mp["omega"]}
    return p, kw


def _equilibrium_summary(re) -> dict:
    return {
        "case": re.case_id,
        "case_name": re.case_name,
        "Omega": re.Omega,
        "mu": re.mu,
        "x0": re.x0,
        "kkt_residual": re.residual,
    }


def _dsp_stationarity(p: DspParams, x0) -> dict:
    """Locked-inertia stationarity along the configuration tangent."""
    Gq = np.zeros((2, 6))
    Gq[0, :3] = x0[:3]
    Gq[1, 3:] = x0[3:6]
    _, _, Vt = scipy.linalg.svd(Gq)
    return stationarity_test(dsp_locked_inertia(p), x0[:6], list(Vt[2:]))


def _dsp_field_agreement(p, re, slc, n_probes, radius, tilt, seed):
    """Max pointwise gap between the 6-constraint and sphere-only Dirac
    fields of H_Omega, and the same gap for a tilted (non-invariant)
    Hamiltonian as the negative control."""
    grad = dsp_gradient(p, re.Omega)
    jac6 = dsp_full_callables(slc).jacobian
    jac4 = dsp_sphere_callables().jacobian
    probes = sample_probes(slc.full_constraints, re.x0, n_probes, radius,
                           seed)
    X6 = dirac_field_callable(grad, jac6)
    X4 = dirac_field_callable(grad, jac4)
    agree = max(np.max(np.abs(X6(z) - X4(z))) for z in probes)
    w = np.zeros(12)
    w[1] = tilt
    bad = lambda x: grad(x) + w
    X6b = dirac_field_callable(bad, jac6)
    X4b = dirac_field_callable(bad, jac4)
    neg = max(np.max(np.abs(X6b(z) - X4b(z))) for z in probes)
    return float(agree), float(neg)


def _thin(traj: Trajectory, max_rows: int = 2001) -> Trajectory:
    """Subsample a trajectory for CSV emission, keeping the endpoints."""
    n = traj.times.size
    stride = max(1, int(math.ceil((n - 1) / (max_rows - 1)))) if n > 1 else 1
    idx = list(range(0, n, stride))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    return Trajectory(
        times=traj.times[idx], states=traj.states[idx],
        diagnostics={k: v[idx] for k, v in traj.diagnostics.items()})


def _random_poly(rng, n_vars, n_terms=8, max_degree=3, K=6):
    """Seeded sparse random polynomial with terms of degree 1..max."""
    terms = {}
    for _ in range(n_terms):
        e = [0] * n_vars
        for i in rng.integers(0, n_vars, size=int(rng.integers(1, max_degree + 1))):
            e[i] += 1
        terms[tuple(e)] = rng.standard_normal()
    return TruncatedPoly(n_vars, K, terms)


def _random_polys(rng, n_vars, n_funcs):
    return [SmoothMap.from_poly(_random_poly(rng, n_vars))
            for _ in range(n_funcs)]


def _axiom_residuals(cs, probes, fs):
    """Worst antisymmetry, annihilation and tangency residuals of the
    Dirac bracket/projection over probes and test functions."""
    antisym = annihil = tangency = 0.0
    for x in probes:
        ctx = DiracContext(cs, x)
        G = cs.jacobian(x)
        for i, f in enumerate(fs):
            for g in fs[i:]:
                antisym = max(antisym, abs(dirac_bracket(f, g, ctx)
                                           + dirac_bracket(g, f, ctx)))
            for phi in cs.constraints:
                annihil = max(annihil, abs(dirac_bracket(phi, f, ctx)))
            tangency = max(tangency,
                           float(np.max(np.abs(G @ dirac_project(f, ctx)))))
    return antisym, annihil, tangency


# ----------------------------------------------------------------------
# experiments
# ----------------------------------------------------------------------


def _sphere_pair_constraints(K: int = 6) -> ConstraintSet:
    n, m = 6, 3
    g1 = TruncatedPoly.zero(n, K)
    g2 = TruncatedPoly.zero(n, K)
    for a in range(m):
        qa = TruncatedPoly.variable(a, n, K)
        pa = TruncatedPoly.variable(m + a, n, K)
        g1 = g1 + qa * qa
        g2 = g2 + qa * pa
    return ConstraintSet.from_polys([g1 - 1.0, g2],
                                    names=["sphere", "radial"])


def _coord(i, n):
    return SmoothMap.from_poly(TruncatedPoly.variable(i, n, 2))


def _run_sphere_dirac(cfg: ExperimentConfig):
    num = _merge_numerics(cfg, {"n_probes": 200, "n_functions": 5,
                                "dsp_radius": 1e-2, "tolerances": {}})
    checks = CheckSet(num["tolerances"])
    rng = np.random.default_rng(cfg.seed)
    cs = _sphere_pair_constraints()

    def sphere_probe():
        q = rng.standard_normal(3)
        q /= np.linalg.norm(q)
        p = rng.standard_normal(3)
        return np.concatenate([q, p - (p @ q) * q])

    probes = [sphere_probe() for _ in range(num["n_probes"])]
    fs = _random_polys(rng, 6, num["n_functions"])
    antisym, annihil, tangency = _axiom_residuals(cs, probes, fs)
    checks.bound("sphere_antisymmetry", antisym, 1e-10)
    checks.bound("sphere_annihilation", annihil, 1e-9)
    checks.bound("sphere_tangency", tangency, 1e-9)

    # closed-form sphere brackets at the same probes
    err_qp = err_pp = err_qq = 0.0
    for x in probes:
        q, p = x[:3], x[3:]
        ctx = DiracContext(cs, x)
        for a in range(3):
            for b in range(3):
                got = dirac_bracket(_coord(a, 6), _coord(3 + b, 6), ctx)
                err_qp = max(err_qp, abs(
                    got - ((1.0 if a == b else 0.0) - q[a] * q[b])))
                got = dirac_bracket(_coord(3 + a, 6), _coord(3 + b, 6), ctx)
                err_pp = max(err_pp, abs(got - (q[b] * p[a] - q[a] * p[b])))
                err_qq = max(err_qq, abs(
                    dirac_bracket(_coord(a, 6), _coord(b, 6), ctx)))
    checks.bound("closed_form_qp", err_qp, 1e-12)
    checks.bound("closed_form_pp", err_pp, 1e-12)
    checks.bound("closed_form_qq", err_qq, 1e-12)

    # the same axioms on the pendulum 6-constraint slice set
    if cfg.model:
        raise ConfigError("sphere_dirac takes no model parameters")
    p2 = DspParams()
    re = dsp_equilibria(p2, 2, omega=1.0)
    slc = dsp_slice(p2, re)
    full = slc.full_constraints
    zp = sample_probes(full, re.x0, num["n_probes"], num["dsp_radius"],
                       cfg.seed + 1)
    fs12 = _random_polys(rng, 12, num["n_functions"])
    antisym, annihil, tangency = _axiom_residuals(full, zp, fs12)
    checks.bound("dsp_antisymmetry", antisym, 1e-10)
    checks.bound("dsp_annihilation", annihil, 1e-9)
    checks.bound("dsp_tangency", tangency, 1e-9)
    return _report(cfg, checks, {"n_probes": num["n_probes"]}), {}


def _run_dsp_case(cfg: ExperimentConfig, case_id: int):
    p, kw = _dsp_setup(cfg, case_id)
    num = _merge_numerics(cfg, {
        "K": 4, "chart_degree": 5, "n_probes": 20, "field_probes": 100,
        "drift_radius": 5e-5, "twin_radius": 1e-5, "field_radius": 1e-5,
        "tilt": 0.05, "tolerances": {}})
    checks = CheckSet(num["tolerances"])
    re = dsp_equilibria(p, case_id, **kw)
    out = dsp_pipeline(p, re, K=num["K"], chart_degree=num["chart_degree"],
                       n_probes=num["n_probes"],
                       drift_radius=num["drift_radius"],
                       twin_radius=num["twin_radius"], seed=cfg.seed)
    extra = {"equilibrium": _equilibrium_summary(re)}
    artifacts = {}

    checks.flag("drift_free", out["drift"]["is_drift_free"])
    checks.bound("drift_residual", out["drift"]["max_residual"], 1e-7)
    if "halted" in out:
        extra["halted"] = out["halted"]
        return _report(cfg, checks, extra), artifacts
    checks.bound("hessian_cross_block",
                 out["drift"]["hessian_cross_block"], 1e-9)
    checks.bound("stationarity",
                 out["stationarity"]["max_directional_derivative"], 1e-8)
    checks.bound("intertwining", out["intertwining"]["max_residual"], 1e-8)

    agree, neg = _dsp_field_agreement(p, re, dsp_slice(p, re),
                                      num["field_probes"],
                                      num["field_radius"], num["tilt"],
                                      cfg.seed + 2)
    checks.bound("field_agreement", agree, 1e-8)
    checks.exceeds("field_negative_control", neg, 1e-3)

    if case_id == 2:
        checks.flag("normal_form_completed", "consistency" in out,
                    detail=out.get("normal_form_error"))
        if "consistency" in out:
            c = out["consistency"]
            checks.bound("eta_distance", c["eta_distance"], 1e-9)
            checks.bound("resonant_distance",
                         max(c["resonant_distance"].values()), 1e-7)
            checks.bound("commutation_chart", c["commutation_chart"], 1e-9)
            checks.bound("commutation_dirac", c["commutation_dirac"], 1e-9)
            checks.bound("symplectic_defect",
                         c["symplectic_defect_chart"], 1e-9)
            extra["frequencies"] = list(out["nf_chart"].H2.eta)
            artifacts["nf_result.json"] = to_jsonable({
                "chart_path": out["nf_chart"].to_json_dict(),
                "dirac_path": out["nf_dirac"].to_json_dict(),
                "consistency": c,
            })
    else:
        checks.flag("normal_form_refused", "normal_form_error" in out,
                    detail=out.get("normal_form_error"))
        extra["normal_form_error"] = out.get("normal_form_error")

    if case_id == 3:
        try:
            dsp_case_configuration(DspParams(l1=1.3, l2=1.0), 3)
            rejected = False
        except ValueError:
            rejected = True
        checks.flag("bound_rejects_violation", rejected)
        try:
            dsp_case_configuration(DspParams(l1=1.0, l2=1.0), 3)
            checks.flag("bound_allows_equality", True)
        except ValueError:
            checks.flag("bound_allows_equality", False)
    if case_id == 4:
        try:
            dsp_case_configuration(
                DspParams(m1=0.1, m2=5.0, l1=1.0, l2=2.0), 4)
            rejected = False
        except ValueError:
            rejected = True
        checks.flag("bound_rejects_violation", rejected)
        try:
            dsp_case_configuration(DspParams(m1=1.0, m2=1.0, l1=1.0,
                                             l2=2.0), 4)
            checks.flag("bound_allows_equality", True)
        except ValueError:
            checks.flag("bound_allows_equality", False)
    return _report(cfg, checks, extra), artifacts


def _run_dsp_static_negative(cfg: ExperimentConfig):
    mp = _model_params(cfg, dict(m1=1.0, m2=1.0, l1=1.0, l2=1.0, g=1.0))
    num = _merge_numerics(cfg, {"tolerances": {}})
    checks = CheckSet(num["tolerances"])
    p = DspParams(**mp)
    re = dsp_equilibria(p, 1)
    checks.flag("static_momentum_zero", re.mu == 0.0)
    checks.flag("marked_singular", re.singular)
    try:
        dsp_slice(p, re)
        refused, msg = False, None
    except NotLocallyFreeError as err:
        refused, msg = True, str(err)
    checks.flag("slice_refused_fixed_point", refused, detail=msg)
    st = _dsp_stationarity(p, re.x0)
    checks.bound("stationarity", st["max_directional_derivative"], 1e-8)
    try:
        dsp_equilibria(p, 1, omega=0.3)
        checks.flag("static_rejects_spin", False)
    except ValueError:
        checks.flag("static_rejects_spin", True)
    return _report(cfg, checks, {"equilibrium": _equilibrium_summary(re)}), {}


def _run_dsp_flow(cfg: ExperimentConfig):
    p, kw = _dsp_setup(cfg, 2)
    num = _merge_numerics(cfg, {
        "T_project": 50.0, "T_compare": 10.0, "dt": 1e-3,
        "start_radius": 2e-5, "tolerances": {}})
    checks = CheckSet(num["tolerances"])
    re = dsp_equilibria(p, 2, **kw)
    slc = dsp_slice(p, re)
    base = dsp_sphere_callables()
    full = dsp_full_callables(slc)
    ahat = np.kron(np.eye(2), AZ)
    momentum = lambda x: float(x[6:] @ (ahat @ x[:6]))
    _, H_poly = dsp_hamiltonian(p)
    energy = lambda x: H_poly.eval(x)
    residual = lambda x: float(np.max(np.abs(base.values(x))))

    # projected run of the lab-frame dynamics on the sphere constraints
    z0 = sample_probes(slc.full_constraints, re.x0, 1,
                       num["start_radius"], cfg.seed)[0]
    X_lab = dirac_field_callable(dsp_gradient(p, 0.0), base.jacobian)
    traj = integrate(X_lab, z0, T=num["T_project"], dt=num["dt"],
                     method="projected_rk4", constraints=base,
                     monitors={"J": momentum, "H": energy,
                               "phi": residual})
    drift = conserved_monitor(traj, {"J": momentum, "H": energy})
    checks.bound("momentum_drift", drift["J"], 1e-8)
    checks.bound("energy_drift", drift["H"], 1e-8)
    checks.bound("constraint_residual",
                 float(np.max(traj.diagnostics["phi"])), 1e-10)

    # slice flow versus sphere flow of the rotating-frame Hamiltonian
    grad = dsp_gradient(p, re.Omega)
    X6 = dirac_field_callable(grad, full.jacobian)
    X4 = dirac_field_callable(grad, base.jacobian)
    div = flow_compare(X6, X4, z0, T=num["T_compare"], dt=num["dt"])
    checks.bound("flow_divergence", div, 1e-7)
    artifacts = {"dsp_flow.csv": _thin(traj)}
    return _report(cfg, checks,
                   {"equilibrium": _equilibrium_summary(re)}), artifacts


def _neumann_callables() -> CallableConstraints:
    def values(x):
        q, p = x[:3], x[3:]
        return np.array([0.5 * (q @ q - 1.0), q @ p])

    def jacobian(x):
        q, p = x[:3], x[3:]
        G = np.zeros((2, 6))
        G[0, :3] = q
        G[1, :3] = p
        G[1, 3:] = q
        return G

    return CallableConstraints(values, jacobian, 2)


def _run_neumann_flow(cfg: ExperimentConfig):
    mp = _model_params(cfg, {"A": [1.0, 2.0, 4.0]})
    A = np.asarray(mp["A"], dtype=float)
    if A.ndim == 1:
        A = np.diag(A)
    num = _merge_numerics(cfg, {"n_probes": 100, "T": 100.0, "dt": 1e-3,
                                "probe_radius": 0.4, "tolerances": {}})
    checks = CheckSet(num["tolerances"])
    model = neumann_model(A)
    cs = model.constraints
    x_ref = np.array([1.0, 0.0, 0.0, 0.0, 0.4, -0.2])
    probes = sample_probes(cs, x_ref, num["n_probes"],
                           num["probe_radius"], cfg.seed)

    # multiplier field equals the Dirac projection
    XH = hamiltonian_vector_field(model.H)
    worst = 0.0
    for x in probes:
        ctx = DiracContext(cs, x)
        lam = moser_multipliers(model.H, ctx)
        fld = XH.value(x) - lam @ ctx.XG
        worst = max(worst, float(np.max(np.abs(
            fld - dirac_project(model.H, ctx)))))
    checks.bound("moser_vs_dirac", worst, 1e-10)

    # long projected run with the closed-form constrained field
    fast = _neumann_callables()
    grad = lambda x: np.concatenate([A @ x[:3], x[3:]])
    XD = dirac_field_callable(grad, fast.jacobian)
    energy = lambda x: float(0.5 * (x[3:] @ x[3:] + x[:3] @ (A @ x[:3])))
    residual = lambda x: float(np.max(np.abs(fast.values(x))))
    traj = integrate(XD, x_ref, T=num["T"], dt=num["dt"],
                     method="projected_rk4", constraints=fast,
                     monitors={"H": energy, "phi": residual})
    checks.bound("energy_drift", conserved_monitor(traj, {"H": energy})["H"],
                 1e-8)
    checks.bound("constraint_residual",
                 float(np.max(traj.diagnostics["phi"])), 1e-10)
    artifacts = {"neumann_flow.csv": _thin(traj)}
    return _report(cfg, checks, {"n_probes": num["n_probes"]}), artifacts


def _run_moser_separable(cfg: ExperimentConfig):
    mp = _model_params(cfg, {"omega": [1.0, math.sqrt(2.0),
                                       math.sqrt(5.0)]})
    w = np.asarray(mp["omega"], dtype=float)
    num = _merge_numerics(cfg, {"n_probes": 20, "T": 100.0, "dt": 1e-3,
                                "probe_radius": 0.3,
                                "eps": [0.0, 1e-3, 1e-2],
                                "tolerances": {}})
    checks = CheckSet(num["tolerances"])
    model = separable_oscillator_model(w)
    x0 = np.array([0.4, -0.2, 0.0, 0.1, 0.5, 0.0])
    probes = sample_probes(model.constraints, x0, num["n_probes"],
                           num["probe_radius"], cfg.seed)

    filt = moser_filter_integrals(model, probes)
    checks.bound("canonical_defect", filt["canonical_defect"], 1e-9)
    checks.bound("integral_residuals", filt["max_residual"], 1e-8)

    try:
        moser_filter_integrals(separable_oscillator_model(w, broken=True),
                               probes)
        checks.flag("broken_pair_refused", False)
    except ValueError as err:
        checks.flag("broken_pair_refused", True, detail=str(err))

    # conserved mode energies along the constrained flow
    w2 = w ** 2
    grad = lambda x: np.concatenate([w2 * x[:3], x[3:]])
    jac = np.zeros((2, 6))
    jac[0, 2] = 1.0
    jac[1, 5] = 1.0
    fast = CallableConstraints(lambda x: np.array([x[2], x[5]]),
                               lambda x: jac, 2)
    XD = dirac_field_callable(grad, fast.jacobian)
    mode = lambda i: (lambda x: float(
        0.5 * (w2[i] * x[i] ** 2 + x[3 + i] ** 2)))
    traj = integrate(XD, x0, T=num["T"], dt=num["dt"],
                     method="projected_rk4", constraints=fast)
    drift = conserved_monitor(traj, {"E1": mode(0), "E2": mode(1)})
    checks.bound("flow_drift", max(drift.values()), 1e-8)

    # flow residual of the integrals against the Dirac bracket, and the
    # bracket identity for an invariant coupling family
    fns = {nm: SmoothMap.from_poly(pp, name=nm)
           for nm, pp in zip(model.residual_names, model.residual_polys)}
    fns["F1"] = SmoothMap.from_poly(model.F_polys[0], name="F1")
    xv = lambda i: TruncatedPoly.variable(i, 6, DEFAULT_MAX_DEGREE)
    coupling = xv(0) * xv(0) * xv(1) * xv(1)
    rel = relatedness_check(lambda e: model.H_poly + e * coupling,
                            model.constraints, fns, probes, num["eps"])
    checks.bound("bracket_identity", rel["max_residual"], 1e-8)
    extra = {"flow_residuals": filt["flow_residuals"],
             "relatedness": rel["per_eps"]}
    return _report(cfg, checks, extra), {}


def _run_ks_diagnostic(cfg: ExperimentConfig):
    num = _merge_numerics(cfg, {"n_points": 50, "tolerances": {}})
    checks = CheckSet(num["tolerances"])
    model = ks_model()
    rng = np.random.default_rng(cfg.seed)

    rep0 = singularity_diagnostics(model.constraints, np.zeros(8))
    checks.flag("origin_not_regular", "not_regular_level" in rep0["flags"])
    checks.flag("origin_rank_zero", rep0["rank_dphi"] == 0,
                detail=rep0["rank_dphi"])
    x_reg = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    rep1 = singularity_diagnostics(model.constraints, x_reg)
    checks.flag("regular_point_clean", "not_regular_level"
                not in rep1["flags"])

    # phase invariance: the bilinear form under the left action, the
    # Hopf map under the right action (left multiplication conjugates
    # the image instead of fixing it)
    bl_err = hopf_err = norm_err = 0.0
    for _ in range(num["n_points"]):
        x = rng.standard_normal(8)
        th = rng.uniform(0.0, 2.0 * math.pi)
        u = (math.cos(th), math.sin(th), 0.0, 0.0)
        z, wq = x[:4], x[4:]
        xr = np.concatenate([quaternion_product(u, z),
                             quaternion_product(u, wq)])
        bl_err = max(bl_err, abs(model.bl_poly.eval(xr)
                                 - model.bl_poly.eval(x)))
        hopf_err = max(hopf_err, float(np.max(np.abs(
            model.hopf(np.array(quaternion_product(z, u)))
            - model.hopf(z)))))
        norm_err = max(norm_err, abs(
            np.linalg.norm(model.hopf(z)) - z @ z))
    checks.bound("bl_phase_invariance", bl_err, 1e-10)
    checks.bound("hopf_phase_invariance", hopf_err, 1e-10)
    checks.bound("hopf_norm_identity", norm_err, 1e-10)
    checks.flag("hopf_first_component_zero", model.hopf_polys[0].is_zero())
    extra = {"origin_diagnostics": {"rank_dphi": rep0["rank_dphi"],
                                    "flags": rep0["flags"]}}
    return _report(cfg, checks, extra), {}


def _run_oscillator_bnf(cfg: ExperimentConfig):
    mp = _model_params(cfg, {"beta": 1.0})
    num = _merge_numerics(cfg, {"K": 4, "tolerances": {}})
    checks = CheckSet(num["tolerances"])
    beta = float(mp["beta"])
    K = num["K"]
    q = TruncatedPoly.variable(0, 2, K)
    p = TruncatedPoly.variable(1, 2, K)
    H = 0.5 * (q * q + p * p) + beta * q ** 4
    res = run_normal_form_report(H, CanonicalStructure(1), K=K)

    # circle average of cos^4 gives the resonant coefficient directly
    avg, _ = scipy.integrate.quad(
        lambda th: math.cos(th) ** 4, 0.0, 2.0 * math.pi)
    coeff = beta * avg / (2.0 * math.pi)
    expected = coeff * (q * q + p * p) ** 2
    dist = (res.resonant_terms[4] - expected).max_abs_coeff()
    checks.bound("resonant_quartic_coefficient", dist, 1e-12)
    checks.bound("cubic_resonant_terms",
                 res.resonant_terms[3].max_abs_coeff(), 1e-12)
    rr = res.residual_report
    checks.bound("commutation", max(rr["commutation"].values()), 1e-9)
    checks.bound("conjugation_defect", rr["conjugation_defect"], 1e-8)
    checks.bound("symplectic_defect", rr["symplectic_defect"], 1e-9)
    extra = {"oracle_coefficient": coeff}
    return _report(cfg, checks, extra), {
        "nf_result.json": to_jsonable(res.to_json_dict())}


def _fd_gradient(fn, x, h=1e-6):
    g = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        g[i] = (fn.value(x + e) - fn.value(x - e)) / (2.0 * h)
    return g


def _run_hygiene(cfg: ExperimentConfig):
    num = _merge_numerics(cfg, {"n_points": 100, "n_triples": 6,
                                "scale": 0.7, "tolerances": {}})
    checks = CheckSet(num["tolerances"])
    rng = np.random.default_rng(cfg.seed)

    p = DspParams(m1=1.3, m2=0.7, l1=1.1, l2=0.9, g=3.0)
    Hm, _ = dsp_hamiltonian(p)
    Jp = dsp_action().momentum_polys(DEFAULT_MAX_DEGREE)[0]
    suite = {"dsp_H": Hm, "dsp_J": SmoothMap.from_poly(Jp, name="J")}
    for phi in dsp_spheres().constraints:
        suite["dsp_" + phi.name] = phi
    nm_model = neumann_model(np.diag([1.0, 2.0, 4.0]))
    suite["neumann_H"] = nm_model.H
    suite["separable_H"] = separable_oscillator_model().H
    suite["ks_BL"] = SmoothMap.from_poly(ks_model().bl_poly, name="BL")

    worst = {}
    for name, fn in suite.items():
        err = 0.0
        for _ in range(num["n_points"]):
            x = num["scale"] * rng.standard_normal(fn.domain_dim)
            ga = fn.gradient(x)
            gf = _fd_gradient(fn, x)
            err = max(err, float(np.max(np.abs(ga - gf))
                                 / max(1.0, np.max(np.abs(ga)))))
        worst[name] = err
    checks.bound("gradient_max_rel_err", max(worst.values()), 1e-6)

    # Jacobi identity on random degree-3 triples (canonical bracket)
    ps = CanonicalStructure(2)
    jac_worst = 0.0
    for _ in range(num["n_triples"]):
        f, g, h = (_random_poly(rng, 4, n_terms=10, K=7)
                   for _ in range(3))
        total = (poisson_bracket(f, poisson_bracket(g, h, ps), ps)
                 + poisson_bracket(g, poisson_bracket(h, f, ps), ps)
                 + poisson_bracket(h, poisson_bracket(f, g, ps), ps))
        jac_worst = max(jac_worst, total.max_abs_coeff())
    checks.bound("jacobi_defect", jac_worst, 1e-12)
    extra = {"gradient_rel_err": worst}
    return _report(cfg, checks, extra), {}


# ----------------------------------------------------------------------
# registry
# ----------------------------------------------------------------------


EXPERIMENTS = {
    "sphere_dirac": (
        _run_sphere_dirac,
        "Dirac bracket axioms on the sphere pair and the pendulum slice "
        "set, plus the closed-form sphere brackets"),
    "dsp_case2": (
        lambda cfg: _run_dsp_case(cfg, 2),
        "Double spherical pendulum, both links horizontal: drift-free "
        "slice, order-4 normal form on two bracket paths, field twin"),
    "dsp_case3": (
        lambda cfg: _run_dsp_case(cfg, 3),
        "Double spherical pendulum, inner link horizontal: drift-free "
        "slice, degenerate quadratic part refusal, parameter bound"),
    "dsp_case4": (
        lambda cfg: _run_dsp_case(cfg, 4),
        "Double spherical pendulum, outer link horizontal: drift-free "
        "slice, repeated-frequency refusal, parameter bound"),
    "dsp_static_negative": (
        _run_dsp_static_negative,
        "Hanging equilibrium: slice construction must refuse the fixed "
        "point of the rotation action"),
    "dsp_flow": (
        _run_dsp_flow,
        "Projected pendulum integration (momentum and constraint "
        "conservation) and slice-vs-sphere flow agreement"),
    "neumann_flow": (
        _run_neumann_flow,
        "Neumann oscillator on the sphere: multiplier field identity "
        "and a long projected run"),
    "moser_separable": (
        _run_moser_separable,
        "Separable constrained oscillator: canonical pair filter, "
        "integral drift, bracket-level near-integrability"),
    "ks_diagnostic": (
        _run_ks_diagnostic,
        "Bilinear quaternion constraint: singular level at the origin, "
        "phase invariance, Hopf map identities"),
    "oscillator_bnf": (
        _run_oscillator_bnf,
        "Quartic oscillator normal form against the circle-average "
        "oracle"),
    "hygiene": (
        _run_hygiene,
        "Finite-difference gradient audit and the polynomial Jacobi "
        "identity"),
}


def list_experiments() -> list:
    """Sorted (name, description) pairs of the registry."""
    return [(name, EXPERIMENTS[name][1]) for name in sorted(EXPERIMENTS)]


def run_experiment(cfg: ExperimentConfig):
    """Dispatch a validated config.  Returns (report, artifacts) where
    artifacts maps file names to Trajectory or JSON-ready dict values."""
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError("unknown experiment %r" % (cfg.experiment,))
    runner = EXPERIMENTS[cfg.experiment][0]
    return runner(cfg)
