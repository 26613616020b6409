"""Fixed-step integration of ambient and constrained flows, with
conserved-quantity monitoring, flow comparison, and the bracket-level
near-integrability check.

Integrators are deliberately fixed-step (rk4, projected rk4, implicit
midpoint): the acceptance numbers must be reproducible, and the working
horizons are desk scale.  Fields and monitors may be SmoothMaps or plain
callables; the constrained integrator only needs ``values`` and
``jacobian`` from its constraint argument, so a fast closed-form stand-in
for a ConstraintSet works too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dirac import DiracContext, dirac_bracket
from .smooth import SmoothMap, canonical_J, canonical_bracket_value

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 10


def _as_callable(f):
    return f.value if isinstance(f, SmoothMap) else f


@dataclass
class Trajectory:
    """Sampled flow: strictly increasing times, one state row per time,
    and optional per-sample diagnostics."""

    times: np.ndarray
    states: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or self.states.shape[0] != self.times.size:
            raise ValueError("one state row per sample time is required")
        if self.times.size > 1 and np.min(np.diff(self.times)) <= 0:
            raise ValueError("sample times must be strictly increasing")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite states")

    @property
    def dim(self) -> int:
        return self.states.shape[1]


def write_csv(traj: Trajectory, path) -> None:
    """Write `t,x1..xn,diag:<name>...` rows with 17 significant digits."""
    names = sorted(traj.diagnostics)
    cols = ["t"] + ["x%d" % (i + 1) for i in range(traj.dim)]
    cols += ["diag:%s" % nm for nm in names]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k, t in enumerate(traj.times):
            row = [t] + list(traj.states[k])
            row += [traj.diagnostics[nm][k] for nm in names]
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def _rk4_step(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def project_onto_constraints(constraints, x, tol=NEWTON_TOL,
                             max_iter=NEWTON_MAX_ITER):
    """Newton steps along constraint gradients back onto {phi = 0}.

    Solves phi(x + G^T lam) = 0 through the Gram system (G G^T) lam =
    -phi; raises RuntimeError when the residual will not drop below tol.
    """
    for _ in range(max_iter):
        r = np.asarray(constraints.values(x), dtype=float)
        if np.max(np.abs(r)) < tol:
            return x
        G = np.asarray(constraints.jacobian(x), dtype=float)
        try:
            lam = scipy.linalg.solve(G @ G.T, -r, assume_a="sym")
        except scipy.linalg.LinAlgError as err:
            raise RuntimeError("constraint projection failed: singular "
                               "gradient Gram matrix") from err
        x = x + G.T @ lam
    r = np.asarray(constraints.values(x), dtype=float)
    if np.max(np.abs(r)) < tol:
        return x
    raise RuntimeError("constraint projection did not converge "
                       "(residual %g)" % np.max(np.abs(r)))


def _implicit_midpoint_step(f, x, dt, tol=1e-14, max_iter=100):
    y = x + dt * f(x)
    for _ in range(max_iter):
        y_new = x + dt * f(0.5 * (x + y))
        if np.max(np.abs(y_new - y)) < tol * max(1.0, np.max(np.abs(y))):
            return y_new
        y = y_new
    raise RuntimeError("implicit midpoint fixed point did not converge")


def _require_second_class(constraints, x0):
    G = np.asarray(constraints.jacobian(x0), dtype=float)
    if G.shape[1] % 2:
        raise ValueError("phase dimension must be even")
    C = G @ canonical_J(G.shape[1] // 2) @ G.T
    sv = scipy.linalg.svdvals(C)
    if sv.size == 0 or sv[-1] <= 1e-8 * max(1.0, sv[0]):
        raise ValueError("projected integration needs a second-class "
                         "constraint set at x0 (sigma_min of C = %g)"
                         % (sv[-1] if sv.size else 0.0))


def integrate(vec_field, x0, T: float, dt: float, method: str = "rk4",
              constraints=None, monitors=None) -> Trajectory:
    """Fixed-step flow of a vector field from x0 over [0, T].

    method is one of ``rk4``, ``projected_rk4`` (post-step Newton
    projection onto the given second-class constraints), or
    ``implicit_midpoint``.  monitors, a name -> function map, is
    evaluated at every sample into the trajectory diagnostics.
    """
    if not (np.isfinite(T) and np.isfinite(dt)) or T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive and finite")
    f = _as_callable(vec_field)
    x = np.array(x0, dtype=float)
    n_steps = int(round(T / dt))
    if method == "projected_rk4":
        if constraints is None:
            raise ValueError("projected_rk4 needs a constraint set")
        _require_second_class(constraints, x)
    elif method not in ("rk4", "implicit_midpoint"):
        raise ValueError("unknown method %r" % method)
    monitors = {nm: _as_callable(g) for nm, g in (monitors or {}).items()}

    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, x.size))
    diag = {nm: np.empty(n_steps + 1) for nm in monitors}

    def record(k, t, x):
        times[k] = t
        states[k] = x
        for nm, g in monitors.items():
            diag[nm][k] = g(x)

    record(0, 0.0, x)
    for k in range(1, n_steps + 1):
        if method == "implicit_midpoint":
            x = _implicit_midpoint_step(f, x, dt)
        else:
            x = _rk4_step(f, x, dt)
            if method == "projected_rk4":
                x = project_onto_constraints(constraints, x)
        if not np.all(np.isfinite(x)):
            raise RuntimeError("state became non-finite at t = %g" % (k * dt))
        record(k, k * dt, x)
    return Trajectory(times=times, states=states, diagnostics=diag)


def conserved_monitor(traj: Trajectory, fns: dict) -> dict:
    """Max drift |f(x(t)) - f(x(0))| over the trajectory, per function."""
    out = {}
    for nm, g in fns.items():
        g = _as_callable(g)
        vals = np.array([g(x) for x in traj.states])
        out[nm] = float(np.max(np.abs(vals - vals[0])))
    return out


def flow_compare(field_a, field_b, x0, T: float, dt: float,
                 method: str = "rk4", constraints=None) -> float:
    """Integrate both fields from x0 on the same grid; max divergence."""
    ta = integrate(field_a, x0, T, dt, method=method, constraints=constraints)
    tb = integrate(field_b, x0, T, dt, method=method, constraints=constraints)
    return float(np.max(np.linalg.norm(ta.states - tb.states, axis=1)))


def relatedness_check(H_family, model, test_fns, probes, eps_list,
                      tau: float = 1e-8) -> dict:
    """Bracket-level near-integrability transfer check.

    For each epsilon, compares the constrained and unconstrained brackets
    of H_eps against the given invariant test functions at probes on the
    locus: residual |{H_eps, f}_D - {H_eps, f}_M|.  The manifold bracket
    {,}_M is the base-constraint Dirac bracket when `model` is a slice
    model, else canonical; {,}_D always uses the full constraint set.

    H_family: callable eps -> SmoothMap.  test_fns: name -> SmoothMap.
    """
    if hasattr(model, "full_constraints"):
        full = model.full_constraints
        m_bracket = model.m_bracket
    else:
        full = model
        m_bracket = canonical_bracket_value
    probes = list(probes)
    if not probes:
        raise ValueError("need at least one probe")
    per_eps = {}
    worst = 0.0
    for eps in eps_list:
        H = H_family(eps)
        if not isinstance(H, SmoothMap):
            H = SmoothMap.from_poly(H, name="H_eps")
        res = {}
        for nm, fn in test_fns.items():
            vals = []
            for x in probes:
                ctx = DiracContext(full, x)
                d = dirac_bracket(H, fn, ctx)
                m = m_bracket(H, fn, x)
                vals.append(abs(d - m))
            res[nm] = float(max(vals))
            worst = max(worst, res[nm])
        per_eps[float(eps)] = res
    return {
        "per_eps": per_eps,
        "max_residual": worst,
        "passed": bool(worst < tau),
        "n_probes": len(probes),
    }
