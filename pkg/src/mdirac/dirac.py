"""Constraint sets, the Dirac matrix, Dirac projection and bracket.

The central objects: an ordered family of scalar constraints phi_1..phi_k
on ambient phase space, the antisymmetric matrix C_ij = {phi_i, phi_j}
of their canonical brackets, and the induced Dirac bracket

    {f, g}_D = {f, g} - sum_ij {f, phi_i} C^ij {phi_j, g},

which restricts the dynamics to the constraint manifold when the family
is second-class (C invertible).  A truncated-series version of the
bracket around a point feeds the normal-form machinery.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .poly import TruncatedPoly, StructuredStructure
from .smooth import J_apply, SmoothMap, canonical_J

#: rank / singular-value thresholds (scaled by the matrix norm)
TAU_RANK = 1e-8
TAU_SING = 1e-8
#: a probe is accepted as on the constraint set when all |phi_i| are below
TAU_ON_N = 1e-8
#: first-class threshold on the sup norm of C
TAU_FIRST = 1e-9

FIRST_CLASS = "FirstClass"
SECOND_CLASS = "SecondClass"
MIXED = "Mixed/Degenerate"


class ConstraintSet:
    """Ordered scalar constraints with optional polynomial forms.

    Parameters
    ----------
    constraints : list of SmoothMap
        Scalar maps on a common ambient space.
    polys : list of TruncatedPoly, optional
        Ambient-coordinate polynomial forms of the same constraints, in
        the same order; required by the series Dirac structure.
    """

    def __init__(self, constraints, polys=None, names=None):
        constraints = list(constraints)
        if not constraints:
            raise ValueError("constraint set cannot be empty")
        dim = constraints[0].domain_dim
        for c in constraints:
            if c.codomain_dim != 1:
                raise ValueError("constraints must be scalar maps")
            if c.domain_dim != dim:
                raise ValueError("constraints disagree on ambient dimension")
        self.constraints = constraints
        self.dim = dim
        self.k = len(constraints)
        self.polys = list(polys) if polys is not None else None
        if self.polys is not None and len(self.polys) != self.k:
            raise ValueError("one polynomial form per constraint required")
        self.names = list(names) if names else ["phi%d" % i for i in range(self.k)]

    @classmethod
    def from_polys(cls, polys, names=None):
        polys = list(polys)
        maps = [SmoothMap.from_poly(p) for p in polys]
        return cls(maps, polys=polys, names=names)

    def values(self, x) -> np.ndarray:
        return np.array([c.value(x) for c in self.constraints])

    def jacobian(self, x) -> np.ndarray:
        """Stacked constraint gradients, shape (k, dim)."""
        return np.vstack([c.gradient(x) for c in self.constraints])

    def centered_polys(self, x0, max_degree=None):
        """Polynomial forms recentred at x0: phi_i(x0 + u)."""
        if self.polys is None:
            raise ValueError("constraint set has no polynomial forms")
        out = []
        for p in self.polys:
            q = p.shifted(x0)
            if max_degree is not None:
                q = q.truncated(max_degree)
            out.append(q)
        return out

    def subset(self, idx, with_polys=True):
        maps = [self.constraints[i] for i in idx]
        polys = None
        if with_polys and self.polys is not None:
            polys = [self.polys[i] for i in idx]
        return ConstraintSet(maps, polys=polys,
                             names=[self.names[i] for i in idx])

    def concat(self, other: "ConstraintSet") -> "ConstraintSet":
        if other.dim != self.dim:
            raise ValueError("ambient dimensions differ")
        polys = None
        if self.polys is not None and other.polys is not None:
            polys = self.polys + other.polys
        return ConstraintSet(self.constraints + other.constraints,
                             polys=polys, names=self.names + other.names)


def constraint_matrix(cs: ConstraintSet, x) -> np.ndarray:
    """C_ij = {phi_i, phi_j}(x) = grad(phi_i)^T J0 grad(phi_j)."""
    G = cs.jacobian(x)
    if not np.all(np.isfinite(G)):
        raise ValueError("non-finite constraint gradients at x")
    XG = np.vstack([J_apply(g) for g in G])        # rows = X_{phi_j}
    C = G @ XG.T
    skew_defect = np.max(np.abs(C + C.T))
    if skew_defect > 1e-10 * max(1.0, np.max(np.abs(C))):
        raise ValueError("constraint matrix lost antisymmetry (defect %g)"
                         % skew_defect)
    return 0.5 * (C - C.T)


def _pointwise_class(cs, x, tau_sing=TAU_SING, tau_first=TAU_FIRST,
                     tau_rank=TAU_RANK):
    """Classification, C, its singular values and the Jacobian rank at x."""
    G = cs.jacobian(x)
    sv_G = scipy.linalg.svdvals(G)
    rank = int(np.sum(sv_G > tau_rank * max(1.0, sv_G[0] if sv_G.size else 0.0)))
    C = constraint_matrix(cs, x)
    sv_C = scipy.linalg.svdvals(C)
    smax = sv_C[0] if sv_C.size else 0.0
    smin = sv_C[-1] if sv_C.size else 0.0
    if rank < cs.k:
        cls = MIXED
    elif np.max(np.abs(C)) < tau_first:
        cls = FIRST_CLASS
    elif smin > tau_sing * max(1.0, smax):
        cls = SECOND_CLASS
    else:
        cls = MIXED
    return cls, C, smin, smax, rank


class DiracContext:
    """Constraint data frozen at a point: C, its inverse and class.

    Immutable after construction; ``C_inv`` is None unless the set is
    second-class at the point (LU inversion with partial pivoting).
    """

    def __init__(self, cs: ConstraintSet, x, tau_sing=TAU_SING,
                 tau_first=TAU_FIRST):
        self.cs = cs
        self.x = np.asarray(x, dtype=float)
        cls, C, smin, smax, rank = _pointwise_class(cs, self.x, tau_sing,
                                                    tau_first)
        self.C = C
        self.classification = cls
        self.sigma_min = smin
        self.rank_dphi = rank
        self.cond = (smax / smin) if smin > 0 else np.inf
        self.G = cs.jacobian(self.x)               # (k, n) gradients
        self.XG = np.vstack([J_apply(g) for g in self.G])  # constraint fields
        if cls == SECOND_CLASS:
            lu, piv = scipy.linalg.lu_factor(C)
            self.C_inv = scipy.linalg.lu_solve((lu, piv), np.eye(cs.k))
        else:
            self.C_inv = None

    def require_second_class(self):
        if self.classification != SECOND_CLASS:
            raise ValueError("constraint set is %s (second-class required) "
                             "at x = %s" % (self.classification, self.x))


def make_context(cs: ConstraintSet, x, **kw) -> DiracContext:
    return DiracContext(cs, x, **kw)


def classify(cs: ConstraintSet, probes, tau_sing=TAU_SING,
             tau_first=TAU_FIRST, tau_on_N=TAU_ON_N) -> str:
    """Classify the set over a family of probe points on N."""
    probes = list(probes)
    if not probes:
        raise ValueError("empty probe set")
    seen = set()
    for x in probes:
        vals = cs.values(x)
        if np.max(np.abs(vals)) > tau_on_N:
            raise ValueError("probe is off the constraint set: max |phi| = %g"
                             % np.max(np.abs(vals)))
        cls, _, _, _, _ = _pointwise_class(cs, x, tau_sing, tau_first)
        seen.add(cls)
    if seen == {FIRST_CLASS}:
        return FIRST_CLASS
    if seen == {SECOND_CLASS}:
        return SECOND_CLASS
    return MIXED


def bracket_with_constraints(f: SmoothMap, ctx: DiracContext) -> np.ndarray:
    """Vector of {f, phi_i}(x) over the context's constraints."""
    gf = f.gradient(ctx.x)
    # (XG @ gf)_i = (J0 grad phi_i) . grad f = grad(f)^T J0 grad(phi_i)
    return ctx.XG @ gf


def dirac_project(f: SmoothMap, ctx: DiracContext) -> np.ndarray:
    """The Dirac-projected Hamiltonian vector field of f at ctx.x:

        P_N(X_f) = X_f - sum_ij {f, phi_i} C^ij X_phi_j.

    The result is tangent to N: d(phi_k) applied to it vanishes.
    """
    ctx.require_second_class()
    gf = f.gradient(ctx.x)
    Xf = J_apply(gf)
    b = bracket_with_constraints(f, ctx)
    coef = b @ ctx.C_inv
    return Xf - coef @ ctx.XG


def dirac_bracket(f: SmoothMap, g: SmoothMap, ctx: DiracContext) -> float:
    """{f, g}_D at ctx.x."""
    ctx.require_second_class()
    gf = f.gradient(ctx.x)
    gg = g.gradient(ctx.x)
    plain = float(gf @ J_apply(gg))
    bf = ctx.XG @ gf               # {f, phi_i}
    bg = -(ctx.XG @ gg)            # {phi_j, g} = -{g, phi_j}
    return plain - float(bf @ ctx.C_inv @ bg)


def moser_multipliers(H: SmoothMap, ctx: DiracContext) -> np.ndarray:
    """Multipliers lambda with {H, G_k} = sum_s lambda_s {G_s, G_k}.

    The modified field X_H - sum lambda_s X_{G_s} is tangent to N and
    coincides with dirac_project(H, ctx).
    """
    ctx.require_second_class()
    b = bracket_with_constraints(H, ctx)
    return scipy.linalg.solve(ctx.C.T, b)


def dirac_field(H: SmoothMap, cs: ConstraintSet, name="") -> SmoothMap:
    """The Dirac-projected field of H as a SmoothMap (fresh context per
    evaluation point)."""
    n = cs.dim

    def _eval(x):
        return dirac_project(H, DiracContext(cs, x))

    return SmoothMap(n, n, _eval, source="Analytic",
                     name=name or "X_D[%s]" % (H.name or "H"))


def dirac_field_callable(gradient, constraint_jacobian):
    """Fast closed-form twin of dirac_field for integrator inner loops.

    gradient(x) is grad(H) and constraint_jacobian(x) the stacked
    constraint gradients G; the projected field is

        X_D = J0 (grad H - G^T C^{-1} G J0 grad H),  C = G J0 G^T,

    which agrees with dirac_field pointwise at second-class points but
    skips all SmoothMap plumbing.
    """
    def _field(x):
        g = gradient(x)
        G = constraint_jacobian(x)
        J0 = canonical_J(g.size // 2)
        Jg = J0 @ g
        y = scipy.linalg.solve(G @ J0 @ G.T, G @ Jg)
        return Jg - J0 @ (G.T @ y)

    return _field


# ----------------------------------------------------------------------
# polynomial matrix helpers (shared with the normal-form pipeline)
# ----------------------------------------------------------------------


def poly_mat_mul(A, B):
    """Product of object-dtype matrices of TruncatedPoly."""
    A = np.asarray(A, dtype=object)
    B = np.asarray(B, dtype=object)
    n, m = A.shape
    m2, r = B.shape
    if m != m2:
        raise ValueError("shape mismatch")
    out = np.empty((n, r), dtype=object)
    for i in range(n):
        for j in range(r):
            acc = None
            for s in range(m):
                t = A[i, s] * B[s, j]
                acc = t if acc is None else acc + t
            out[i, j] = acc
    return out


def poly_mat_from_constant(M, n_vars, max_degree):
    M = np.asarray(M, dtype=float)
    out = np.empty(M.shape, dtype=object)
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            out[i, j] = TruncatedPoly.constant(M[i, j], n_vars, max_degree)
    return out


def poly_mat_neumann_inverse(Cpoly, max_degree):
    """Truncated inverse of a polynomial matrix with invertible constant
    part C0:

        C(u)^-1 = C0^-1 sum_m (-(C(u) - C0) C0^-1)^m,

    terms dropped once their minimum degree exceeds the truncation.
    """
    Cpoly = np.asarray(Cpoly, dtype=object)
    k = Cpoly.shape[0]
    n_vars = Cpoly[0, 0].n_vars
    C0 = np.array([[Cpoly[i, j].coefficient((0,) * n_vars)
                    for j in range(k)] for i in range(k)])
    if abs(np.linalg.det(C0)) < 1e-300 or np.linalg.cond(C0) > 1e12:
        raise ValueError("constant part of the constraint matrix is singular")
    C0inv = np.linalg.inv(C0)
    E = np.empty((k, k), dtype=object)
    for i in range(k):
        for j in range(k):
            E[i, j] = Cpoly[i, j] - float(C0[i, j])
    C0inv_p = poly_mat_from_constant(C0inv, n_vars, max_degree)
    minusEC0inv = poly_mat_mul(E, C0inv_p)
    for i in range(k):
        for j in range(k):
            minusEC0inv[i, j] = -minusEC0inv[i, j]
    total = poly_mat_from_constant(np.eye(k), n_vars, max_degree)
    power = poly_mat_from_constant(np.eye(k), n_vars, max_degree)
    for _ in range(max_degree):
        power = poly_mat_mul(power, minusEC0inv)
        if all(power[i, j].is_zero() for i in range(k) for j in range(k)):
            break
        for i in range(k):
            for j in range(k):
                total[i, j] = total[i, j] + power[i, j]
    return poly_mat_mul(poly_mat_from_constant(C0inv, n_vars, max_degree),
                        total)


def poly_gradient_fields(polys):
    """For ambient constraint polynomials, the component polynomials of
    X_phi_i = J0 grad(phi_i); returns an object array of shape (k, n)."""
    k = len(polys)
    n = polys[0].n_vars
    m = n // 2
    out = np.empty((k, n), dtype=object)
    for i, p in enumerate(polys):
        d = [p.derivative(v) for v in range(n)]
        for a in range(m):
            out[i, a] = d[m + a]
            out[i, m + a] = -d[a]
    return out


def dirac_structure_series(cs: ConstraintSet, x0, K: int) -> StructuredStructure:
    """Series Dirac structure around x0 in ambient coordinates u = x - x0:

        Pi_ab(u) = {x_a, x_b} - sum_ij {x_a, phi_i} C^ij(u) {phi_j, x_b},

    with C^ij(u) the truncated Neumann inverse of the polynomial
    constraint-bracket matrix.  Requires second-class at x0 and
    polynomial constraint forms.
    """
    x0 = np.asarray(x0, dtype=float)
    ctx = DiracContext(cs, x0)
    ctx.require_second_class()
    cen = cs.centered_polys(x0, max_degree=K)
    k = cs.k
    n = cs.dim
    X = poly_gradient_fields(cen)                 # (k, n) fields
    grads = np.empty((k, n), dtype=object)
    for i, p in enumerate(cen):
        for v in range(n):
            grads[i, v] = p.derivative(v)
    # C_ij(u) = grad(phi_i) . X_phi_j
    Cpoly = np.empty((k, k), dtype=object)
    for i in range(k):
        for j in range(k):
            acc = None
            for v in range(n):
                t = grads[i, v] * X[j, v]
                acc = t if acc is None else acc + t
            Cpoly[i, j] = acc
    Cinv = poly_mat_neumann_inverse(Cpoly, K)
    # Pi = J0 + X^T Cinv X   (since {x_a,phi_i} = X_i,a and
    #  {phi_j,x_b} = -X_j,b)
    m = n // 2
    J0 = np.zeros((n, n))
    J0[:m, m:] = np.eye(m)
    J0[m:, :m] = -np.eye(m)
    corr = poly_mat_mul(X.T, poly_mat_mul(Cinv, X))
    Pi = np.empty((n, n), dtype=object)
    for a in range(n):
        for b in range(n):
            Pi[a, b] = corr[a, b] + float(J0[a, b])
    # enforce exact antisymmetry against round-off
    for a in range(n):
        for b in range(a, n):
            half = 0.5 * (Pi[a, b] - Pi[b, a])
            Pi[a, b] = half
            Pi[b, a] = -half
    return StructuredStructure(Pi)


def singularity_diagnostics(cs: ConstraintSet, x) -> dict:
    """Detection-only report at x: Jacobian rank, sigma_min of C, flags.

    Flags: ``not_regular_level`` when the constraint Jacobian drops
    rank, ``not_second_class`` when C fails the invertibility threshold.
    """
    x = np.asarray(x, dtype=float)
    G = cs.jacobian(x)
    sv_G = scipy.linalg.svdvals(G)
    smax_G = sv_G[0] if sv_G.size else 0.0
    rank = int(np.sum(sv_G > TAU_RANK * max(1.0, smax_G)))
    C = constraint_matrix(cs, x)
    sv_C = scipy.linalg.svdvals(C)
    smax_C = sv_C[0] if sv_C.size else 0.0
    smin_C = sv_C[-1] if sv_C.size else 0.0
    flags = []
    if rank < cs.k:
        flags.append("not_regular_level")
    if rank < cs.k or smin_C <= TAU_SING * max(1.0, smax_C):
        flags.append("not_second_class")
    return {
        "point": [float(v) for v in x],
        "rank_dphi": rank,
        "sigma_min_C": float(smin_C),
        "cond_C": float(smax_C / smin_C) if smin_C > 0 else float("inf"),
        "flags": flags,
    }


# ----------------------------------------------------------------------
# probe utilities
# ----------------------------------------------------------------------


def project_to_constraints(cs: ConstraintSet, x, tol=1e-12, max_iter=50):
    """Newton projection onto {phi = 0} along the constraint gradients:
    solve phi(x + G^T lam) = 0 via (G G^T) lam = -phi."""
    x = np.array(x, dtype=float)
    for _ in range(max_iter):
        r = cs.values(x)
        if np.max(np.abs(r)) < tol:
            return x
        G = cs.jacobian(x)
        lam = scipy.linalg.solve(G @ G.T, -r, assume_a="pos")
        x = x + G.T @ lam
    r = cs.values(x)
    if np.max(np.abs(r)) < tol:
        return x
    raise RuntimeError("constraint projection did not converge "
                       "(residual %g)" % np.max(np.abs(r)))


def sample_probes(cs: ConstraintSet, x0, n_probes, radius, seed,
                  tol=1e-12):
    """Seeded Gaussian perturbations of x0 projected back onto N."""
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=float)
    out = []
    for _ in range(n_probes):
        y = x0 + radius * rng.standard_normal(x0.size)
        out.append(project_to_constraints(cs, y, tol=tol))
    return out
