"""Jensen-measure polyhedra, membership certificates, and dual envelopes.

A weight vector mu is a Jensen measure for x on a subdomain when
sum mu(y) v(y) <= v(x) for every superharmonic v there; by Farkas duality
that says eps_x - mu = M^T lam for some lam >= 0, where M is the cone's
constraint matrix.  The envelope J(x) = sup over such measures of the
pairing with the payoff is a per-node linear program whose dual is exactly
the discrete obstacle problem, so comparing it against the complementarity
solver is a genuine primal-dual cross-check.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    Exhaustion,
    GridFunction,
    SuperharmonicCone,
    as_values,
    local_cone,
)
from .envelopes import EnvelopeResult, reduce
from .errors import (
    InternalConsistencyError,
    PreconditionError,
)
from .simplex import equality_feasible, simplex_max

CERT_TOL = 1e-9


@dataclass
class JensenMeasure:
    """Weights with a dual certificate proving Jensen membership.

    The certificate satisfies eps_x - mu = M^T lam + drop with lam >= 0,
    where `drop` is the mass surrendered at each node (identically zero for
    the sign-free cone; only the nonnegative cone admits sub-measures).
    """

    cone: SuperharmonicCone
    base_x: int
    weights: np.ndarray
    certificate: np.ndarray
    drop: np.ndarray

    def residual(self):
        e = np.zeros(self.cone.grid.n)
        e[self.base_x] = 1.0
        lhs = e - self.weights
        rhs = self.cone.matrix.T @ self.certificate + self.drop
        return float(np.max(np.abs(lhs - rhs)))

    def pairing(self, v):
        vals = as_values(v, self.cone.grid)
        support = self.weights > 0.0
        return float(np.dot(self.weights[support], vals[support]))

    def mass(self):
        return float(self.weights.sum())


@dataclass
class EnvelopeReport:
    """Jensen envelope values with solver diagnostics."""

    J: GridFunction
    duality_gap: float
    lp_status: dict
    measures: dict | None = None
    reduce_result: EnvelopeResult | None = None
    steps: list | None = None


def _lp_blocks(cone, phi_vals):
    MT = cone.dense_mt  # n x m
    n, m = MT.shape
    if cone.nonneg:
        A = np.hstack([MT, np.eye(n), np.eye(n)])
        c = np.concatenate([np.zeros(m), phi_vals, np.zeros(n)])
    else:
        A = np.hstack([MT, np.eye(n)])
        c = np.concatenate([np.zeros(m), phi_vals])
    basis0 = np.arange(m, m + n)
    return A, c, basis0, m, n


def _solve_node(A, c, basis0, m, n, x, grid_n):
    b = np.zeros(grid_n)
    b[x] = 1.0
    res = simplex_max(A, b, c, basis0)
    if res.status != "optimal":
        raise InternalConsistencyError(
            f"envelope LP at node {x} reported {res.status}; the subdomain "
            "cannot be Greenian"
        )
    lam = np.maximum(res.x[:m], 0.0)
    mu = np.maximum(res.x[m:m + n], 0.0)
    drop = np.maximum(res.x[m + n:], 0.0) if res.x.size > m + n else np.zeros(n)
    return res.objective, lam, mu, drop, res.iterations


def _thread_count(n_jobs):
    if n_jobs is not None:
        return max(1, int(n_jobs))
    env = os.environ.get("REDUITE_THREADS", "1")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def is_jensen(weights, x, cone, tol=CERT_TOL):
    """Decide Jensen membership; certify either way.

    Returns (True, lam) with the dual certificate, or (False, v) with a
    superharmonic separating direction: sum weights(y) v(y) > v(x).
    """
    grid = cone.grid
    mu = np.asarray(weights, dtype=float)
    if mu.shape != (grid.n,):
        raise PreconditionError(f"expected {grid.n} weights, got {mu.shape}")
    if mu.min() < -1e-12:
        raise PreconditionError("measure has negative entries")
    inside = np.isin(x, cone.subdomain)
    if not inside:
        raise PreconditionError(f"base point {x} is not in the subdomain")
    d = -mu.copy()
    d[x] += 1.0
    feasible, lam, y = equality_feasible(cone.dense_mt, d)
    if feasible:
        lam = np.maximum(lam, 0.0)
        resid = float(np.max(np.abs(cone.dense_mt @ lam - d)))
        if resid > max(tol, 1e-8 * (1.0 + np.abs(d).sum())):
            raise InternalConsistencyError(
                f"certificate reconstruction off by {resid:.3e}"
            )
        return True, lam
    v = y / max(np.max(np.abs(y)), 1e-300)
    slack = float((cone.matrix @ v).min()) if cone.rows.size else 0.0
    gain = float(np.dot(mu, v) - v[x])
    if slack < -1e-8 or gain <= 0.0:
        raise InternalConsistencyError(
            f"separating direction failed validation (slack {slack:.3e}, "
            f"gain {gain:.3e})"
        )
    return False, v


def optimal_measure(phi, x, cone, check=True):
    """A vertex measure attaining the envelope value at one node."""
    vals = as_values(phi, cone.grid)
    if not np.all(np.isfinite(vals)):
        raise PreconditionError("payoff must be finite")
    if not np.isin(x, cone.subdomain):
        raise PreconditionError(f"base point {x} is not in the subdomain")
    A, c, basis0, m, n = _lp_blocks(cone, vals)
    value, lam, mu, drop, _ = _solve_node(A, c, basis0, m, n, x, cone.grid.n)
    measure = JensenMeasure(
        cone=cone, base_x=int(x), weights=mu, certificate=lam, drop=drop
    )
    if check:
        resid = measure.residual()
        if resid > CERT_TOL:
            raise InternalConsistencyError(
                f"optimal measure certificate off by {resid:.3e}"
            )
        attained = measure.pairing(vals)
        if abs(attained - value) > 1e-8 * (1.0 + abs(value)):
            raise InternalConsistencyError(
                f"optimal measure pairing {attained!r} != LP value {value!r}"
            )
    return measure


def jensen_envelope(
    phi,
    cone,
    want_measures=False,
    compare=True,
    reduce_tol=1e-10,
    n_jobs=None,
):
    """Per-node LP envelope over the Jensen measures of a cone.

    Parameters
    ----------
    phi : GridFunction or array
        Finite payoff.  With a nonnegative cone, measures may surrender
        mass, so negative payoffs are admissible there too.
    cone : SuperharmonicCone
    want_measures : bool
        Also return the optimal vertex measure per node.
    compare : bool
        Run the complementarity solver on the same cone and report the
        sup-norm duality gap.

    Returns
    -------
    EnvelopeReport
        J equals phi outside the subdomain (no measures are defined there).
    """
    grid = cone.grid
    vals = as_values(phi, grid)
    if not np.all(np.isfinite(vals)):
        raise PreconditionError("payoff must be finite")
    A, c, basis0, m, n = _lp_blocks(cone, vals)
    J = vals.copy()
    status = {}
    measures = {} if want_measures else None

    def work(x):
        return x, _solve_node(A, c, basis0, m, n, int(x), grid.n)

    jobs = _thread_count(n_jobs)
    nodes = [int(x) for x in cone.subdomain]
    if jobs > 1 and len(nodes) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, nodes))
    else:
        results = [work(x) for x in nodes]
    for x, (value, lam, mu, drop, iters) in sorted(results):
        J[x] = value
        status[x] = f"optimal:{iters}"
        if want_measures:
            measures[x] = JensenMeasure(
                cone=cone, base_x=x, weights=mu, certificate=lam, drop=drop
            )
    reduce_result = None
    gap = float("nan")
    if compare:
        reduce_result = reduce(vals, cone=cone, tol=reduce_tol)
        gap = float(np.max(np.abs(J - reduce_result.u.values)))
    return EnvelopeReport(
        J=GridFunction(grid, J),
        duality_gap=gap,
        lp_status=status,
        measures=measures,
        reduce_result=reduce_result,
    )


def _dirichlet_one(grid, rows):
    """Harmonic continuation of boundary data one across the given rows."""
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    h = np.ones(grid.n)
    if rows.size == 0:
        return h
    P = grid.kernel
    others = np.setdiff1d(np.arange(grid.n), rows)
    A = (sp.identity(rows.size, format="csr") - P[rows][:, rows]).tocsc()
    b = P[rows][:, others] @ h[others] if others.size else np.zeros(rows.size)
    sol = spla.spsolve(A, b) if rows.size > 1 else np.atleast_1d(
        np.linalg.solve(A.toarray(), b)
    )
    h[rows] = sol
    return h


def envelope_general(
    phi,
    exhaustion,
    compare=True,
    check=True,
    gap_tol=None,
    mono_tol=1e-9,
    n_jobs=None,
):
    """Exhaustion-limit envelope for payoffs of either sign.

    Per subdomain the payoff is lifted by a positive multiple of a strictly
    positive harmonic function until it is positive, the local nonnegative
    envelope is solved by LPs, the lift is subtracted, and the results are
    extended by the payoff itself; the sequence must be nondecreasing and
    its final member is the global envelope.

    Raises
    ------
    PreconditionError
        If some subdomain admits no strictly positive harmonic function.
    InternalConsistencyError
        If monotonicity fails, or (with `check`) the limit disagrees with
        the direct LP envelope or the complementarity solver.
    """
    if not isinstance(exhaustion, Exhaustion):
        raise PreconditionError("envelope_general needs an Exhaustion")
    grid = exhaustion.grid
    vals = as_values(phi, grid)
    if not np.all(np.isfinite(vals)):
        raise PreconditionError("payoff must be finite")
    scale = 1.0 + float(np.max(np.abs(vals), initial=0.0))
    if gap_tol is None:
        gap_tol = 1e-8 * scale
    steps = []
    prev = None
    status = {}
    for U in exhaustion.subdomains:
        cone_u = SuperharmonicCone(grid, U, nonneg=True)
        v_n = vals.copy()
        if cone_u.rows.size:
            cl = grid.closure(U)
            shift = np.zeros(grid.n)
            if vals[cl].min() < 0.0:
                h = _dirichlet_one(grid, cone_u.rows)
                if h[cone_u.rows].min() <= 1e-12:
                    raise PreconditionError(
                        "subdomain admits no strictly positive harmonic "
                        "function; cannot lift the payoff"
                    )
                neg = cl[vals[cl] < 0.0]
                a = float(np.max((-vals[neg] + 1e-2 * scale) / h[neg]))
                shift = a * h
            lifted = vals + shift
            A, c, basis0, m, n = _lp_blocks(cone_u, lifted)
            nodes = [int(x) for x in U]

            def work(x):
                return x, _solve_node(A, c, basis0, m, n, x, grid.n)

            jobs = _thread_count(n_jobs)
            if jobs > 1 and len(nodes) > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(work, nodes))
            else:
                results = [work(x) for x in nodes]
            for x, (value, _lam, _mu, _drop, iters) in sorted(results):
                v_n[x] = value - shift[x]
                status[x] = f"optimal:{iters}"
        if prev is not None:
            worst = float(np.min(v_n - prev))
            if worst < -mono_tol:
                raise InternalConsistencyError(
                    f"exhaustion values decreased by {-worst:.3e} at some node"
                )
            v_n = np.maximum(v_n, prev)
        steps.append(GridFunction(grid, v_n.copy()))
        prev = v_n
    limit = steps[-1]
    gap = float("nan")
    reduce_result = None
    if compare:
        whole = local_cone(grid, np.arange(grid.n))
        direct = jensen_envelope(vals, whole, compare=False, n_jobs=n_jobs)
        reduce_result = reduce(vals, cone=whole)
        gap = max(
            float(np.max(np.abs(limit.values - direct.J.values))),
            float(np.max(np.abs(limit.values - reduce_result.u.values))),
        )
        if check and gap > gap_tol:
            raise InternalConsistencyError(
                f"exhaustion limit disagrees with direct envelopes by {gap:.3e}"
            )
    return EnvelopeReport(
        J=limit,
        duality_gap=gap,
        lp_status=status,
        measures=None,
        reduce_result=reduce_result,
        steps=steps,
    )
