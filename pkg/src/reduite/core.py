"""Finite sub-Markov grids and the discrete harmonic structure living on them.

A grid is a finite node set carrying a nonnegative kernel with row sums at
most one.  Zero rows are absorbing; all other nodes are interior, and the
kernel restricted to the interior must be transient (from every interior node
some absorbing node or mass-losing row is reachable), which makes the Green
operator finite.  Superharmonic means u(x) >= (Pu)(x) at the constraint rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainError, InternalConsistencyError, PreconditionError

ROW_SUM_SLACK = 1e-12
MASS_LOSS_TOL = 1e-12


class MarkovGrid:
    """Finite node set with a sub-stochastic transition kernel.

    Parameters
    ----------
    kernel : sparse or dense matrix, shape (n, n)
        Nonnegative transition weights; every row sum must be <= 1 (up to
        1e-12 slack).  Rows that are identically zero are absorbing.
    coords : ndarray, shape (n, d), optional
        Node positions, used by lattice builds and refinement studies.
    h : float, optional
        Lattice spacing, when the grid came from `build_lattice`.

    Raises
    ------
    DomainError
        On negative entries, row sums above one, or a non-Greenian
        component (an interior node from which neither absorption nor a
        mass-losing row can be reached).
    """

    def __init__(self, kernel, coords=None, h=None):
        P = sp.csr_matrix(kernel, dtype=float)
        if P.shape[0] != P.shape[1]:
            raise DomainError(f"kernel must be square, got {P.shape}")
        P.eliminate_zeros()
        P.sort_indices()
        if P.nnz and P.data.min() < 0:
            raise DomainError("kernel has negative entries")
        row_sums = np.asarray(P.sum(axis=1)).ravel()
        bad = np.flatnonzero(row_sums > 1.0 + ROW_SUM_SLACK)
        if bad.size:
            raise DomainError(
                f"kernel row sum exceeds 1 at node {bad[0]} (sum={row_sums[bad[0]]!r})"
            )
        self.kernel = P
        self.n = P.shape[0]
        self.row_sums = row_sums
        nnz_per_row = np.diff(P.indptr)
        self.absorbing = np.flatnonzero(nnz_per_row == 0)
        self.interior = np.flatnonzero(nnz_per_row > 0)
        self.coords = None if coords is None else np.asarray(coords, dtype=float)
        if self.coords is not None and self.coords.shape[0] != self.n:
            raise DomainError("coords length does not match node count")
        self.h = h
        self._interior_lu = None
        self._green_one = None
        self._check_greenian()

    def _check_greenian(self):
        # Reverse reachability: every interior node must reach the sink set
        # (absorbing nodes or rows losing mass), else the Neumann series for
        # the Green operator diverges on that component.
        sink = self.row_sums < 1.0 - MASS_LOSS_TOL
        sink[self.absorbing] = True
        reach = sink.copy()
        PT = self.kernel.T.tocsr()
        frontier = np.flatnonzero(reach)
        while frontier.size:
            nxt = []
            for y in frontier:
                preds = PT.indices[PT.indptr[y]:PT.indptr[y + 1]]
                fresh = preds[~reach[preds]]
                if fresh.size:
                    reach[fresh] = True
                    nxt.append(fresh)
            frontier = np.concatenate(nxt) if nxt else np.empty(0, dtype=int)
        stranded = np.flatnonzero(~reach)
        if stranded.size:
            raise DomainError(
                f"non-Greenian component: node {stranded[0]} cannot reach "
                "absorption or a mass-losing row"
            )
        # Neumann-series confirmation: (I - P_II) g = 1 must have a finite
        # solution with g >= 1.
        if self.interior.size:
            g = self._solve_interior(np.ones(self.interior.size))
            if not np.all(np.isfinite(g)) or g.min() < 1.0 - 1e-8:
                raise DomainError("non-Greenian component: Green operator diverged")
            self._green_one = g

    def _interior_factor(self):
        if self._interior_lu is None:
            I = self.interior
            A = sp.identity(I.size, format="csr") - self.kernel[I][:, I]
            self._interior_lu = spla.splu(A.tocsc())
        return self._interior_lu

    def _solve_interior(self, rhs):
        """Solve (I - P_II) x = rhs on the interior block."""
        if self.interior.size == 0:
            return np.zeros(0)
        return self._interior_factor().solve(np.asarray(rhs, dtype=float))

    def out_neighbors(self, nodes):
        """Nodes reachable in one kernel step from `nodes`."""
        nodes = np.asarray(nodes, dtype=int)
        P = self.kernel
        cols = [P.indices[P.indptr[i]:P.indptr[i + 1]] for i in nodes]
        if not cols:
            return np.empty(0, dtype=int)
        return np.unique(np.concatenate(cols))

    def closure(self, nodes):
        """The set plus its one-step kernel neighbors (discrete closure)."""
        nodes = np.unique(np.asarray(nodes, dtype=int))
        return np.union1d(nodes, self.out_neighbors(nodes))

    def __repr__(self):
        return (
            f"MarkovGrid(n={self.n}, interior={self.interior.size}, "
            f"absorbing={self.absorbing.size})"
        )


@dataclass
class GridFunction:
    """Extended-real-valued function on the nodes of a grid.

    Values may be +inf (hyperharmonic majorants); NaN and -inf are rejected.
    """

    grid: MarkovGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise DomainError(
                f"function has {v.shape} values for a grid with {self.grid.n} nodes"
            )
        if np.isnan(v).any():
            raise DomainError("function contains NaN")
        if np.isneginf(v).any():
            raise DomainError("function contains -inf")
        self.values = v

    def copy(self):
        return GridFunction(self.grid, self.values.copy())

    def __array__(self, dtype=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.grid.n


def as_values(phi, grid):
    """Coerce a GridFunction or array-like to a value vector on `grid`."""
    if isinstance(phi, GridFunction):
        if phi.grid is not grid:
            if phi.grid.n != grid.n:
                raise DomainError("function lives on a different grid")
        return phi.values
    v = np.asarray(phi, dtype=float)
    if v.shape != (grid.n,):
        raise DomainError(f"expected {grid.n} values, got shape {v.shape}")
    return v


class SuperharmonicCone:
    """Polyhedral cone of superharmonic functions on a subdomain.

    The constraint matrix holds the rows of (I - P) at the nodes of the
    subdomain that are interior to the grid; membership means M v >= 0
    componentwise (plus v >= 0 everywhere when `nonneg` is set, which
    distinguishes the nonnegative hyperharmonic cone on the whole grid from
    the sign-free superharmonic cone on a subdomain).
    """

    def __init__(self, grid, subdomain=None, nonneg=False):
        self.grid = grid
        if subdomain is None:
            self.subdomain = np.arange(grid.n)
        else:
            self.subdomain = np.unique(np.asarray(subdomain, dtype=int))
            if self.subdomain.size and (
                self.subdomain[0] < 0 or self.subdomain[-1] >= grid.n
            ):
                raise DomainError("subdomain contains node ids outside the grid")
        self.nonneg = bool(nonneg)
        self.rows = np.intersect1d(self.subdomain, grid.interior)
        eye = sp.identity(grid.n, format="csr")
        self.matrix = (eye - grid.kernel)[self.rows]
        self._dense_mt = None
        self._psor_rows = None

    @property
    def dense_mt(self):
        """Dense transpose of the constraint matrix, cached for the LP."""
        if self._dense_mt is None:
            self._dense_mt = self.matrix.T.toarray()
        return self._dense_mt

    def psor_rows(self):
        """Per-row off-diagonal structure for projected Gauss-Seidel sweeps."""
        if self._psor_rows is None:
            P = self.grid.kernel
            out = []
            for z in self.rows:
                cols = P.indices[P.indptr[z]:P.indptr[z + 1]]
                vals = P.data[P.indptr[z]:P.indptr[z + 1]]
                diag = 0.0
                keep = cols != z
                if not keep.all():
                    diag = vals[~keep][0]
                if diag >= 1.0 - 1e-14:
                    raise DomainError(f"node {z} has self-loop weight {diag!r} >= 1")
                out.append((int(z), cols[keep], vals[keep], 1.0 / (1.0 - diag)))
            self._psor_rows = out
        return self._psor_rows

    def __repr__(self):
        kind = "nonneg" if self.nonneg else "free"
        return f"SuperharmonicCone({kind}, |U|={self.subdomain.size}, rows={self.rows.size})"


def w_cone(grid):
    """The nonnegative hyperharmonic cone on the whole grid."""
    return SuperharmonicCone(grid, None, nonneg=True)


def local_cone(grid, subdomain):
    """The sign-free superharmonic cone on a subdomain."""
    return SuperharmonicCone(grid, subdomain, nonneg=False)


@dataclass
class Exhaustion:
    """Increasing subdomains whose discrete closures nest.

    Consecutive members must satisfy closure(U_k) subset of U_{k+1}; the last
    member must cover every interior node, so the final local envelope is the
    global one.
    """

    grid: MarkovGrid
    subdomains: list = field(default_factory=list)

    def __post_init__(self):
        subs = [np.unique(np.asarray(U, dtype=int)) for U in self.subdomains]
        if not subs:
            raise DomainError("exhaustion needs at least one subdomain")
        for k in range(len(subs) - 1):
            cl = self.grid.closure(subs[k])
            if np.setdiff1d(cl, subs[k + 1]).size:
                raise DomainError(
                    f"exhaustion step {k}: closure(U_{k + 1}) not inside U_{k + 2}"
                )
        missing = np.setdiff1d(self.grid.interior, subs[-1])
        if missing.size:
            raise DomainError(
                f"final exhaustion member misses interior node {missing[0]}"
            )
        self.subdomains = subs

    def __len__(self):
        return len(self.subdomains)


def default_exhaustion(grid, steps=2):
    """Peel interior layers to get a nested exhaustion ending at the interior."""
    subs = [grid.interior.copy()]
    for _ in range(steps - 1):
        U = subs[0]
        inner = np.array(
            [x for x in U if np.setdiff1d(grid.closure([x]), U).size == 0],
            dtype=int,
        )
        if inner.size == 0 or inner.size == U.size:
            break
        subs.insert(0, inner)
    return Exhaustion(grid, subs)


def build_lattice(dims, h=1.0, mask=None):
    """Nearest-neighbor walk on a rectangular lattice with absorbing frame.

    Parameters
    ----------
    dims : sequence of int
        Node counts per dimension, each >= 2.
    h : float
        Grid spacing, recorded in node coordinates.
    mask : sequence of int, optional
        Node ids to carve out; masked nodes become absorbing (the walk still
        steps into them and is killed there), standing in for an interior
        boundary.

    Returns
    -------
    MarkovGrid
        Interior nodes carry probability 1/(2d) per coordinate direction;
        frame and masked nodes are absorbing.
    """
    dims = [int(d) for d in dims]
    if not dims:
        raise DomainError("dims must be nonempty")
    if any(d < 2 for d in dims):
        raise DomainError("every lattice dimension needs at least 2 nodes")
    d = len(dims)
    n = int(np.prod(dims))
    idx = np.indices(dims).reshape(d, n).T
    masked = np.zeros(n, dtype=bool)
    if mask is not None:
        mask = np.asarray(list(mask), dtype=int)
        if mask.size and (mask.min() < 0 or mask.max() >= n):
            raise DomainError("mask contains node ids outside the lattice")
        masked[mask] = True
    on_frame = np.zeros(n, dtype=bool)
    for axis, size in enumerate(dims):
        on_frame |= (idx[:, axis] == 0) | (idx[:, axis] == size - 1)
    strides = np.ones(d, dtype=int)
    for axis in range(d - 2, -1, -1):
        strides[axis] = strides[axis + 1] * dims[axis + 1]
    rows, cols = [], []
    p = 1.0 / (2 * d)
    for i in range(n):
        if on_frame[i] or masked[i]:
            continue
        for axis in range(d):
            rows.extend((i, i))
            cols.extend((i - strides[axis], i + strides[axis]))
    data = np.full(len(rows), p)
    P = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    return MarkovGrid(P, coords=idx * float(h), h=float(h))


def reference_u0(grid):
    """The constant-one function, verified to be superharmonic.

    Row sums at most one make the constant superharmonic, so membership in
    the nonnegative cone cannot fail on a valid grid.
    """
    u0 = GridFunction(grid, np.ones(grid.n))
    ok, worst = is_superharmonic(u0, w_cone(grid))
    if not ok:
        raise InternalConsistencyError(
            f"constant 1 failed the cone check (residual {worst!r})"
        )
    return u0


def is_superharmonic(u, cone, tol=1e-9):
    """Check cone membership; returns (ok, most violated constraint value).

    +inf entries are handled with extended arithmetic: a row whose own node
    is +inf is satisfied, a finite row seeing an +inf neighbor with positive
    weight is violated (-inf residual).
    """
    vals = as_values(u, cone.grid)
    if cone.rows.size == 0:
        worst = np.inf
    elif np.isinf(vals).any():
        P = cone.grid.kernel
        worst = np.inf
        for z in cone.rows:
            if np.isinf(vals[z]):
                continue
            cols = P.indices[P.indptr[z]:P.indptr[z + 1]]
            seg = P.data[P.indptr[z]:P.indptr[z + 1]]
            r = vals[z] - float(np.dot(seg, vals[cols]))
            worst = min(worst, r)
    else:
        worst = float((cone.matrix @ vals).min())
    if cone.nonneg:
        worst = min(worst, float(np.min(vals[np.isfinite(vals)], initial=np.inf)))
    return bool(worst >= -tol), worst


def harmonic_measure(grid, x, V):
    """Exit distribution from the subdomain V for the walk started at x.

    Returns a full-length weight vector supported outside V.  Total mass can
    fall below one exactly when mass is absorbed or lost strictly inside V.

    Raises
    ------
    DomainError
        If x is not a member of V.
    """
    V = np.unique(np.asarray(V, dtype=int))
    if V.size and (V[0] < 0 or V[-1] >= grid.n):
        raise DomainError("subdomain contains node ids outside the grid")
    pos = np.searchsorted(V, x)
    if pos >= V.size or V[pos] != x:
        raise DomainError(f"base point {x} is not inside the subdomain")
    out = np.setdiff1d(np.arange(grid.n), V)
    P = grid.kernel
    PVV = P[V][:, V]
    e = np.zeros(V.size)
    e[pos] = 1.0
    A = (sp.identity(V.size, format="csr") - PVV).T
    if V.size <= 64:
        w = np.linalg.solve(A.toarray(), e)
    else:
        w = spla.spsolve(A.tocsc(), e)
    if not np.all(np.isfinite(w)):
        raise DomainError("non-Greenian subdomain: exit system diverged")
    mu = np.zeros(grid.n)
    if out.size:
        mu[out] = P[V][:, out].T @ w
    np.maximum(mu, 0.0, out=mu)
    return mu


def green_potential(grid, f):
    """Potential of a nonnegative charge supported on the interior.

    Solves (I - P) p = f on interior nodes with p = 0 on absorbing nodes.
    """
    fv = as_values(f, grid)
    if not np.all(np.isfinite(fv)):
        raise PreconditionError("charge must be finite")
    if fv.min() < -1e-12:
        raise PreconditionError("charge must be nonnegative")
    if grid.absorbing.size and np.abs(fv[grid.absorbing]).max(initial=0.0) > 1e-12:
        raise PreconditionError("charge must vanish on absorbing nodes")
    p = np.zeros(grid.n)
    if grid.interior.size:
        sol = grid._solve_interior(fv[grid.interior])
        if not np.all(np.isfinite(sol)):
            raise DomainError("Green operator diverged (non-Greenian grid)")
        p[grid.interior] = sol
    return GridFunction(grid, p)


def green_one(grid):
    """The potential of the unit charge on the interior (cached)."""
    f = np.zeros(grid.n)
    f[grid.interior] = 1.0
    return green_potential(grid, f)


def is_potential(p, tol=1e-9):
    """Whether a nonnegative superharmonic function has zero harmonic part.

    True iff p equals the potential of its own charge (I - P) p and
    vanishes on absorbing nodes.
    """
    grid = p.grid if isinstance(p, GridFunction) else None
    if grid is None:
        raise PreconditionError("is_potential needs a GridFunction")
    vals = p.values
    if not np.all(np.isfinite(vals)):
        raise PreconditionError("potential candidate must be finite")
    if vals.min() < -tol:
        raise PreconditionError("potential candidate must be nonnegative")
    cone = w_cone(grid)
    ok, worst = is_superharmonic(p, cone, tol=tol)
    if not ok:
        raise PreconditionError(
            f"potential candidate is not superharmonic (residual {worst!r})"
        )
    charge = np.zeros(grid.n)
    if grid.interior.size:
        charge[grid.interior] = np.maximum(
            (cone.matrix @ vals), 0.0
        )
    rebuilt = green_potential(grid, charge).values
    return bool(np.max(np.abs(vals - rebuilt)) <= tol)


def spectral_radius_estimate(grid, iters=200):
    """Power-iteration estimate of the interior kernel's spectral radius."""
    I = grid.interior
    if I.size == 0:
        return 0.0
    PII = grid.kernel[I][:, I]
    v = np.ones(I.size)
    rho = 0.0
    for _ in range(iters):
        w = PII @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        rho = nrm / np.linalg.norm(v)
        v = w / nrm
    return float(rho)
