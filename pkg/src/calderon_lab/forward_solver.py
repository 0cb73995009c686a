"""Navier boundary-value problem for the perturbed biharmonic operator.

The operator is

    L u = Δ²u + Σ A_jk D_j D_k u + Σ B_j D_j u + q u,    D_j = (1/i) ∂_j,

i.e. L = Δ² - A:∂² - i B·∂ + q.  The BVP with Navier data (u, -Δu) on the
boundary is split into the coupled pair

    -Δu - w = 0,   -Δw + (L - Δ²) u = rhs,

which has Dirichlet data on both unknowns and is solved by one sparse LU.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import field_core as fc


class ZeroEigenvalueError(RuntimeError):
    """Raised when the discrete Navier system is singular."""


class ExtentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    grid: fc.Grid
    A: np.ndarray
    B: np.ndarray
    q: np.ndarray
    support: fc.DomainMask = None

    def __post_init__(self):
        g = self.grid
        A = fc._frozen(self.A)
        B = fc._frozen(self.B)
        q = fc._frozen(self.q)
        if A.shape != (g.dim, g.dim) + g.shape or B.shape != (g.dim,) + g.shape or q.shape != g.shape:
            raise fc.ShapeError("coefficient shapes do not match the grid")
        if not np.array_equal(A, np.swapaxes(A, 0, 1)):
            raise ValueError("A must be symmetric node-wise")
        if self.support is not None:
            out = ~self.support.inside
            if np.any(A[:, :, out]) or np.any(B[:, out]) or np.any(q[out]):
                raise ValueError("coefficients do not vanish outside the support mask")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "q", q)

    @classmethod
    def zeros(cls, grid):
        d = grid.dim
        return cls(grid, np.zeros((d, d) + grid.shape), np.zeros((d,) + grid.shape),
                   np.zeros(grid.shape))

    def is_zero(self):
        return not (np.any(self.A) or np.any(self.B) or np.any(self.q))

    def __sub__(self, other):
        return CoefficientSet(self.grid, self.A - other.A, self.B - other.B, self.q - other.q)

    def __add__(self, other):
        return CoefficientSet(self.grid, self.A + other.A, self.B + other.B, self.q + other.q)


@dataclass(frozen=True, eq=False)
class NavierBoundaryData:
    f0: np.ndarray
    f1: np.ndarray

    @classmethod
    def from_fields(cls, mask, u, minus_lap_u):
        b = mask.boundary
        return cls(np.asarray(u)[b].astype(complex), np.asarray(minus_lap_u)[b].astype(complex))

    @classmethod
    def from_grid_field(cls, mask, u):
        """Navier traces of a grid field; needs a layer of nodes outside the boundary."""
        h = mask.grid.spacing
        if np.any(mask.boundary & ~fc.interior_mask(mask.grid.shape, 1)):
            raise ValueError("boundary touches the grid edge; -Δu cannot be sampled there")
        return cls.from_fields(mask, u, -fc.laplacian(u, h))


@dataclass(frozen=True, eq=False)
class DNMatrix:
    matrix: np.ndarray
    boundary_nodes: np.ndarray
    grid: fc.Grid = None

    def save(self, path):
        path = Path(path)
        m = self.matrix
        np.savetxt(path.with_suffix(".csv"), np.hstack([m.real, m.imag]), delimiter=",", fmt="%.17g")
        nb = len(self.boundary_nodes)
        side = {"rows": [["dnu_u", int(i)] for i in self.boundary_nodes] +
                        [["dnu_w", int(i)] for i in self.boundary_nodes],
                "cols": [["f0", int(i)] for i in self.boundary_nodes] +
                        [["f1", int(i)] for i in self.boundary_nodes],
                "layout": "real block then imaginary block, each %d columns" % (2 * nb),
                "grid": None if self.grid is None else self.grid.to_dict()}
        path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True))


# -- assembly -------------------------------------------------------------

def lower_order_matrix(coeffs):
    """Sparse matrix of -A:∂² - iB·∂ + q over all grid nodes."""
    g = coeffs.grid
    N = int(np.prod(g.shape))
    out = sp.diags(coeffs.q.ravel(), format="csr")
    for j in range(g.dim):
        for k in range(g.dim):
            a = coeffs.A[j, k].ravel()
            if np.any(a):
                out = out - sp.diags(a) @ fc.dd_matrix(g, j, k)
        b = coeffs.B[j].ravel()
        if np.any(b):
            out = out - 1j * (sp.diags(b) @ fc.d1_matrix(g, j))
    return sp.csr_matrix(out, shape=(N, N), dtype=complex)


def assemble_operator(coeffs):
    """Discrete L on all nodes; rows at distance >= 2 from the edge are exact stencils."""
    lap = fc.laplacian_matrix(coeffs.grid)
    if min(coeffs.grid.shape) < 9:
        raise fc.ShapeError("need at least 4 interior layers for the fourth-order stencil")
    return (lap @ lap + lower_order_matrix(coeffs)).tocsr()


def apply_operator(coeffs, u):
    h = coeffs.grid.spacing
    out = fc.bilaplacian(u, h) + coeffs.q * u
    d = coeffs.grid.dim
    for j in range(d):
        for k in range(d):
            if np.any(coeffs.A[j, k]):
                out = out - coeffs.A[j, k] * fc.dd(u, j, k, h)
        if np.any(coeffs.B[j]):
            out = out - 1j * coeffs.B[j] * fc.d1(u, j, h)
    return out


class NavierSolver:
    """Factorized coupled (u, w) system for one coefficient set and domain."""

    def __init__(self, coeffs, mask):
        self.coeffs = coeffs
        self.mask = mask
        g = coeffs.grid
        I = np.flatnonzero(mask.inside.ravel())
        Bd = np.flatnonzero(mask.boundary.ravel())
        lap = fc.laplacian_matrix(g).tocsr()
        low = lower_order_matrix(coeffs)
        for m in (lap, low):
            used = np.unique(m[I].indices)
            if not np.all(mask.closure.ravel()[used]):
                raise ValueError("stencil reaches nodes outside the domain closure")
        n = len(I)
        lap_ii, lap_ib = lap[I][:, I], lap[I][:, Bd]
        low_ii, low_ib = low[I][:, I], low[I][:, Bd]
        K = sp.bmat([[-lap_ii, -sp.identity(n)], [low_ii, -lap_ii]], format="csr", dtype=complex)
        # interleave (u_i, w_i) per node; the node-block pattern keeps
        # minimum-degree fill far below the default column ordering
        self._perm = np.arange(2 * n).reshape(2, n).T.ravel()
        K = K[self._perm][:, self._perm].tocsc()
        try:
            self._lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise ZeroEigenvalueError("zero is a discrete eigenvalue of the Navier problem") from exc
        self._I, self._Bd, self._n = I, Bd, n
        self._lap_ib, self._low_ib = lap_ib, low_ib

    def solve(self, f0, f1, rhs=None):
        """Return (u, w) on the full grid (zero outside the domain closure).

        f0, f1 have shape (n_boundary,) or (n_boundary, k) for k right-hand sides.
        """
        f0 = np.asarray(f0, dtype=complex)
        f1 = np.asarray(f1, dtype=complex)
        multi = f0.ndim == 2
        if not multi:
            f0, f1 = f0[:, None], f1[:, None]
        k = f0.shape[1]
        if rhs is None:
            r = np.zeros((self._n, k), dtype=complex)
        else:
            rhs = np.asarray(rhs, dtype=complex)
            r = rhs.reshape(-1, 1)[self._I] if rhs.ndim == self.coeffs.grid.dim else \
                rhs.reshape(k, -1).T[self._I]
        top = self._lap_ib @ f0
        bot = r + self._lap_ib @ f1 - self._low_ib @ f0
        sol = np.empty((2 * self._n, k), dtype=complex)
        sol[self._perm] = self._lu.solve(np.vstack([top, bot])[self._perm])
        if not np.all(np.isfinite(sol)):
            raise ZeroEigenvalueError("non-finite solution: the Navier system is singular")
        N = int(np.prod(self.coeffs.grid.shape))
        u = np.zeros((N, k), dtype=complex)
        w = np.zeros((N, k), dtype=complex)
        u[self._I], w[self._I] = sol[:self._n], sol[self._n:]
        u[self._Bd], w[self._Bd] = f0, f1
        shape = self.coeffs.grid.shape
        u = u.T.reshape((k,) + shape)
        w = w.T.reshape((k,) + shape)
        return (u, w) if multi else (u[0], w[0])


def solve_navier(coeffs, mask, bc, rhs=None, solver=None):
    solver = solver or NavierSolver(coeffs, mask)
    u, _ = solver.solve(bc.f0, bc.f1, rhs)
    return u


# -- traces ---------------------------------------------------------------

def normal_derivative(mask, u):
    """∂_ν u at boundary nodes: one-sided second-order differences per axis."""
    g = mask.grid
    u = np.asarray(u)
    lead = u.shape[:u.ndim - g.dim]
    idx = np.argwhere(mask.boundary)
    closure = mask.closure
    out = np.zeros(lead + (len(idx),), dtype=complex)
    for j in range(g.dim):
        nu = mask.normal[j][mask.boundary]
        for p, (node, n) in enumerate(zip(idx, nu)):
            if n == 0:
                continue
            step = np.zeros(g.dim, dtype=int)
            step[j] = -1 if n > 0 else 1
            p1, p2 = node + step, node + 2 * step
            ok1 = all(0 <= c < s for c, s in zip(p1, g.shape)) and closure[tuple(p1)]
            ok2 = ok1 and all(0 <= c < s for c, s in zip(p2, g.shape)) and closure[tuple(p2)]
            u0 = u[(Ellipsis,) + tuple(node)]
            if ok2:
                der = (3 * u0 - 4 * u[(Ellipsis,) + tuple(p1)] + u[(Ellipsis,) + tuple(p2)]) / (2 * g.spacing[j])
            elif ok1:
                der = (u0 - u[(Ellipsis,) + tuple(p1)]) / g.spacing[j]
            else:
                continue
            out[..., p] += abs(n) * der
    return out


def neumann_traces(mask, u, w):
    """(∂_ν u, ∂_ν w) with w = -Δu."""
    return normal_derivative(mask, u), normal_derivative(mask, w)


def dn_map(coeffs, mask, basis=None, solver=None):
    """Discrete DN map; the default basis is the nodal basis of (f0, f1)."""
    solver = solver or NavierSolver(coeffs, mask)
    nb = int(mask.boundary.sum())
    if basis is None:
        F0 = np.hstack([np.eye(nb), np.zeros((nb, nb))])
        F1 = np.hstack([np.zeros((nb, nb)), np.eye(nb)])
    else:
        F0 = np.column_stack([b.f0 for b in basis])
        F1 = np.column_stack([b.f1 for b in basis])
    u, w = solver.solve(F0, F1)
    g0, g1 = neumann_traces(mask, u, w)
    return DNMatrix(np.vstack([g0.T, g1.T]), mask.boundary_index(), coeffs.grid)


def green_pairing(mask, f, g, fp, gp):
    """Boundary form f0 g1' - g1 f0' + f1 g0' - f1' g0 for Navier/Neumann pairs.

    It vanishes for two solutions of Δ²u + qu = 0 by Green's second identity.
    """
    w = mask.weights[mask.boundary]
    f0, f1 = f
    g0, g1 = g
    a0, a1 = fp
    b0, b1 = gp
    return complex(np.sum(w * (f0 * b1 - g1 * a0 + f1 * b0 - a1 * g0)))


# -- Dirichlet data (u, ∂_ν u) variant ------------------------------------

def solve_dirichlet(coeffs, mask, f0, f1, rhs=None):
    """Optional mode: prescribe u and ∂_ν u on a box.

    w = -Δu is unknown on the faces too; its face equation uses a ghost
    node u_ghost = u_1 + 2Δ f1.  Edge and corner values of w are never read
    by interior stencils and are pinned to zero.
    """
    if mask.shape_kind != "box":
        raise ValueError("the Dirichlet mode supports box domains only")
    g = coeffs.grid
    h = g.spacing
    N = int(np.prod(g.shape))
    I = np.flatnonzero(mask.inside.ravel())
    Bd = np.flatnonzero(mask.boundary.ravel())
    nrm = mask.normal.reshape(g.dim, N)
    face = np.array([np.count_nonzero(nrm[:, b]) == 1 for b in Bd])
    lap = fc.laplacian_matrix(g).tocsr()
    low = lower_order_matrix(coeffs)
    nI, nB = len(I), len(Bd)
    u_full = np.zeros(N, dtype=complex)
    u_full[Bd] = f0
    # unknown vector: u_I, w_I, w_B
    rows_u = sp.hstack([-lap[I][:, I], -sp.identity(nI), sp.csr_matrix((nI, nB))])
    rhs_u = lap[I][:, Bd] @ np.asarray(f0, dtype=complex)
    rows_w = sp.hstack([low[I][:, I], -lap[I][:, I], -lap[I][:, Bd]])
    r = np.zeros(nI, dtype=complex) if rhs is None else np.asarray(rhs, dtype=complex).ravel()[I]
    rhs_w = r - low[I][:, Bd] @ np.asarray(f0, dtype=complex)
    pos_I = {n: i for i, n in enumerate(I)}
    shape = g.shape
    data, ri, ci = [], [], []
    rhs_b = np.zeros(nB, dtype=complex)
    for p, b in enumerate(Bd):
        data.append(1.0)
        ri.append(p)
        ci.append(nI + nI + p)
        if not face[p]:
            continue
        j = int(np.flatnonzero(nrm[:, b])[0])
        s = int(np.sign(nrm[j, b]))
        node = np.array(np.unravel_index(b, shape))
        # w_b + [Δ_t f0 + (2 u_1 + 2Δ f1 - 2 f0)/Δ²] = 0
        inner = node.copy()
        inner[j] -= s
        ci_in = pos_I.get(int(np.ravel_multi_index(inner, shape)))
        if ci_in is None:
            raise ValueError("face node without an interior neighbour")
        data.append(2.0 / h[j] ** 2)
        ri.append(p)
        ci.append(ci_in)
        val = 2 * h[j] * f1[p] / h[j] ** 2 - 2 * f0[p] / h[j] ** 2
        for t in range(g.dim):
            if t == j:
                continue
            nb_sum = 0
            for dlt in (-1, 1):
                nn = node.copy()
                nn[t] += dlt
                nb_sum += u_full[np.ravel_multi_index(nn, shape)]
            val += (nb_sum - 2 * f0[p]) / h[t] ** 2
        rhs_b[p] = -val
    rows_b = sp.csr_matrix((data, (ri, ci)), shape=(nB, 2 * nI + nB))
    K = sp.vstack([rows_u, rows_w, rows_b]).tocsc().astype(complex)
    try:
        sol = spla.splu(K).solve(np.concatenate([rhs_u, rhs_w, rhs_b]))
    except RuntimeError as exc:
        raise ZeroEigenvalueError("zero is a discrete eigenvalue of the Dirichlet problem") from exc
    u = u_full.copy()
    u[I] = sol[:nI]
    return u.reshape(shape)


# -- adjoint and extension ------------------------------------------------

def adjoint_coefficients(coeffs, convention="exact"):
    """Coefficients of the formal L² adjoint.

    exact:      A# = conj A, B#_k = conj B_k + 2 Σ_j D_j conj A_jk,
                q# = conj q + Σ D_j D_k conj A_jk + Σ D_j conj B_j
    displayed:  the same with a single Σ_j D_j conj A_jk in B#.
    """
    h = coeffs.grid.spacing
    d = coeffs.grid.dim
    Ab = np.conj(coeffs.A)
    Bb = np.conj(coeffs.B)
    factor = {"exact": 2.0, "displayed": 1.0}[convention]
    B2 = np.array([Bb[k] + factor * sum(-1j * fc.d1(Ab[j, k], j, h) for j in range(d)) for k in range(d)])
    q2 = np.conj(coeffs.q) + sum(-fc.dd(Ab[j, k], j, k, h) for j in range(d) for k in range(d)) \
        + sum(-1j * fc.d1(Bb[j], j, h) for j in range(d))
    return CoefficientSet(coeffs.grid, Ab, B2, q2)


def _offset(small, big):
    if small.dim != big.dim or not np.allclose(small.spacing, big.spacing):
        raise ExtentError("grids must share dimension and spacing")
    off = []
    for (a, b), (A, B), dx, n, N in zip(small.extent, big.extent, small.spacing, small.shape, big.shape):
        o = (a - A) / dx
        if abs(o - round(o)) > 1e-8 or round(o) < 0 or round(o) + n > N:
            raise ExtentError("the smaller grid is not a node-aligned sub-box")
        off.append(int(round(o)))
    return off


def extend_coefficients(coeffs, bigger):
    """Zero-extension onto a node-aligned larger grid."""
    off = _offset(coeffs.grid, bigger)
    sl = tuple(slice(o, o + n) for o, n in zip(off, coeffs.grid.shape))
    d = bigger.dim
    A = np.zeros((d, d) + bigger.shape, dtype=complex)
    B = np.zeros((d,) + bigger.shape, dtype=complex)
    q = np.zeros(bigger.shape, dtype=complex)
    A[(slice(None), slice(None)) + sl] = coeffs.A
    B[(slice(None),) + sl] = coeffs.B
    q[sl] = coeffs.q
    return CoefficientSet(bigger, A, B, q)


def restrict_coefficients(coeffs, smaller):
    off = _offset(smaller, coeffs.grid)
    sl = tuple(slice(o, o + n) for o, n in zip(off, smaller.shape))
    outside = np.ones(coeffs.grid.shape, dtype=bool)
    outside[sl] = False
    if np.any(coeffs.q[outside]) or np.any(coeffs.A[:, :, outside]) or np.any(coeffs.B[:, outside]):
        raise ExtentError("support is not contained in the smaller grid")
    return CoefficientSet(smaller, coeffs.A[(slice(None),) * 2 + sl], coeffs.B[(slice(None),) + sl],
                          coeffs.q[sl])
