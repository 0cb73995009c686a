"""Second-order ∂̄-type transport problems on a plane Σ.

The operator is T² + c with T = (e₁ + i e₂)·∇ = ∂_t + i∂_s, discretized
with centered differences so that T_h is exact on linear functions.  Three
tools live here: a solver for T²a + ca = f, amplitudes of the form
a = E(b₀ + ρ) with E = e^{(φ̃ - iψ̃)/τ}, and smallest singular values of the
real and imaginary parts of the conjugated operator τ²e^{-φ̃/τ}T²e^{φ̃/τ}.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from . import field_core as fc


class TransportSolverError(RuntimeError):
    pass


class IllConditionedError(ValueError):
    def __init__(self, message, floor):
        super().__init__(message)
        self.floor = floor


class ParameterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PlaneProblem:
    sigma: fc.Grid
    c: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        if self.sigma.dim != 2:
            raise fc.ShapeError("plane problems live on a 2-D grid")
        c = np.broadcast_to(np.asarray(self.c, dtype=complex), self.sigma.shape)
        f = np.broadcast_to(np.asarray(self.f, dtype=complex), self.sigma.shape)
        if not np.all(np.isfinite(c)):
            raise ValueError("potential must be bounded")
        object.__setattr__(self, "c", fc._frozen(c))
        object.__setattr__(self, "f", fc._frozen(f))


@dataclass(frozen=True)
class PlanePhase:
    a: float
    b: float

    def __post_init__(self):
        if self.a == 0 and self.b == 0:
            raise ParameterError("(a, b) must be nonzero")

    def phi(self, t, s):
        return self.a * t + self.b * s

    def psi(self, t, s):
        return self.b * t - self.a * s

    def conjugacy_defect(self, grid):
        """max |∂_tψ̃ - ∂_sφ̃| + max |∂_sψ̃ + ∂_tφ̃| over interior nodes."""
        t, s = grid.coords()
        h = grid.spacing
        phi, psi = self.phi(t, s), self.psi(t, s)
        inner = fc.interior_mask(grid.shape, 1)
        e1 = fc.d1(psi, 0, h) - fc.d1(phi, 1, h)
        e2 = fc.d1(psi, 1, h) + fc.d1(phi, 0, h)
        return float(np.abs(e1[inner]).max() + np.abs(e2[inner]).max())


@dataclass(frozen=True, eq=False)
class AmplitudeCGO:
    grid: fc.Grid
    phase: PlanePhase
    tau: float
    b0: np.ndarray
    rho: np.ndarray
    rho_norm: float
    residual: float
    method: str
    log_weight: np.ndarray = field(repr=False)

    @property
    def a0(self):
        return np.exp(self.log_weight) * (self.b0 + self.rho)


# -- discrete operators -------------------------------------------------------

def apply_T(f, spacing, sign=1):
    """(sign ∂_t + i∂_s) f on the trailing two axes."""
    return sign * fc.d1(f, 0, spacing) + 1j * fc.d1(f, 1, spacing)


def apply_T2(f, spacing):
    return apply_T(apply_T(f, spacing), spacing)


def t_matrix(grid):
    return (fc.d1_matrix(grid, 0) + 1j * fc.d1_matrix(grid, 1)).tocsr()


def transport_matrix(grid, c=None):
    """Sparse T_h² + diag(c) on all nodes of a plane grid."""
    t = t_matrix(grid)
    m = (t @ t).tocsr()
    if c is not None:
        m = m + sp.diags(np.asarray(c, dtype=complex).ravel())
    return m.tocsr()


def interior_rows(grid, width):
    return np.flatnonzero(fc.interior_mask(grid.shape, width).ravel())


def min_norm_solve(m, rhs):
    """Minimum-norm x with m x = rhs for a wide sparse m of full row rank."""
    m = sp.csr_matrix(m)
    mh = m.conj().T.tocsc()
    gram = (m @ mh).tocsc()
    rhs = np.asarray(rhs)
    try:
        y = spla.splu(gram).solve(rhs.astype(np.result_type(gram.dtype, rhs.dtype)))
    except RuntimeError:
        y = None
    if y is None or not np.all(np.isfinite(y)):
        x = spla.lsqr(m, rhs, atol=1e-14, btol=1e-14, iter_lim=20 * m.shape[1])[0]
        return x
    return mh @ y


def smooth_min_norm_solve(m, rhs, grid, eps=1e-6):
    """x minimizing ||Δ_h x||² + eps||x||² subject to m x = rhs.

    Centered T_h² only couples nodes of equal parity i + j, so the plain
    minimum-norm solution may differ between the two parity classes by a
    sawtooth.  Penalizing the compact Laplacian selects the smooth member.
    """
    m = sp.csr_matrix(m)
    dx = min(grid.spacing)
    lap = fc.laplacian_matrix(grid) * dx ** 2
    n = m.shape[1]
    w = (lap.T @ lap + eps * sp.identity(n)).astype(complex)
    kkt = sp.bmat([[w, m.conj().T], [m, None]], format="csc")
    b = np.concatenate([np.zeros(n, complex), np.asarray(rhs, complex)])
    try:
        sol = spla.splu(kkt).solve(b)
    except RuntimeError as exc:
        raise TransportSolverError("singular constrained least-squares system") from exc
    return sol[:n]


def _residual(grid, c, a, f, width=2):
    h = grid.spacing
    inner = fc.interior_mask(grid.shape, width)
    res = apply_T2(a, h) + c * a - f
    ref = fc.l2_norm(f, grid, inner)
    if ref == 0:
        ref = max(fc.l2_norm(a, grid, inner), 1e-300)
    return fc.l2_norm(res, grid, inner) / ref


def dbar2_symbol(grid):
    """Periodic symbol of T_h and its inverse square with kernel modes zeroed."""
    kt, ks = grid.wavenumbers()
    dt, ds = grid.spacing
    sym = 1j * np.sin(kt * dt) / dt - np.sin(ks * ds) / ds
    sq = sym ** 2
    inv = np.zeros(grid.shape, dtype=complex)
    big = np.abs(sq) > 1e-12 * np.abs(sq).max()
    inv[big] = 1.0 / np.broadcast_to(sq, grid.shape)[big]
    return inv


def _fixed_point(prob, tol, max_iter):
    grid = prob.sigma
    t = grid.coords()[0]
    t0 = 0.5 * (grid.extent[0][0] + grid.extent[0][1])
    p = 0.5 * (t - t0) ** 2
    inv = dbar2_symbol(grid)
    c, f = prob.c, prob.f
    w = np.zeros(grid.shape, dtype=complex)
    mean_cp = np.mean(c * p)
    if abs(1 + mean_cp) < 1e-8:
        return None, np.inf
    last = np.inf
    for _ in range(max_iter):
        m = (np.mean(f) - np.mean(c * w)) / (1 + mean_cp)
        rhs = f - m - c * (w + m * p)
        w_new = np.fft.ifft2(inv * np.fft.fft2(rhs))
        step = np.linalg.norm(w_new - w) / max(np.linalg.norm(w_new), 1e-300)
        w = w_new
        if step < 1e-13 or (step > 0.9 * last and step > tol):
            break
        last = step
    m = (np.mean(f) - np.mean(c * w)) / (1 + mean_cp)
    a = w + m * p
    return a, _residual(grid, c, a, f)


def solve_dbar2(prob, tol=1e-6, max_iter=200, method="auto"):
    """Solve (∂_t + i∂_s)²a + c a = f on Σ.

    ``auto`` runs the periodic Neumann iteration a = w + m p with
    p = (t - t₀)²/2 carrying the mean, then falls back to the minimum-norm
    solution of the interior equations when the residual is too large.
    """
    grid = prob.sigma
    if method not in ("auto", "fixed-point", "lstsq"):
        raise ValueError(f"unknown method {method!r}")
    if not np.any(prob.f) and method != "lstsq":
        return np.zeros(grid.shape, dtype=complex)
    res = np.inf
    if method in ("auto", "fixed-point"):
        a, res = _fixed_point(prob, tol, max_iter)
        if res <= tol:
            return a
        if method == "fixed-point":
            raise TransportSolverError(f"fixed-point iteration stalled at residual {res:.3e}")
    rows = interior_rows(grid, 2)
    m = transport_matrix(grid, prob.c)[rows]
    a = smooth_min_norm_solve(m, prob.f.ravel()[rows], grid).reshape(grid.shape)
    res = _residual(grid, prob.c, a, prob.f)
    if not res <= tol:
        raise TransportSolverError(f"least-squares fallback left residual {res:.3e}")
    return a


# -- CGO amplitudes ---------------------------------------------------------

def tau_floor(grid, phase):
    return 2.0 * max(grid.spacing) * max(abs(phase.a), abs(phase.b))


def discrete_log_weight(grid, phase, tau):
    """log E for a discrete analogue of E = e^{(φ̃ - iψ̃)/τ} with T_h E = 0.

    Along t the exponent is α t with α = (a - ib)/τ; along s the rate β solves
    sinh(βΔs)/Δs = i sinh(αΔt)/Δt, which tends to iα as Δ → 0.
    """
    t, s = grid.coords()
    dt, ds = grid.spacing
    alpha = (phase.a - 1j * phase.b) / tau
    beta = np.arcsinh(1j * np.sinh(alpha * dt) * ds / dt) / ds
    return alpha * t + beta * s


def conjugated_transport_matrix(grid, c, log_w, tau):
    """τ² diag(E⁻¹)(T_h² + c)diag(E), formed entrywise to avoid overflow."""
    m = transport_matrix(grid).tocoo()
    lw = np.asarray(log_w).ravel()
    data = tau ** 2 * m.data * np.exp(lw[m.col] - lw[m.row])
    out = sp.csr_matrix((data, (m.row, m.col)), shape=m.shape)
    return (out + sp.diags(tau ** 2 * np.asarray(c, dtype=complex).ravel())).tocsr()


def real_part_matrix(grid, phase, tau):
    """Discretized (τ∂_t + a)² - (τ∂_s + b)²."""
    a, b = phase.a, phase.b
    n = int(np.prod(grid.shape))
    return (tau ** 2 * (fc.d2_matrix(grid, 0) - fc.d2_matrix(grid, 1))
            + 2 * tau * (a * fc.d1_matrix(grid, 0) - b * fc.d1_matrix(grid, 1))
            + (a * a - b * b) * sp.identity(n)).tocsr()


def imag_part_matrix(grid, phase, tau):
    """Discretized 2(τ∂_t + a)(τ∂_s + b)."""
    a, b = phase.a, phase.b
    n = int(np.prod(grid.shape))
    eye = sp.identity(n)
    return (2 * (tau * fc.d1_matrix(grid, 0) + a * eye) @ (tau * fc.d1_matrix(grid, 1) + b * eye)).tocsr()


def build_cgo_amplitude(c, b0, phase, tau, grid=None, method="exact"):
    """Amplitude a₀ = E(b₀ + ρ) solving (∂_t + i∂_s)²a₀ + c a₀ = 0.

    ``exact`` takes ρ as the minimum-norm solution of the conjugated
    equation P ρ = -P b₀, so a₀ solves the discrete equation.  ``split``
    follows the real/imaginary decoupling: with u = e^{-iψ̃/τ}ρ it solves
    (Re + τ²c₁)u₁ = Re v and (Im + τ²c₂)u₂ = Im v separately for
    v = -τ² e^{-iψ̃/τ}(T²b₀ + c b₀), then sets ρ = e^{iψ̃/τ}(u₁ + iu₂).  The
    split pair does not in general solve the full equation; its residual is
    recorded.
    """
    if grid is None:
        grid = c.grid
    c = np.asarray(getattr(c, "values", c), dtype=complex)
    b0 = np.broadcast_to(np.asarray(getattr(b0, "values", b0), dtype=complex), grid.shape).copy()
    if not 0 < tau < 1:
        raise ParameterError("tau must lie in (0, 1)")
    if not np.all(b0 != 0):
        raise ParameterError("b0 must be nonzero on Σ")
    floor = tau_floor(grid, phase)
    if tau < floor:
        raise IllConditionedError(f"tau={tau} is below the resolution floor {floor:.4f}", floor)
    lw = discrete_log_weight(grid, phase, tau)
    p = conjugated_transport_matrix(grid, c, lw, tau)
    rows = interior_rows(grid, 2)
    pb = (p @ b0.ravel())[rows]
    if method == "exact":
        rho = min_norm_solve(p[rows], -pb) if np.any(pb) else np.zeros(b0.size, complex)
    elif method == "split":
        t, s = grid.coords()
        h = grid.spacing
        psi = phase.psi(t, s)
        v = -tau ** 2 * np.exp(-1j * psi / tau) * (apply_T2(b0, h) + c * b0)
        re_m = real_part_matrix(grid, phase, tau) + sp.diags(tau ** 2 * c.real.ravel())
        im_m = imag_part_matrix(grid, phase, tau) + sp.diags(tau ** 2 * c.imag.ravel())
        u1 = min_norm_solve(re_m[rows], v.real.ravel()[rows])
        u2 = min_norm_solve(im_m[rows], v.imag.ravel()[rows])
        rho = np.exp(1j * psi.ravel() / tau) * (u1 + 1j * u2)
    else:
        raise ValueError(f"unknown method {method!r}")
    rho = rho.reshape(grid.shape)
    num = np.linalg.norm((p @ (b0 + rho).ravel())[rows])
    den = np.linalg.norm(pb)
    residual = 0.0 if num == 0 else num / max(den, 1e-300)
    return AmplitudeCGO(grid, phase, tau, b0, rho, fc.l2_norm(rho, grid), float(residual),
                        method, lw)


# -- Carleman sweeps --------------------------------------------------------

def carleman_matrix(grid, part, phase, tau, c=None, band=3):
    """Conjugated operator restricted to fields vanishing on a band of nodes.

    Rows are all grid nodes; columns are the nodes at least ``band`` layers
    inside, so every column field is compactly supported.
    """
    if part == "real":
        m = real_part_matrix(grid, phase, tau)
        pot = None if c is None else np.real(c)
    elif part == "imag":
        m = imag_part_matrix(grid, phase, tau)
        pot = None if c is None else np.imag(c)
    else:
        raise ValueError("part must be 'real' or 'imag'")
    if pot is not None:
        m = m + sp.diags(tau ** 2 * np.asarray(pot, dtype=float).ravel())
    cols = interior_rows(grid, band)
    return m.tocsc()[:, cols]


def smallest_singular_value(m, dense_limit=2500):
    if m.shape[1] <= dense_limit:
        return float(np.linalg.svd(m.toarray(), compute_uv=False).min())
    gram = (m.T @ m).tocsc()
    val = spla.eigsh(gram, k=1, sigma=0, which="LM", return_eigenvectors=False)[0]
    return float(np.sqrt(max(val, 0.0)))


def carleman_sigma_min(part, phase, tau_list, grid, c=None, band=3):
    """[(tau, sigma_min)] for the real or imaginary conjugated operator."""
    out = []
    for tau in tau_list:
        if not 0 < tau < 1:
            raise ParameterError("tau must lie in (0, 1)")
        m = carleman_matrix(grid, part, phase, tau, c, band)
        out.append((float(tau), smallest_singular_value(m)))
    return out


def write_sweep_csv(path, rows):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "sigma_min", "ratio"])
        for tau, s in rows:
            w.writerow([repr(tau), repr(s), repr(s / tau)])


# -- slicing n-D transport problems ----------------------------------------

@dataclass(frozen=True, eq=False)
class SliceSolution:
    values: np.ndarray
    residuals: np.ndarray
    sigma: fc.Grid


def _axis_of(v):
    v = np.asarray(v, dtype=float)
    j = int(np.argmax(np.abs(v)))
    if not np.isclose(abs(v[j]), 1.0) or np.count_nonzero(np.abs(v) > 1e-12) != 1:
        return None
    return j, int(np.sign(v[j]))


def check_frame(mu1, mu2):
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    if not (np.isclose(mu1 @ mu1, 1) and np.isclose(mu2 @ mu2, 1) and abs(mu1 @ mu2) < 1e-12):
        raise ParameterError("mu1, mu2 must be orthonormal")


def _solve_aligned(grid, j1, s1, j2, s2, c, f, solver, **kw):
    dim = grid.dim
    rest = [j for j in range(dim) if j not in (j1, j2)]
    order = rest + [j1, j2]
    ct = np.transpose(np.broadcast_to(c, grid.shape), order)
    ft = np.transpose(np.broadcast_to(f, grid.shape), order)
    flips = [slice(None)] * (dim - 2) + [slice(None, None, s1), slice(None, None, s2)]
    ct, ft = ct[tuple(flips)], ft[tuple(flips)]
    ext = []
    for j, s in ((j1, s1), (j2, s2)):
        lo, hi = grid.extent[j]
        ext.append((lo, hi) if s > 0 else (-hi, -lo))
    sigma = fc.Grid(tuple(ext), (grid.shape[j1], grid.shape[j2]))
    out = np.zeros(ct.shape, dtype=complex)
    res = np.zeros(ct.shape[:-2])
    for idx in np.ndindex(*ct.shape[:-2]):
        prob = PlaneProblem(sigma, ct[idx], ft[idx])
        out[idx] = solver(prob, **kw)
        res[idx] = _residual(sigma, prob.c, out[idx], prob.f)
    out = out[tuple(flips)]
    return np.transpose(out, np.argsort(order)), res, sigma


def _rotation(mu1, mu2, dim):
    if dim == 2:
        return np.stack([mu1, mu2])
    return np.stack([mu1, mu2, np.cross(mu1, mu2)])


def lift_to_slices(grid, mu1, mu2, c, f=None, solver=solve_dbar2, resample=False, **kw):
    """Solve ((μ₁ + iμ₂)·∇)²a + c a = f slice by slice.

    With grid-aligned μ₁ = ±e_j, μ₂ = ±e_k each plane x' = const is an
    independent 2-D problem.  Other frames need ``resample=True``: c and f
    are interpolated (cubic) onto a rotated copy of the grid, solved there,
    and interpolated back.
    """
    check_frame(mu1, mu2)
    c = np.asarray(getattr(c, "values", c), dtype=complex)
    f = np.zeros(grid.shape, complex) if f is None else np.asarray(getattr(f, "values", f), complex)
    a1, a2 = _axis_of(mu1), _axis_of(mu2)
    if a1 is not None and a2 is not None:
        vals, res, sigma = _solve_aligned(grid, a1[0], a1[1], a2[0], a2[1], c, f, solver, **kw)
        return SliceSolution(vals, res, sigma)
    if not resample:
        raise ParameterError("non-aligned directions need resample=True")
    rot = _rotation(np.asarray(mu1, float), np.asarray(mu2, float), grid.dim)
    center = np.array([0.5 * (a + b) for a, b in grid.extent])
    h = np.array(grid.spacing)
    n = np.array(grid.shape)
    y = grid.coords()
    # rotated grid shares spacing and node counts; node y maps to center + rotᵀ y'
    rgrid = fc.Grid(tuple((-0.5 * (m - 1) * dx, 0.5 * (m - 1) * dx) for m, dx in zip(n, h)),
                    tuple(n))
    yr = np.stack(rgrid.coords())
    x_of_y = center.reshape((-1,) + (1,) * grid.dim) + np.einsum("ij,i...->j...", rot, yr)
    col = (-1,) + (1,) * grid.dim
    lo = np.array([a for a, _ in grid.extent]).reshape(col)
    idx = (x_of_y - lo) / h.reshape(col)

    def interp(field_, coords):
        return (ndimage.map_coordinates(field_.real, coords, order=3, mode="constant")
                + 1j * ndimage.map_coordinates(field_.imag, coords, order=3, mode="constant"))

    cr, fr = interp(c, idx), interp(f, idx)
    vals, res, sigma = _solve_aligned(rgrid, 0, 1, 1, 1, cr, fr, solver, **kw)
    yb = np.einsum("ij,j...->i...", rot, np.stack(y) - center.reshape(col))
    rlo = np.array([a for a, _ in rgrid.extent]).reshape(col)
    back = (yb - rlo) / h.reshape(col)
    return SliceSolution(interp(vals, back), res, sigma)
