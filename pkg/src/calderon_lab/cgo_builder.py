"""Complex geometric optics solutions u = e^{Ψ/h}(a₀ + h a₁ + r).

Ψ = ζ·x with ζ = ±μ₁ + iμ₂ and ζ·ζ = 0.  Conjugating h⁴L by e^{Ψ/h} gives,
with T = ζ·∇ and L = Δ² - A:∂² - iB·∂ + q,

    P_h = h⁴Δ² + 4h³ΔT + 4h²T² - h²(Aζ·ζ) - 2h³ ζᵀA∂ - h⁴A:∂²
          - ih³ B·ζ - ih⁴ B·∂ + h⁴q

so the amplitudes solve

    4T²a₀ - (Aζ·ζ)a₀ = 0,
    4T²a₁ - (Aζ·ζ)a₁ = -4ΔT a₀ + 2ζᵀA∂a₀ + i(B·ζ)a₀,

and the remainder solves P_h r = -P_h(a₀ + h a₁).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import field_core as fc
from . import forward_solver as fs
from . import transport2d as t2


class CGOParameterError(ValueError):
    pass


class ResolutionError(ValueError):
    def __init__(self, message, floor):
        super().__init__(message)
        self.floor = floor


B_CHOICES = ("one", "exp", "linear_exp", "linear", "neg_linear")


@dataclass(frozen=True, eq=False)
class CGOParams:
    mu1: np.ndarray
    mu2: np.ndarray
    h: float
    xi: np.ndarray = None
    tau: float = None

    def __post_init__(self):
        mu1 = fc._frozen(self.mu1, dtype=float)
        mu2 = fc._frozen(self.mu2, dtype=float)
        xi = fc._frozen(np.zeros_like(mu1) if self.xi is None else self.xi, dtype=float)
        if not (mu1.shape == mu2.shape == xi.shape and mu1.ndim == 1):
            raise CGOParameterError("mu1, mu2, xi must be vectors of one length")
        object.__setattr__(self, "mu1", mu1)
        object.__setattr__(self, "mu2", mu2)
        object.__setattr__(self, "xi", xi)
        e1, e2 = eikonal_check(self)
        if e1 > 1e-12 or e2 > 1e-12 or not np.isclose(mu1 @ mu1, 1.0):
            raise CGOParameterError("mu1, mu2 must be orthonormal")
        scale = max(1.0, float(np.abs(xi).max()))
        if abs(xi @ mu1) > 1e-12 * scale or abs(xi @ mu2) > 1e-12 * scale:
            raise CGOParameterError("xi must be orthogonal to mu1 and mu2")
        if not 0 < self.h < 1:
            raise CGOParameterError("h must lie in (0, 1)")

    @property
    def dim(self):
        return len(self.mu1)

    def zeta(self, sign=1):
        return sign * self.mu1 + 1j * self.mu2

    def to_dict(self):
        return {"mu1": self.mu1.tolist(), "mu2": self.mu2.tolist(), "h": self.h,
                "xi": self.xi.tolist(), "tau": self.tau}


def eikonal_check(params):
    """(| |∇φ|² - |∇ψ|² |, |∇φ·∇ψ|) for φ = μ₁·x, ψ = μ₂·x."""
    mu1, mu2 = np.asarray(params.mu1, float), np.asarray(params.mu2, float)
    return float(abs(mu1 @ mu1 - mu2 @ mu2)), float(abs(mu1 @ mu2))


def h_floor(grid, params):
    """Smallest admissible h: 4Δ_j(|μ₁_j| + |μ₂_j|) over axes."""
    w = np.abs(params.mu1) + np.abs(params.mu2)
    return float(max(4 * dx * wj for dx, wj in zip(grid.spacing, w)))


def check_h(grid, params):
    floor = h_floor(grid, params)
    if params.h < floor:
        raise ResolutionError(f"h={params.h} is below the phase-resolution floor {floor:.4f}", floor)


def b_field(grid, params, choice):
    """Amplitudes annihilated by T² for ζ = ±μ₁ + iμ₂."""
    x = grid.coords()
    ell = sum(m * xj for m, xj in zip(params.mu1, x))
    wave = np.exp(-1j * sum(k * xj for k, xj in zip(params.xi, x)))
    table = {"one": np.ones(grid.shape, complex), "exp": wave, "linear_exp": ell * wave,
             "linear": ell.astype(complex), "neg_linear": -ell.astype(complex)}
    if callable(choice):
        return np.asarray(choice(*x), dtype=complex)
    if isinstance(choice, np.ndarray):
        return choice.astype(complex)
    if choice not in table:
        raise CGOParameterError(f"unknown amplitude choice {choice!r}")
    return table[choice]


def log_phase(grid, zeta, h):
    x = grid.coords()
    return sum(z * xj for z, xj in zip(zeta, x)) / h


def apply_T(f, zeta, spacing):
    return fc.directional_derivative(f, zeta, spacing)


def transport_potential(coeffs, zeta):
    """c = -(Aζ·ζ)/4, the potential in T²a + c a = ..."""
    return -np.einsum("jk...,j,k->...", coeffs.A, zeta, zeta) / 4


def _interior(grid):
    return fc.interior_mask(grid.shape, 2)


def transport_residual(coeffs, zeta, a, rhs=None):
    g = coeffs.grid
    h = g.spacing
    c = transport_potential(coeffs, zeta)
    res = apply_T(apply_T(a, zeta, h), zeta, h) + c * a
    ref = a if rhs is None else rhs
    if rhs is not None:
        res = res - rhs
    inner = _interior(g)
    den = fc.l2_norm(ref, g, inner)
    num = fc.l2_norm(res, g, inner)
    return 0.0 if num == 0 else num / max(den, 1e-300)


def solve_transport_a0(coeffs, params, b_choice="one", sign=1, amplitude="direct",
                       phase=(1.0, 0.0), tau=0.2):
    """a₀ with 4T²a₀ - (Aζ·ζ)a₀ = 0 built from an amplitude b with T²b = 0.

    ``direct`` returns a₀ = b + α with T²α + cα = -c b solved slice-wise.
    ``cgo`` builds each slice amplitude as e^{(φ̃-iψ̃)/τ}(b + ρ).
    """
    g = coeffs.grid
    zeta = params.zeta(sign)
    b = b_field(g, params, b_choice)
    c = transport_potential(coeffs, zeta)
    if not np.any(c):
        return b, 0.0
    if amplitude == "direct":
        sol = t2.lift_to_slices(g, sign * params.mu1, params.mu2, c, -c * b, resample=True)
        a0 = b + sol.values
    elif amplitude == "cgo":
        a0 = _cgo_slices(g, sign * params.mu1, params.mu2, c, b, t2.PlanePhase(*phase), tau)
    else:
        raise ValueError(f"unknown amplitude mode {amplitude!r}")
    return a0, transport_residual(coeffs, zeta, a0)


def _cgo_slices(grid, mu1, mu2, c, b, phase, tau):
    """Slice-wise E(b + ρ) amplitudes for grid-aligned directions."""
    j1, s1 = t2._axis_of(mu1)
    j2, s2 = t2._axis_of(mu2)
    dim = grid.dim
    rest = [j for j in range(dim) if j not in (j1, j2)]
    order = rest + [j1, j2]
    flips = tuple([slice(None)] * (dim - 2) + [slice(None, None, s1), slice(None, None, s2)])
    ct = np.transpose(c, order)[flips]
    bt = np.transpose(b, order)[flips]
    ext = [grid.extent[j] if s > 0 else (-grid.extent[j][1], -grid.extent[j][0])
           for j, s in ((j1, s1), (j2, s2))]
    sigma = fc.Grid(tuple(ext), (grid.shape[j1], grid.shape[j2]))
    out = np.zeros(ct.shape, complex)
    for idx in np.ndindex(*ct.shape[:-2]):
        amp = t2.build_cgo_amplitude(ct[idx], bt[idx], phase, tau, grid=sigma)
        out[idx] = amp.a0
    return np.transpose(out[flips], np.argsort(order))


def transport_a1_source(coeffs, zeta, a0):
    """F = -4ΔT a₀ + 2ζᵀA∂a₀ + i(B·ζ)a₀, so that 4T²a₁ - (Aζ·ζ)a₁ = F."""
    h = coeffs.grid.spacing
    d = coeffs.grid.dim
    F = -4 * fc.laplacian(apply_T(a0, zeta, h), h)
    Az = np.einsum("jk...,j->k...", coeffs.A, zeta)
    for k in range(d):
        if np.any(Az[k]):
            F = F + 2 * Az[k] * fc.d1(a0, k, h)
    F = F + 1j * np.einsum("j...,j->...", coeffs.B, zeta) * a0
    return F


def solve_transport_a1(coeffs, params, a0, sign=1):
    g = coeffs.grid
    zeta = params.zeta(sign)
    inner = _interior(g)
    # edge rows of the stencils are not meaningful; a rotated solve would pull them inside
    F = np.where(inner, transport_a1_source(coeffs, zeta, a0), 0.0)
    if not np.any(F[inner]):
        return np.zeros(g.shape, complex), 0.0
    c = transport_potential(coeffs, zeta)
    sol = t2.lift_to_slices(g, sign * params.mu1, params.mu2, c, F / 4, resample=True)
    a1 = sol.values
    return a1, transport_residual(coeffs, zeta, a1, F / 4)


def conjugated_operator(coeffs, zeta, h):
    """Sparse P_h from the expansion of e^{-Ψ/h} h⁴ L e^{Ψ/h}."""
    g = coeffs.grid
    d = g.dim
    lap = fc.laplacian_matrix(g)
    d1 = [fc.d1_matrix(g, j) for j in range(d)]
    T = sum(z * m for z, m in zip(zeta, d1))
    Aζζ = np.einsum("jk...,j,k->...", coeffs.A, zeta, zeta).ravel()
    Aζ = np.einsum("jk...,j->k...", coeffs.A, zeta)
    Bζ = np.einsum("j...,j->...", coeffs.B, zeta).ravel()
    P = h ** 4 * (lap @ lap) + 4 * h ** 3 * (lap @ T) + 4 * h ** 2 * (T @ T)
    P = P - h ** 2 * sp.diags(Aζζ) - 1j * h ** 3 * sp.diags(Bζ)
    for k in range(d):
        if np.any(Aζ[k]):
            P = P - 2 * h ** 3 * sp.diags(Aζ[k].ravel()) @ d1[k]
    P = P + h ** 4 * fs.lower_order_matrix(coeffs)
    return sp.csr_matrix(P)


def exact_conjugated_operator(coeffs, zeta, h):
    """h⁴ diag(E⁻¹) L_h diag(E) with E = e^{Ψ/h}, formed entrywise."""
    m = fs.assemble_operator(coeffs).tocoo()
    lw = log_phase(coeffs.grid, zeta, h).ravel()
    data = h ** 4 * m.data * np.exp(lw[m.col] - lw[m.row])
    return sp.csr_matrix((data, (m.row, m.col)), shape=m.shape)


@dataclass(frozen=True, eq=False)
class CGOSolution:
    params: CGOParams
    sign: int
    coeffs: fs.CoefficientSet
    a0: np.ndarray
    a1: np.ndarray
    r: np.ndarray
    log_weight: np.ndarray = field(repr=False)
    h_factor: float = 1.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def amplitude(self):
        return self.a0 + self.h_factor * self.a1 + self.r

    @property
    def u(self):
        return np.exp(self.log_weight) * self.amplitude


def solve_remainder(coeffs, params, a0, a1, sign=1, method="lstsq", mask=None, solver=None,
                    h_factor=None):
    """Remainder r of the CGO ansatz.

    ``lstsq``: minimum-norm solution of P_h r = -P_h(a₀ + h a₁) on interior
    rows with the expansion operator P_h.  ``exact``: the same with the
    entrywise conjugated matrix.  ``navier``: r = e^{-Ψ/h}R where R solves
    the Navier problem L R = -L(e^{Ψ/h}(a₀ + h a₁)) with zero data on
    ``mask``, which makes u an exact discrete solution in the domain.
    """
    g = coeffs.grid
    h = params.h
    check_h(g, params)
    hf = h if h_factor is None else h_factor
    zeta = params.zeta(sign)
    base = a0 + hf * a1
    if method in ("lstsq", "exact"):
        P = conjugated_operator(coeffs, zeta, h) if method == "lstsq" else \
            exact_conjugated_operator(coeffs, zeta, h)
        rows = np.flatnonzero(_interior(g).ravel())
        rhs = -(P @ base.ravel())[rows]
        if not np.any(rhs):
            return np.zeros(g.shape, complex)
        return t2.min_norm_solve(P[rows], rhs).reshape(g.shape)
    if method == "navier":
        if mask is None:
            raise CGOParameterError("navier remainder needs a domain mask")
        lw = log_phase(g, zeta, h)
        U0 = np.exp(lw) * base
        solver = solver or fs.NavierSolver(coeffs, mask)
        nb = int(mask.boundary.sum())
        R, _ = solver.solve(np.zeros(nb), np.zeros(nb), -fs.apply_operator(coeffs, U0))
        return np.where(mask.closure, R * np.exp(-lw), 0.0)
    raise ValueError(f"unknown remainder method {method!r}")


def build_cgo(coeffs, params, sign=1, b_choice="one", adjoint_convention="exact",
              sharp_h_factor=True, remainder="lstsq", mask=None, solver=None, a1_mode="solve"):
    """Full pipeline a₀ → a₁ → r.

    ``sign=-1`` builds the adjoint solution: the coefficients are replaced by
    the adjoint ones and ζ = -μ₁ + iμ₂.  ``sharp_h_factor=False`` drops the
    factor h in front of a₁ for that case.  ``a1_mode="zero"`` skips the
    first transport correction and leaves it to the remainder.
    """
    if sign not in (1, -1):
        raise CGOParameterError("sign must be +1 or -1")
    g = coeffs.grid
    check_h(g, params)
    work = coeffs if sign == 1 else fs.adjoint_coefficients(coeffs, adjoint_convention)
    zeta = params.zeta(sign)
    a0, res0 = solve_transport_a0(work, params, b_choice, sign)
    if a1_mode == "solve":
        a1, res1 = solve_transport_a1(work, params, a0, sign)
    elif a1_mode == "zero":
        a1, res1 = np.zeros(g.shape, complex), float("nan")
    else:
        raise ValueError(f"unknown a1 mode {a1_mode!r}")
    hf = params.h if (sign == 1 or sharp_h_factor) else 1.0
    r = solve_remainder(work, params, a0, a1, sign, remainder, mask, solver, h_factor=hf)
    lw = log_phase(g, zeta, params.h)
    sol = CGOSolution(params, sign, work, a0, a1, r, lw, hf)
    inner = _interior(g) if mask is None else mask.inside & _interior(g)
    diag = {"remainder": remainder, "transport_residual_a0": res0, "transport_residual_a1": res1,
            "potential_max": float(np.abs(transport_potential(work, zeta)).max()),
            "r_l2": fc.l2_norm(r, g, inner),
            "r_scl": [fc.scl_norm(np.where(inner, r, 0), s, params.h, g) for s in range(5)]}
    P = conjugated_operator(work, zeta, params.h)
    amp = sol.amplitude
    diag["conjugated_residual"] = (fc.l2_norm((P @ amp.ravel()).reshape(g.shape), g, inner)
                                   / max(params.h ** 4 * fc.l2_norm(amp, g, inner), 1e-300))
    object.__setattr__(sol, "diagnostics", diag)
    return sol


def navier_data(sol, mask):
    """Navier data (u, w) on ∂Ω of a CGO solution in the split (u, w) sense.

    For a Navier-closed remainder R the boundary value of w comes from the
    ansatz part alone, since R and its w-field vanish there.
    """
    g = sol.coeffs.grid
    if sol.diagnostics.get("remainder") == "navier":
        base = np.exp(sol.log_weight) * (sol.a0 + sol.h_factor * sol.a1)
        w = -fc.laplacian(base, g.spacing)
    else:
        w = -fc.laplacian(sol.u, g.spacing)
    return fs.NavierBoundaryData.from_fields(mask, sol.u, w)


def relative_operator_residual(sol, mask=None):
    """||L_h u|| / ||u|| over interior nodes, computed in the conjugated frame."""
    g = sol.coeffs.grid
    P = exact_conjugated_operator(sol.coeffs, sol.params.zeta(sol.sign), sol.params.h)
    amp = sol.amplitude
    inner = _interior(g) if mask is None else mask.inside & _interior(g)
    Lu = (P @ amp.ravel()).reshape(g.shape) / sol.params.h ** 4
    w = np.exp(sol.log_weight.real)
    return fc.l2_norm(w * Lu, g, inner) / max(fc.l2_norm(w * amp, g, inner), 1e-300)
