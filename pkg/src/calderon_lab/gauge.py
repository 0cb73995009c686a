"""Gauge transformations of the third-order perturbed biharmonic operator.

    M u = Δ²u + Σ C_jkl ∂_j∂_k∂_l u + Σ A_jk ∂_j∂_k u + Σ B_j ∂_j u + q u

Conjugating by e^Φ gives M' = e^Φ M e^{-Φ}, so M'(u e^Φ) = e^Φ M u.  With
g = ∇Φ, G = ∇²Φ and contractions over the leading indices of C,

    C' = C - 4 Sym(g ⊗ I)
    A' = A - 4G + 4 g⊗g + 2(|g|² - ΔΦ) I - 3 C·g
    B' = B - 4∇ΔΦ + 8 G g - 4|g|² g + 4 ΔΦ g - 2 A g - 3 C:G + 3 C:(g⊗g)
    q' = q + 2 G:G + 4 g·∇ΔΦ - Δ²Φ - 4 gᵀGg + |g|⁴ - 2|g|²ΔΦ + (ΔΦ)²
           + gᵀAg - A:G - B·g - C:∇³Φ + 3 C:(G⊗g) - C:(g⊗g⊗g)

where Sym(g⊗I)_jkl = (g_j δ_kl + g_k δ_jl + g_l δ_jk)/3.  The
``displayed`` convention evaluates an alternative coefficient list as written;
it does not satisfy the conjugation identity and is kept for comparison.
"""

from dataclasses import dataclass

import numpy as np

from . import field_core as fc


class GaugeDomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaugeFunction:
    grid: fc.Grid
    values: np.ndarray
    mask: fc.DomainMask

    def __post_init__(self):
        v = fc._frozen(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if np.any(v[~self.mask.inside]):
            raise GaugeDomainError("gauge function must vanish outside the domain")


def make_gauge_function(grid, psi, mask, margin=0.0, power=4):
    """Φ = η⁴ ψ with η vanishing linearly at the (inset) domain boundary.

    For a box, η is the product of one-dimensional hat factors; for a ball it
    is (R - m)² - |x - c|².  ``margin`` is the inset distance.
    """
    x = grid.coords()
    if mask.shape_kind == "box":
        eta = np.ones(grid.shape)
        for j in range(grid.dim):
            xb = x[j][mask.boundary]
            lo, hi = xb.min() + margin, xb.max() - margin
            half = 0.5 * (hi - lo)
            eta *= np.clip(x[j] - lo, 0, None) * np.clip(hi - x[j], 0, None) / half ** 2
    else:
        c = [0.5 * (x[j][mask.boundary].max() + x[j][mask.boundary].min()) for j in range(grid.dim)]
        r = np.sqrt(sum((x[j] - c[j]) ** 2 for j in range(grid.dim)))
        R = r[mask.boundary].min() - margin
        eta = np.clip(R ** 2 - r ** 2, 0, None) / R ** 2
    psi = psi(*x) if callable(psi) else psi
    phi = np.where(mask.inside, eta ** power * np.asarray(psi, dtype=float), 0.0)
    return GaugeFunction(grid, phi, mask)


def is_boundary_flat(phi, band=4, rtol=0.0):
    """Discrete H⁴₀ test: Φ vanishes on every node within ``band`` nodes of ∂Ω.

    Then all one-sided or centered stencils for Φ, ∇Φ, ΔΦ and ∇ΔΦ on the
    boundary layer see only zeros.
    """
    from scipy import ndimage
    m = phi.mask
    near = ndimage.binary_dilation(m.boundary, iterations=band) | ~m.inside
    scale = max(np.abs(phi.values).max(), 1e-300)
    return bool(np.abs(phi.values[near]).max(initial=0.0) <= rtol * scale)


# -- contractions -----------------------------------------------------------

def sym_g_identity(g):
    d = g.shape[0]
    eye = np.eye(d)
    t = (np.einsum("j...,kl->jkl...", g, eye) + np.einsum("k...,jl->jkl...", g, eye)
         + np.einsum("l...,jk->jkl...", g, eye))
    return t / 3.0


def contract(C, *parts):
    """Full contraction of C_jkl against the tensor product of ``parts``.

    ``parts`` fill the leading indices of C in order, e.g. contract(C, G, g)
    is Σ C_jkl G_jk g_l.  For a fully symmetric C every ordering agrees.
    """
    letters = "jkl"
    specs, pos = [], 0
    for p in parts:
        r = p.ndim - (C.ndim - 3)
        specs.append(letters[pos:pos + r] + "...")
        pos += r
    out = letters[pos:] + "..."
    return np.einsum("jkl...," + ",".join(specs) + "->" + out, C, *parts)


@dataclass(frozen=True, eq=False)
class PhiJets:
    g: np.ndarray
    G: np.ndarray
    T3: np.ndarray
    grad_lap: np.ndarray
    lap: np.ndarray
    bilap: np.ndarray


def phi_jets(phi, spacing):
    """Stencil derivatives of Φ needed by the transform."""
    d = len(spacing)
    g = fc.gradient(phi, spacing)
    G = fc.hessian(phi, spacing)
    T3 = np.empty((d, d, d) + np.shape(phi))
    for j in range(d):
        for k in range(d):
            for l in range(d):
                T3[j, k, l] = fc.ddd(phi, j, k, l, spacing)
    lap = fc.laplacian(phi, spacing)
    return PhiJets(g, G, T3, fc.gradient(lap, spacing), lap, fc.laplacian(lap, spacing))


def transform_from_jets(C, A, B, q, jets, convention="exact"):
    g, G, T3, glap, lap, bilap = jets.g, jets.G, jets.T3, jets.grad_lap, jets.lap, jets.bilap
    d = g.shape[0]
    eye = np.eye(d).reshape((d, d) + (1,) * (g.ndim - 1))
    gg = np.einsum("j...,j...->...", g, g)
    Gg = np.einsum("jk...,k...->j...", G, g)
    Ag = np.einsum("jk...,k...->j...", A, g)
    gAg = np.einsum("j...,j...->...", g, Ag)
    gGg = np.einsum("j...,j...->...", g, Gg)
    GG = np.einsum("jk...,jk...->...", G, G)
    AG = np.einsum("jk...,jk...->...", A, G)
    Bg = np.einsum("j...,j...->...", B, g)
    g_glap = np.einsum("j...,j...->...", g, glap)
    outer = np.einsum("j...,k...->jk...", g, g)
    Cg = contract(C, g)
    CG = contract(C, G)
    Cgg = contract(C, g, g)
    CT3 = contract(C, T3)
    CGg = contract(C, G, g)
    Cggg = contract(C, g, g, g)
    if convention == "exact":
        C2 = C - 4 * sym_g_identity(g)
        A2 = A - 4 * G + 4 * outer + 2 * (gg - lap) * eye - 3 * Cg
        B2 = B - 4 * glap + 8 * Gg - 4 * gg * g + 4 * lap * g - 2 * Ag - 3 * CG + 3 * Cgg
        q2 = (q + 2 * GG + 4 * g_glap - bilap - 4 * gGg + gg ** 2 - 2 * gg * lap + lap ** 2
              + gAg - AG - Bg - CT3 + 3 * CGg - Cggg)
    elif convention == "displayed":
        C2 = C - np.einsum("j...,kl->jkl...", g, np.eye(d))
        A2 = A - 4 * outer - 4 * G - (gg + lap) * eye - 3 * Cg
        B2 = B - 6 * lap * g - 4 * glap - 8 * Gg - 2 * gg * g - 2 * Ag - 3 * CG - 3 * Cgg
        q2 = (q - lap ** 2 - 2 * gg * lap - 4 * g_glap - bilap - 2 * GG - 4 * gGg - gg ** 2
              - CT3 - 3 * CGg - Cggg - AG - gAg - Bg)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return C2, A2, B2, q2


def gauge_transform(C, A, B, q, phi, spacing, convention="exact"):
    """Transformed (C', A', B', q') with Φ derivatives taken by stencils."""
    values = phi.values if isinstance(phi, GaugeFunction) else np.asarray(phi)
    if not np.any(values):
        return C, A, B, q
    return transform_from_jets(C, A, B, q, phi_jets(values, spacing), convention)


def apply_M(u, C, A, B, q, spacing):
    """Second-order stencil for M; valid at nodes two or more layers from the edge."""
    d = len(spacing)
    out = fc.bilaplacian(u, spacing) + q * u
    for j in range(d):
        if np.any(B[j]):
            out = out + B[j] * fc.d1(u, j, spacing)
        for k in range(d):
            if np.any(A[j, k]):
                out = out + A[j, k] * fc.dd(u, j, k, spacing)
            for l in range(d):
                if np.any(C[j, k, l]):
                    out = out + C[j, k, l] * fc.ddd(u, j, k, l, spacing)
    return out


def verify_conjugation_identity(u, C, A, B, q, phi, convention="exact", require_flat=True):
    """Relative interior residual ||M'(u e^Φ)|| / ||u e^Φ||."""
    if require_flat and not is_boundary_flat(phi):
        raise GaugeDomainError("Φ is not flat on the boundary band")
    grid = phi.grid
    h = grid.spacing
    C2, A2, B2, q2 = gauge_transform(C, A, B, q, phi, h, convention)
    v = u * np.exp(phi.values)
    inner = fc.interior_mask(grid.shape, 2)
    res = apply_M(v, C2, A2, B2, q2, h)
    return fc.l2_norm(res, grid, inner) / fc.l2_norm(v, grid, inner)


def boundary_traces(u, mask, order=3):
    """(u, ∂_ν u, ∂²_ν u, ∂³_ν u) at face nodes by one-sided inward differences."""
    grid = mask.grid
    h = grid.spacing
    idx = np.argwhere(mask.boundary)
    coef = [np.array([1.0]),
            np.array([-3.0, 4.0, -1.0]) / 2,
            np.array([2.0, -5.0, 4.0, -1.0]),
            np.array([-5.0, 18.0, -24.0, 14.0, -3.0]) / 2]
    out = np.zeros((order + 1, len(idx)), dtype=complex)
    for p, node in enumerate(idx):
        nrm = mask.normal[(slice(None),) + tuple(node)]
        j = int(np.argmax(np.abs(nrm)))
        s = int(np.sign(nrm[j]))
        for m in range(order + 1):
            acc = 0
            for t, c in enumerate(coef[m]):
                nn = node.copy()
                nn[j] -= s * t
                acc = acc + c * u[tuple(nn)]
            # derivative along the inward direction; flip odd orders to outward
            out[m, p] = acc / h[j] ** m * (-1) ** m
    return out


def verify_no_gauge_when_C_zero(phi, mask=None, tol=1e-12):
    """Discrete form of: ∇Φ = 0 with Φ ∈ H⁴₀ forces Φ = 0.

    ``phi`` is a GaugeFunction or a raw array together with ``mask`` (raw
    arrays allow building counterexamples that are not boundary flat).
    If ||∇Φ|| > tol the implication holds with a witness.  Otherwise Φ is
    rebuilt by integrating ∂_0Φ along grid lines starting from its value on
    the first closure node of each line, and the result must stay below
    tol·diam(Ω).  A constant nonzero Φ has a nonzero trace and fails.
    """
    if isinstance(phi, GaugeFunction):
        v, mask = phi.values, phi.mask
    else:
        v = np.asarray(phi, dtype=float)
    grid = mask.grid
    h = grid.spacing
    grad = fc.gradient(v, h)
    if np.abs(grad[:, mask.inside]).max(initial=0.0) > tol:
        return True
    diam = float(np.sqrt(sum((b - a) ** 2 for a, b in grid.extent)))
    closure = mask.closure
    worst = 0.0
    for rest in np.ndindex(*grid.shape[1:]):
        line = (slice(None),) + rest
        nodes = np.flatnonzero(closure[line])
        if nodes.size == 0:
            continue
        g = grad[0][line]
        acc = v[line][nodes[0]]
        worst = max(worst, abs(acc))
        for i in range(nodes[0] + 1, nodes[-1] + 1):
            acc += 0.5 * h[0] * (g[i] + g[i - 1])
            worst = max(worst, abs(acc))
    return bool(worst <= tol * diam)
