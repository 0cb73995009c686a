"""Uniform grids, node fields, second-order stencils and FFT multipliers.

Every stencil acts on the trailing ``dim`` axes of an array, so a vector or
matrix field stored as ``(dim, *shape)`` or ``(dim, dim, *shape)`` can be
differentiated component-wise in one call.  Stencils leave the outermost
node layers they cannot reach set to zero; callers restrict to interior
nodes with :func:`interior_mask`.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage


class ShapeError(ValueError):
    pass


class SingularSymbolError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    extent: tuple
    n_points: tuple
    periodic: bool = True

    def __post_init__(self):
        extent = tuple((float(a), float(b)) for a, b in self.extent)
        n_points = tuple(int(n) for n in self.n_points)
        if len(extent) != len(n_points) or len(extent) not in (2, 3):
            raise ShapeError("grid dimension must be 2 or 3")
        if min(n_points) < 8:
            raise ShapeError("need at least 8 points per axis")
        if any(b <= a for a, b in extent):
            raise ShapeError("empty extent")
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "n_points", n_points)

    @classmethod
    def cube(cls, dim, n, lo=-1.0, hi=1.0):
        return cls(((lo, hi),) * dim, (n,) * dim)

    @property
    def dim(self):
        return len(self.n_points)

    @property
    def shape(self):
        return self.n_points

    @property
    def spacing(self):
        return tuple((b - a) / (n - 1) for (a, b), n in zip(self.extent, self.n_points))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def axes(self):
        return [np.linspace(a, b, n) for (a, b), n in zip(self.extent, self.n_points)]

    def coords(self):
        return np.meshgrid(*self.axes(), indexing="ij")

    def wavenumbers(self, zero_nyquist=False):
        """Broadcastable FFT dual-grid wavenumbers (period n*dx per axis)."""
        out = []
        for j, (n, dx) in enumerate(zip(self.n_points, self.spacing)):
            k = 2 * np.pi * np.fft.fftfreq(n, d=dx)
            if zero_nyquist and n % 2 == 0:
                k[n // 2] = 0.0
            shape = [1] * self.dim
            shape[j] = n
            out.append(k.reshape(shape))
        return out

    def nyquist(self):
        return min(np.pi / dx for dx in self.spacing)

    def to_dict(self):
        return {"extent": [list(e) for e in self.extent], "n_points": list(self.n_points),
                "periodic": self.periodic}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(e) for e in d["extent"]), tuple(d["n_points"]),
                   bool(d.get("periodic", True)))


def _frozen(values, dtype=complex):
    a = np.array(values, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray
    kind = "scalar"

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != self.grid.shape:
            raise ShapeError(f"scalar field shape {v.shape} != grid {self.grid.shape}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: Grid
    values: np.ndarray
    kind = "vector"

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (self.grid.dim,) + self.grid.shape:
            raise ShapeError(f"vector field shape {v.shape} does not match grid")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class SymMatrixField:
    grid: Grid
    values: np.ndarray
    kind = "symmatrix"

    def __post_init__(self):
        v = _frozen(self.values)
        d = self.grid.dim
        if v.shape != (d, d) + self.grid.shape:
            raise ShapeError(f"matrix field shape {v.shape} does not match grid")
        if not np.array_equal(v, np.swapaxes(v, 0, 1)):
            raise ValueError("matrix field is not symmetric node-wise")
        object.__setattr__(self, "values", v)


_FIELD_KINDS = {"scalar": ScalarField, "vector": VectorField, "symmatrix": SymMatrixField}


# -- stencils ---------------------------------------------------------------

def _ax(f, dim, j):
    return f.ndim - dim + j


def _sl(ndim, axis, s):
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def d1(f, j, spacing):
    """Centered first difference along spatial axis j."""
    f = np.asarray(f)
    dim = len(spacing)
    a = _ax(f, dim, j)
    if f.shape[a] < 3:
        raise ShapeError("axis too short for centered difference")
    out = np.zeros(f.shape, dtype=np.result_type(f, float))
    out[_sl(f.ndim, a, slice(1, -1))] = (f[_sl(f.ndim, a, slice(2, None))]
                                         - f[_sl(f.ndim, a, slice(None, -2))]) / (2 * spacing[j])
    return out


def d2(f, j, spacing):
    """Compact second difference along spatial axis j."""
    f = np.asarray(f)
    dim = len(spacing)
    a = _ax(f, dim, j)
    if f.shape[a] < 3:
        raise ShapeError("axis too short for second difference")
    out = np.zeros(f.shape, dtype=np.result_type(f, float))
    out[_sl(f.ndim, a, slice(1, -1))] = (f[_sl(f.ndim, a, slice(2, None))]
                                         - 2 * f[_sl(f.ndim, a, slice(1, -1))]
                                         + f[_sl(f.ndim, a, slice(None, -2))]) / spacing[j] ** 2
    return out


def dd(f, j, k, spacing):
    """Second derivative stencil: compact on the diagonal, composed centered off it."""
    if j == k:
        return d2(f, j, spacing)
    return d1(d1(f, j, spacing), k, spacing)


def ddd(f, j, k, l, spacing):
    """Third derivative stencil built from d2 on repeated and d1 on single indices."""
    idx = sorted((j, k, l))
    counts = {i: idx.count(i) for i in set(idx)}
    out = f
    for i, c in sorted(counts.items()):
        if c == 1:
            out = d1(out, i, spacing)
        elif c == 2:
            out = d2(out, i, spacing)
        else:
            out = d1(d2(out, i, spacing), i, spacing)
    return out


def gradient(f, spacing):
    return np.stack([d1(f, j, spacing) for j in range(len(spacing))])


def hessian(f, spacing):
    n = len(spacing)
    return np.stack([np.stack([dd(f, j, k, spacing) for k in range(n)]) for j in range(n)])


def laplacian(f, spacing):
    return sum(d2(f, j, spacing) for j in range(len(spacing)))


def bilaplacian(f, spacing):
    f = np.asarray(f)
    dim = len(spacing)
    if min(f.shape[-dim:]) < 5:
        raise ShapeError("grid too small for the bilaplacian")
    return laplacian(laplacian(f, spacing), spacing)


def directional_derivative(f, mu, spacing):
    """(mu . grad) f with centered differences; mu may be complex."""
    f = np.asarray(f)
    mu = np.asarray(mu)
    if mu.shape != (len(spacing),):
        raise ShapeError("direction has wrong length")
    if not np.any(mu):
        raise ValueError("direction must be nonzero")
    out = 0
    for j, m in enumerate(mu):
        if m != 0:
            out = out + m * d1(f, j, spacing)
    if np.isscalar(out):
        out = np.zeros(f.shape, dtype=complex)
    return out


def interior_mask(shape, width):
    m = np.zeros(shape, dtype=bool)
    m[tuple(slice(width, n - width) for n in shape)] = True
    return m


# -- sparse stencil matrices (C-order raveling) -----------------------------

def _d1_1d(n, dx):
    m = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1], format="lil") / (2 * dx)
    m[0, :] = 0
    m[n - 1, :] = 0
    return m.tocsr()


def _d2_1d(n, dx):
    m = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="lil") / dx ** 2
    m[0, :] = 0
    m[n - 1, :] = 0
    return m.tocsr()


def _lift(grid, j, m1):
    mats = [sp.identity(n, format="csr") for n in grid.shape]
    mats[j] = m1
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


def d1_matrix(grid, j):
    return _lift(grid, j, _d1_1d(grid.shape[j], grid.spacing[j]))


def d2_matrix(grid, j):
    return _lift(grid, j, _d2_1d(grid.shape[j], grid.spacing[j]))


def dd_matrix(grid, j, k):
    if j == k:
        return d2_matrix(grid, j)
    return (d1_matrix(grid, k) @ d1_matrix(grid, j)).tocsr()


def laplacian_matrix(grid):
    return sum(d2_matrix(grid, j) for j in range(grid.dim)).tocsr()


# -- Fourier side -----------------------------------------------------------

def fourier_multiplier(f, symbol, grid, at_zero=None):
    """Apply the multiplier m(xi) on the periodic embedding of ``grid``.

    ``symbol`` is called with the broadcastable wavenumber arrays.  Its value
    at xi = 0 is replaced by ``at_zero`` when given; any other non-finite
    value raises SingularSymbolError.
    """
    f = np.asarray(f)
    axes = tuple(range(f.ndim - grid.dim, f.ndim))
    if f.shape[-grid.dim:] != grid.shape:
        raise ShapeError("field does not live on this grid")
    xi = grid.wavenumbers()
    with np.errstate(all="ignore"):
        m = np.broadcast_to(np.asarray(symbol(*xi), dtype=complex), grid.shape).copy()
    if at_zero is not None:
        m[(0,) * grid.dim] = at_zero
    if not np.all(np.isfinite(m)):
        raise SingularSymbolError("symbol is not finite at some discrete frequency")
    return np.fft.ifftn(m * np.fft.fftn(f, axes=axes), axes=axes)


def l2_norm(f, grid, mask=None):
    f = np.asarray(f)
    w = np.abs(f) ** 2
    if mask is not None:
        w = w[..., mask]
    return float(np.sqrt(w.sum() * grid.cell_volume))


def scl_norm(f, s, h, grid):
    """Discrete semiclassical H^s norm, ||<hD>^s f||, computed spectrally."""
    if h <= 0:
        raise ValueError("h must be positive")
    f = np.asarray(f)
    if f.shape[-grid.dim:] != grid.shape:
        raise ShapeError("field does not live on this grid")
    axes = tuple(range(f.ndim - grid.dim, f.ndim))
    fh = np.fft.fftn(f, axes=axes)
    k2 = sum(k ** 2 for k in grid.wavenumbers())
    weight = (1.0 + h * h * k2) ** s
    total = np.sum(weight * np.abs(fh) ** 2) * grid.cell_volume / np.prod(grid.shape)
    return float(np.sqrt(total))


# -- domains ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DomainMask:
    grid: Grid
    inside: np.ndarray
    boundary: np.ndarray
    normal: np.ndarray
    weights: np.ndarray
    shape_kind: str = "box"

    def __post_init__(self):
        if np.any(self.inside & self.boundary):
            raise ValueError("inside and boundary overlap")
        nrm = np.linalg.norm(self.normal[:, self.boundary], axis=0)
        if nrm.size and not np.allclose(nrm, 1.0):
            raise ValueError("boundary normals must be unit vectors")

    @property
    def closure(self):
        return self.inside | self.boundary

    def boundary_index(self):
        return np.flatnonzero(self.boundary.ravel())


def box_mask(grid, lo=None, hi=None):
    """Box domain snapped to grid nodes; the boundary is the face layer."""
    lo = [a for a, _ in grid.extent] if lo is None else lo
    hi = [b for _, b in grid.extent] if hi is None else hi
    h = grid.spacing
    i0 = [int(round((l - a) / dx)) for l, (a, _), dx in zip(lo, grid.extent, h)]
    i1 = [int(round((u - a) / dx)) for u, (a, _), dx in zip(hi, grid.extent, h)]
    if any(a < 0 or b > n - 1 or b - a < 4 for a, b, n in zip(i0, i1, grid.shape)):
        raise ValueError("box must lie on the grid with at least 5 nodes per axis")
    idx = np.indices(grid.shape)
    region = np.ones(grid.shape, dtype=bool)
    for j in range(grid.dim):
        region &= (idx[j] >= i0[j]) & (idx[j] <= i1[j])
    normal = np.zeros((grid.dim,) + grid.shape)
    for j in range(grid.dim):
        normal[j][region & (idx[j] == i0[j])] = -1.0
        normal[j][region & (idx[j] == i1[j])] = 1.0
    boundary = region & np.any(normal != 0, axis=0)
    inside = region & ~boundary
    nrm = np.linalg.norm(normal, axis=0)
    normal[:, boundary] /= nrm[boundary]
    # each node collects the trapezoid weight of every face it lies on
    weights = np.zeros(grid.shape)
    for j in range(grid.dim):
        for side in (i0[j], i1[j]):
            face = region & (idx[j] == side)
            w = np.ones(grid.shape)
            for t in range(grid.dim):
                if t == j:
                    continue
                w = w * h[t]
                w[(idx[t] == i0[t]) | (idx[t] == i1[t])] *= 0.5
            weights[face] += w[face]
    return DomainMask(grid, inside, boundary, normal, weights, "box")


def ball_mask(grid, center, radius):
    """Ball domain: the boundary is the full-connectivity dilation layer."""
    x = grid.coords()
    r2 = sum((xj - c) ** 2 for xj, c in zip(x, center))
    inside = r2 < radius ** 2
    struct = ndimage.generate_binary_structure(grid.dim, grid.dim)
    boundary = ndimage.binary_dilation(inside, structure=struct) & ~inside
    if np.any(boundary & ~interior_mask(grid.shape, 1)):
        raise ValueError("ball touches the grid edge")
    r = np.sqrt(r2)
    normal = np.zeros((grid.dim,) + grid.shape)
    for j in range(grid.dim):
        normal[j][boundary] = (x[j][boundary] - center[j]) / r[boundary]
    area = 2 * np.pi * radius if grid.dim == 2 else 4 * np.pi * radius ** 2
    weights = np.where(boundary, area / max(boundary.sum(), 1), 0.0)
    return DomainMask(grid, inside, boundary, normal, weights, "ball")


def support_margin_ok(grid, values, frac=0.1, atol=0.0):
    """True when the nonzero set of ``values`` keeps a ``frac`` margin per side."""
    values = np.asarray(values)
    nz = np.abs(values).reshape((-1,) + grid.shape).max(axis=0) > atol
    if not nz.any():
        return True
    for j, ((a, b), ax) in enumerate(zip(grid.extent, grid.axes())):
        m = frac * (b - a)
        used = ax[np.any(nz, axis=tuple(t for t in range(grid.dim) if t != j))]
        if used.min() < a + m or used.max() > b - m:
            return False
    return True


# -- serialization ----------------------------------------------------------

def save_field(path, field, fmt="binary"):
    """Write ``path``.json header plus ``path``.bin (or .csv) node values."""
    path = Path(path)
    header = {"kind": field.kind, "grid": field.grid.to_dict(), "dtype": "complex128",
              "shape": list(field.values.shape), "format": fmt}
    path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True))
    vals = np.ascontiguousarray(field.values, dtype="<c16")
    if fmt == "binary":
        path.with_suffix(".bin").write_bytes(vals.tobytes())
    elif fmt == "csv":
        flat = vals.reshape(-1)
        np.savetxt(path.with_suffix(".csv"), np.column_stack([flat.real, flat.imag]),
                   delimiter=",", header="re,im", comments="", fmt="%.17g")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_field(path):
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    grid = Grid.from_dict(header["grid"])
    shape = tuple(header["shape"])
    if header["format"] == "binary":
        vals = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<c16").reshape(shape)
    else:
        raw = np.loadtxt(path.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
        vals = (raw[:, 0] + 1j * raw[:, 1]).reshape(shape)
    return _FIELD_KINDS[header["kind"]](grid, vals)
