import numpy as np
import pytest
from hypothesis import given, strategies as st

from calderon_lab import field_core as fc
from conftest import bump


def spectral(f, grid, sym):
    return fc.fourier_multiplier(f, sym, grid).real


def test_grid_validation():
    with pytest.raises(fc.ShapeError):
        fc.Grid.cube(2, 4)
    with pytest.raises(fc.ShapeError):
        fc.Grid(((0, 1),), (16,))
    with pytest.raises(fc.ShapeError):
        fc.Grid(((1, 0), (0, 1)), (16, 16))
    g = fc.Grid.cube(3, 9)
    assert g.spacing == (0.25,) * 3
    assert fc.Grid.from_dict(g.to_dict()) == g


def test_field_shapes():
    g = fc.Grid.cube(2, 10)
    with pytest.raises(fc.ShapeError):
        fc.ScalarField(g, np.zeros((9, 10)))
    with pytest.raises(ValueError):
        fc.SymMatrixField(g, np.random.default_rng(0).normal(size=(2, 2, 10, 10)))
    f = fc.ScalarField(g, np.ones(g.shape))
    assert not f.values.flags.writeable


def test_directional_derivative_linear():
    g = fc.Grid.cube(3, 12)
    x = g.coords()
    nu = np.array([0.3, -1.2, 2.0])
    mu = np.array([1.0, 0.5, -0.25])
    f = sum(n * xj for n, xj in zip(nu, x))
    d = fc.directional_derivative(f, mu, g.spacing)
    inner = fc.interior_mask(g.shape, 1)
    assert np.allclose(d[inner], mu @ nu, atol=1e-12)


def test_directional_derivative_null_plane_wave():
    # (mu1 + i mu2) . xi = 0 kills e^{-ix.xi} up to stencil error
    g = fc.Grid.cube(3, 40)
    x = g.coords()
    mu1, mu2 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    xi = np.array([0, 0, 2.0])
    f = np.exp(-1j * sum(k * xj for k, xj in zip(xi, x)))
    d = fc.directional_derivative(f, mu1 + 1j * mu2, g.spacing)
    assert np.abs(d).max() < 1e-12


@pytest.mark.parametrize("dim", [2, 3])
def test_gradient_matches_spectral_oracle(dim):
    errs = []
    for n in (24, 48):
        g = fc.Grid.cube(dim, n)
        f = bump(g, 0.2, [0.1] * dim)
        inner = fc.interior_mask(g.shape, 1)
        d = fc.d1(f, 0, g.spacing)
        ref = spectral(f, g, lambda *k: 1j * k[0])
        errs.append(np.abs(d - ref)[inner].max())
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_bilaplacian_quartic_and_constant():
    g = fc.Grid.cube(2, 16)
    x = g.coords()
    inner = fc.interior_mask(g.shape, 2)
    assert np.allclose(fc.bilaplacian(x[0] ** 4, g.spacing)[inner], 24.0)
    assert np.allclose(fc.bilaplacian(np.full(g.shape, 3.0), g.spacing)[inner], 0.0)


def test_bilaplacian_matches_symbol_oracle():
    errs = []
    for n in (32, 64):
        g = fc.Grid.cube(2, n)
        f = bump(g, 0.15)
        inner = fc.interior_mask(g.shape, 2)
        ref = spectral(f, g, lambda *k: sum(kk ** 2 for kk in k) ** 2)
        errs.append(np.abs(fc.bilaplacian(f, g.spacing) - ref)[inner].max())
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_stencil_matrices_match_arrays(rng):
    g = fc.Grid((( -1, 1), (0, 2)), (9, 11))
    f = rng.normal(size=g.shape)
    for j in range(2):
        assert np.allclose((fc.d1_matrix(g, j) @ f.ravel()).reshape(g.shape), fc.d1(f, j, g.spacing))
        for k in range(2):
            assert np.allclose((fc.dd_matrix(g, j, k) @ f.ravel()).reshape(g.shape),
                               fc.dd(f, j, k, g.spacing))
    assert np.allclose((fc.laplacian_matrix(g) @ f.ravel()).reshape(g.shape), fc.laplacian(f, g.spacing))


def test_multiplier_identity_and_riesz_pair():
    g = fc.Grid.cube(3, 16)
    f = bump(g)
    assert np.allclose(fc.fourier_multiplier(f, lambda *k: 1.0, g), f)

    def riesz(j):
        return lambda *k: k[j] / (1j * np.sqrt(sum(kk ** 2 for kk in k)))
    rr = fc.fourier_multiplier(fc.fourier_multiplier(f, riesz(0), g, 0.0), riesz(1), g, 0.0)
    direct = fc.fourier_multiplier(f, lambda *k: -k[0] * k[1] / sum(kk ** 2 for kk in k), g, 0.0)
    assert np.abs(rr - direct).max() < 1e-14


def test_multiplier_singular_symbol():
    g = fc.Grid.cube(2, 8)
    with pytest.raises(fc.SingularSymbolError):
        fc.fourier_multiplier(np.ones(g.shape), lambda k0, k1: 1 / (k0 ** 2 + k1 ** 2), g)


def test_multiplier_inverts_dbar_squared():
    # u = m(xi) f with m = 1/(i xi_1 - xi_2)^2 solves (dt + i ds)^2 u = f for mean-free f
    g = fc.Grid.cube(2, 32)
    f = bump(g, 0.2, [0.2, 0.0]) - bump(g, 0.2, [-0.2, 0.0])
    f = f - f.mean()
    u = fc.fourier_multiplier(f, lambda k0, k1: 1 / (1j * k0 - k1) ** 2, g, at_zero=0.0)
    back = fc.fourier_multiplier(u, lambda k0, k1: (1j * k0 - k1) ** 2, g)
    assert np.abs(back - f).max() / np.abs(f).max() < 1e-10


def test_scl_norm_cases(rng):
    g = fc.Grid.cube(2, 16)
    f = rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)
    # s = 0: Parseval over the periodic embedding
    assert np.isclose(fc.scl_norm(f, 0, 0.3, g), fc.l2_norm(f, g))
    k = g.wavenumbers()
    k0 = (k[0].ravel()[3], k[1].ravel()[2])
    x = g.coords()
    mode = np.exp(1j * (k0[0] * (x[0] - x[0][0, 0]) + k0[1] * (x[1] - x[1][0, 0])))
    h = 0.2
    expect = (1 + h * h * (k0[0] ** 2 + k0[1] ** 2)) ** 0.5 * fc.l2_norm(mode, g)
    assert np.isclose(fc.scl_norm(mode, 1, h, g), expect)
    fh = np.fft.fftn(f)
    direct = 0.0
    for i in range(16):
        for j in range(16):
            kk = k[0].ravel()[i] ** 2 + k[1].ravel()[j] ** 2
            direct += (1 + h * h * kk) ** 2 * abs(fh[i, j]) ** 2
    direct = np.sqrt(direct * g.cell_volume / 256)
    assert np.isclose(fc.scl_norm(f, 2, h, g), direct, rtol=1e-12)


@given(s=st.floats(0, 4), h1=st.floats(0.05, 0.5), h2=st.floats(0.05, 0.5))
def test_scl_norm_monotone(s, h1, h2):
    g = fc.Grid.cube(2, 10)
    f = bump(g, 0.3)
    lo, hi = sorted((h1, h2))
    assert fc.scl_norm(f, s, lo, g) <= fc.scl_norm(f, s, hi, g) * (1 + 1e-12)
    assert fc.scl_norm(f, s, lo, g) >= fc.l2_norm(f, g) * (1 - 1e-12) or s == 0


def test_masks():
    g = fc.Grid.cube(2, 11)
    m = fc.box_mask(g, [-0.8, -0.8], [0.8, 0.8])
    assert not np.any(m.inside & m.boundary)
    # trapezoid boundary weights sum to the perimeter
    assert np.isclose(m.weights[m.boundary].sum(), 4 * 1.6)
    b = fc.ball_mask(g, [0, 0], 0.6)
    assert np.isclose(b.weights[b.boundary].sum(), 2 * np.pi * 0.6)
    with pytest.raises(ValueError):
        fc.box_mask(g, [-0.1, -0.1], [0.1, 0.1])


def test_support_margin():
    g = fc.Grid.cube(2, 21)
    assert fc.support_margin_ok(g, bump(g, 0.1), atol=1e-8)
    assert not fc.support_margin_ok(g, np.ones(g.shape))


@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_save_load_roundtrip(tmp_path, fmt, rng):
    g = fc.Grid.cube(2, 9)
    a = rng.normal(size=(2, 2) + g.shape)
    f = fc.SymMatrixField(g, a + np.swapaxes(a, 0, 1) + 1j)
    fc.save_field(tmp_path / "f", f, fmt)
    back = fc.load_field(tmp_path / "f")
    assert isinstance(back, fc.SymMatrixField)
    assert np.array_equal(back.values, f.values)
    assert back.grid == g
