import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from calderon_lab import field_core as fc
from calderon_lab import forward_solver as fs
from calderon_lab import cgo_builder as cb
from calderon_lab import reconstruct as rc
from conftest import bump


def space(n=24):
    return fc.Grid.cube(3, n)


def delta_of(g, dA=None, dB=None, dq=None):
    z = rc.CoefficientDelta.zeros(g)
    return rc.CoefficientDelta(g, z.dA if dA is None else dA, z.dB if dB is None else dB,
                               z.dq if dq is None else dq)


def iso(g, d):
    dA = np.zeros((3, 3) + g.shape)
    for j in range(3):
        dA[j, j] = d
    return dA


def random_params(rng, h=0.5):
    xi = rng.normal(size=3) * 4
    mu1, mu2 = rc.frame_for(xi)
    th = rng.uniform(0, 2 * np.pi)
    return cb.CGOParams(np.cos(th) * mu1 + np.sin(th) * mu2,
                        -np.sin(th) * mu1 + np.cos(th) * mu2, h, xi=xi)


def gaussian_hat(w, k2):
    return (2 * np.pi * w * w) ** 1.5 * np.exp(-w * w * k2 / 2)


# -- deltas and frames ------------------------------------------------------

def test_delta_validation():
    g = space(8)
    with pytest.raises(fc.ShapeError):
        rc.CoefficientDelta(g, np.zeros((3, 3, 4, 4, 4)), np.zeros((3,) + g.shape), np.zeros(g.shape))
    dA = np.zeros((3, 3) + g.shape)
    dA[0, 1] = 1.0
    with pytest.raises(ValueError):
        delta_of(g, dA=dA)
    assert delta_of(g).is_zero()
    assert delta_of(g, dA=iso(g, 2.0)).isotropic_part() is not None


def test_frames_orthonormal_and_transverse(rng):
    xi = rng.normal(size=(3, 50))
    xi[:, 0] = 0
    mu1, mu2 = rc.frames(xi)
    assert np.allclose(np.sum(mu1 * mu1, 0), 1) and np.allclose(np.sum(mu2 * mu2, 0), 1)
    assert np.abs(np.sum(mu1 * mu2, 0)).max() < 1e-14
    assert np.abs(np.sum(mu1 * xi, 0)).max() < 1e-13
    assert np.abs(np.sum(mu2 * xi, 0)).max() < 1e-13
    assert np.allclose(mu1[:, 0], [1, 0, 0]) and np.allclose(mu2[:, 0], [0, 1, 0])
    with pytest.raises(ValueError):
        rc.frames(np.ones((2, 4)))


def test_moments_need_three_dimensions():
    g = fc.Grid.cube(2, 8)
    d = rc.CoefficientDelta.zeros(space(8))
    with pytest.raises(cb.CGOParameterError):
        rc.moment_volume(d, cb.CGOParams([1, 0], [0, 1], 0.5), order=0)
    with pytest.raises(cb.CGOParameterError):
        rc.moment_table(rc.CoefficientDelta(g, np.zeros((2, 2) + g.shape), np.zeros((2,) + g.shape),
                                            np.zeros(g.shape)))


# -- moments ----------------------------------------------------------------

def test_zero_delta_gives_zero_moments(rng):
    d = rc.CoefficientDelta.zeros(space(8))
    p = random_params(rng)
    for order in rc.ORDERS:
        assert rc.moment_volume(d, p, order=order) == 0


def test_isotropic_leading_moments_vanish(rng):
    g = space(16)
    d = delta_of(g, dA=iso(g, bump(g, 0.25, [0.1, 0, -0.1])))
    scale = fc.l2_norm(bump(g, 0.25), g)
    for _ in range(5):
        p = random_params(rng)
        for bt, bs in (("exp", "one"), ("linear_exp", "linear"), ("linear_exp", "one")):
            assert abs(rc.moment_volume(d, p, bt, bs, -2)) < 1e-13 * scale


def test_dq_moment_matches_gaussian_transform():
    # ∫ e^{-|x|²/2w²} e^{-ix·ξ} dx = (2πw²)^{3/2} e^{-w²|ξ|²/2}
    g = space(32)
    w = 0.15
    d = delta_of(g, dq=bump(g, w))
    for xi in ([0, 0, 0], [np.pi, 0, 0], [np.pi, 2 * np.pi, -np.pi], [3 * np.pi, 0, 4 * np.pi]):
        mu1, mu2 = rc.frame_for(xi)
        m = rc.moment_volume(d, cb.CGOParams(mu1, mu2, 0.5, xi=xi), order=0)
        assert abs(m - gaussian_hat(w, np.dot(xi, xi))) <= 1e-8


def test_table_matches_direct_quadrature(rng):
    g = space(12)
    x = g.coords()
    b = bump(g, 0.3, [0.1, -0.1, 0.05])
    dA = np.zeros((3, 3) + g.shape)
    M = rng.normal(size=(3, 3))
    M = M + M.T
    for j in range(3):
        for k in range(3):
            dA[j, k] = M[j, k] * b
    d = delta_of(g, dA=dA, dB=np.stack([b * (1 + x[1]), -b, 0.5 * b]), dq=b * x[2])
    t = rc.moment_table(d)
    for idx in [(0, 0, 0), (1, 0, 0), (2, 11, 1), (3, 2, 10)]:
        xi = t.xi[(slice(None),) + idx]
        mu1, mu2 = t.mu1[(slice(None),) + idx], t.mu2[(slice(None),) + idx]
        for key in rc.TABLE_ENTRIES:
            order, bt, bs, s = key
            p = cb.CGOParams(mu1, s * mu2, 0.5, xi=xi)
            direct = rc.moment_volume(d, p, bt, bs, order)
            assert abs(t[key][idx] - direct) <= 1e-12 * max(1.0, abs(direct)), key


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_moments_are_linear_in_delta(a, b, seed):
    r = np.random.default_rng(seed)
    g = space(8)
    d1 = delta_of(g, dA=iso(g, bump(g, 0.3)), dq=bump(g, 0.2, [0.2, 0, 0]))
    d2 = delta_of(g, dB=np.stack([bump(g, 0.3)] * 3), dq=bump(g, 0.3))
    comb = delta_of(g, a * d1.dA + b * d2.dA, a * d1.dB + b * d2.dB, a * d1.dq + b * d2.dq)
    p = random_params(r)
    order = int(r.integers(-2, 1))
    lhs = rc.moment_volume(comb, p, order=order)
    rhs = a * rc.moment_volume(d1, p, order=order) + b * rc.moment_volume(d2, p, order=order)
    assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))


def test_unknown_amplitude_is_rejected(rng):
    d = delta_of(space(8))
    with pytest.raises(cb.CGOParameterError):
        rc.moment_volume(d, random_params(rng), "cubic", "one", 0)
    with pytest.raises(cb.CGOParameterError):
        rc.moment_volume(d, random_params(rng), "one", "exp", 0)


# -- projection, Riesz and decomposition ------------------------------------

@given(st.integers(0, 2 ** 16))
def test_projection_symbol_invariants(seed):
    r = np.random.default_rng(seed)
    xi = r.normal(size=(3, 20)) * 5
    mu1, mu2 = rc.frames(xi)
    d = r.normal(size=20) + 1j * r.normal(size=20)
    F = rc.projection_symbol(d, xi)
    fx, fdiag, foff = rc.projection_defects(F, xi, mu1, mu2)
    assert max(fx, fdiag, foff) <= 1e-12 * np.abs(d).max() * (1 + np.abs(xi).max())
    assert np.allclose(np.einsum("jj...->...", F), 2 * d)


def test_riesz_squares_sum_to_minus_identity():
    g = space(16)
    f = bump(g, 0.2) * (1 + g.coords()[0])
    f = f - f.mean()
    total = sum(rc.riesz_transform(rc.riesz_transform(f, j, g), j, g) for j in range(3))
    assert np.abs(total + f).max() < 1e-12 * np.abs(f).max()


def test_riesz_projection_is_divergence_free():
    g = space(16)
    F = rc.riesz_projection(bump(g, 0.2), g)
    assert np.abs(rc.divergence(F, g)).max() < 1e-10 * np.abs(F).max()
    assert np.allclose(F, np.swapaxes(F, 0, 1))


def test_pure_symmetric_gradient_has_no_solenoidal_part():
    g = space(24)
    x = g.coords()
    V = np.stack([bump(g, 0.2), x[0] * bump(g, 0.2), np.sin(np.pi * x[2]) * bump(g, 0.25)])
    S = rc.sym_gradient(V, g)
    dec = rc.tensor_decompose(S, g)
    assert np.abs(dec.F).max() < 1e-10 * np.abs(S).max()
    assert dec.roundtrip_defect < 1e-12


def test_solenoidal_input_has_no_potential_part():
    g = space(24)
    S = rc.riesz_projection(bump(g, 0.2), g)
    dec = rc.tensor_decompose(S, g)
    assert np.abs(dec.V).max() < 1e-10
    assert np.abs(dec.F - S).max() < 1e-10 * np.abs(S).max()
    assert dec.div_defect < 1e-10


def test_decomposition_matches_dense_oracle(rng):
    g = space(8)
    M = rng.normal(size=(3, 3))
    S = (M + M.T).reshape((3, 3, 1, 1, 1)) * bump(g, 0.3)
    F, _ = rc.dense_decompose(S, g)
    assert np.abs(rc.tensor_decompose(S, g).F - F).max() < 1e-8 * np.abs(S).max()
    with pytest.raises(fc.ShapeError):
        rc.tensor_decompose(S[:, :, :4], g)


# -- recovery stages --------------------------------------------------------

def rel(a, b, g):
    return fc.l2_norm(np.asarray(a) - b, g) / fc.l2_norm(b, g)


def test_isotropic_second_order_recovery():
    g = space(32)
    d = 0.5 * bump(g, 0.15, [0.1, 0, 0])
    sec = rc.recover_second_order(delta_of(g, dA=iso(g, d)))
    assert rel(sec.d_sharp, d, g) <= 0.02
    assert sec.flags["p_null"] and sec.flags["p_norm"] <= 1e-6
    assert sec.flags["projection_defect"] < 1e-12


def test_hessian_second_order_recovery():
    # dA = ∇²p with p Gaussian: d_# = 0 and p is read off
    g = space(32)
    x = g.coords()
    w = 0.15
    p = bump(g, w)
    H = np.zeros((3, 3) + g.shape)
    for j in range(3):
        for k in range(3):
            H[j, k] = (x[j] * x[k] / w ** 4 - (j == k) / w ** 2) * p
    sec = rc.recover_second_order(delta_of(g, dA=H))
    assert fc.l2_norm(sec.d_sharp, g) <= 0.02 * fc.l2_norm(p / w ** 2, g)
    assert rel(sec.p, p, g) <= 0.02
    assert not sec.flags["p_null"]
    with pytest.raises(rc.InconsistencyError):
        rc.recover_second_order(delta_of(g, dA=H), require_p_null=True)


def test_anisotropic_leading_term_is_inconsistent():
    g = space(16)
    dA = np.zeros((3, 3) + g.shape)
    dA[0, 0] = bump(g, 0.2)
    with pytest.raises(rc.InconsistencyError) as err:
        rc.recover_second_order(delta_of(g, dA=dA))
    assert err.value.stage == "second_order" and err.value.defect > 0


def test_gradient_first_order_recovery():
    g = space(32)
    x = g.coords()
    w = 0.15
    phi = bump(g, w, [0, 0.1, 0])
    dB = np.stack([-(x[0]) / w ** 2 * phi, -(x[1] - 0.1) / w ** 2 * phi, -x[2] / w ** 2 * phi])
    d = delta_of(g, dB=dB)
    sec = rc.recover_second_order(d)
    first = rc.recover_first_order(d, sec)
    assert first.flags["curl_defect"] <= 1e-6
    assert rel(first.Phi, phi, g) <= 0.02
    assert rel(first.dB, dB, g) <= 0.02


def test_rotational_first_order_is_inconsistent():
    g = space(24)
    x = g.coords()
    b = bump(g, 0.2)
    d = delta_of(g, dB=np.stack([-x[1] * b, x[0] * b, 0 * b]))
    sec = rc.recover_second_order(d)
    with pytest.raises(rc.InconsistencyError) as err:
        rc.recover_first_order(d, sec)
    assert err.value.stage == "first_order"


def test_zeroth_order_recovery():
    g = space(32)
    dq = bump(g, 0.15, [0.1, -0.05, 0.05])
    d = delta_of(g, dq=dq)
    sec = rc.recover_second_order(d)
    first = rc.recover_first_order(d, sec)
    assert rel(rc.recover_zeroth_order(d, sec, first), dq, g) <= 0.01


def test_full_oracle_pipeline_and_report(tmp_path):
    g = space(32)
    d = delta_of(g, dA=iso(g, 0.5 * bump(g, 0.15)), dq=bump(g, 0.2, [0.1, -0.05, 0.05]))
    rep = rc.full_pipeline(d)
    assert rep.errors["second_order:d_sharp"] <= 0.02
    assert rep.errors["zeroth_order:dq"] <= 0.02
    assert rep.flags == {"eigen_ok": True, "curl_ok": True, "p_null": True, "phi_null": True}
    s = rep.to_json()
    assert s == rep.to_json()
    again = rc.full_pipeline(d)
    assert again.errors == rep.errors and again.flags == rep.flags
    data = json.loads(s)
    assert set(data) == {"mode", "errors", "flags", "timings", "info"}
    path = tmp_path / "errors.csv"
    rep.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["stage", "quantity", "relative_l2_error"]
    assert sorted(r[0] + ":" + r[1] for r in rows[1:]) == sorted(rep.errors)


def test_all_zero_pipeline():
    rep = rc.full_pipeline(rc.CoefficientDelta.zeros(space(16)))
    assert all(v == 0 for v in rep.errors.values())
    assert all(rep.flags.values())


def test_pipeline_errors():
    g = space(8)
    with pytest.raises(ValueError):
        rc.full_pipeline(rc.CoefficientDelta.zeros(g), mode="magic")
    with pytest.raises(ValueError):
        rc.full_pipeline(delta_of(g, dA=iso(g, bump(g))), mode="boundary")


# -- boundary moments -------------------------------------------------------

def test_identical_operators_give_zero_boundary_moment():
    g = space(16)
    co = fs.CoefficientSet.zeros(g)
    co = fs.CoefficientSet(g, co.A, co.B, 0.5 * bump(g, 0.25))
    xi = np.array([0, 0, np.pi])
    mu1, mu2 = rc.frame_for(xi)
    p = cb.CGOParams(mu1, mu2, 0.9, xi=xi)
    cache = rc.SolverCache(rc.default_mask(g))
    v = rc.moment_boundary(co, co, p, cache=cache)
    assert abs(v) < 1e-10
    assert len(cache) == 1
    with pytest.raises(ValueError):
        rc.moment_boundary(co, co, p, mask=rc.default_mask(g), cache=cache)
