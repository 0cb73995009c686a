"""Named experiments behind the command line runner.

Each runner takes a parsed configuration and returns an ExperimentResult
holding metrics, tolerance checks and CSV tables.  Runners are
deterministic: every random draw comes from the configured seed.
"""

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import cgo_builder as cb
from . import field_core as fc
from . import forward_solver as fs
from . import gauge as ga
from . import reconstruct as rc
from . import transport2d as t2

CATALOG = {
    "forward": "manufactured-solution convergence of the Navier solver and Green-pairing symmetry",
    "dn-map": "assemble the discrete Dirichlet-to-Neumann map and write it to CSV",
    "gauge-check": "gauge conjugation residual order or boundary-trace invariance",
    "carleman": "smallest singular values of the conjugated 2-D operators over a tau sweep",
    "cgo": "build CGO solutions for a list of h and report transport and remainder diagnostics",
    "reconstruct": "moment identities, tensor decomposition, projection and recovery pipeline",
    "decay-study": "log-log slope of the amplitude correction or the CGO remainder",
}


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class NumericalError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"numerical failure in stage {stage!r}: {cause}")
        self.stage = stage


@dataclass
class Check:
    name: str
    value: float
    lo: float = None
    hi: float = None

    @property
    def ok(self):
        if self.value is None or (isinstance(self.value, float) and math.isnan(self.value)):
            return False
        if self.lo is not None and self.value < self.lo:
            return False
        if self.hi is not None and self.value > self.hi:
            return False
        return True

    def describe(self):
        if self.lo is not None and self.hi is not None:
            bound = f"in [{self.lo:g}, {self.hi:g}]"
        elif self.hi is not None:
            bound = f"<= {self.hi:g}"
        else:
            bound = f">= {self.lo:g}"
        return f"{self.name} = {self.value:.6g} ({bound})"


@dataclass
class ExperimentResult:
    kind: str
    name: str
    metrics: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.ok for c in self.checks)

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "passed": self.passed,
                "metrics": _plain(self.metrics),
                "checks": [{"name": c.name, "value": _plain(c.value), "lo": c.lo, "hi": c.hi,
                            "ok": c.ok} for c in self.checks]}

    def summary(self):
        lines = [f"experiment {self.name} ({self.kind}): {'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            lines.append(f"  [{'PASS' if c.ok else 'FAIL'}] {c.describe()}")
        for k in sorted(self.timings):
            lines.append(f"  time {k}: {self.timings[k]:.2f} s")
        return "\n".join(lines)


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, (complex, np.complexfloating)):
        return [float(v.real), float(v.imag)]
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


# -- configuration helpers --------------------------------------------------

def _get(cfg, path, default=None, required=False):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(path, "missing required field")
            return default
        node = node[part]
    return node


def _tol(cfg, key, default, tol_scale):
    val = _get(cfg, f"tolerances.{key}", default)
    if isinstance(val, (list, tuple)):
        lo, hi = float(val[0]), float(val[1])
        mid = 0.5 * (lo + hi)
        return mid - (mid - lo) * tol_scale, mid + (hi - mid) * tol_scale
    return float(val) * tol_scale


def make_grid(cfg, n=None, dim=None):
    g = _get(cfg, "grid", required=True)
    dim = dim or int(_get(cfg, "grid.dim", required=True))
    if n is None:
        n = _get(cfg, "grid.n", required=True)
        n = n[0] if isinstance(n, list) else n
    lo, hi = _get(cfg, "grid.extent", [-1.0, 1.0])
    if not isinstance(g, dict):
        raise ConfigError("grid", "must be a table")
    return fc.Grid(((float(lo), float(hi)),) * dim, (int(n),) * dim)


def _gauss(grid, center, width):
    x = grid.coords()
    c = (list(center) + [0.0] * 3)[:grid.dim]
    r2 = sum((xj - cj) ** 2 for xj, cj in zip(x, c))
    return np.exp(-r2 / (2 * width ** 2)), [xj - cj for xj, cj in zip(x, c)]


def _amp(v):
    if isinstance(v, (list, tuple)):
        return complex(v[0], v[1])
    return complex(v)


def build_fields(grid, terms, where="coefficients"):
    """(A, B, q) from named analytic families."""
    d = grid.dim
    A = np.zeros((d, d) + grid.shape, complex)
    B = np.zeros((d,) + grid.shape, complex)
    q = np.zeros(grid.shape, complex)
    for i, t in enumerate(terms or []):
        path = f"{where}[{i}]"
        fam = t.get("family")
        target = t.get("target")
        if fam is None:
            raise ConfigError(path + ".family", "missing required field")
        if target not in ("A", "B", "q"):
            raise ConfigError(path + ".target", "must be one of A, B, q")
        amp = _amp(t.get("amplitude", 1.0))
        width = float(t.get("width", 0.2))
        if width <= 0:
            raise ConfigError(path + ".width", "must be positive")
        G, dx = _gauss(grid, t.get("center", [0.0, 0.0, 0.0]), width)
        G = amp * G
        if fam == "gaussian-bump":
            if target == "A":
                for j in range(d):
                    A[j, j] += G
            elif target == "B":
                vec = t.get("vector")
                if vec is None:
                    raise ConfigError(path + ".vector", "a vector is needed for target B")
                for j in range(d):
                    B[j] += vec[j] * G
            else:
                q += G
        elif fam == "anisotropic-bump":
            if target != "A":
                raise ConfigError(path + ".target", "anisotropic-bump applies to A")
            M = np.asarray(t.get("matrix", np.eye(d)), float)[:d, :d]
            if not np.allclose(M, M.T):
                raise ConfigError(path + ".matrix", "must be symmetric")
            A += M.reshape((d, d) + (1,) * d) * G
        elif fam == "hessian":
            if target != "A":
                raise ConfigError(path + ".target", "hessian applies to A")
            for j in range(d):
                for k in range(d):
                    A[j, k] += G * (dx[j] * dx[k] / width ** 4 - (j == k) / width ** 2)
        elif fam == "gradient-field":
            if target != "B":
                raise ConfigError(path + ".target", "gradient-field applies to B")
            for j in range(d):
                B[j] += -G * dx[j] / width ** 2
        else:
            raise ConfigError(path + ".family", f"unknown family {fam!r}")
    return A, B, q


def _coefficients(grid, cfg, key="coefficients"):
    A, B, q = build_fields(grid, _get(cfg, key, []), key)
    return fs.CoefficientSet(grid, A, B, q)


def _slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# -- forward ----------------------------------------------------------------

_EIG = (-4.0, 1.0, -1.0)


def _manufactured(grid):
    """u = sin(2x) e^y cos(z) with its gradient and Hessian."""
    x = grid.coords()
    f = [np.sin(2 * x[0]), np.exp(x[1]), np.cos(x[2]) if grid.dim == 3 else None][:grid.dim]
    fp = [2 * np.cos(2 * x[0]), np.exp(x[1]), -np.sin(x[2]) if grid.dim == 3 else None][:grid.dim]
    u = np.prod(f, axis=0)
    grad = [np.prod([fp[j] if t == j else f[t] for t in range(grid.dim)], axis=0)
            for j in range(grid.dim)]
    hess = [[(_EIG[j] * u if j == k else
              np.prod([fp[t] if t in (j, k) else f[t] for t in range(grid.dim)], axis=0))
             for k in range(grid.dim)] for j in range(grid.dim)]
    lam = sum(_EIG[:grid.dim])
    return u, grad, hess, lam


def run_forward(cfg, tol_scale=1.0):
    res = ExperimentResult("forward", cfg.get("name", "forward"))
    dim = int(_get(cfg, "grid.dim", required=True))
    ns = _get(cfg, "grid.n", required=True)
    if not isinstance(ns, list) or len(ns) < 2:
        raise ConfigError("grid.n", "need at least two resolutions")
    rows, errs, hs = [], [], []
    t0 = time.perf_counter()
    for n in ns:
        g = make_grid(cfg, n, dim)
        co = _coefficients(g, cfg)
        u, grad, hess, lam = _manufactured(g)
        Lu = lam ** 2 * u - sum(co.A[j, k] * hess[j][k] for j in range(dim) for k in range(dim)) \
            - 1j * sum(co.B[j] * grad[j] for j in range(dim)) + co.q * u
        mask = fc.box_mask(g)
        bc = fs.NavierBoundaryData.from_fields(mask, u, -lam * u)
        try:
            U = fs.solve_navier(co, mask, bc, Lu)
        except fs.ZeroEigenvalueError as exc:
            raise NumericalError("forward_solve", exc) from exc
        e = fc.l2_norm(U - u, g)
        errs.append(e)
        hs.append(g.spacing[0])
        rows.append([n, g.spacing[0], e])
    res.timings["convergence"] = time.perf_counter() - t0
    order = _slope(hs, errs)
    res.metrics.update({"errors": errs, "h": hs, "order": order})
    res.tables["convergence"] = (["n", "h", "l2_error"], rows)
    lo, hi = _tol(cfg, "order", [1.7, 2.3], tol_scale)
    res.checks.append(Check("observed_order", order, lo, hi))

    t0 = time.perf_counter()
    green = []
    for n in ns[-2:]:
        g = make_grid(cfg, n, dim)
        _, _, q = build_fields(g, _get(cfg, "green.coefficients", []), "green.coefficients")
        q = q + complex(_get(cfg, "green.q0", 1.0))
        if np.any(q.imag):
            raise ConfigError("green", "self-adjoint check needs a real potential")
        co = fs.CoefficientSet(g, np.zeros((dim, dim) + g.shape), np.zeros((dim,) + g.shape), q)
        mask = fc.box_mask(g)
        b = mask.boundary
        x = g.coords()
        f = (np.cos(x[0] + 2 * x[-1])[b], np.sin(x[0] * x[-1] + 1)[b])
        h_ = (np.exp(x[0] - x[-1])[b], (x[0] ** 2 - x[-1])[b])
        S = fs.NavierSolver(co, mask)
        u, w = S.solve(*f)
        v, z = S.solve(*h_)
        G = fs.green_pairing(mask, f, h_, fs.neumann_traces(mask, u, w), fs.neumann_traces(mask, v, z))
        green.append(G)
    res.timings["green"] = time.perf_counter() - t0
    defect = abs(green[-1])
    disc = abs(green[-1] - green[-2])
    res.metrics.update({"green_pairing": green, "green_defect": defect,
                        "green_refinement_difference": disc})
    res.checks.append(Check("green_defect_over_discretization_error", defect / max(disc, 1e-300),
                            None, _tol(cfg, "green_ratio", 1.0, tol_scale)))
    return res


def run_dn_map(cfg, tol_scale=1.0):
    res = ExperimentResult("dn-map", cfg.get("name", "dn-map"))
    g = make_grid(cfg)
    co = _coefficients(g, cfg)
    mask = fc.box_mask(g)
    t0 = time.perf_counter()
    try:
        dn = fs.dn_map(co, mask)
    except fs.ZeroEigenvalueError as exc:
        raise NumericalError("dn_map", exc) from exc
    res.timings["dn_map"] = time.perf_counter() - t0
    m = dn.matrix
    res.metrics.update({"rows": m.shape[0], "cols": m.shape[1],
                        "max_abs": float(np.abs(m).max()), "finite": bool(np.all(np.isfinite(m)))})
    res.checks.append(Check("finite_entries", float(np.all(np.isfinite(m))), 1.0, None))
    res.tables["dn_map"] = (["row", "col", "re", "im"],
                            [[i, j, m[i, j].real, m[i, j].imag]
                             for i in range(m.shape[0]) for j in range(m.shape[1]) if m[i, j] != 0])
    return res


# -- gauge ------------------------------------------------------------------

def gauge_setup(dim, n, gcfg):
    """Manufactured M u = 0 data: u = e^{a·x}, random symmetric C, A, B times e^{-|x|²}."""
    grid = fc.Grid.cube(dim, n)
    box = float(gcfg.get("box", 0.9))
    mask = fc.box_mask(grid, [-box] * dim, [box] * dim)
    x = grid.coords()
    a = np.array(gcfg.get("exponent", [0.7, -0.4, 0.3])[:dim], float)
    u = np.exp(sum(a[j] * x[j] for j in range(dim)))
    bump = np.exp(-sum(xj ** 2 for xj in x))
    rng = np.random.default_rng(int(gcfg.get("seed", 0)))
    C = np.zeros((dim,) * 3 + grid.shape)
    A = np.zeros((dim, dim) + grid.shape)
    B = np.zeros((dim,) + grid.shape)
    for j, k, l in itertools.combinations_with_replacement(range(dim), 3):
        c = rng.normal() * float(gcfg.get("c_scale", 0.3))
        for p in set(itertools.permutations((j, k, l))):
            C[p] = c * bump
    for j, k in itertools.combinations_with_replacement(range(dim), 2):
        c = rng.normal() * float(gcfg.get("a_scale", 0.5))
        A[j, k] = A[k, j] = c * bump
    for j in range(dim):
        B[j] = rng.normal() * float(gcfg.get("b_scale", 1.0)) * bump
    q = -(np.sum(a ** 2) ** 2 + np.einsum("jkl...,j,k,l->...", C, a, a, a)
          + np.einsum("jk...,j,k->...", A, a, a) + np.einsum("j...,j->...", B, a))
    amp = float(gcfg.get("psi_amplitude", 0.5))
    w2 = float(gcfg.get("psi_width2", 0.08))
    phi = ga.make_gauge_function(grid, lambda *y: amp * np.exp(-sum(v ** 2 for v in y) / w2),
                                 mask, margin=float(gcfg.get("margin", 0.3)))
    return grid, mask, u, C, A, B, q, phi


def run_gauge_check(cfg, tol_scale=1.0):
    res = ExperimentResult("gauge-check", cfg.get("name", "gauge-check"))
    gcfg = _get(cfg, "gauge", {})
    check = _get(cfg, "check", "order")
    dims = _get(cfg, "grid.dims", [2, 3])
    ns = _get(cfg, "grid.n", [32, 64])
    conv = gcfg.get("convention", "exact")
    if check == "order":
        if len(ns) != 2:
            raise ConfigError("grid.n", "the order check uses two resolutions")
        lo, hi = _tol(cfg, "order", [1.7, 2.3], tol_scale)
        rows = []
        for dim in dims:
            t0 = time.perf_counter()
            r, h = [], []
            for n in ns:
                grid, mask, u, C, A, B, q, phi = gauge_setup(dim, n, gcfg)
                try:
                    r.append(ga.verify_conjugation_identity(u, C, A, B, q, phi, conv))
                except ga.GaugeDomainError as exc:
                    raise NumericalError("gauge_identity", exc) from exc
                h.append(grid.spacing[0])
                rows.append([dim, n, h[-1], r[-1]])
            order = math.log(r[0] / r[1]) / math.log(h[0] / h[1])
            res.timings[f"dim{dim}"] = time.perf_counter() - t0
            res.metrics[f"residuals_{dim}d"] = r
            res.metrics[f"order_{dim}d"] = order
            res.checks.append(Check(f"order_{dim}d", order, lo, hi))
        res.tables["residuals"] = (["dim", "n", "h", "residual"], rows)
    elif check == "traces":
        tol = _tol(cfg, "trace_rtol", 1e-12, tol_scale)
        for dim in dims:
            grid, mask, u, C, A, B, q, phi = gauge_setup(dim, ns[0], gcfg)
            t_u = ga.boundary_traces(u, mask)
            t_v = ga.boundary_traces(u * np.exp(phi.values), mask)
            rel = [float(np.abs(t_v[m] - t_u[m]).max() / np.abs(t_u[m]).max()) for m in range(4)]
            res.metrics[f"trace_rel_{dim}d"] = rel
            res.metrics[f"flat_{dim}d"] = bool(ga.is_boundary_flat(phi))
            res.checks.append(Check(f"max_trace_rel_{dim}d", max(rel), None, tol))
    else:
        raise ConfigError("check", f"unknown gauge check {check!r}")
    return res


# -- transport --------------------------------------------------------------

def _potential(grid, pcfg):
    if not pcfg:
        return None
    amp = _amp(pcfg.get("amplitude", [1.0, 0.0]))
    w2 = float(pcfg.get("width2", 0.1))
    x = grid.coords()
    return amp * np.exp(-sum(xj ** 2 for xj in x) / w2)


def run_carleman(cfg, tol_scale=1.0):
    res = ExperimentResult("carleman", cfg.get("name", "carleman"))
    g = make_grid(cfg, dim=2)
    taus = _get(cfg, "sweep.tau", required=True)
    if not taus:
        raise ConfigError("sweep.tau", "sweep must be nonempty")
    phase = t2.PlanePhase(*_get(cfg, "carleman.phase", [1.0, 0.0]))
    band = int(_get(cfg, "carleman.band", 3))
    parts = _get(cfg, "carleman.parts", ["real", "imag"])
    c = _potential(g, _get(cfg, "carleman.potential"))
    rows = []
    for part in parts:
        t0 = time.perf_counter()
        try:
            base = t2.carleman_sigma_min(part, phase, taus, g, None, band)
            pot = t2.carleman_sigma_min(part, phase, taus, g, c, band) if c is not None else base
        except (t2.ParameterError, RuntimeError) as exc:
            raise NumericalError("carleman_sweep", exc) from exc
        res.timings[part] = time.perf_counter() - t0
        r0 = np.array([s / t for t, s in base])
        r1 = np.array([s / t for t, s in pot])
        ratio = float(r0.max() / r0.min())
        degr = float(1 - r1.min() / r0.min())
        res.metrics[f"{part}_sigma_over_tau"] = r0.tolist()
        res.metrics[f"{part}_sigma_over_tau_potential"] = r1.tolist()
        res.metrics[f"{part}_ratio"] = ratio
        res.metrics[f"{part}_degradation"] = degr
        res.checks.append(Check(f"{part}_max_over_min", ratio, None, _tol(cfg, "ratio", 3.0, tol_scale)))
        res.checks.append(Check(f"{part}_degradation", degr, None,
                                _tol(cfg, "degradation", 0.5, tol_scale)))
        for (t, s0), (_, s1) in zip(base, pot):
            rows.append([part, t, s0, s1, s0 / t])
        try:
            fit = _slope(taus, [s for _, s in base])
        except (ValueError, np.linalg.LinAlgError):
            fit = float("nan")
        res.metrics[f"{part}_fitted_exponent"] = fit
    res.tables["sweep"] = (["part", "tau", "sigma_min", "sigma_min_potential", "sigma_over_tau"], rows)
    return res


def _cgo_params(cfg, h, dim):
    mu1 = _get(cfg, "cgo.mu1", [1.0, 0.0, 0.0][:dim])
    mu2 = _get(cfg, "cgo.mu2", [0.0, 1.0, 0.0][:dim])
    xi = _get(cfg, "cgo.xi", None)
    try:
        return cb.CGOParams(np.array(mu1, float), np.array(mu2, float), h,
                            None if xi is None else np.array(xi, float))
    except cb.CGOParameterError as exc:
        raise ConfigError("cgo", str(exc)) from exc


def run_cgo(cfg, tol_scale=1.0):
    res = ExperimentResult("cgo", cfg.get("name", "cgo"))
    g = make_grid(cfg)
    co = _coefficients(g, cfg)
    hs = _get(cfg, "sweep.h", required=True)
    if not hs:
        raise ConfigError("sweep.h", "sweep must be nonempty")
    rows = []
    worst = 0.0
    for h in hs:
        p = _cgo_params(cfg, h, g.dim)
        t0 = time.perf_counter()
        try:
            sol = cb.build_cgo(co, p, int(_get(cfg, "cgo.sign", 1)), _get(cfg, "cgo.b", "one"),
                               remainder=_get(cfg, "cgo.remainder", "lstsq"))
        except cb.ResolutionError as exc:
            raise ConfigError("sweep.h", str(exc)) from exc
        except Exception as exc:
            raise NumericalError("cgo_build", exc) from exc
        res.timings[f"h={h}"] = time.perf_counter() - t0
        d = sol.diagnostics
        worst = max(worst, d["transport_residual_a0"])
        rows.append([h, d["transport_residual_a0"], d["transport_residual_a1"], d["r_l2"],
                     d["conjugated_residual"]])
    res.metrics["rows"] = rows
    res.tables["cgo"] = (["h", "transport_residual_a0", "transport_residual_a1", "r_l2",
                          "conjugated_residual"], rows)
    res.checks.append(Check("transport_residual_a0", worst, None,
                            _tol(cfg, "transport_residual", 1e-6, tol_scale)))
    return res


def run_decay_study(cfg, tol_scale=1.0):
    res = ExperimentResult("decay-study", cfg.get("name", "decay-study"))
    quantity = _get(cfg, "quantity", required=True)
    g = make_grid(cfg)
    rows = []
    if quantity == "rho":
        taus = _get(cfg, "sweep.tau", required=True)
        if not taus:
            raise ConfigError("sweep.tau", "sweep must be nonempty")
        c = _potential(g, _get(cfg, "amplitude.potential", {"amplitude": 1.0, "width2": 0.1}))
        phase = t2.PlanePhase(*_get(cfg, "amplitude.phase", [1.0, 0.0]))
        method = _get(cfg, "amplitude.method", "exact")
        vals = []
        for tau in taus:
            t0 = time.perf_counter()
            try:
                am = t2.build_cgo_amplitude(c, 1.0, phase, tau, grid=g, method=method)
            except t2.IllConditionedError as exc:
                raise ConfigError("sweep.tau", str(exc)) from exc
            res.timings[f"tau={tau}"] = time.perf_counter() - t0
            vals.append(am.rho_norm)
            rows.append([tau, am.rho_norm, am.residual])
        xs = taus
        res.tables["decay"] = (["tau", "rho_l2", "equation_residual"], rows)
    elif quantity == "remainder":
        hs = _get(cfg, "sweep.h", required=True)
        if not hs:
            raise ConfigError("sweep.h", "sweep must be nonempty")
        co = _coefficients(g, cfg)
        vals = []
        for h in hs:
            p = _cgo_params(cfg, h, g.dim)
            t0 = time.perf_counter()
            try:
                sol = cb.build_cgo(co, p, remainder=_get(cfg, "cgo.remainder", "lstsq"))
            except cb.ResolutionError as exc:
                raise ConfigError("sweep.h", str(exc)) from exc
            res.timings[f"h={h}"] = time.perf_counter() - t0
            vals.append(sol.diagnostics["r_l2"])
            rows.append([h, sol.diagnostics["r_l2"]] + sol.diagnostics["r_scl"])
        xs = hs
        res.tables["decay"] = (["h", "r_l2", "r_scl0", "r_scl1", "r_scl2", "r_scl3", "r_scl4"], rows)
    else:
        raise ConfigError("quantity", "must be 'rho' or 'remainder'")
    slope = _slope(xs, vals)
    res.metrics.update({"values": vals, "slope": slope})
    default = [0.8, 1.2] if quantity == "rho" else [1.7, 2.3]
    lo, hi = _tol(cfg, "slope", default, tol_scale)
    res.checks.append(Check("fitted_slope", slope, lo, hi))
    return res


# -- reconstruction ---------------------------------------------------------

def _delta(grid, cfg):
    A, B, q = build_fields(grid, _get(cfg, "coefficients", []))
    return rc.CoefficientDelta(grid, A, B, q)


def run_reconstruct(cfg, tol_scale=1.0):
    res = ExperimentResult("reconstruct", cfg.get("name", "reconstruct"))
    check = _get(cfg, "check", required=True)
    seed = int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    if check == "null-contraction":
        g = make_grid(cfg, dim=3)
        x = g.coords()
        worst = 0.0
        t0 = time.perf_counter()
        for _ in range(int(_get(cfg, "sweep.samples", 3))):
            c = rng.normal(size=3) * 0.3
            w = rng.uniform(0.15, 0.3)
            d = rng.normal() * np.exp(-sum((xj - cj) ** 2 for xj, cj in zip(x, c)) / (2 * w * w))
            dA = np.zeros((3, 3) + g.shape)
            for j in range(3):
                dA[j, j] = d
            delta = rc.CoefficientDelta(g, dA, np.zeros((3,) + g.shape), np.zeros(g.shape))
            table = rc.moment_table(delta, entries=[e for e in rc.TABLE_ENTRIES if e[0] == -2])
            worst = max(worst, max(float(np.abs(v).max()) for v in table.entries.values()))
            for _ in range(int(_get(cfg, "sweep.random_frames", 4))):
                xi = rng.normal(size=3) * 5
                mu1, mu2 = rc.frame_for(xi)
                th = rng.uniform(0, 2 * np.pi)
                m1, m2 = np.cos(th) * mu1 + np.sin(th) * mu2, -np.sin(th) * mu1 + np.cos(th) * mu2
                p = cb.CGOParams(m1, m2, 0.5, xi=xi)
                for bt, bs in (("exp", "one"), ("linear_exp", "linear"), ("linear_exp", "one")):
                    worst = max(worst, abs(rc.moment_volume(delta, p, bt, bs, -2)))
        res.timings["moments"] = time.perf_counter() - t0
        res.metrics["max_abs_moment"] = worst
        res.checks.append(Check("max_abs_h-2_moment", worst, None, _tol(cfg, "null", 1e-12, tol_scale)))
    elif check == "decomposition":
        g = make_grid(cfg, dim=3)
        x = g.coords()
        bump = np.exp(-sum(xj ** 2 for xj in x) / (2 * 0.25 ** 2))
        M = rng.normal(size=(3, 3))
        S = (M + M.T).reshape((3, 3, 1, 1, 1)) * bump
        t0 = time.perf_counter()
        dec = rc.tensor_decompose(S, g)
        res.timings["decompose"] = time.perf_counter() - t0
        n_small = int(_get(cfg, "oracle.n", 8))
        gs = fc.Grid.cube(3, n_small)
        xs = gs.coords()
        Ms = rng.normal(size=(3, 3))
        Ss = (Ms + Ms.T).reshape((3, 3, 1, 1, 1)) * np.exp(-sum(v ** 2 for v in xs) / (2 * 0.3 ** 2))
        t0 = time.perf_counter()
        small = rc.tensor_decompose(Ss, gs)
        F_or, _ = rc.dense_decompose(Ss, gs)
        res.timings["oracle"] = time.perf_counter() - t0
        agree = float(np.abs(small.F - F_or).max() / np.abs(Ss).max())
        res.metrics.update({"roundtrip": dec.roundtrip_defect, "div_F": dec.div_defect,
                            "oracle_agreement": agree})
        res.checks.append(Check("roundtrip", dec.roundtrip_defect, None, _tol(cfg, "roundtrip", 1e-8, tol_scale)))
        res.checks.append(Check("div_F", dec.div_defect, None, _tol(cfg, "div", 1e-8, tol_scale)))
        res.checks.append(Check("oracle_agreement", agree, None, _tol(cfg, "oracle", 1e-6, tol_scale)))
    elif check == "projection":
        g = make_grid(cfg, dim=3)
        x = g.coords()
        d = np.exp(-sum(xj ** 2 for xj in x) / (2 * 0.2 ** 2)) * (1 + 0.3 * x[0])
        xi = np.stack([np.broadcast_to(k, g.shape) for k in g.wavenumbers()])
        mu1, mu2 = rc.frames(xi)
        d_hat = rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)
        F_hat = rc.projection_symbol(d_hat, xi)
        fx, fdiag, foff = rc.projection_defects(F_hat, xi, mu1, mu2)
        scale = float(np.abs(d_hat).max())
        riesz = rc.riesz_projection(d, g)
        rh = np.fft.fftn(riesz, axes=(2, 3, 4))
        expect = rc.projection_symbol(np.fft.fftn(d), xi)
        expect[:, :, 0, 0, 0] = np.eye(3) * np.fft.fftn(d)[0, 0, 0]
        rz = float(np.abs(rh - expect).max() / np.abs(expect).max())
        res.metrics.update({"F_xi": fx / scale, "diag_spread": fdiag / scale, "offdiag": foff / scale,
                            "riesz_vs_multiplier": rz})
        tol = _tol(cfg, "symbol", 1e-12, tol_scale)
        res.checks.append(Check("F_hat_xi", fx / scale, None, tol))
        res.checks.append(Check("diag_frame_spread", fdiag / scale, None, tol))
        res.checks.append(Check("riesz_vs_multiplier", rz, None, _tol(cfg, "riesz", 1e-12, tol_scale)))
    elif check == "oracle":
        g = make_grid(cfg, dim=3)
        delta = _delta(g, cfg)
        t0 = time.perf_counter()
        try:
            rep = rc.full_pipeline(delta, "oracle", tol=_tol(cfg, "consistency", 1e-6, 1.0))
        except (rc.InconsistencyError, rc.StageError) as exc:
            raise NumericalError(getattr(exc, "stage", "reconstruct"), exc) from exc
        res.timings["pipeline"] = time.perf_counter() - t0
        res.metrics.update({"errors": rep.errors, "flags": rep.flags, "info": rep.info})
        tol = _tol(cfg, "relative_l2", 0.05, tol_scale)
        if "second_order:d_sharp" in rep.errors:
            res.checks.append(Check("d_sharp_error", rep.errors["second_order:d_sharp"], None, tol))
        res.checks.append(Check("dq_error", rep.errors["zeroth_order:dq"], None, tol))
        res.checks.append(Check("curl_flag", float(rep.flags["curl_ok"]), 1.0, None))
        res.checks.append(Check("p_flag", float(rep.flags["p_null"]), 1.0, None))
        res.tables["errors"] = (["quantity", "relative_l2"], sorted([k, v] for k, v in rep.errors.items()))
    elif check == "boundary":
        g = make_grid(cfg, dim=3)
        delta = _delta(g, cfg)
        lo, hi = _get(cfg, "domain.box", [-0.95, 0.95])
        mask = fc.box_mask(g, [lo] * 3, [hi] * 3)
        mu1 = np.array(_get(cfg, "cgo.mu1", required=True), float)
        mu2 = np.array(_get(cfg, "cgo.mu2", required=True), float)
        mu1, mu2 = mu1 / np.linalg.norm(mu1), mu2 / np.linalg.norm(mu2)
        xi = float(_get(cfg, "cgo.xi_norm", 1.0)) * np.cross(mu1, mu2)
        hs = _get(cfg, "sweep.h", required=True)
        if not hs:
            raise ConfigError("sweep.h", "sweep must be nonempty")
        params = cb.CGOParams(mu1, mu2, max(hs), xi=xi)
        background = fs.CoefficientSet.zeros(g)
        coeffsL = background + delta.to_coefficients()
        t0 = time.perf_counter()
        try:
            study = rc.boundary_study(coeffsL, background, params, hs, mask)
        except cb.ResolutionError as exc:
            raise ConfigError("sweep.h", str(exc)) from exc
        except fs.ZeroEigenvalueError as exc:
            raise NumericalError("forward_solve", exc) from exc
        res.timings["boundary"] = time.perf_counter() - t0
        res.metrics.update({"h": hs, "boundary": study.boundary, "volume": study.volume,
                            "rel_errors": study.rel_errors, "improving": study.improving()})
        res.tables["boundary"] = (["h", "re", "im", "relative_error"],
                                  [[h, v.real, v.imag, e] for h, v, e in
                                   zip(hs, study.boundary, study.rel_errors)])
        res.checks.append(Check("relative_error_at_smallest_h", study.rel_errors[-1], None,
                                _tol(cfg, "relative", 0.10, tol_scale)))
        res.checks.append(Check("improving_under_refinement", float(study.improving()), 1.0, None))
    else:
        raise ConfigError("check", f"unknown reconstruct check {check!r}")
    return res


RUNNERS = {
    "forward": run_forward,
    "dn-map": run_dn_map,
    "gauge-check": run_gauge_check,
    "carleman": run_carleman,
    "cgo": run_cgo,
    "reconstruct": run_reconstruct,
    "decay-study": run_decay_study,
}


def validate(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "configuration must be a table")
    kind = cfg.get("kind")
    if kind is None:
        raise ConfigError("kind", "missing required field")
    if kind not in RUNNERS:
        raise ConfigError("kind", f"unknown experiment kind {kind!r}")
    if "grid" not in cfg:
        raise ConfigError("grid", "missing required field")
    g = cfg["grid"]
    if not isinstance(g, dict):
        raise ConfigError("grid", "must be a table")
    n = g.get("n")
    if n is None:
        raise ConfigError("grid.n", "missing required field")
    ns = n if isinstance(n, list) else [n]
    if not ns or any(not isinstance(v, int) or v < 8 for v in ns):
        raise ConfigError("grid.n", "resolutions must be integers >= 8")
    ext = g.get("extent", [-1.0, 1.0])
    if len(ext) != 2 or not ext[0] < ext[1]:
        raise ConfigError("grid.extent", "must be [lo, hi] with lo < hi")
    for key in ("tau", "h"):
        v = _get(cfg, f"sweep.{key}")
        if v is not None and (not isinstance(v, list) or not v):
            raise ConfigError(f"sweep.{key}", "sweep must be a nonempty list")
    return cfg


def run_experiment(cfg, tol_scale=1.0):
    validate(cfg)
    if tol_scale <= 0:
        raise ConfigError("--tol-scale", "must be positive")
    return RUNNERS[cfg["kind"]](cfg, tol_scale)
