"""Batch experiment driver with deterministic artifacts.

Verbs dispatch the module pipelines on a JSON experiment config and
write CSV tables plus JSON summaries.  Outputs are byte-reproducible
for a fixed config and seed: every float is printed with a fixed
format, JSON keys are sorted, and all randomness derives from the
config seed.  Exit codes: 0 success, 1 config error (nothing written),
2 tolerance failure (artifacts still written, failures listed in the
summary and on standard error).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import energy as en
from .backends import build_backend, harmonic_beltrami_basis
from .direct_image import bergman_kernel, ricci_limit_sweep, wp_metric
from .hodge import Bundle, DenseHodgePackage
from .kuranishi import (
    check_gauge,
    check_integrability,
    gauge_compatible_basis,
    solve_kuranishi,
)

__all__ = ["main", "run", "ConfigError"]

TRIV = Bundle.trivial()


class ConfigError(ValueError):
    """Invalid experiment configuration; maps to exit code 1."""


DEFAULT_TOLERANCES = {
    "gauge": 1e-8,
    "obstruction": 1e-8,
    "integrability_slope": 0.9,  # required excess over the truncation order
    "wp": 1e-10,
    "bergman_variance": 1e-8,
    "bergman_integral": 1e-8,
    "ricci_limit": 1e-4,
    "energy_fd": 1e-6,
    "psh": 1e-8,
    "identity": 1e-8,
}

_KNOWN_KEYS = {
    "backend",
    "order",
    "kmin",
    "kmax",
    "count",
    "t_grid",
    "grid",
    "seed",
    "tolerances",
    "energy",
    "expect_gauge",
    "out",
}

_KNOWN_ENERGY_KEYS = {"linear", "dtau_re", "dtau_im", "target_dim", "radius"}


def _validate_config(raw: Any) -> dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "backend" not in raw or not isinstance(raw["backend"], dict):
        raise ConfigError("config needs a 'backend' object")
    cfg = dict(raw)
    cfg.setdefault("order", 2)
    cfg.setdefault("kmin", 1)
    cfg.setdefault("kmax", 3)
    cfg.setdefault("count", None)
    cfg.setdefault("t_grid", [0.02, 0.04, 0.08])
    cfg.setdefault("grid", 5)
    cfg.setdefault("seed", 0)
    cfg.setdefault("expect_gauge", None)
    tol = dict(DEFAULT_TOLERANCES)
    extra = raw.get("tolerances", {})
    if not isinstance(extra, dict):
        raise ConfigError("'tolerances' must be an object")
    unknown = set(extra) - set(DEFAULT_TOLERANCES)
    if unknown:
        raise ConfigError(f"unknown tolerance keys: {sorted(unknown)}")
    tol.update({k: float(v) for k, v in extra.items()})
    if any(v <= 0 for v in tol.values()):
        raise ConfigError("tolerances must be positive")
    cfg["tolerances"] = tol
    for key in ("order", "kmin", "kmax", "grid", "seed"):
        try:
            cfg[key] = int(cfg[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r} must be an integer") from exc
    if cfg["order"] < 1:
        raise ConfigError("order must be at least 1")
    if cfg["kmin"] < 1 or cfg["kmax"] < cfg["kmin"]:
        raise ConfigError("need 1 <= kmin <= kmax")
    if cfg["grid"] < 1:
        raise ConfigError("grid size must be positive")
    if not cfg["t_grid"] or any(float(t) <= 0 for t in cfg["t_grid"]):
        raise ConfigError("t_grid must be a nonempty list of positive radii")
    cfg["t_grid"] = [float(t) for t in cfg["t_grid"]]
    if cfg["count"] is not None:
        cfg["count"] = int(cfg["count"])
        if cfg["count"] < 1:
            raise ConfigError("count must be positive when given")
    if cfg.get("energy") is not None:
        e = cfg["energy"]
        if not isinstance(e, dict):
            raise ConfigError("'energy' must be an object")
        unknown = set(e) - _KNOWN_ENERGY_KEYS
        if unknown:
            raise ConfigError(f"unknown energy keys: {sorted(unknown)}")
        for need in ("linear", "dtau_re", "dtau_im"):
            if need not in e:
                raise ConfigError(f"energy config needs {need!r}")
    return cfg


def load_config(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return _validate_config(raw)


# -- deterministic writers ---------------------------------------------


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.12e}"
    return str(value)


def write_table(path: Path, title: str, header: list[str], rows: list[list[Any]]) -> None:
    lines = [f"# table: {title}"]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _round_floats(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, (bool, int, str)) or obj is None:
        return obj
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.12e}")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, complex):
        return {"re": float(f"{obj.real:.12e}"), "im": float(f"{obj.imag:.12e}")}
    return str(obj)


def write_summary(path: Path, obj: dict[str, Any]) -> None:
    path.write_text(json.dumps(_round_floats(obj), sort_keys=True, indent=2) + "\n")


# -- shared identity suite ---------------------------------------------


def identity_suite(pkg: DenseHodgePackage, rng: np.random.Generator) -> dict[str, float]:
    """Worst-case residuals of the operator identities on one backend.

    Checks, over every represented space: dbar squared is zero, dbar-star
    is the quadrature adjoint of dbar, the Green operator inverts the box
    off harmonics, and the Hodge decomposition reassembles the input.
    """
    keys = set(pkg.space_keys)

    def _up(key):
        target = pkg.dbar_codomain(key)
        return target if target is not None and target in keys else None

    res = {"dbar_squared": 0.0, "adjoint": 0.0, "green": 0.0, "decomposition": 0.0}
    for key in pkg.space_keys:
        bundle, q = key
        u = pkg.random_form(bundle, q, rng)
        nu = pkg.norm(u) or 1.0
        up = _up(key)
        du = pkg.dbar(u) if up is not None else None
        if du is not None and _up(up) is not None:
            res["dbar_squared"] = max(res["dbar_squared"], pkg.norm(pkg.dbar(du)) / nu)
        if du is not None:
            v = pkg.random_form(*up, rng)
            lhs = pkg.inner(du, v)
            rhs = pkg.inner(u, pkg.dbar_star(v))
            scale = 1.0 + abs(lhs)
            res["adjoint"] = max(res["adjoint"], abs(lhs - rhs) / scale)
        h = pkg.harmonic_project(u)
        g = pkg.green(u)
        res["green"] = max(
            res["green"],
            pkg.norm(pkg.box_apply(g) - (u - h)) / nu,
        )
        parts = h
        if du is not None:
            parts = parts + pkg.dbar_star(pkg.dbar(g))
        if q >= 1 and _up((bundle, q - 1)) == key:
            parts = parts + pkg.dbar(pkg.dbar_star(g))
        res["decomposition"] = max(res["decomposition"], pkg.norm(u - parts) / nu)
    return res


# -- pipelines ----------------------------------------------------------


def _build_pkg(backend_cfg: dict) -> Any:
    cfg = dict(backend_cfg)
    solver = cfg.pop("solver", "dense")
    try:
        if solver == "iterative":
            if cfg.get("kind") != "torus":
                raise ValueError("iterative solver needs a torus backend")
            from .backends.torus_iterative import build_iterative_torus_package

            return build_iterative_torus_package(cfg)
        if solver != "dense":
            raise ValueError(f"unknown solver {solver!r}")
        return build_backend(cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad backend config: {exc}") from exc


def _pipeline_solve(cfg, out: Path) -> tuple[int, dict]:
    pkg = _build_pkg(cfg["backend"])
    basis = gauge_compatible_basis(pkg, count=cfg["count"])
    if not basis:
        raise ConfigError("backend has no deformation directions to solve along")
    sol = solve_kuranishi(pkg, basis, cfg["order"])
    report = check_gauge(sol)
    tol = cfg["tolerances"]

    radii = cfg["t_grid"]
    direction = np.zeros(len(basis))
    direction[0] = 1.0
    residuals = [check_integrability(sol, r * direction) for r in radii]
    slope = float("nan")
    if len(radii) >= 2 and all(r > 0 for r in residuals):
        slope = float(
            np.polyfit(np.log(np.asarray(radii)), np.log(np.asarray(residuals)), 1)[0]
        )
    rows = [[r, v] for r, v in zip(radii, residuals)]
    write_table(out / "integrability.csv", "truncated family equation residual vs radius",
                ["radius", "residual"], rows)

    obst = report.max_entry("obstruction")
    summary = sol.summary()
    summary["integrability"] = {
        "radii": radii,
        "residuals": residuals,
        "slope": slope,
    }
    summary["max_obstruction"] = obst
    failures = []
    if obst > tol["obstruction"]:
        failures.append(f"obstruction {obst:.3e} > {tol['obstruction']:.1e}")
    if np.isfinite(slope) and slope < cfg["order"] + tol["integrability_slope"]:
        failures.append(
            f"integrability slope {slope:.3f} < {cfg['order'] + tol['integrability_slope']:.3f}"
        )
    summary["failures"] = failures
    write_summary(out / "solve_summary.json", summary)
    return (2 if failures else 0), summary


def _pipeline_gauge(cfg, out: Path) -> tuple[int, dict]:
    pkg = _build_pkg(cfg["backend"])
    basis = gauge_compatible_basis(pkg, count=cfg["count"])
    if not basis:
        raise ConfigError("backend has no deformation directions to check")
    sol = solve_kuranishi(pkg, basis, cfg["order"])
    report = check_gauge(sol)
    rows = [[o, *vals] for o, vals in zip(report.orders, report.rows)]
    write_table(out / "gauge_report.csv",
                "gauge and obstruction residual norms by order",
                ["order", *report.columns], rows)
    tol = cfg["tolerances"]
    expect = cfg["expect_gauge"]
    if expect is None:
        expect = float(cfg["backend"].get("epsilon", 0.0)) == 0.0
    worst = {c: report.max_entry(c) for c in report.columns}
    failures = []
    if expect:
        for c, v in worst.items():
            if v > tol["gauge"]:
                failures.append(f"gauge residual {c} = {v:.3e} > {tol['gauge']:.1e}")
    summary = {
        "backend_id": pkg.backend_id,
        "order": cfg["order"],
        "expect_gauge": bool(expect),
        "worst": worst,
        "failures": failures,
    }
    write_summary(out / "gauge_summary.json", summary)
    return (2 if failures else 0), summary


def _pipeline_wp(cfg, out: Path) -> tuple[int, dict]:
    pkg = _build_pkg(cfg["backend"])
    basis = harmonic_beltrami_basis(pkg)
    if not basis:
        raise ConfigError("backend is rigid: no deformation fields for the metric")
    W, W2 = wp_metric(pkg, basis, return_both=True)
    rows = []
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            rows.append([i, j, W[i, j].real, W[i, j].imag,
                         W2[i, j].real, W2[i, j].imag, abs(W[i, j] - W2[i, j])])
    write_table(out / "wp_metric.csv",
                "deformation metric: pairing integral vs scalar resolvent route",
                ["i", "j", "pairing_re", "pairing_im",
                 "resolvent_re", "resolvent_im", "gap"], rows)
    gap = float(np.max(np.abs(W - W2))) if W.size else 0.0
    herm = float(np.max(np.abs(W - W.conj().T))) if W.size else 0.0
    tol = cfg["tolerances"]
    failures = []
    if gap > tol["wp"]:
        failures.append(f"route gap {gap:.3e} > {tol['wp']:.1e}")
    if herm > tol["wp"]:
        failures.append(f"hermitian defect {herm:.3e} > {tol['wp']:.1e}")
    summary = {
        "backend_id": pkg.backend_id,
        "dimension": int(W.shape[0]),
        "route_gap": gap,
        "hermitian_defect": herm,
        "failures": failures,
    }
    write_summary(out / "wp_summary.json", summary)
    return (2 if failures else 0), summary


def _pipeline_bergman(cfg, out: Path) -> tuple[int, dict]:
    backend = dict(cfg["backend"])
    kmin, kmax = cfg["kmin"], cfg["kmax"]
    if backend.get("kind") == "projective":
        backend.setdefault("k", kmax)
        if int(backend["k"]) < kmax:
            raise ConfigError("backend section power is below kmax")
    pkg = _build_pkg(backend)
    geom = pkg.geometry
    n = geom.n
    vol = pkg.volume()
    tol = cfg["tolerances"]
    rows = []
    failures = []
    max_var = 0.0
    max_int_gap = 0.0
    for k in range(kmin, kmax + 1):
        tau, count = bergman_kernel(pkg, k)
        vals = tau.values.real
        mean = float(np.sum(geom.quad_weights * vals) / vol)
        var = float(np.sum(geom.quad_weights * (vals - mean) ** 2) / vol)
        integral = float(np.sum(geom.quad_weights * vals))
        int_gap = abs(integral - count)
        # leading density growth: k^n/pi^n + n k^(n-1)/(2 pi^n)
        predicted = (k**n + 0.5 * n * k ** (n - 1)) / np.pi**n
        rows.append([k, count, mean, var, integral, int_gap, predicted,
                     abs(mean - predicted)])
        max_var = max(max_var, var)
        max_int_gap = max(max_int_gap, int_gap)
    write_table(out / "bergman.csv",
                "section-density constants across powers of the polarization",
                ["k", "sections", "mean", "variance", "integral",
                 "integral_gap", "predicted", "deviation"], rows)
    if max_var > tol["bergman_variance"]:
        failures.append(f"kernel variance {max_var:.3e} > {tol['bergman_variance']:.1e}")
    if max_int_gap > tol["bergman_integral"]:
        failures.append(f"integral gap {max_int_gap:.3e} > {tol['bergman_integral']:.1e}")
    summary = {
        "backend_id": pkg.backend_id,
        "kmin": kmin,
        "kmax": kmax,
        "max_variance": max_var,
        "max_integral_gap": max_int_gap,
        "failures": failures,
    }
    write_summary(out / "bergman_summary.json", summary)
    return (2 if failures else 0), summary


def _pipeline_ricci(cfg, out: Path) -> tuple[int, dict]:
    backend = cfg["backend"]
    if backend.get("kind") not in (None, "abelian"):
        raise ConfigError("ricci-limit runs on the polarized abelian family")
    k_values = list(range(cfg["kmin"], cfg["kmax"] + 1))
    rows, summary = ricci_limit_sweep(dict(backend), k_values, count=cfg["count"])
    if not rows:
        raise ConfigError("sweep produced no data: no deformation directions")
    header = list(rows[0].keys())
    write_table(out / "ricci_limit.csv",
                "normalized curvature trace against the deformation metric",
                header, [[r[h] for h in header] for r in rows])
    tol = cfg["tolerances"]
    failures = []
    for label, fit in summary["entries"].items():
        gap = fit.get("limit_gap")
        if gap is not None and gap > tol["ricci_limit"]:
            failures.append(f"entry {label} limit gap {gap:.3e} > {tol['ricci_limit']:.1e}")
    summary = dict(summary)
    summary["failures"] = failures
    write_summary(out / "ricci_summary.json", summary)
    return (2 if failures else 0), summary


def _pipeline_energy(cfg, out: Path) -> tuple[int, dict]:
    e = cfg.get("energy")
    if e is None:
        raise ConfigError("energy scan needs an 'energy' config block")
    backend = dict(cfg["backend"])
    if backend.get("kind") != "torus" or float(backend.get("epsilon", 0.0)) != 0.0:
        raise ConfigError("energy scan runs on flat torus backends")
    pkg = _build_pkg(backend)
    geom = pkg.geometry
    n = geom.n
    linear = np.asarray(e["linear"], dtype=float)
    dtau = np.asarray(e["dtau_re"], dtype=float) + 1j * np.asarray(e["dtau_im"], dtype=float)
    if dtau.shape != (n, n) or np.max(np.abs(dtau - dtau.T)) > 1e-12:
        raise ConfigError("dtau must be a symmetric n x n matrix")
    if linear.ndim != 2 or linear.shape[1] != 2 * n:
        raise ConfigError("linear must be a (target_dim x 2n) matrix")
    d = int(e.get("target_dim", linear.shape[0]))
    if d != linear.shape[0]:
        raise ConfigError("target_dim disagrees with the linear part")
    radius = float(e.get("radius", 0.1))
    if radius <= 0:
        raise ConfigError("radius must be positive")
    target = en.TargetManifold.flat_space(d)
    tau0 = geom.tau
    S0 = tau0.imag
    phi0 = 0.5j * dtau @ np.linalg.inv(S0)
    Efun = en.affine_energy_function(pkg, phi0, linear, target)

    grid = cfg["grid"]
    pts = np.linspace(-radius, radius, grid)
    step = max(radius / 50.0, 1e-4)
    tol = cfg["tolerances"]
    rows = []
    max_first_gap = 0.0
    max_second_gap = 0.0
    grid_min = np.inf
    for a in pts:
        for b in pts:
            t0 = complex(a, b)
            tau_t = en.deformed_tau(tau0, phi0, t0)
            shifted = lambda s, base=t0: Efun(base + s)
            Eval = Efun(t0)
            d1 = en.fd_first_derivative(shifted, step)
            d2_fd = en.fd_mixed_derivative(shifted, step)
            # rebuild the flat geometry at the shifted base point and
            # evaluate the variation formulas there
            cfg_t = dict(backend)
            cfg_t["tau"] = [[complex(v) for v in row] for row in tau_t]
            pkg_t = _build_pkg(cfg_t)
            geom_t = pkg_t.geometry
            phi_t = 0.5j * dtau @ np.linalg.inv(geom_t.tau.imag)
            phi_form = pkg_t.project(
                Bundle.tangent(), 1,
                np.broadcast_to(phi_t, (geom_t.nnodes, n, n)).copy(),
            )
            fmap = en.TorusMap.affine(geom_t, linear)
            fam = en.MapFamily(fmap, u_linear=np.zeros((d, 2 * n), dtype=complex))
            rep = en.second_variation(pkg_t, phi_form, fam, target)
            first_gap = abs(rep.first_t - d1)
            second_gap = abs(rep.hessian_formula - d2_fd)
            max_first_gap = max(max_first_gap, first_gap)
            max_second_gap = max(max_second_gap, second_gap)
            grid_min = min(grid_min, min(d2_fd, rep.hessian_formula))
            rows.append([a, b, Eval, d1.real, d1.imag,
                         rep.hessian_formula, d2_fd, min(d2_fd, rep.hessian_formula)])
    write_table(out / "energy_scan.csv",
                "energy of the harmonic class representative over the family",
                ["t_re", "t_im", "E", "dE_re", "dE_im",
                 "d2E_formula", "d2E_fd", "min_hess_eig"], rows)
    failures = []
    if max_first_gap > tol["energy_fd"]:
        failures.append(f"first derivative gap {max_first_gap:.3e} > {tol['energy_fd']:.1e}")
    if max_second_gap > tol["energy_fd"]:
        failures.append(f"second derivative gap {max_second_gap:.3e} > {tol['energy_fd']:.1e}")
    if grid_min < -tol["psh"]:
        failures.append(f"mixed Hessian minimum {grid_min:.3e} < -{tol['psh']:.1e}")
    summary = {
        "backend_id": pkg.backend_id,
        "grid": grid,
        "radius": radius,
        "energy_at_zero": float(Efun(0.0)),
        "max_first_gap": max_first_gap,
        "max_second_gap": max_second_gap,
        "grid_min": float(grid_min),
        "failures": failures,
    }
    write_summary(out / "energy_summary.json", summary)
    return (2 if failures else 0), summary


def _pipeline_selftest(cfg, out: Path) -> tuple[int, dict]:
    rng = np.random.default_rng(cfg["seed"])
    tol = cfg["tolerances"]
    failures: list[str] = []
    checks: dict[str, Any] = {}

    # operator identities on one representative of each backend kind
    suite_configs = {
        "torus": {"kind": "torus", "n": 1, "tau": [[1j]], "bandwidth": 4,
                  "epsilon": 0.05, "psi_modes": {(1, 0): 0.3, (0, 1): 0.2}},
        "abelian": {"kind": "abelian", "n": 1, "tau": [[1.2j]], "k": 2},
        "projective": {"kind": "projective", "n": 1, "k": 3},
    }
    for name, bc in suite_configs.items():
        res = identity_suite(build_backend(bc), rng)
        checks[f"identity_{name}"] = res
        worst = max(res.values())
        if worst > tol["identity"]:
            failures.append(f"identity suite on {name}: {worst:.3e}")

    # flat family: coefficients beyond first order vanish
    flat = build_backend({"kind": "torus", "n": 2, "tau": [[1j, 0.1], [0.1, 1.5j]],
                          "bandwidth": 1, "epsilon": 0.0})
    basis = gauge_compatible_basis(flat, count=2)
    sol = solve_kuranishi(flat, basis, 3)
    high = max(
        (float(np.linalg.norm(v.coeffs)) for I, v in sol.coeffs.items()
         if sum(I.exponents) >= 2),
        default=0.0,
    )
    checks["flat_higher_order"] = high
    if high > 1e-12:
        failures.append(f"flat family higher-order coefficients: {high:.3e}")

    # deformation metric double route
    pert = build_backend({"kind": "torus", "n": 2,
                          "tau": [[1j, 0.15 + 0.05j], [0.15 + 0.05j, 0.2 + 1.3j]],
                          "bandwidth": 1, "epsilon": 0.05,
                          "psi_modes": {(1, 0, 0, 0): 0.12, (0, 1, 0, 1): 0.08 + 0.03j,
                                        (0, 0, 1, 0): 0.1j}})
    W, W2 = wp_metric(pert, harmonic_beltrami_basis(pert), return_both=True)
    gap = float(np.max(np.abs(W - W2)))
    checks["wp_route_gap"] = gap
    if gap > tol["wp"]:
        failures.append(f"deformation metric route gap: {gap:.3e}")

    # section density constants on the round sphere
    proj = build_backend({"kind": "projective", "n": 1, "k": 5})
    worst_var = 0.0
    worst_int = 0.0
    vol = proj.volume()
    for k in range(2, 6):
        tau_k, count = bergman_kernel(proj, k)
        vals = tau_k.values.real
        mean = float(np.sum(proj.geometry.quad_weights * vals) / vol)
        worst_var = max(worst_var, float(
            np.sum(proj.geometry.quad_weights * (vals - mean) ** 2) / vol))
        worst_int = max(worst_int, abs(float(
            np.sum(proj.geometry.quad_weights * vals)) - count))
    checks["bergman_variance"] = worst_var
    checks["bergman_integral_gap"] = worst_int
    if worst_var > tol["bergman_variance"]:
        failures.append(f"section density variance: {worst_var:.3e}")
    if worst_int > tol["bergman_integral"]:
        failures.append(f"section density integral gap: {worst_int:.3e}")

    # energy variation closed form
    sq = build_backend({"kind": "torus", "n": 1, "tau": [[1j]], "bandwidth": 3,
                        "epsilon": 0.0})
    phi_val = 0.31 - 0.17j
    phi = sq.project(Bundle.tangent(), 1,
                     np.full((sq.geometry.nnodes, 1, 1), phi_val))
    fmap = en.TorusMap.affine(sq.geometry, np.array([[1.0, 0.0]]))
    fam = en.MapFamily(fmap, u_linear=np.zeros((1, 2), dtype=complex))
    target = en.TargetManifold.flat_space(1)
    Efun = en.affine_energy_function(sq, np.array([[phi_val]]),
                                     fmap.linear, target)
    rep = en.second_variation(sq, phi, fam, target, energy_of_t=Efun, grid_size=3)
    e_gap = max(
        abs(rep.first_t - (-phi_val / 4)),
        abs(rep.hessian_formula - abs(phi_val) ** 2 / 2),
    )
    checks["energy_closed_form_gap"] = e_gap
    checks["energy_grid_min"] = rep.grid_min
    if e_gap > tol["energy_fd"]:
        failures.append(f"energy closed form gap: {e_gap:.3e}")
    if rep.grid_min is not None and rep.grid_min < -tol["psh"]:
        failures.append(f"energy grid minimum: {rep.grid_min:.3e}")

    summary = {"checks": checks, "failures": failures}
    write_summary(out / "selftest.json", summary)
    return (2 if failures else 0), summary


_PIPELINES: dict[str, Callable[[dict, Path], tuple[int, dict]]] = {
    "solve": _pipeline_solve,
    "gauge": _pipeline_gauge,
    "wp": _pipeline_wp,
    "bergman": _pipeline_bergman,
    "ricci-limit": _pipeline_ricci,
    "energy": _pipeline_energy,
    "selftest": _pipeline_selftest,
}


def run(verb: str, cfg: dict[str, Any], out_dir: str | Path) -> int:
    """Validate, dispatch one pipeline, and write its artifacts."""
    cfg = _validate_config(cfg)
    if verb not in _PIPELINES:
        raise ConfigError(f"unknown pipeline verb {verb!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    code, summary = _PIPELINES[verb](cfg, out)
    for line in summary.get("failures", []):
        print(f"tolerance failure: {line}", file=sys.stderr)
    return code


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kedeform",
        description="deterministic experiment pipelines for the deformation toolkit",
    )
    sub = parser.add_subparsers(dest="group", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=False, help="experiment config JSON")
        p.add_argument("--out", default="artifacts", help="output directory")
        p.add_argument("--order", type=int, help="truncation order override")
        p.add_argument("--kmin", type=int, help="lowest power in sweeps")
        p.add_argument("--kmax", type=int, help="highest power in sweeps")
        p.add_argument("--grid", type=int, help="scan grid size override")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--tol", type=float, help="override every tolerance")

    kur = sub.add_parser("kuranishi", help="deformation family pipelines")
    kursub = kur.add_subparsers(dest="action", required=True)
    common(kursub.add_parser("solve", help="solve the family order by order"))

    gauge = sub.add_parser("gauge", help="gauge residual pipelines")
    gaugesub = gauge.add_subparsers(dest="action", required=True)
    common(gaugesub.add_parser("check", help="residual norms at every order"))

    wp = sub.add_parser("wp", help="deformation metric pipelines")
    wpsub = wp.add_subparsers(dest="action", required=True)
    common(wpsub.add_parser("compute", help="pairing and resolvent routes"))

    berg = sub.add_parser("bergman", help="section density pipelines")
    bergsub = berg.add_subparsers(dest="action", required=True)
    common(bergsub.add_parser("sweep", help="constants across powers"))

    common(sub.add_parser("ricci-limit", help="normalized curvature sweep"))
    energy = sub.add_parser("energy", help="harmonic map energy pipelines")
    energysub = energy.add_subparsers(dest="action", required=True)
    common(energysub.add_parser("scan", help="variation scan over the family"))

    common(sub.add_parser("selftest", help="run the built-in invariant suite"))
    return parser


_VERB_BY_GROUP = {
    "kuranishi": "solve",
    "gauge": "gauge",
    "wp": "wp",
    "bergman": "bergman",
    "ricci-limit": "ricci-limit",
    "energy": "energy",
    "selftest": "selftest",
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    verb = _VERB_BY_GROUP[args.group]
    try:
        if args.config is not None:
            cfg = load_config(args.config)
        elif verb == "selftest":
            cfg = _validate_config({"backend": {"kind": "torus"}})
        else:
            raise ConfigError("this verb needs --config")
        for key in ("order", "kmin", "kmax", "grid", "seed"):
            val = getattr(args, key, None)
            if val is not None:
                cfg[key] = val
        if args.tol is not None:
            if args.tol <= 0:
                raise ConfigError("--tol must be positive")
            cfg["tolerances"] = {k: args.tol for k in cfg["tolerances"]}
        cfg = _validate_config(cfg)
        return run(verb, cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
