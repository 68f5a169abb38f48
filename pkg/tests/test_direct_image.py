"""Section transport, Gram series, curvature, Bergman data, level sweep."""

import json
import math

import numpy as np
import pytest

from kedeform.backends import build_backend
from kedeform.hodge import Bundle
from kedeform.ke_expand import solve_rho
from kedeform.kuranishi import evaluate_phi, gauge_compatible_basis, solve_kuranishi
from kedeform.series import MultiIndex
from kedeform import direct_image as di

T = Bundle.tangent()
TRIV = Bundle.trivial()
TAU = 0.2 + 1.1j


def family(k, d=2):
    pkg = build_backend({"kind": "abelian", "tau": [[TAU]], "k": k})
    basis = gauge_compatible_basis(pkg)
    sol = solve_kuranishi(pkg, basis, d)
    secs = di.orthonormal_sections(pkg, k)
    exts = [di.extend_section(pkg, sol, s, d) for s in secs]
    return pkg, sol, secs, exts


@pytest.fixture(scope="module")
def fam2():
    return family(2, d=3)


# -- extension ------------------------------------------------------------


def test_zero_family_extension_is_constant(fam2):
    pkg = fam2[0]
    sol0 = solve_kuranishi(pkg, [pkg.zero_form(T, 1)], 2)
    s = di.orthonormal_sections(pkg, 2)[0]
    ext = di.extend_section(pkg, sol0, s, 2)
    assert pkg.norm(ext.evaluate([0.2]) - s) == 0.0


def test_extension_rejects_non_holomorphic(fam2):
    pkg, sol = fam2[0], fam2[1]
    rng = np.random.default_rng(0)
    bad = pkg.random_form(Bundle.power(2), 0, rng)
    with pytest.raises(ValueError, match="not holomorphic"):
        di.extend_section(pkg, sol, bad, 2)


def test_extension_rejects_excess_order(fam2):
    pkg, sol, secs, _ = fam2
    with pytest.raises(ValueError, match="exceeds the solved"):
        di.extend_section(pkg, sol, secs[0], sol.order + 1)


def test_extension_routes_agree(fam2):
    for ext in fam2[3]:
        assert ext.diagnostics["route_gap"] < 1e-10


def test_extension_harmonic_normalization(fam2):
    # central-fiber harmonic part of every correction vanishes
    for ext in fam2[3]:
        assert ext.diagnostics["harmonic_component"] < 1e-12


def test_extension_residual_slope(fam2):
    pkg, sol, _, exts = fam2
    d = exts[0].order
    radii = (0.02, 0.04, 0.08)
    for ext in exts:
        res = [di.family_residual(pkg, sol, ext, np.array([r])) for r in radii]
        for lo, hi in zip(res, res[1:]):
            slope = math.log(hi / lo) / math.log(2.0)
            assert slope >= d + 0.9


def test_extension_bandwidth_overflow_guard():
    pkg = build_backend({"kind": "abelian", "tau": [[TAU]], "k": 2, "levels": 2})
    basis = gauge_compatible_basis(pkg)
    sol = solve_kuranishi(pkg, basis, 2)
    s = di.orthonormal_sections(pkg, 2)[0]
    with pytest.raises(ValueError, match="ladder overflow"):
        di.extend_section(pkg, sol, s, 2)


# -- gram series ----------------------------------------------------------


def test_gram_order_zero_is_base_gram(fam2):
    pkg, sol, secs, exts = fam2
    gs = di.gram_series(pkg, sol, exts, None, 0)
    Z = MultiIndex.zero(1)
    G0 = gs.h.extract(Z, Z)
    assert np.max(np.abs(G0 - np.eye(len(secs)))) < 1e-10


@pytest.mark.parametrize("k", [1, 2, 3])
def test_gram_first_order_vanishes(k):
    pkg, sol, secs, exts = family(k, d=2)
    rho = solve_rho(pkg, sol.basis)
    gs = di.gram_series(pkg, sol, exts, rho, 2)
    assert gs.diagnostics["first_order_max"] < 1e-8
    assert gs.diagnostics["hermitian_defect"] < 1e-12


def test_gram_requires_consistent_orders(fam2):
    pkg, sol, secs, exts = fam2
    rho = solve_rho(pkg, sol.basis)
    with pytest.raises(ValueError, match="order mismatch"):
        di.gram_series(pkg, sol, exts, rho, exts[0].order + 1)
    short = [di.extend_section(pkg, sol, s, 1) for s in secs]
    with pytest.raises(ValueError, match="order mismatch"):
        di.gram_series(pkg, sol, short, rho, 2)
    with pytest.raises(ValueError, match="volume-weight expansion"):
        di.gram_series(pkg, sol, exts, None, 2)


def test_gram_series_matches_direct_quadrature(fam2):
    pkg, sol, secs, exts = fam2
    geom = pkg.geometry
    rho = solve_rho(pkg, sol.basis)
    d = exts[0].order
    gs = di.gram_series(pkg, sol, exts, rho, d)
    P = Bundle.power(2)
    w0 = geom.pair_weight(P, 0)[:, 0, 0] * geom.quad_weights
    rho11 = pkg.synth(rho.rho_ij[0][0]).values

    def brute(t):
        tv = np.array([t], dtype=complex)
        phin = pkg.synth(evaluate_phi(sol, tv)).values
        endo = geom.endo_from_beltrami(phin, phin)[:, 0, 0]
        weight = np.exp(3.0 * abs(t) ** 2 * rho11) * (1.0 - endo)
        S = np.stack([pkg.synth(e.evaluate(tv)).values for e in exts])
        return np.einsum("ax,x,bx->ab", S, w0 * weight, np.conjugate(S))

    errs = []
    for t in (0.05, 0.1):
        got = gs.evaluate(np.array([t]))
        errs.append(np.max(np.abs(got - brute(t))))
    assert errs[1] < 1e-4
    ratio = errs[1] / max(errs[0], 1e-300)
    assert 2.0 ** (d - 1) < ratio < 2.0 ** (d + 3)


def test_basis_stability(fam2):
    pkg, sol, secs, exts = fam2
    rho = solve_rho(pkg, sol.basis)
    gs = di.gram_series(pkg, sol, exts, rho, 2)
    assert di.basis_stability_check(gs, [np.array([0.0])])
    grid = [np.array([r * np.exp(1j * a)]) for r in (0.05, 0.1) for a in (0.0, 2.0, 4.0)]
    assert di.basis_stability_check(gs, grid)
    with pytest.raises(ValueError, match="trust radius"):
        di.basis_stability_check(gs, [np.array([0.5])])


# -- curvature ------------------------------------------------------------


def test_curvature_zero_family(fam2):
    pkg = fam2[0]
    sol0 = solve_kuranishi(pkg, [pkg.zero_form(T, 1)], 2)
    exts = [di.extend_section(pkg, sol0, s, 2) for s in di.orthonormal_sections(pkg, 2)]
    blk = di.curvature_block(pkg, sol0, exts, None, 2)
    assert np.max(np.abs(blk.R)) < 1e-12
    assert np.max(np.abs(blk.ricci)) < 1e-12


@pytest.mark.parametrize("k", [1, 2, 3])
def test_curvature_matches_series_second_derivative(k):
    pkg, sol, secs, exts = family(k, d=2)
    blk = di.curvature_block(pkg, sol, exts, None, k)
    assert blk.diagnostics["gram_cross_check_rel"] < 1e-6
    assert blk.diagnostics["hermitian_defect"] < 1e-12
    assert blk.diagnostics["ricci_logdet_defect"] < 1e-8
    assert blk.diagnostics["first_term_bound_slack"] > -1e-12


def test_curvature_closed_form_value():
    # flat polarized family: R[a, a] = -(k + 1/2)/pi for every section
    k = 3
    pkg, sol, secs, exts = family(k, d=2)
    blk = di.curvature_block(pkg, sol, exts, None, k)
    want = -(k + 0.5) / math.pi
    for a in range(len(secs)):
        assert abs(blk.R[a, a, 0, 0] - want) < 1e-10
    assert abs(blk.ricci[0, 0] - k * want) < 1e-9


def test_curvature_rejects_bad_inputs(fam2):
    pkg, sol, secs, exts = fam2
    with pytest.raises(ValueError, match="at least 1"):
        di.curvature_block(pkg, sol, exts, None, 0)
    scaled = [di.extend_section(pkg, sol, s * 2.0, 2) for s in secs]
    with pytest.raises(ValueError, match="orthonormal"):
        di.curvature_block(pkg, sol, scaled, None, 2)
    rng = np.random.default_rng(1)
    nu_bad = [[pkg.random_form(TRIV, 0, rng)]]
    with pytest.raises(ValueError, match="first eigenspace"):
        di.curvature_block(pkg, sol, exts, nu_bad, 2)


def test_logdet_finite_difference_oracle(fam2):
    # independent Ricci via Richardson 4-point stencil on log det h(t)
    pkg, sol, secs, exts = fam2
    rho = solve_rho(pkg, sol.basis)
    gs = di.gram_series(pkg, sol, exts, rho, 2)
    blk = di.curvature_block(pkg, sol, exts, None, 2)

    def F(t):
        sign, logdet = np.linalg.slogdet(gs.evaluate(np.array([t])))
        return logdet

    def stencil(h):
        pts = [h, 1j * h, -h, -1j * h]
        return (sum(F(p) for p in pts) - 4.0 * F(0.0)) / (4.0 * h * h)

    s1, s2 = stencil(0.02), stencil(0.01)
    fd = (4.0 * s2 - s1) / 3.0
    ric = blk.ricci[0, 0].real
    assert abs(-fd - ric) < 1e-6 * abs(ric)


# -- deformation metric, Bergman, invariants ------------------------------


def test_wp_metric_empty():
    pkg = build_backend({"kind": "abelian", "tau": [[TAU]], "k": 1})
    W = di.wp_metric(pkg, [])
    assert W.shape == (0, 0)


def test_wp_metric_unit_norm_basis(fam2):
    pkg, sol = fam2[0], fam2[1]
    W, W2 = di.wp_metric(pkg, sol.basis, return_both=True)
    assert abs(W[0, 0] - 1.0) < 1e-10
    assert np.max(np.abs(W - W2)) < 1e-10
    evals = np.linalg.eigvalsh(W)
    assert np.min(evals) > 1e-10


def test_wp_metric_rejects_non_harmonic(fam2):
    pkg = fam2[0]
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError, match="harmonic"):
        di.wp_metric(pkg, [pkg.random_form(T, 1, rng)])


@pytest.mark.parametrize("k", [1, 2, 3])
def test_bergman_integral_counts_sections(k):
    pkg = build_backend({"kind": "abelian", "tau": [[TAU]], "k": k})
    tau_field, N = di.bergman_kernel(pkg, k)
    assert N == k
    assert np.min(tau_field.values) > 0
    assert abs(pkg.integrate(tau_field) - N) < 1e-8


def test_bergman_rejects_unavailable_level(fam2):
    pkg = fam2[0]
    with pytest.raises(ValueError, match="not available"):
        di.bergman_kernel(pkg, 5)


def test_top_degree_closure(fam2):
    # dbar of the divergence source vanishes structurally at top degree
    pkg = fam2[0]
    assert pkg.dbar_codomain((Bundle.power(2), 1)) is None


def test_divergence_resolvent_identity(fam2):
    pkg, sol, secs, _ = fam2
    assert di.divergence_resolvent_check(pkg, sol.basis[0], secs[0]) < 1e-8


# -- sweep ----------------------------------------------------------------


def test_sweep_limit_and_remainder():
    ks = [1, 2, 3, 4, 6]
    rows, summary = di.ricci_limit_sweep({"tau": [[TAU]]}, ks)
    fit = summary["entries"]["0,0"]
    assert summary["sign"] == -1
    assert fit["limit_gap"] < 1e-8
    assert abs(fit["B_re"] + 0.5) < 1e-6
    by_k = {r["k"]: r for r in rows}
    for k in ks:
        assert by_k[k]["remainder"] < 0.6 / k
    assert json.dumps(summary)  # serializable for the CLI


def test_sweep_empty_family():
    rows, summary = di.ricci_limit_sweep({"tau": [[TAU]]}, [1, 2], count=0)
    assert rows == []
    assert summary["entries"] == {}


def test_sweep_bandwidth_guard():
    with pytest.raises(ValueError, match="bandwidth too small"):
        di.ricci_limit_sweep({"tau": [[TAU]], "bandwidth": 3}, [8])
