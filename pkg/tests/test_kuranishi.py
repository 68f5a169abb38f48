import numpy as np
import pytest

from kedeform.backends.torus import build_torus_package
from kedeform.hodge import Bundle, PointField
from kedeform.kuranishi import (
    check_gauge,
    check_integrability,
    evaluate_phi,
    futaki,
    gauge_compatible_basis,
    lie_action_pairing,
    mu_supremum,
    ricci_potential,
    solve_kuranishi,
    triviality_test,
)
from kedeform.series import MultiIndex

TAU2 = [[1.0j, 0.15 + 0.05j], [0.15 + 0.05j, 0.2 + 1.3j]]
PSI2 = {(1, 0, 0, 0): 0.12, (0, 1, 0, 1): 0.08 + 0.03j, (0, 0, 1, 0): 0.1j}

T = Bundle.tangent()
TRIV = Bundle.trivial()


@pytest.fixture(scope="module")
def flat1():
    return build_torus_package({"kind": "torus", "n": 1, "tau": [[1.0j]], "bandwidth": 4})


@pytest.fixture(scope="module")
def flat2():
    return build_torus_package({"kind": "torus", "n": 2, "tau": TAU2, "bandwidth": 1})


@pytest.fixture(scope="module")
def pert2():
    return build_torus_package(
        {
            "kind": "torus",
            "n": 2,
            "tau": TAU2,
            "bandwidth": 1,
            "epsilon": 0.05,
            "psi_modes": PSI2,
        }
    )


@pytest.fixture(scope="module")
def flat_sol(flat2):
    basis = gauge_compatible_basis(flat2)
    assert len(basis) == 3  # symmetric constants at n = 2
    return solve_kuranishi(flat2, basis, 3)


@pytest.fixture(scope="module")
def pert_sol(pert2):
    basis = gauge_compatible_basis(pert2)[:1]
    return solve_kuranishi(pert2, basis, 3)


def test_flat_higher_coefficients_vanish(flat_sol):
    for I, phi in flat_sol.coeffs.items():
        if I.order >= 2:
            assert phi.norm() < 1e-12


def test_flat_gauge_report_clean(flat_sol):
    report = check_gauge(flat_sol)
    assert report.orders == [1, 2, 3]
    for column in report.columns:
        assert report.max_entry(column) < 1e-12
    for row in report.rows:
        assert all(v >= 0.0 for v in row)


def test_flat_integrability_exact(flat_sol):
    t = np.array([0.05, -0.03, 0.02 + 0.01j])
    assert check_integrability(flat_sol, t) < 1e-12
    assert check_integrability(flat_sol, np.zeros(3)) == 0.0


def test_first_order_solution_is_input(flat2):
    basis = flat2.harmonic_basis(T, 1)
    sol = solve_kuranishi(flat2, basis, 1)
    assert set(sol.coeffs) == {MultiIndex.unit(4, i) for i in range(4)}
    t = np.array([0.1, 0.0, 0.2, -0.1])
    direct = sum((basis[i] * t[i] for i in range(4)), flat2.zero_form(T, 1))
    assert (evaluate_phi(sol, t) - direct).norm() < 1e-14


def test_input_validation(flat2):
    rng = np.random.default_rng(3)
    basis = flat2.harmonic_basis(T, 1)
    with pytest.raises(ValueError, match="non-harmonic"):
        solve_kuranishi(flat2, [flat2.random_form(T, 1, rng)], 2)
    with pytest.raises(ValueError, match="tangent-valued"):
        solve_kuranishi(flat2, [flat2.random_form(TRIV, 0, rng)], 2)
    with pytest.raises(ValueError):
        solve_kuranishi(flat2, basis, 0)
    with pytest.raises(ValueError):
        solve_kuranishi(flat2, [], 2)
    sol = solve_kuranishi(flat2, basis, 1)
    with pytest.raises(ValueError, match="length mismatch"):
        evaluate_phi(sol, np.array([0.1, 0.2]))


def test_perturbed_second_order_nonzero(pert_sol):
    phi2 = pert_sol.coefficient((2,))
    assert phi2.norm() > 1e-6
    report = check_gauge(pert_sol)
    # construction gauge is exact in floating point
    assert report.max_entry("dbar_star") < 1e-10
    # non Kaehler-Einstein background: divergence gauge genuinely fails
    assert report.by_order(2)["divergence"] > 1e-6
    # family is unobstructed
    assert report.max_entry("obstruction") < 1e-8
    for d in pert_sol.diagnostics:
        assert d["obstruction"] < 1e-8


def test_recursion_consistency_recomputed(pert_sol):
    pkg = pert_sol.package
    for I, phi in pert_sol.coeffs.items():
        if I.order < 2:
            continue
        source = pkg.zero_form(T, 2)
        for J, K in I.splittings(min_order=1):
            source = source + pkg.bracket(pert_sol.coeffs[J], pert_sol.coeffs[K])
        redo = pkg.dbar_star(pkg.green(source)) * 0.5
        assert (redo - phi).norm() < 1e-12
        assert pkg.harmonic_project(phi).norm() < 1e-10


def test_divergence_gauge_route(flat2, pert2):
    # Kaehler-Einstein (flat) background: both routes vanish identically
    basis = flat2.harmonic_basis(T, 1)
    alt = solve_kuranishi(flat2, basis, 2, gauge="divergence")
    for I, phi in alt.coeffs.items():
        if I.order >= 2:
            assert phi.norm() < 1e-10
    # non-KE background: routes solve the same equation in different gauges
    basis_p = pert2.harmonic_basis(T, 1)[:1]
    star = solve_kuranishi(pert2, basis_p, 2)
    div = solve_kuranishi(pert2, basis_p, 2, gauge="divergence")
    i2 = MultiIndex((2,))
    diff = star.coeffs[i2] - div.coeffs[i2]
    assert pert2.dbar(diff).norm() < 1e-8
    r_star = check_gauge(star).by_order(2)
    r_div = check_gauge(div).by_order(2)
    assert r_div["divergence"] < r_star["divergence"]
    assert r_div["dbar_star"] > r_star["dbar_star"]


def test_gauge_kernel_inclusion_flat(flat2):
    # mode-wise equivalence content on a Kaehler-Einstein background:
    # divergence-free fields that kill the Kaehler form are coclosed
    m_div = flat2.matrix_of(flat2.divergence, (T, 1))
    m_con = flat2.matrix_of(flat2.contract_form, (T, 1))
    m_star = flat2.matrix_of(flat2.dbar_star, (T, 1))
    A = np.vstack([m_div, m_con])
    _, sv, vh = np.linalg.svd(A)
    tol = max(sv) * 1e-10
    null = vh[np.sum(sv > tol) :].conj().T
    assert null.shape[1] > 0
    assert np.max(np.abs(m_star @ null)) < 1e-8
    # the reverse inclusion fails: a constant antisymmetric-lowered field is
    # coclosed but does not kill the Kaehler form
    geom = flat2.geometry
    a = np.array([[0.0, 1.0], [-1.0, 0.0]], dtype=complex)
    nodes = np.einsum("il,xlj->xij", np.conjugate(np.linalg.inv(geom.g0)), np.broadcast_to(a, (geom.nnodes, 2, 2)))
    v = flat2.project(T, 1, nodes)
    assert flat2.dbar_star(v).norm() < 1e-10
    assert flat2.contract_form(v).norm() > 0.1


def test_ricci_potential_scalar_case(flat1):
    basis = flat1.harmonic_basis(T, 1)
    phi1 = basis[0] * np.sqrt(np.pi)  # unit pointwise magnitude
    nodes = flat1.synth(phi1).values
    assert abs(np.max(np.abs(nodes)) - 1.0) < 1e-10
    sol = solve_kuranishi(flat1, [phi1], 2)
    t = 0.3
    h = ricci_potential(sol, [t]).values
    assert np.max(np.abs(h - np.log(1 - t**2))) < 1e-10
    zero = ricci_potential(sol, [0.0]).values
    assert np.max(np.abs(zero)) == 0.0
    with pytest.raises(ValueError, match="convergence guard"):
        ricci_potential(sol, [0.9])


def test_mu_vanishes_for_divergence_free_field(flat1):
    basis = flat1.harmonic_basis(T, 1)
    nodes = flat1.synth(basis[0] * 0.4).values
    assert mu_supremum(flat1, nodes) < 1e-12


def test_lie_action_pairing_rejects_generic_function(flat1):
    rng = np.random.default_rng(7)
    f = flat1.random_form(TRIV, 0, rng)
    basis = flat1.harmonic_basis(T, 1)
    with pytest.raises(ValueError, match="unit eigenspace"):
        lie_action_pairing(flat1, f, basis[0], basis[0])


def test_lie_action_pairing_orthogonal_case():
    pkg = build_torus_package(
        {"kind": "torus", "n": 1, "tau": [[1.0j]], "bandwidth": 3, "metric_scale": np.pi}
    )
    f = pkg.first_eigenspace()[0]
    phi = pkg.harmonic_basis(T, 1)[0]
    val = lie_action_pairing(pkg, f, phi, phi)
    # the product of constant fields is constant and the eigenfunction has
    # zero mean, so the pairing vanishes
    assert abs(val) < 1e-10
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError, match="harmonic"):
        lie_action_pairing(pkg, f, pkg.random_form(T, 1, rng), phi)


def test_triviality_vacuous_on_flat_torus(flat2):
    res = triviality_test(flat2)
    assert res.is_trivial
    assert res.witness is None
    assert res.max_projection == 0.0


def test_triviality_synthetic_counterexample(pert2):
    basis = pert2.harmonic_basis(T, 1)
    q11 = pert2.pointwise_dot(basis[0], basis[0]).values
    mean = pert2.integrate(q11) / pert2.volume()
    mock = [PointField(pert2.backend_id, q11 - mean)]
    res = triviality_test(pert2, mock_lambda1=mock)
    assert not res.is_trivial
    assert res.witness == (1, 1)
    assert res.max_projection > 1e-4


def test_futaki_constant_potential_zero(flat2):
    xi = flat2.harmonic_basis(T, 0)[0]
    h = PointField(flat2.backend_id, np.full(flat2.geometry.nnodes, 2.5, dtype=complex))
    assert abs(futaki(flat2, xi, h)) < 1e-12


def test_futaki_integration_by_parts(pert2):
    rng = np.random.default_rng(13)
    xi = pert2.harmonic_basis(T, 0)[0]
    assert pert2.dbar(xi).norm() < 1e-10
    h_form = pert2.random_form(TRIV, 0, rng)
    h = pert2.synth(h_form)
    lhs = futaki(pert2, xi, h)
    div_xi = pert2.synth(pert2.divergence(xi)).values
    rhs = -pert2.integrate(h.values * div_xi)
    assert abs(lhs) > 1e-8  # genuinely nonzero on the non-flat background
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


def test_futaki_rejects_nonholomorphic_field(pert2):
    rng = np.random.default_rng(17)
    xi = pert2.random_form(T, 0, rng)
    h = PointField(pert2.backend_id, np.zeros(pert2.geometry.nnodes, dtype=complex))
    with pytest.raises(ValueError, match="not holomorphic"):
        futaki(pert2, xi, h)


def test_solution_summary_is_serializable(pert_sol):
    import json

    s = pert_sol.summary()
    text = json.dumps(s)
    assert "backend_id" in s and s["order"] == 3
    assert json.loads(text)["num_params"] == 1
