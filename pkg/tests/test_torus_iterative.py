"""Matrix-free torus package against the dense reference implementation."""

import numpy as np
import pytest

from kedeform.backends.torus import build_torus_package
from kedeform.backends.torus_iterative import (
    IterativeTorusPackage,
    build_iterative_torus_package,
)
from kedeform.hodge import Bundle
from kedeform.kuranishi import (
    check_gauge,
    check_integrability,
    gauge_compatible_basis,
    solve_kuranishi,
)
from kedeform.series import MultiIndex

T = Bundle.tangent()
TRIV = Bundle.trivial()

TAU2 = [[1.0j, 0.15 + 0.05j], [0.15 + 0.05j, 0.2 + 1.3j]]
PSI2 = {(1, 0, 0, 0): 0.12, (0, 1, 0, 1): 0.08 + 0.03j, (0, 0, 1, 0): 0.1j}
CFG = {
    "kind": "torus",
    "n": 2,
    "tau": TAU2,
    "bandwidth": 2,
    "epsilon": 0.05,
    "psi_modes": PSI2,
}


@pytest.fixture(scope="module")
def pair():
    return build_torus_package(CFG), build_iterative_torus_package(CFG)


def _transfer(dense, it, u):
    """Dense-package copy of an iterative-package vector via node values."""
    return dense.project(u.bundle, u.q, it.synth(u).values)


def _rand(it, key, seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(it.dim(key)) + 1j * rng.standard_normal(it.dim(key))
    return it.form(key[0], key[1], c)


@pytest.mark.parametrize("key", [(T, 1), (T, 2), (TRIV, 1)])
def test_norm_and_inner_match_dense(pair, key):
    dense, it = pair
    u = _rand(it, key, 1)
    v = _rand(it, key, 2)
    ud, vd = _transfer(dense, it, u), _transfer(dense, it, v)
    assert it.norm(u) == pytest.approx(dense.norm(ud), rel=1e-11)
    assert it.inner(u, v) == pytest.approx(dense.inner(ud, vd), rel=1e-10)


@pytest.mark.parametrize(
    "key,op",
    [
        ((T, 1), "dbar"),
        ((T, 1), "dbar_star"),
        ((T, 1), "box_apply"),
        ((T, 1), "harmonic_project"),
        ((T, 2), "dbar_star"),
        ((T, 2), "box_apply"),
        ((T, 2), "harmonic_project"),
        ((T, 2), "coexact_potential"),
    ],
)
def test_operator_matches_dense_at_nodes(pair, key, op):
    dense, it = pair
    u = _rand(it, key, 5)
    ud = _transfer(dense, it, u)
    a = it.synth(getattr(it, op)(u)).values
    b = dense.synth(getattr(dense, op)(ud)).values
    scale = max(1.0, float(np.max(np.abs(b))))
    assert np.max(np.abs(a - b)) <= 1e-9 * scale


def test_bracket_matches_dense(pair):
    dense, it = pair
    u, v = _rand(it, (T, 1), 11), _rand(it, (T, 1), 12)
    a = it.synth(it.bracket(u, v)).values
    b = dense.synth(dense.bracket(_transfer(dense, it, u), _transfer(dense, it, v))).values
    assert np.max(np.abs(a - b)) <= 1e-8 * max(1.0, float(np.max(np.abs(b))))


def test_project_synth_round_trip(pair):
    _, it = pair
    u = _rand(it, (T, 1), 21)
    redo = it.project(T, 1, it.synth(u).values)
    assert it.norm(redo - u) <= 1e-10 * it.norm(u)


def test_harmonic_projector_is_idempotent_and_kills_box(pair):
    _, it = pair
    u = _rand(it, (T, 1), 31)
    h = it.harmonic_project(u)
    assert it.norm(it.harmonic_project(h) - h) <= 1e-9 * max(1.0, it.norm(h))
    assert it.norm(it.box_apply(h)) <= 1e-8 * max(1.0, it.norm(h))


def test_coexact_potential_solves_dbar_equation(pair):
    _, it = pair
    s = _rand(it, (T, 2), 41)
    x = it.coexact_potential(s)
    target = s - it.harmonic_project(s)
    assert it.norm(it.dbar(x) - target) <= 1e-9 * it.norm(s)
    # minimality: the potential itself carries no dbar-closed component
    assert it.norm(it.harmonic_project(x)) <= 1e-9 * it.norm(s)


def test_solver_rejects_foreign_vectors_and_degrees(pair):
    dense, it = pair
    u = _rand(it, (T, 1), 51)
    ud = _transfer(dense, it, u)
    with pytest.raises(ValueError, match="different backend"):
        it.norm(ud)
    f = _rand(it, (TRIV, 0), 52)
    with pytest.raises(ValueError, match="degree zero"):
        it.dbar_star(f)


def test_stalled_iteration_raises():
    geom_cfg = dict(CFG)
    it = IterativeTorusPackage(
        build_iterative_torus_package(geom_cfg).geometry, cg_tol=1e-13, cg_maxiter=1
    )
    u = _rand(it, (T, 1), 61)
    with pytest.raises(RuntimeError, match="conjugate gradient"):
        it.harmonic_project(u)


def test_kuranishi_solution_matches_dense_route():
    cfg = dict(CFG, bandwidth=1)
    dense = build_torus_package(cfg)
    it = build_iterative_torus_package(cfg)
    bd = gauge_compatible_basis(dense, count=1)
    bi = gauge_compatible_basis(it, count=1)
    assert np.max(np.abs(dense.synth(bd[0]).values - it.synth(bi[0]).values)) <= 1e-12
    sd = solve_kuranishi(dense, bd, 3)
    si = solve_kuranishi(it, bi, 3)
    for p in (2, 3):
        I = MultiIndex((p,))
        a = dense.synth(sd.coeffs[I]).values
        b = it.synth(si.coeffs[I]).values
        assert np.max(np.abs(a - b)) <= 1e-12
    for t in (0.04, 0.08):
        assert check_integrability(sd, [t]) == pytest.approx(
            check_integrability(si, [t]), rel=1e-9
        )
    rd, ri = check_gauge(sd), check_gauge(si)
    for p in rd.orders:
        a, b = rd.by_order(p), ri.by_order(p)
        for col in ("divergence", "kahler_contraction"):
            assert a[col] == pytest.approx(b[col], rel=1e-9, abs=1e-12)


def test_divergence_gauge_requires_dense_backend(pair):
    _, it = pair
    basis = gauge_compatible_basis(it, count=1)
    with pytest.raises(ValueError, match="dense operator backend"):
        solve_kuranishi(it, basis, 2, gauge="divergence")
