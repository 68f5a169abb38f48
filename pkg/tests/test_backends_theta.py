import numpy as np
import pytest

from kedeform.backends.theta import (
    build_abelian_geometry,
    build_abelian_package,
    theta_sections,
)
from kedeform.backends.torus import build_torus_package
from kedeform.hodge import Bundle

TAU = 0.2 + 1.1j


def cfg(**kw):
    base = {"kind": "abelian", "n": 1, "tau": TAU, "k": 2}
    base.update(kw)
    return base


@pytest.fixture(scope="module")
def pkg2():
    return build_abelian_package(cfg())


def raw_form(pkg, q, raw):
    space = pkg.geometry.space_def(Bundle.power(pkg.geometry.k), q)
    return pkg.project(Bundle.power(pkg.geometry.k), q, space.synth(raw))


def test_single_theta_section_holomorphic():
    pkg = build_abelian_package(cfg(k=1))
    secs = theta_sections(pkg)
    assert len(secs) == 1
    assert pkg.norm(pkg.dbar(secs[0])) <= 1e-10


def test_three_sections_gram_positive_definite():
    pkg = build_abelian_package(cfg(k=3))
    secs = theta_sections(pkg)
    assert len(secs) == 3
    G = np.array([[pkg.inner(a, b) for b in secs] for a in secs])
    assert np.min(np.linalg.eigvalsh(G)) > 0.9
    assert np.max(np.abs(G - np.eye(3))) < 1e-10


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("tau", [1.0j, TAU, 0.4 + 0.8j])
def test_section_count_independent_of_tau(k, tau):
    pkg = build_abelian_package(cfg(k=k, tau=tau))
    assert len(pkg.harmonic_basis(Bundle.power(k), 0)) == k


def test_landau_spectrum_on_sections(pkg2):
    # magnetic Laplacian ladder: eigenvalues j*k, each with multiplicity k
    geom = pkg2.geometry
    ev, _ = pkg2.spectrum((Bundle.power(2), 0))
    pred = np.sort(np.repeat(np.arange(geom.levels) * geom.k, geom.k)).astype(float)
    assert np.max(np.abs(np.sort(ev) - pred)) < 1e-9


def test_landau_spectrum_on_one_forms(pkg2):
    # in-band eigenvalues (j+1)*k plus the documented top-level artifact zeros
    geom = pkg2.geometry
    ev = np.sort(pkg2.spectrum((Bundle.power(2), 1))[0])
    inband = np.sort(np.repeat(np.arange(1, geom.levels) * geom.k, geom.k)).astype(float)
    assert np.max(np.abs(ev[: geom.k])) < 1e-9
    assert np.max(np.abs(ev[geom.k :] - inband)) < 1e-9


def test_dbar_ladder_is_exact(pkg2):
    geom = pkg2.geometry
    L = geom.levels
    for a in range(geom.k):
        for j in range(1, L - 1):
            e = np.zeros(geom.k * L, complex)
            e[a * L + j] = 1.0
            down = pkg2.dbar(raw_form(pkg2, 0, e))
            target = np.zeros(geom.k * L, complex)
            target[a * L + j - 1] = -np.sqrt(j * geom.gamma)
            want = raw_form(pkg2, 1, target)
            assert pkg2.norm(down - want) < 1e-9 * pkg2.norm(want)


def test_contract_nabla_matches_divergence_route(pkg2):
    geom = pkg2.geometry
    P = Bundle.power(2)
    phi = pkg2.harmonic_basis(Bundle.tangent(), 1)[0]
    phic = pkg2.synth(phi).values[:, 0, 0]
    for s in theta_sections(pkg2):
        s_nodes = pkg2.synth(s).values
        r1 = pkg2.contract_nabla(phi, s)
        div_nodes = geom.chern_derivative_nodes((phic * s_nodes).reshape(-1, 1), 1)
        r2 = pkg2.project(P, 1, div_nodes)
        assert pkg2.norm(r1 - r2) < 1e-11


def test_divergence_resolvent_identity_shift_k(pkg2):
    # div* G div = id - k (box + k)^{-1} on in-band tensor fields, weak form
    geom = pkg2.geometry
    P = Bundle.power(2)
    k = geom.k
    c = geom.tangent_pair_constant
    rng = np.random.default_rng(3)

    def inband(r):
        raw = np.zeros(geom.k * geom.levels, complex)
        for a in range(geom.k):
            raw[a * geom.levels : a * geom.levels + 5] = r.standard_normal(
                5
            ) + 1j * r.standard_normal(5)
        return pkg2.project(P, 1, geom.space_def(P, 1).synth(raw))

    def div_rep(u):
        return pkg2.project(
            P, 1, geom.chern_derivative_nodes(pkg2.synth(u).values, 1)
        )

    X = inband(rng)
    GdivX = pkg2.green(div_rep(X))
    rhs = X.coeffs - k * pkg2.box_plus_shift_inverse(X, float(k)).coeffs
    bad = X.coeffs - (k + 1) * pkg2.box_plus_shift_inverse(X, float(k + 1)).coeffs
    for _ in range(3):
        Y = inband(rng)
        lhs = np.vdot(div_rep(Y).coeffs, GdivX.coeffs)
        assert abs(lhs - c * np.vdot(Y.coeffs, rhs)) < 1e-10
        assert abs(lhs - c * np.vdot(Y.coeffs, bad)) > 1e-3


def test_ladder_overflow_guard(pkg2):
    geom = pkg2.geometry
    L = geom.levels
    top = np.zeros(geom.k * L, complex)
    top[L - 1] = 1.0
    nodes = geom.space_def(Bundle.power(2), 0).synth(top)
    with pytest.raises(ValueError, match="ladder overflow"):
        geom.chern_derivative_nodes(nodes, 0)


def test_beltrami_basis_constant_unit(pkg2):
    basis = pkg2.harmonic_basis(Bundle.tangent(), 1)
    assert len(basis) == 1
    vals = pkg2.synth(basis[0]).values[:, 0, 0]
    assert np.ptp(np.abs(vals)) < 1e-12
    assert abs(pkg2.norm(basis[0]) - 1.0) < 1e-12


def test_volume_is_pi(pkg2):
    assert abs(pkg2.volume() - np.pi) < 1e-12


def test_config_validation_errors():
    with pytest.raises(ValueError, match="dimension 1"):
        build_abelian_geometry(cfg(n=2))
    with pytest.raises(ValueError, match="flat metric"):
        build_abelian_geometry(cfg(epsilon=0.1))
    with pytest.raises(ValueError, match="metric_scale"):
        build_abelian_geometry(cfg(metric_scale=2.0))
    with pytest.raises(ValueError, match="at least 1"):
        build_abelian_geometry(cfg(k=0))
    with pytest.raises(ValueError, match="bandwidth too small"):
        build_abelian_geometry(cfg(k=8, bandwidth=3))


def test_theta_sections_argument_checks(pkg2):
    with pytest.raises(ValueError, match="differs"):
        theta_sections(pkg2, k=3)
    torus = build_torus_package({"kind": "torus", "n": 1, "tau": [[1.0j]], "bandwidth": 2})
    with pytest.raises(ValueError, match="abelian"):
        theta_sections(torus)


def test_describe_round_trip(pkg2):
    d = pkg2.geometry.describe()
    assert d["kind"] == "abelian"
    assert d["k"] == 2
    assert pkg2.cache_key()
