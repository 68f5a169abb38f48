import numpy as np
import pytest

from kedeform.backends.torus import TorusConfig, build_torus_geometry, build_torus_package
from kedeform.hodge import Bundle

TAU2 = [[1.0j, 0.15 + 0.05j], [0.15 + 0.05j, 0.2 + 1.3j]]
PSI2 = {(1, 0, 0, 0): 0.12, (0, 1, 0, 1): 0.08 + 0.03j, (0, 0, 1, 0): 0.1j}


def flat1(**kw):
    cfg = {"kind": "torus", "n": 1, "tau": [[1.0j]], "bandwidth": 6}
    cfg.update(kw)
    return build_torus_geometry(cfg)


def perturbed2(**kw):
    cfg = {
        "kind": "torus",
        "n": 2,
        "tau": TAU2,
        "bandwidth": 2,
        "epsilon": 0.05,
        "psi_modes": PSI2,
    }
    cfg.update(kw)
    return build_torus_geometry(cfg)


def test_volume_normalization():
    g1 = flat1()
    assert abs(g1.volume - np.pi) < 1e-12
    g2 = build_torus_geometry({"kind": "torus", "n": 2, "tau": TAU2, "bandwidth": 1})
    assert abs(g2.volume - np.pi**2) < 1e-12


def test_unit_volume_weights_sum_to_one():
    g = flat1(metric_scale=1.0 / np.pi)
    assert abs(np.sum(g.quad_weights) - 1.0) < 1e-12


def test_invalid_tau_rejected():
    with pytest.raises(ValueError):
        build_torus_geometry({"kind": "torus", "n": 1, "tau": [[1.0 - 0.2j]], "bandwidth": 2})
    bad = [[1.0j, 0.3], [0.0, 1.0j]]  # not symmetric
    with pytest.raises(ValueError):
        build_torus_geometry({"kind": "torus", "n": 2, "tau": bad, "bandwidth": 1})


def test_metric_positivity_guard():
    with pytest.raises(ValueError, match="positivity"):
        build_torus_geometry(
            {
                "kind": "torus",
                "n": 1,
                "tau": [[1.0j]],
                "bandwidth": 2,
                "epsilon": 1.0,
                "psi_modes": {(1, 0): 2.0},
            }
        )


def test_grid_too_small_rejected():
    with pytest.raises(ValueError, match="de-aliasing"):
        build_torus_geometry(
            {"kind": "torus", "n": 1, "tau": [[1.0j]], "bandwidth": 4, "grid": 12}
        )


def test_spectral_derivative_matches_mode_factor():
    g = flat1()
    m = np.array([2, -1])
    # nodal values of the single Fourier mode
    space = g.space_def(Bundle.trivial(), 0)
    raw = np.zeros(space.raw_dim, dtype=complex)
    idx = int(np.nonzero((g.modes == m).all(axis=1))[0][0])
    raw[idx] = 1.0
    nodes = space.synth(raw)
    der = g.dz_nodes(nodes, 0)
    zeta = g.zeta[idx, 0]
    assert np.max(np.abs(der - zeta * nodes)) < 1e-10
    derb = g.dzbar_nodes(nodes, 0)
    assert np.max(np.abs(derb - g.xi[idx, 0] * nodes)) < 1e-10


def test_synth_project_round_trip():
    g = perturbed2()
    rng = np.random.default_rng(3)
    for key in [(Bundle.trivial(), 1), (Bundle.tangent(), 1), (Bundle.tangent(), 2)]:
        space = g.space_def(*key)
        raw = rng.standard_normal(space.raw_dim) + 1j * rng.standard_normal(space.raw_dim)
        nodes = space.synth(raw)
        p = space.project_quad(nodes)
        gram = space.gram()
        # projection pairings must equal Gram times raw coefficients
        assert np.max(np.abs(p - gram @ raw)) < 1e-10 * np.max(np.abs(raw))


def test_gram_hermitian_positive():
    g = perturbed2()
    for key in [(Bundle.trivial(), 0), (Bundle.tangent(), 1)]:
        gram = g.space_def(*key).gram()
        assert np.max(np.abs(gram - gram.conj().T)) < 1e-12
        evals = np.linalg.eigvalsh(gram)
        assert np.min(evals) > 0


def test_flat_metric_data():
    g = flat1()
    assert np.max(np.abs(g.g_nodes - g.g0[None])) == 0
    assert np.max(np.abs(g.ric_nodes)) == 0
    assert abs(g.metric_min_eig - np.pi) < 1e-12


def test_perturbed_metric_hermitian_and_ricci_mean_zero():
    g = perturbed2()
    herm = g.g_nodes - np.conjugate(np.swapaxes(g.g_nodes, 1, 2))
    assert np.max(np.abs(herm)) < 1e-12
    assert np.max(np.abs(g.ric_nodes)) > 1e-4  # genuinely non Kaehler-Einstein
    # each Ricci component is a double derivative of a periodic function,
    # so its plain coordinate mean vanishes
    mean = np.mean(g.ric_nodes, axis=0)
    assert np.max(np.abs(mean)) < 1e-12


def test_pair_weight_positive_definite():
    g = perturbed2()
    for key in [(Bundle.trivial(), 1), (Bundle.tangent(), 1), (Bundle.tangent(), 2)]:
        W = g.pair_weight(*key)
        evals = np.linalg.eigvalsh(W)
        assert np.min(evals) > 0
        herm = W - np.conjugate(np.swapaxes(W, 1, 2))
        assert np.max(np.abs(herm)) < 1e-12


def test_bracket_symmetric_and_constant_kill():
    g = perturbed2()
    rng = np.random.default_rng(5)
    const = np.broadcast_to(
        rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)), (g.nnodes, 2, 2)
    )
    zero = g.bracket_nodes(const, const)
    assert np.max(np.abs(zero)) < 1e-12
    sp = g.space_def(Bundle.tangent(), 1)
    a = sp.synth(rng.standard_normal(sp.raw_dim) + 1j * rng.standard_normal(sp.raw_dim))
    b = sp.synth(rng.standard_normal(sp.raw_dim) + 1j * rng.standard_normal(sp.raw_dim))
    asym = g.bracket_nodes(a, b) - g.bracket_nodes(b, a)
    assert np.max(np.abs(asym)) < 1e-9 * max(np.max(np.abs(a)), 1.0) ** 2


def test_divergence_matches_finite_differences():
    g = build_torus_geometry(
        {"kind": "torus", "n": 2, "tau": TAU2, "bandwidth": 1, "grid": 32,
         "epsilon": 0.05, "psi_modes": PSI2}
    )
    rng = np.random.default_rng(7)
    sp = g.space_def(Bundle.tangent(), 1)
    X = sp.synth(rng.standard_normal(sp.raw_dim) + 1j * rng.standard_normal(sp.raw_dim))
    div = g.divergence_nodes(X, 1)

    # finite-difference oracle: d/dz = sum_j a[i,j] d/dx_j + b[i,j] d/dy_j
    def fd_deriv(F, axis):
        grid = F.reshape(g.grid_shape + F.shape[1:])
        h = 1.0 / g.M
        out = (
            8 * (np.roll(grid, -1, axis=axis) - np.roll(grid, 1, axis=axis))
            - (np.roll(grid, -2, axis=axis) - np.roll(grid, 2, axis=axis))
        ) / (12 * h)
        return out.reshape(F.shape)

    detg = g.detg_nodes.reshape(-1, 1)
    oracle = np.zeros((g.nnodes, 2), dtype=complex)
    for i in range(2):
        W = X[:, i, :] * detg
        dW = np.zeros_like(W)
        for j in range(2):
            dW += g._a[i, j] * fd_deriv(W, j) + g._b[i, j] * fd_deriv(W, j + 2)
        oracle += dW
    oracle /= detg
    scale = np.max(np.abs(div))
    assert np.max(np.abs(div - oracle)) < 5e-3 * scale


def test_contract_form_constant_symmetric_flat():
    # on the flat torus a beltrami field with symmetric lowered components
    # contracts to zero against the Kaehler form
    g = build_torus_geometry({"kind": "torus", "n": 2, "tau": TAU2, "bandwidth": 1})
    rng = np.random.default_rng(9)
    s = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    s = s + s.T  # symmetric lowered tensor s_{l j}
    ginvbar = np.conjugate(np.linalg.inv(g.g0))
    phi_mat = ginvbar @ s  # phi^i_{jbar} = sum_l [conj inv g][i,l] s_{l jbar}
    phi = np.broadcast_to(phi_mat, (g.nnodes, 2, 2))
    out = g.contract_form_nodes(phi)
    assert np.max(np.abs(out)) < 1e-12
    # and a generic constant does not contract to zero
    t = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    out2 = g.contract_form_nodes(np.broadcast_to(t, (g.nnodes, 2, 2)))
    assert np.max(np.abs(out2)) > 1e-3


def test_describe_round_trip_produces_stable_backend_id():
    g1 = perturbed2()
    g2 = perturbed2()
    assert g1.backend_id == g2.backend_id
    assert g1.describe() == g2.describe()
