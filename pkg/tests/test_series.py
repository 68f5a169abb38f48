import json

import numpy as np
import pytest

from kedeform.series import (
    BiSeries,
    MultiIndex,
    compose_analytic,
    exp_series,
    log1p_series,
    multiindices_of_order,
    multiindices_up_to,
    power_series,
)


def random_scalar_series(rng, m, d, density=0.7):
    coeffs = {}
    for I in multiindices_up_to(m, d):
        for J in multiindices_up_to(m, d - I.order):
            if rng.random() < density:
                coeffs[(I, J)] = complex(rng.standard_normal(), rng.standard_normal())
    return BiSeries(m, d, coeffs)


def brute_product(a, b, d):
    out = {}
    for (I1, J1), u in a.coeffs.items():
        for (I2, J2), v in b.coeffs.items():
            key = (I1 + I2, J1 + J2)
            if key[0].order + key[1].order > d:
                continue
            out[key] = out.get(key, 0) + u * v
    return BiSeries(a.m, d, out)


def test_multiindex_order_and_comparison():
    a = MultiIndex((2, 0))
    b = MultiIndex((1, 1))
    c = MultiIndex((0, 1))
    assert a.order == 2 and c.order == 1
    assert c < b < a
    assert sorted([a, b, c]) == [c, b, a]


def test_multiindex_rejects_negative():
    with pytest.raises(ValueError):
        MultiIndex((1, -1))


def test_multiindex_splittings_cover_pascal():
    I = MultiIndex((2, 1))
    pairs = list(I.splittings())
    # (2+1 choose componentwise) = 3*2 ordered splittings
    assert len(pairs) == 6
    for J, K in pairs:
        assert J + K == I
    inner = list(I.splittings(min_order=1))
    assert len(pairs) - len(inner) == 2  # drops (0, I) and (I, 0)


def test_enumeration_counts():
    assert len(multiindices_of_order(2, 3)) == 4
    assert len(multiindices_up_to(2, 3)) == 10
    assert multiindices_up_to(1, 2) == [MultiIndex((0,)), MultiIndex((1,)), MultiIndex((2,))]


def test_add_identity_and_definition():
    m, d = 2, 3
    zero = BiSeries(m, d, {})
    t1 = BiSeries.parameter(m, d, 0)
    t1bar = BiSeries.parameter(m, d, 0, conjugate=True)
    assert (t1 + zero).allclose(t1)
    s = t1 + t1bar
    E = MultiIndex((1, 0))
    Z = MultiIndex.zero(m)
    assert s.extract(E, Z) == 1.0
    assert s.extract(Z, E) == 1.0
    assert s.extract(MultiIndex((0, 1)), Z) == 0


def test_add_matches_coefficientwise_oracle():
    rng = np.random.default_rng(7)
    a = random_scalar_series(rng, 2, 3)
    b = random_scalar_series(rng, 2, 3)
    s = a + b
    for I in multiindices_up_to(2, 3):
        for J in multiindices_up_to(2, 3 - I.order):
            want = a.coeffs.get((I, J), 0) + b.coeffs.get((I, J), 0)
            assert abs(s.extract(I, J) - want) < 1e-15


def test_monomial_product_and_unit():
    m, d = 2, 4
    t1 = BiSeries.parameter(m, d, 0)
    t1bar = BiSeries.parameter(m, d, 0, conjugate=True)
    p = t1 * t1bar
    E = MultiIndex((1, 0))
    assert len(p.coeffs) == 1
    assert p.extract(E, E) == 1.0
    one = BiSeries.constant(m, d, 1.0)
    rng = np.random.default_rng(3)
    a = random_scalar_series(rng, m, d)
    assert (a * one).allclose(a)


def test_product_matches_convolution_oracle():
    rng = np.random.default_rng(11)
    a = random_scalar_series(rng, 2, 2)
    sq = a * a
    assert sq.allclose(brute_product(a, a, 2))


def test_product_truncates_to_min_order():
    rng = np.random.default_rng(5)
    a = random_scalar_series(rng, 1, 4)
    b = random_scalar_series(rng, 1, 2)
    p = a.mul(b)
    assert p.d == 2
    assert p.allclose(brute_product(a, b, 2))


def test_truncation_is_ring_homomorphism():
    rng = np.random.default_rng(13)
    a = random_scalar_series(rng, 2, 4)
    b = random_scalar_series(rng, 2, 4)
    lhs = (a * b).truncate(2)
    rhs = (a.truncate(2) * b.truncate(2)).truncate(2)
    assert lhs.allclose(rhs)


def test_ring_axioms_random():
    rng = np.random.default_rng(17)
    for _ in range(5):
        a = random_scalar_series(rng, 2, 3, density=0.5)
        b = random_scalar_series(rng, 2, 3, density=0.5)
        c = random_scalar_series(rng, 2, 3, density=0.5)
        assert ((a * b) * c).allclose(a * (b * c), tol=1e-12)
        assert (a * (b + c)).allclose(a * b + a * c, tol=1e-12)
        assert (a * b).allclose(b * a, tol=1e-12)


def test_conjugation_involution_swaps_grading():
    rng = np.random.default_rng(19)
    a = random_scalar_series(rng, 2, 3)
    assert a.conj().conj().allclose(a)
    I = MultiIndex((1, 0))
    J = MultiIndex((0, 1))
    assert abs(a.conj().extract(J, I) - np.conjugate(a.extract(I, J))) < 1e-15


def test_extract_guards_order_overflow():
    a = BiSeries.parameter(2, 2, 0)
    with pytest.raises(ValueError):
        a.extract(MultiIndex((2, 0)), MultiIndex((1, 0)))


def test_array_valued_coefficients():
    m, d = 1, 2
    Z = MultiIndex.zero(m)
    E = MultiIndex.unit(m, 0)
    v0 = np.array([1.0, 2.0])
    v1 = np.array([0.0, 1.0j])
    a = BiSeries(m, d, {(Z, Z): v0, (E, Z): v1})
    t = np.array([0.5])
    val = a.evaluate(t)
    assert np.allclose(val, v0 + 0.5 * v1)
    s = a.mul(a, combine=lambda u, v: u * v)
    assert np.allclose(s.extract(E, Z), 2 * v0 * v1)


def test_compose_exp_of_zero_is_one():
    a = BiSeries(2, 3, {})
    e = exp_series(a)
    Z = MultiIndex.zero(2)
    assert abs(e.extract(Z, Z) - 1.0) < 1e-15
    assert len(e.coeffs) == 1


def test_compose_log_mercator():
    m, d = 1, 4
    E = MultiIndex.unit(m, 0)
    x = BiSeries(m, d, {(E, E): 1.0 + 0.0j})  # x = t conj(t)
    lg = log1p_series(x)
    assert abs(lg.extract(E, E) - 1.0) < 1e-14
    assert abs(lg.extract(MultiIndex((2,)), MultiIndex((2,))) + 0.5) < 1e-14


def test_compose_requires_zero_constant_term():
    a = BiSeries.constant(1, 3, 1.0)
    with pytest.raises(ValueError):
        exp_series(a)


def test_exp_log_round_trip():
    rng = np.random.default_rng(23)
    a = random_scalar_series(rng, 2, 3, density=0.6)
    # strip the constant term, scale small to stay well inside convergence
    Z = MultiIndex.zero(2)
    coeffs = {k: 0.1 * v for k, v in a.coeffs.items() if k != (Z, Z)}
    a = BiSeries(2, 3, coeffs)
    one_plus_a = BiSeries.constant(2, 3, 1.0) + a
    assert exp_series(log1p_series(a)).allclose(one_plus_a, tol=1e-12)
    assert log1p_series(exp_series(a) - BiSeries.constant(2, 3, 1.0)).allclose(a, tol=1e-12)


def test_power_series_squares():
    rng = np.random.default_rng(29)
    a = random_scalar_series(rng, 1, 4, density=0.8)
    Z = MultiIndex.zero(1)
    a = BiSeries(1, 4, {k: 0.2 * v for k, v in a.coeffs.items() if k != (Z, Z)})
    half = power_series(a, 0.5)
    one_plus_a = BiSeries.constant(1, 4, 1.0) + a
    assert (half * half).allclose(one_plus_a, tol=1e-12)


def test_derivative_drops_order():
    m, d = 2, 3
    t1 = BiSeries.parameter(m, d, 0)
    sq = t1 * t1
    der = sq.derivative(0)
    Z = MultiIndex.zero(m)
    assert der.d == d - 1
    assert abs(der.extract(MultiIndex((1, 0)), Z) - 2.0) < 1e-15
    dbar = sq.derivative(0, conjugate=True)
    assert len(dbar.coeffs) == 0


def test_evaluate_scalar():
    m, d = 1, 3
    t = BiSeries.parameter(m, d, 0)
    tb = BiSeries.parameter(m, d, 0, conjugate=True)
    s = t * tb  # |t|^2
    val = s.evaluate(np.array([0.3 + 0.4j]))
    assert abs(val - 0.25) < 1e-14


def test_json_round_trip_and_order():
    rng = np.random.default_rng(31)
    a = random_scalar_series(rng, 2, 3, density=0.5)
    payload = a.to_json_dict()
    b = BiSeries.from_json_dict(payload)
    assert a.allclose(b, tol=0.0)
    orders = [sum(term["I"]) + sum(term["J"]) for term in payload["terms"]]
    assert orders == sorted(orders)
    # byte determinism of the serialized form
    assert a.to_json() == BiSeries.from_json(a.to_json()).to_json()
    json.loads(a.to_json())  # parses


def test_parameter_count_mismatch_rejected():
    a = BiSeries.parameter(1, 2, 0)
    b = BiSeries.parameter(2, 2, 0)
    with pytest.raises(ValueError):
        _ = a + b
    with pytest.raises(ValueError):
        _ = a * b
