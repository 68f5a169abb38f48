"""Truncated power series in m complex parameters and their conjugates.

Every order-by-order recursion in this package runs inside the ring
implemented here.  A series is a sparse map from pairs of multi-indices
(I, J) to coefficients, representing  sum_{I,J} c_{IJ} t^I conj(t)^J
truncated at total order |I| + |J| <= d.  Coefficients are duck typed:
complex scalars, numpy arrays, or any value supporting +, scalar *, and
(for products) a caller supplied bilinear combine function.
"""

from __future__ import annotations

import itertools
import json
import math
import operator
from dataclasses import dataclass
from typing import Any, Callable, Iterator

import numpy as np

__all__ = [
    "MultiIndex",
    "BiSeries",
    "multiindices_of_order",
    "multiindices_up_to",
    "compose_analytic",
    "exp_series",
    "log1p_series",
    "power_series",
]


@dataclass(frozen=True)
class MultiIndex:
    """Exponent vector for a monomial in m parameters.

    Total order is the sum of entries.  Comparison is graded: first by
    total order, ties broken lexicographically on the exponent tuple,
    which gives a deterministic total order used everywhere for
    iteration and serialization.
    """

    exponents: tuple[int, ...]

    def __post_init__(self) -> None:
        exps = tuple(int(e) for e in self.exponents)
        if any(e < 0 for e in exps):
            raise ValueError(f"negative exponent in {exps}")
        object.__setattr__(self, "exponents", exps)

    @classmethod
    def zero(cls, m: int) -> "MultiIndex":
        return cls((0,) * m)

    @classmethod
    def unit(cls, m: int, i: int) -> "MultiIndex":
        e = [0] * m
        e[i] = 1
        return cls(tuple(e))

    @property
    def m(self) -> int:
        return len(self.exponents)

    @property
    def order(self) -> int:
        return sum(self.exponents)

    def _key(self) -> tuple:
        return (self.order, self.exponents)

    def __lt__(self, other: "MultiIndex") -> bool:
        return self._key() < other._key()

    def __le__(self, other: "MultiIndex") -> bool:
        return self._key() <= other._key()

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        if len(self.exponents) != len(other.exponents):
            raise ValueError("parameter count mismatch")
        return MultiIndex(tuple(a + b for a, b in zip(self.exponents, other.exponents)))

    def __sub__(self, other: "MultiIndex") -> "MultiIndex":
        if len(self.exponents) != len(other.exponents):
            raise ValueError("parameter count mismatch")
        return MultiIndex(tuple(a - b for a, b in zip(self.exponents, other.exponents)))

    def dominates(self, other: "MultiIndex") -> bool:
        """Componentwise >=, i.e. other divides this monomial."""
        return all(a >= b for a, b in zip(self.exponents, other.exponents))

    def splittings(self, min_order: int = 0) -> Iterator[tuple["MultiIndex", "MultiIndex"]]:
        """All ordered pairs (J, K) with J + K = self and |J|, |K| >= min_order."""
        ranges = [range(e + 1) for e in self.exponents]
        for j in itertools.product(*ranges):
            J = MultiIndex(j)
            K = self - J
            if J.order >= min_order and K.order >= min_order:
                yield J, K

    def monomial(self, t: np.ndarray) -> complex:
        """Value of t^I at a parameter point t (length m complex array)."""
        out = 1.0 + 0.0j
        for ti, e in zip(np.asarray(t, dtype=complex), self.exponents):
            if e:
                out *= ti**e
        return out

    def __repr__(self) -> str:
        return f"MultiIndex{self.exponents}"


def multiindices_of_order(m: int, order: int) -> list[MultiIndex]:
    """All multi-indices in m variables of exact total order, sorted."""
    if m == 0:
        return [MultiIndex(())] if order == 0 else []
    out = []
    for head in range(order + 1):
        for tail in multiindices_of_order(m - 1, order - head):
            out.append(MultiIndex((head,) + tail.exponents))
    return sorted(out)


def multiindices_up_to(m: int, d: int) -> list[MultiIndex]:
    """All multi-indices in m variables of total order <= d, graded order."""
    out: list[MultiIndex] = []
    for order in range(d + 1):
        out.extend(multiindices_of_order(m, order))
    return out


def term_sort_key(key: tuple[MultiIndex, MultiIndex]) -> tuple:
    I, J = key
    return (I.order + J.order, I._key(), J._key())


def _is_zero_value(v: Any) -> bool:
    if isinstance(v, (int, float, complex)):
        return v == 0
    if isinstance(v, np.ndarray):
        return v.size == 0 or not np.any(v)
    return False


class BiSeries:
    """Sparse truncated series sum_{|I|+|J|<=d} c_{IJ} t^I conj(t)^J.

    Immutable after construction; all operations return new instances.
    """

    __slots__ = ("m", "d", "coeffs")

    def __init__(
        self,
        m: int,
        d: int,
        coeffs: dict[tuple[MultiIndex, MultiIndex], Any] | None = None,
    ) -> None:
        if m < 0 or d < 0:
            raise ValueError("m and d must be nonnegative")
        self.m = int(m)
        self.d = int(d)
        clean: dict[tuple[MultiIndex, MultiIndex], Any] = {}
        for (I, J), v in (coeffs or {}).items():
            if I.m != m or J.m != m:
                raise ValueError("multi-index parameter count mismatch")
            if I.order + J.order > d:
                raise ValueError(f"term ({I},{J}) exceeds truncation order {d}")
            if not _is_zero_value(v):
                clean[(I, J)] = v
        self.coeffs = clean

    # -- constructors -------------------------------------------------

    @classmethod
    def constant(cls, m: int, d: int, value: Any) -> "BiSeries":
        Z = MultiIndex.zero(m)
        return cls(m, d, {(Z, Z): value})

    @classmethod
    def parameter(cls, m: int, d: int, i: int, conjugate: bool = False) -> "BiSeries":
        """The coordinate series t_i, or conj(t_i) when conjugate is set."""
        Z = MultiIndex.zero(m)
        E = MultiIndex.unit(m, i)
        key = (Z, E) if conjugate else (E, Z)
        return cls(m, d, {key: 1.0 + 0.0j})

    @classmethod
    def from_holomorphic(cls, m: int, d: int, coeffs: dict[MultiIndex, Any]) -> "BiSeries":
        Z = MultiIndex.zero(m)
        return cls(m, d, {(I, Z): v for I, v in coeffs.items()})

    # -- bookkeeping --------------------------------------------------

    def _check_compat(self, other: "BiSeries") -> None:
        if not isinstance(other, BiSeries):
            raise TypeError("expected a BiSeries")
        if self.m != other.m:
            raise ValueError("parameter count mismatch")

    def sorted_keys(self) -> list[tuple[MultiIndex, MultiIndex]]:
        return sorted(self.coeffs.keys(), key=term_sort_key)

    def extract(self, I: MultiIndex, J: MultiIndex) -> Any:
        """Stored coefficient at (I, J), or 0 when absent."""
        if I.order + J.order > self.d:
            raise ValueError(f"requested term ({I},{J}) beyond truncation order {self.d}")
        return self.coeffs.get((I, J), 0)

    def truncate(self, d: int) -> "BiSeries":
        if d >= self.d:
            return BiSeries(self.m, d, dict(self.coeffs))
        kept = {k: v for k, v in self.coeffs.items() if k[0].order + k[1].order <= d}
        return BiSeries(self.m, d, kept)

    def holomorphic_part(self) -> "BiSeries":
        kept = {k: v for k, v in self.coeffs.items() if k[1].order == 0}
        return BiSeries(self.m, self.d, kept)

    # -- linear structure ---------------------------------------------

    def __add__(self, other: "BiSeries") -> "BiSeries":
        self._check_compat(other)
        d = min(self.d, other.d)
        out: dict[tuple[MultiIndex, MultiIndex], Any] = {}
        for k, v in self.coeffs.items():
            if k[0].order + k[1].order <= d:
                out[k] = v
        for k, v in other.coeffs.items():
            if k[0].order + k[1].order <= d:
                out[k] = out[k] + v if k in out else v
        return BiSeries(self.m, d, out)

    def __neg__(self) -> "BiSeries":
        return self.map_coeffs(operator.neg)

    def __sub__(self, other: "BiSeries") -> "BiSeries":
        return self + (-other)

    def scale(self, c: Any) -> "BiSeries":
        return self.map_coeffs(lambda v: c * v)

    def map_coeffs(self, fn: Callable[[Any], Any]) -> "BiSeries":
        """Apply a linear map to every coefficient."""
        return BiSeries(self.m, self.d, {k: fn(v) for k, v in self.coeffs.items()})

    # -- multiplicative structure -------------------------------------

    def mul(self, other: "BiSeries", combine: Callable[[Any, Any], Any] | None = None) -> "BiSeries":
        """Cauchy product truncated at min of the two orders.

        combine(u, v) supplies the bilinear pairing of coefficients and
        defaults to plain multiplication, which covers scalar * scalar,
        scalar * array, and elementwise array * array.
        """
        self._check_compat(other)
        if combine is None:
            combine = operator.mul
        d = min(self.d, other.d)
        out: dict[tuple[MultiIndex, MultiIndex], Any] = {}
        for (I1, J1), u in self.coeffs.items():
            o1 = I1.order + J1.order
            if o1 > d:
                continue
            for (I2, J2), v in other.coeffs.items():
                if o1 + I2.order + J2.order > d:
                    continue
                key = (I1 + I2, J1 + J2)
                w = combine(u, v)
                out[key] = out[key] + w if key in out else w
        return BiSeries(self.m, d, out)

    def __mul__(self, other: "BiSeries") -> "BiSeries":
        return self.mul(other)

    def conj(self, value_conj: Callable[[Any], Any] = np.conjugate) -> "BiSeries":
        """Complex conjugate: swaps the (I, J) grading and conjugates values."""
        out = {(J, I): value_conj(v) for (I, J), v in self.coeffs.items()}
        return BiSeries(self.m, self.d, out)

    # -- calculus and evaluation --------------------------------------

    def derivative(self, i: int, conjugate: bool = False) -> "BiSeries":
        """Formal d/dt_i (or d/dconj(t_i)); drops the truncation order by one."""
        if self.d == 0:
            return BiSeries(self.m, 0, {})
        out: dict[tuple[MultiIndex, MultiIndex], Any] = {}
        for (I, J), v in self.coeffs.items():
            A = J if conjugate else I
            e = A.exponents[i]
            if e == 0:
                continue
            drop = [0] * self.m
            drop[i] = 1
            Ad = A - MultiIndex(tuple(drop))
            key = (I, Ad) if conjugate else (Ad, J)
            out[key] = e * v
        return BiSeries(self.m, self.d - 1, out)

    def evaluate(self, t: np.ndarray) -> Any:
        """Sum the truncated series at a parameter point t."""
        t = np.asarray(t, dtype=complex)
        if t.shape != (self.m,):
            raise ValueError(f"expected parameter point of shape ({self.m},)")
        tc = np.conjugate(t)
        total: Any = 0
        for (I, J), v in self.coeffs.items():
            total = total + (I.monomial(t) * J.monomial(tc)) * v
        return total

    # -- comparison helpers -------------------------------------------

    def allclose(self, other: "BiSeries", tol: float = 1e-12) -> bool:
        self._check_compat(other)
        d = min(self.d, other.d)
        keys = set(self.truncate(d).coeffs) | set(other.truncate(d).coeffs)
        for k in keys:
            u = np.asarray(self.coeffs.get(k, 0), dtype=complex)
            v = np.asarray(other.coeffs.get(k, 0), dtype=complex)
            if u.shape != v.shape:
                u, v = np.broadcast_arrays(u, v)
            if not np.allclose(u, v, rtol=0.0, atol=tol):
                return False
        return True

    def max_abs(self) -> float:
        out = 0.0
        for v in self.coeffs.values():
            out = max(out, float(np.max(np.abs(np.asarray(v)))))
        return out

    def __repr__(self) -> str:
        return f"BiSeries(m={self.m}, d={self.d}, terms={len(self.coeffs)})"

    # -- serialization (scalar coefficients only) ---------------------

    def to_json_dict(self) -> dict:
        terms = []
        for I, J in self.sorted_keys():
            v = complex(self.coeffs[(I, J)])
            terms.append(
                {
                    "I": list(I.exponents),
                    "J": list(J.exponents),
                    "re": float(v.real),
                    "im": float(v.imag),
                }
            )
        return {"m": self.m, "d": self.d, "terms": terms}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, payload: dict) -> "BiSeries":
        m = int(payload["m"])
        d = int(payload["d"])
        coeffs: dict[tuple[MultiIndex, MultiIndex], Any] = {}
        for term in payload["terms"]:
            I = MultiIndex(tuple(term["I"]))
            J = MultiIndex(tuple(term["J"]))
            key = (I, J)
            val = complex(term["re"], term["im"])
            coeffs[key] = coeffs.get(key, 0) + val
        return cls(m, d, coeffs)

    @classmethod
    def from_json(cls, text: str) -> "BiSeries":
        return cls.from_json_dict(json.loads(text))


def compose_analytic(taylor: np.ndarray, a: BiSeries) -> BiSeries:
    """Formal composition f(a) for scalar f given by Taylor coefficients.

    taylor[j] is the coefficient of x^j; a must have zero constant term,
    so a^j only contributes at order >= j and the Horner loop below is
    exact at truncation order a.d.
    """
    Z = MultiIndex.zero(a.m)
    if not _is_zero_value(a.coeffs.get((Z, Z), 0)):
        raise ValueError("composition requires a series with zero constant term")
    taylor = np.asarray(taylor, dtype=complex)
    nterms = min(len(taylor), a.d + 1)
    out = BiSeries.constant(a.m, a.d, 0.0 + 0.0j) if nterms == 0 else BiSeries.constant(
        a.m, a.d, complex(taylor[nterms - 1])
    )
    for j in range(nterms - 2, -1, -1):
        out = out.mul(a) + BiSeries.constant(a.m, a.d, complex(taylor[j]))
    return out


def exp_series(a: BiSeries) -> BiSeries:
    """exp of a truncated series with zero constant term."""
    taylor = np.array([1.0 / math.factorial(j) for j in range(a.d + 1)], dtype=complex)
    return compose_analytic(taylor, a)


def log1p_series(a: BiSeries) -> BiSeries:
    """log(1 + a) for a truncated series with zero constant term."""
    taylor = np.zeros(a.d + 1, dtype=complex)
    for j in range(1, a.d + 1):
        taylor[j] = ((-1.0) ** (j + 1)) / j
    return compose_analytic(taylor, a)


def power_series(a: BiSeries, alpha: float) -> BiSeries:
    """(1 + a)^alpha via the binomial series, zero constant term required."""
    taylor = np.zeros(a.d + 1, dtype=complex)
    c = 1.0
    taylor[0] = 1.0
    for j in range(1, a.d + 1):
        c *= (alpha - (j - 1)) / j
        taylor[j] = c
    return compose_analytic(taylor, a)
