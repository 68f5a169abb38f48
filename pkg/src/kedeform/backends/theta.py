"""Polarized abelian family backend: theta sections over a flat torus.

Complex dimension one.  The base is the flat torus C/(Z + tau Z) with the
metric normalized so that the Kahler form equals the Chern form of the
polarization L (metric_scale = 1).  Sections of L^k in the standard
holomorphic frame are spanned by the k classical theta functions with
characteristics a/k (a = 0..k-1), paired with the canonical Hermitian
weight exp(-2 pi k y^2 / y0), y = Im z, y0 = Im tau.

The discrete section spaces are Landau ladders: with D the (1,0)-part of
the Chern connection and gamma = pi k / y0,

    b_{a,0} = theta_a / ||theta_a||,
    b_{a,j} = D b_{a,j-1} / sqrt(j gamma),

which obey the exact ladder identities

    dbar b_{a,j} = -sqrt(j gamma) b_{a,j-1} dzbar,
    D    b_{a,j} = +sqrt((j+1) gamma) b_{a,j+1}.

The finite ladder (j < levels) is therefore closed under dbar exactly and
closed under D up to the top level, which is guarded at runtime.  The
continuum L2 Gram of the b_{a,j} is the identity (distinct characteristics
have disjoint x-frequency supports; distinct levels are eigenspaces of the
magnetic Laplacian), so the quadrature Gram must reproduce the identity to
spectral accuracy; construction fails if the grid is too coarse for that.

Sections are evaluated by truncated theta series: terms are kept until the
Gaussian tail bound drops below 1e-14 of the leading term.

One finite-size artifact is unavoidable: on the (0,1) space the top ladder
level appears as a discrete kernel of the Laplacian (its continuum partner
lives one level above the span), although the continuum cohomology
H^{0,1}(L^k) vanishes.  The ladder diagonalizes every spectral operator,
so this artifact is exactly orthogonal to all in-band data; the
Chern-derivative guard keeps computations in-band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.polynomial import polynomial as npol
from scipy.linalg import cho_factor, cho_solve

from ..hodge import Bundle, DenseHodgePackage
from .torus import TorusConfig, TorusGeometry, torus_space_keys

__all__ = [
    "AbelianConfig",
    "AbelianGeometry",
    "abelian_space_keys",
    "build_abelian_geometry",
    "build_abelian_package",
    "theta_sections",
]


@dataclass
class AbelianConfig:
    torus: TorusConfig
    k: int
    levels: int = 8
    series_tol: float = 1e-14

    @classmethod
    def from_dict(cls, cfg: dict[str, Any]) -> "AbelianConfig":
        n = int(cfg.get("n", 1))
        if n != 1:
            raise ValueError("abelian backend supports complex dimension 1 only")
        k = int(cfg["k"])
        if k < 1:
            raise ValueError("level k must be at least 1")
        if float(cfg.get("epsilon", 0.0)) != 0.0 or cfg.get("psi_modes"):
            raise ValueError("abelian backend requires the flat metric (epsilon = 0)")
        if float(cfg.get("metric_scale", 1.0)) != 1.0:
            raise ValueError(
                "abelian backend fixes metric_scale = 1 so the Kahler form "
                "equals the Chern form of the polarization"
            )
        levels = int(cfg.get("levels", 8))
        if levels < 2:
            raise ValueError("need at least two ladder levels")
        bandwidth = int(cfg.get("bandwidth", k + 4))
        base = TorusConfig.from_dict(
            {
                "n": 1,
                "tau": cfg["tau"],
                "bandwidth": bandwidth,
                "grid": cfg.get("grid"),
                "epsilon": 0.0,
                "metric_scale": 1.0,
            }
        )
        return cls(torus=base, k=k, levels=levels,
                   series_tol=float(cfg.get("series_tol", 1e-14)))


class AbelianGeometry(TorusGeometry):
    """Flat torus geometry extended with theta-section ladder spaces."""

    def __init__(self, config: AbelianConfig) -> None:
        super().__init__(config.torus)
        if self.n != 1:
            raise ValueError("abelian geometry is one dimensional")
        self.k = int(config.k)
        self.levels = int(config.levels)
        self.series_tol = float(config.series_tol)
        self.y0 = float(self.S[0, 0])
        self.gamma = math.pi * self.k / self.y0
        # curvature of T tensor L^k against the Kahler form: T is flat here,
        # L^k contributes k, so the divergence resolvent identity on sections
        # reads div* G div = id - shift * (box + shift)^{-1} with this shift
        self.resolvent_shift = float(self.k)
        # constant pointwise weight of the (flat) tangent factor
        self.tangent_pair_constant = float(np.real(self.g0[0, 0]))
        self._theta_norm = math.pi / math.sqrt(2.0 * self.k * self.y0)
        self.section_basis_values = self._build_ladder_values()
        self._section_weight: dict[int, np.ndarray] = {}
        self._section_chol: dict[int, Any] = {}
        self._section_space: dict[int, "ThetaSpace"] = {}
        self.backend_id = f"abelian:k={self.k};L={self.levels};{self._describe_hashable()}"
        self._validate_gram()

    # -- theta ladder construction -------------------------------------

    def _node_fractions(self) -> tuple[np.ndarray, np.ndarray]:
        """Fractional lattice coordinates (x, y) of the nodes, [0,1)."""
        ticks = np.arange(self.M) / self.M
        gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
        return gx.reshape(-1), gy.reshape(-1)

    def _ladder_polys(self) -> list[np.ndarray]:
        """Coefficients of P_j with D^j e(w,z) = P_j(w + y_frac) e(w,z).

        Applying D = d/dz + 2 pi i k y / y0 termwise to the theta series
        multiplies each Gaussian term by a polynomial in u = w + y/y0 with
        the recursion P_{j+1} = 2 pi i k u P_j + P_j' / (2 i y0).
        """
        polys = [np.array([1.0 + 0.0j])]
        for _ in range(self.levels - 1):
            p = polys[-1]
            shifted = np.concatenate([[0.0j], p]) * (2j * math.pi * self.k)
            deriv = npol.polyder(p) * (1.0 / (2j * self.y0))
            if len(deriv) < len(shifted):
                deriv = np.concatenate([deriv, np.zeros(len(shifted) - len(deriv), complex)])
            polys.append(shifted + deriv)
        return polys

    def _term_range(self) -> float:
        """Half width R of the kept frequency window |w + y| <= R."""
        budget = -math.log(self.series_tol * 1e-2)
        R = math.sqrt((budget + 1.0) / (math.pi * self.k * self.y0)) + 1.0
        for _ in range(3):
            poly = self.levels * math.log(max(2.0 * math.pi * self.k * (R + 1.0), math.e))
            R = math.sqrt((budget + poly) / (math.pi * self.k * self.y0))
        return R

    def _build_ladder_values(self) -> np.ndarray:
        k, levels, tau = self.k, self.levels, complex(self.tau[0, 0])
        xf, yf = self._node_fractions()
        z = xf + tau * yf
        polys = self._ladder_polys()
        R = self._term_range()
        out = np.empty((self.nnodes, k * levels), dtype=complex)
        for a in range(k):
            frac = a / k
            mlo = math.floor(-frac - R - 1.0)
            mhi = math.ceil(-frac + R)
            w = np.arange(mlo, mhi + 1, dtype=float) + frac
            # E[x, m] = exp(pi i k tau w^2 + 2 pi i k w z)
            E = np.exp(
                1j * math.pi * k * tau * w[None, :] ** 2
                + 2j * math.pi * k * w[None, :] * z[:, None]
            )
            U = w[None, :] + yf[:, None]
            for j in range(levels):
                vals = np.sum(E * npol.polyval(U, polys[j], tensor=False), axis=1)
                scale = math.sqrt(
                    self._theta_norm * math.factorial(j) * self.gamma**j
                )
                out[:, a * levels + j] = vals / scale
        return out

    def _validate_gram(self) -> None:
        space = self.space_def(Bundle.power(self.k), 0)
        gram = space.gram()
        err = float(np.max(np.abs(gram - np.eye(gram.shape[0]))))
        if err > 1e-8:
            raise ValueError(
                f"bandwidth too small for level k={self.k}: quadrature Gram of "
                f"the theta ladder deviates from the identity by {err:.2e}"
            )

    # -- space plumbing -------------------------------------------------

    def _power_key(self, bundle: Bundle, q: int) -> int:
        if bundle.k != self.k:
            raise ValueError(f"only the configured power k={self.k} is available")
        if q not in (0, 1):
            raise ValueError("section spaces exist in degrees 0 and 1 only")
        return q

    def supported_space_keys(self) -> list[tuple[Bundle, int]]:
        return abelian_space_keys(self.k)

    def space_def(self, bundle: Bundle, q: int):
        if bundle.kind != "power":
            return super().space_def(bundle, q)
        q = self._power_key(bundle, q)
        if q not in self._section_space:
            self._section_space[q] = ThetaSpace(self, bundle, q)
        return self._section_space[q]

    def dbar_target(self, bundle: Bundle, q: int):
        if bundle.kind != "power":
            return super().dbar_target(bundle, q)
        return (bundle, 1) if self._power_key(bundle, q) == 0 else None

    def dbar_raw_matrix(self, bundle: Bundle, q: int) -> np.ndarray:
        if bundle.kind != "power":
            return super().dbar_raw_matrix(bundle, q)
        if self._power_key(bundle, q) != 0:
            raise ValueError("no del-bar out of the top section degree")
        dim = self.k * self.levels
        A = np.zeros((dim, dim), dtype=complex)
        for a in range(self.k):
            for j in range(1, self.levels):
                A[a * self.levels + j - 1, a * self.levels + j] = -math.sqrt(j * self.gamma)
        return A

    def section_pair_weight(self, q: int) -> np.ndarray:
        if q not in self._section_weight:
            _, yf = self._node_fractions()
            w = np.exp(-2.0 * math.pi * self.k * self.y0 * yf**2).astype(complex)
            if q == 1:
                w = w * np.conjugate(self.ginv_nodes[:, 0, 0])
            self._section_weight[q] = w[:, None, None]
        return self._section_weight[q]

    def pair_weight(self, bundle: Bundle, q: int) -> np.ndarray:
        if bundle.kind != "power":
            return super().pair_weight(bundle, q)
        return self.section_pair_weight(self._power_key(bundle, q))

    # -- section node calculus ------------------------------------------

    def section_project_raw(self, nodes: np.ndarray, q: int) -> np.ndarray:
        """Raw ladder coefficients of nodal data (exact on the ladder span)."""
        space = self.space_def(Bundle.power(self.k), q)
        p = space.project_quad(np.asarray(nodes, dtype=complex))
        if q not in self._section_chol:
            self._section_chol[q] = cho_factor(space.gram(), lower=True, check_finite=False)
        return cho_solve(self._section_chol[q], p, check_finite=False)

    def ladder_up_raw(self, raw: np.ndarray) -> np.ndarray:
        """Raw coefficients of the Chern (1,0)-derivative, one level up."""
        mat = np.asarray(raw, dtype=complex).reshape(self.k, self.levels)
        total = float(np.linalg.norm(mat))
        top = float(np.linalg.norm(mat[:, -1]))
        if top > 1e-8 * max(total, 1e-300):
            raise ValueError(
                "section ladder overflow: the top level is occupied; "
                "raise the levels parameter"
            )
        out = np.zeros_like(mat)
        j = np.arange(1, self.levels, dtype=float)
        out[:, 1:] = mat[:, :-1] * np.sqrt(j * self.gamma)[None, :]
        return out.reshape(-1)

    def chern_derivative_nodes(self, nodes: np.ndarray, q: int) -> np.ndarray:
        """Node values of the (1,0) Chern derivative of section-valued data.

        Degree preserved; for tensor-valued data this is the covariant
        divergence on the (flat, hence parallel) tangent factor.
        """
        raw = self.section_project_raw(nodes, q)
        up = self.ladder_up_raw(raw)
        space = self.space_def(Bundle.power(self.k), q)
        return space.synth(up)

    def contract_nabla_nodes(self, phi: np.ndarray, s_nodes: np.ndarray,
                             k: int, q: int) -> np.ndarray:
        if k != self.k:
            raise ValueError("section level does not match the backend")
        if q != 0:
            raise ValueError(
                "contract_nabla needs degree-zero sections in complex dimension one"
            )
        grad = self.chern_derivative_nodes(s_nodes, 0)
        comp = np.asarray(phi, dtype=complex).reshape(self.nnodes, 1, 1)[:, 0, 0]
        return (comp * np.asarray(grad).reshape(self.nnodes)).reshape(self.nnodes, 1)

    def describe(self) -> dict:
        d = super().describe()
        d.update({"kind": "abelian", "k": self.k, "levels": self.levels})
        return d


class ThetaSpace:
    """One section space: raw basis = normalized theta ladder elements."""

    def __init__(self, geom: AbelianGeometry, bundle: Bundle, q: int) -> None:
        self.geom = geom
        self.bundle = bundle
        self.q = q
        self.comp_shape: tuple[int, ...] = () if q == 0 else (1,)
        self.ncomp = 1
        self.raw_dim = geom.k * geom.levels

    def synth(self, raw: np.ndarray) -> np.ndarray:
        vals = self.geom.section_basis_values @ np.asarray(raw, dtype=complex)
        return vals.reshape((self.geom.nnodes,) + self.comp_shape)

    def project_quad(self, nodes: np.ndarray) -> np.ndarray:
        geom = self.geom
        F = np.asarray(nodes, dtype=complex).reshape(geom.nnodes)
        w = geom.section_pair_weight(self.q)[:, 0, 0] * geom.quad_weights
        return geom.section_basis_values.conj().T @ (w * F)

    def gram(self) -> np.ndarray:
        geom = self.geom
        B = geom.section_basis_values
        w = geom.section_pair_weight(self.q)[:, 0, 0] * geom.quad_weights
        return B.conj().T @ (w[:, None] * B)


def abelian_space_keys(k: int) -> list[tuple[Bundle, int]]:
    P = Bundle.power(k)
    return torus_space_keys(1) + [(P, 0), (P, 1)]


def build_abelian_geometry(config: dict[str, Any] | AbelianConfig) -> AbelianGeometry:
    if isinstance(config, AbelianConfig):
        return AbelianGeometry(config)
    return AbelianGeometry(AbelianConfig.from_dict(config))


def build_abelian_package(config: dict[str, Any] | AbelianConfig) -> DenseHodgePackage:
    geom = build_abelian_geometry(config)
    return DenseHodgePackage(geom, abelian_space_keys(geom.k))


def theta_sections(pkg: DenseHodgePackage, k: int | None = None) -> list:
    """The k theta sections of L^k as unit-norm degree-zero form vectors."""
    geom = pkg.geometry
    if not isinstance(geom, AbelianGeometry):
        raise ValueError("theta sections need an abelian family backend")
    if k is not None and k != geom.k:
        raise ValueError("requested level differs from the configured backend level")
    P = Bundle.power(geom.k)
    cols = geom.section_basis_values
    return [
        pkg.project(P, 0, cols[:, a * geom.levels])
        for a in range(geom.k)
    ]
