"""Second-order expansion of the fiberwise canonical volume weights.

The deformed canonical volume form is written as exp(rho(t)) det(I - phi
phi-bar) dV0 with rho(t) = sum_i t_i rho_i + conj + sum_{ij} t_i conj(t_j)
rho_{ij} + ..., and this module solves the order-by-order equations for
the rho coefficients:

* first order: (Delta0 + 1) rho_i = 0, i.e. rho_i lies in the first
  eigenspace Lambda1 (zero on backends with empty Lambda1);
* mixed second order: (Delta0 + 1) rho_{ij} = phi_i . phi_j-bar
  - g^{a b-bar} g^{c d-bar} (d_a d_{d-bar} rho_i)(d_c d_{b-bar}
  conj(rho_j)), solved orthogonally to Lambda1 with a free Lambda1
  component nu_{ij} recorded separately.

Two opposite-curvature sign conventions exist and must never be mixed:
"fano" uses (Delta0 + 1) and "general_type" uses (1 - Delta0).  Every
expansion carries its convention flag and consumers are expected to check
it.  Pure t_i t_j (and conjugate) second-order terms are out of scope.

The general-type volume expansion dV_t = (1 + |t|^2 Delta0 (1 -
Delta0)^{-1}(|phi_1|^2) + O(|t|^3)) dV0 is provided for flat-base models
and feeds the harmonic-map energy module.

Sign dictionary: the package Laplacian box is nonnegative and Delta0 =
-box, so (Delta0 + 1)^{-1} = (1 - box)^{-1} (deflated over Lambda1 where
box has spectrum 1) and (1 - Delta0)^{-1} = (1 + box)^{-1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .hodge import Bundle, DenseHodgePackage, FormVector
from .series import BiSeries, MultiIndex

__all__ = [
    "RhoExpansion",
    "solve_rho",
    "coupled_hessian_term",
    "normalization_fields",
    "volume_expansion_general_type",
    "rho_to_series",
]

TRIV = Bundle.trivial()
LAMBDA1_TOL = 1e-8


@dataclass
class RhoExpansion:
    """Volume-weight expansion coefficients with their sign convention."""

    convention: str
    rho_i: list[FormVector]
    rho_ij: list[list[FormVector]]
    nu_ij: list[list[FormVector | None]]
    volume_coeffs: list[list[FormVector]] | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.rho_i)

    def require(self, convention: str) -> "RhoExpansion":
        if self.convention != convention:
            raise ValueError(
                f"sign-convention mismatch: expansion built under "
                f"'{self.convention}' but consumer requires '{convention}'"
            )
        return self


def _require_lambda1(pkg: DenseHodgePackage, f: FormVector, label: str) -> None:
    nf = pkg.norm(f)
    if nf == 0.0:
        return
    res = pkg.norm(pkg.box_apply(f) - f)
    if res > LAMBDA1_TOL * nf:
        raise ValueError(
            f"{label} must lie in the first eigenspace; (box - 1) residual "
            f"{res:.2e} exceeds {LAMBDA1_TOL:.0e} relative"
        )


def _spectral_function_apply(pkg, f: FormVector, weight) -> FormVector:
    evals, evecs = pkg.spectrum((TRIV, 0))
    proj = evecs.conj().T @ f.coeffs
    return pkg.form(TRIV, 0, evecs @ (weight(evals) * proj))


def _deflated_fano_resolvent(pkg, f: FormVector) -> FormVector:
    """(Delta0 + 1)^{-1} restricted to the complement of Lambda1."""

    def w(ev: np.ndarray) -> np.ndarray:
        near = np.abs(ev - 1.0) < LAMBDA1_TOL
        safe = np.where(near, 2.0, ev)
        return np.where(near, 0.0, 1.0 / (1.0 - safe))

    return _spectral_function_apply(pkg, f, w)


def _mixed_hessian(geom, nodes: np.ndarray) -> np.ndarray:
    """H[x, a, d] = d_a d_{d-bar} of a scalar node field."""
    n = geom.n
    H = np.empty((geom.nnodes, n, n), dtype=complex)
    for d in range(n):
        col = geom.dzbar_nodes(nodes, d)
        for a in range(n):
            H[:, a, d] = geom.dz_nodes(col, a)
    return H


def coupled_hessian_term(geom, rho_i_nodes: np.ndarray, rho_j_nodes: np.ndarray) -> np.ndarray:
    """Metric contraction of two mixed Hessians entering the rho_{ij} source.

    Returns the scalar node field obtained by raising all four indices of
    (d_a d_{d-bar} rho_i)(d_c d_{b-bar} conj(rho_j)) with the inverse
    metric, pairing a with b-bar and c with d-bar.  Works on arbitrary
    smooth inputs so the term can be exercised on synthetic data.
    """
    G = np.conjugate(geom.ginv_nodes)
    Hi = _mixed_hessian(geom, np.asarray(rho_i_nodes))
    Hj = _mixed_hessian(geom, np.asarray(rho_j_nodes))
    # sum over a,b,c,d of G[a,b] G[c,d] Hi[a,d] conj(Hj[b,c])
    return np.einsum("xab,xcd,xad,xbc->x", G, G, Hi, np.conjugate(Hj))


def solve_rho(
    pkg: DenseHodgePackage,
    phi_basis: list[FormVector],
    rho_i: list[FormVector] | None = None,
) -> RhoExpansion:
    """Mixed second-order volume-weight coefficients, Fano convention.

    With rho_i = 0 this reduces to the deflated resolvent of the
    pointwise pairing phi_i . phi_j-bar; nonzero rho_i adds the coupled
    Hessian-contraction term of the right-hand side.
    """
    geom = pkg.geometry
    m = len(phi_basis)
    if rho_i is None:
        rho_i = [pkg.zero_form(TRIV, 0) for _ in range(m)]
    if len(rho_i) != m:
        raise ValueError("need one rho_i input per deformation direction")
    for i, f in enumerate(rho_i):
        _require_lambda1(pkg, f, f"rho_{i}")

    lam1 = pkg.first_eigenspace()
    rho_nodes = [pkg.synth(f).values for f in rho_i]

    rho_ij: list[list[FormVector]] = []
    nu_ij: list[list[FormVector | None]] = []
    max_rhs_residual = 0.0
    max_lam1_overlap = 0.0
    for i in range(m):
        row: list[FormVector] = []
        nrow: list[FormVector | None] = []
        for j in range(m):
            dot = pkg.pointwise_dot(phi_basis[i], phi_basis[j]).values
            coupled = coupled_hessian_term(geom, rho_nodes[i], rho_nodes[j])
            rhs = pkg.project(TRIV, 0, dot - coupled)
            sol = _deflated_fano_resolvent(pkg, rhs)
            # re-apply (Delta0 + 1) = (1 - box) and compare off Lambda1
            back = sol - pkg.box_apply(sol)
            rhs_perp = rhs
            for lam in lam1:
                rhs_perp = rhs_perp - lam * pkg.inner(lam, rhs)
                overlap = abs(pkg.inner(lam, sol))
                max_lam1_overlap = max(max_lam1_overlap, overlap)
            max_rhs_residual = max(max_rhs_residual, pkg.norm(back - rhs_perp))
            row.append(sol)
            nrow.append(None)
        rho_ij.append(row)
        nu_ij.append(nrow)

    herm = 0.0
    for i in range(m):
        for j in range(m):
            vij = pkg.synth(rho_ij[i][j]).values
            vji = pkg.synth(rho_ij[j][i]).values
            diff = vij - np.conjugate(vji)
            if diff.size:
                herm = max(herm, float(np.max(np.abs(diff))))

    return RhoExpansion(
        convention="fano",
        rho_i=list(rho_i),
        rho_ij=rho_ij,
        nu_ij=nu_ij,
        diagnostics={
            "rhs_residual": max_rhs_residual,
            "lambda1_overlap": max_lam1_overlap,
            "hermitian_defect": herm,
        },
    )


def normalization_fields(
    pkg: DenseHodgePackage, rho_i: list[FormVector]
) -> tuple[list[FormVector], dict[str, float]]:
    """Holomorphic fields mu_i = grad^{1,0} rho_i normalizing the expansion.

    On a Fano Kaehler-Einstein background with rho_i in the unit
    eigenspace, the adjoint-style divergence of mu_i recovers rho_i.  The
    nodal divergence operator of the geometry is the plain volume-weighted
    one, which is its negative, so the identity checked here reads
    div mu_i + rho_i = 0.
    """
    geom = pkg.geometry
    mus: list[FormVector] = []
    hol = 0.0
    divres = 0.0
    T = Bundle.tangent()
    for i, f in enumerate(rho_i):
        _require_lambda1(pkg, f, f"rho_{i}")
        grad = geom.gradient_holo_nodes(pkg.synth(f).values)
        mu = pkg.project(T, 0, grad)
        mus.append(mu)
        if pkg.norm(mu) > 0:
            hol = max(hol, pkg.norm(pkg.dbar(mu)))
            div = pkg.divergence(mu)
            divres = max(divres, pkg.norm(div + f))
    return mus, {"holomorphy": hol, "divergence_identity": divres}


def volume_expansion_general_type(
    pkg: DenseHodgePackage, phi_basis: list[FormVector]
) -> RhoExpansion:
    """Second-order volume coefficients under the (1 - Delta0) convention.

    The mixed coefficient of the deformed volume form is Delta0 (1 -
    Delta0)^{-1} (phi_i . phi_j-bar); the resolvent part is returned as
    rho_ij and the full volume coefficient separately.
    """
    geom = pkg.geometry
    if getattr(geom, "einstein_constant", 0.0) > 0.0:
        raise ValueError(
            "general-type convention requires a nonpositive Einstein "
            "constant; use the fano convention on this backend"
        )
    m = len(phi_basis)
    rho_ij: list[list[FormVector]] = []
    vol: list[list[FormVector]] = []
    for i in range(m):
        row, vrow = [], []
        for j in range(m):
            dot = pkg.project(TRIV, 0, pkg.pointwise_dot(phi_basis[i], phi_basis[j]).values)
            res = _spectral_function_apply(pkg, dot, lambda ev: 1.0 / (1.0 + ev))
            coeff = _spectral_function_apply(pkg, dot, lambda ev: -ev / (1.0 + ev))
            row.append(res)
            vrow.append(coeff)
        rho_ij.append(row)
        vol.append(vrow)
    zero = pkg.zero_form(TRIV, 0)
    return RhoExpansion(
        convention="general_type",
        rho_i=[zero for _ in range(m)],
        rho_ij=rho_ij,
        nu_ij=[[None] * m for _ in range(m)],
        volume_coeffs=vol,
    )


def rho_to_series(pkg: DenseHodgePackage, exp: RhoExpansion, d: int) -> BiSeries:
    """Node-field BiSeries of rho(t) through mixed second order.

    Consumers must run under the same sign convention as the expansion;
    the series itself is convention-agnostic data.
    """
    m = exp.m
    Z = MultiIndex.zero(m)
    coeffs: dict[tuple[MultiIndex, MultiIndex], np.ndarray] = {}
    for i in range(m):
        nodes = pkg.synth(exp.rho_i[i]).values
        if np.any(nodes != 0):
            E = MultiIndex.unit(m, i)
            coeffs[(E, Z)] = nodes
            coeffs[(Z, E)] = np.conjugate(nodes)
    if d >= 2:
        for i in range(m):
            for j in range(m):
                f = exp.rho_ij[i][j]
                nu = exp.nu_ij[i][j]
                if nu is not None:
                    f = f + nu
                nodes = pkg.synth(f).values
                if np.any(nodes != 0):
                    coeffs[(MultiIndex.unit(m, i), MultiIndex.unit(m, j))] = nodes
    return BiSeries(m, d, coeffs)
