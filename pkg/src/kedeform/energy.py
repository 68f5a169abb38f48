"""Harmonic-map energy on torus backends and its variation under
deformation of the complex structure.

Maps from the torus to a Riemannian target are stored as an affine part
(a real matrix acting on the lattice coordinates, which carries the
homotopy class) plus a smooth periodic nodal part.  The energy is the
quadrature of the (1,0)-derivative square norm; its critical points
satisfy the tension-field equation whose Laplacian term is the mixed
chart Hessian traced with the inverse metric.  The torus metrics are
Kaehler (constant plus a potential Hessian), so that trace has no
first-order terms and agrees with the spectral function Laplacian of
the Hodge package; affine maps are therefore harmonic whenever the
target is flat.

Complex-structure deformations of the flat torus by a constant Beltrami
matrix move the period matrix by a Moebius-type rule, and the energy of
an affine map along that family has a closed form used as the oracle
for the variation formulas.  The second variation is assembled from
four quadrature terms: two carry the resolvent weight built from the
squared Beltrami density in the nonpositive-Einstein convention, and
two involve the first-order map variation; an alternative
integration-by-parts form of the weighted pair is evaluated as a
consistency diagnostic.  For targets with Hermitian nonpositive
curvature the weighted pair vanishes and the remainder is nonnegative,
which is the plurisubharmonicity of the energy along the family.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .hodge import Bundle, DenseHodgePackage, FormVector, PointField
from .ke_expand import volume_expansion_general_type

__all__ = [
    "TargetManifold",
    "TorusMap",
    "MapFamily",
    "VariationReport",
    "energy",
    "harmonic_residual",
    "tension_field",
    "hopf",
    "double_divergence",
    "siu_sampson_residual",
    "first_variation",
    "second_variation",
    "deformed_tau",
    "affine_energy_function",
    "fd_first_derivative",
    "fd_mixed_derivative",
    "hessian_grid_min",
]

TRIV = Bundle.trivial()
TANGENT = Bundle.tangent()

HARMONIC_TOL = 1e-6
RESOLVE_TOL = 1e-8


# -- targets ------------------------------------------------------------


@dataclass
class TargetManifold:
    """Riemannian target given by callable metric, connection, curvature.

    The curvature callable returns R(X, Y, Z, W) component arrays with
    slot order [alpha, beta, gamma, delta]; the Hermitian nonpositivity
    flag refers to R(u, v, ubar, vbar) <= 0 for complex tangent vectors.
    """

    dimension: int
    metric: Callable[[np.ndarray], np.ndarray]
    christoffel: Callable[[np.ndarray], np.ndarray]
    curvature: Callable[[np.ndarray], np.ndarray]
    flat: bool = False
    hermitian_nonpositive: bool = False
    name: str = "target"

    @classmethod
    def flat_space(cls, dimension: int) -> "TargetManifold":
        """Flat torus or euclidean factor with the identity metric."""
        d = dimension

        def metric(F: np.ndarray) -> np.ndarray:
            return np.broadcast_to(np.eye(d), (F.shape[0], d, d))

        def christoffel(F: np.ndarray) -> np.ndarray:
            return np.zeros((F.shape[0], d, d, d))

        def curvature(F: np.ndarray) -> np.ndarray:
            return np.zeros((F.shape[0], d, d, d, d))

        return cls(
            dimension=d,
            metric=metric,
            christoffel=christoffel,
            curvature=curvature,
            flat=True,
            hermitian_nonpositive=True,
            name=f"flat{d}",
        )

    @classmethod
    def constant_curvature(cls, dimension: int, curv: float) -> "TargetManifold":
        """Space form with the identity metric scaled curvature tensor.

        R(X,Y,Z,W) = c (<X,Z><Y,W> - <X,W><Y,Z>); nonpositive c gives a
        Hermitian nonpositive target.
        """
        d = dimension
        eye = np.eye(d)

        def metric(F: np.ndarray) -> np.ndarray:
            return np.broadcast_to(eye, (F.shape[0], d, d))

        def christoffel(F: np.ndarray) -> np.ndarray:
            return np.zeros((F.shape[0], d, d, d))

        R0 = curv * (
            np.einsum("ac,bd->abcd", eye, eye) - np.einsum("ad,bc->abcd", eye, eye)
        )

        def curvature(F: np.ndarray) -> np.ndarray:
            return np.broadcast_to(R0, (F.shape[0], d, d, d, d))

        return cls(
            dimension=d,
            metric=metric,
            christoffel=christoffel,
            curvature=curvature,
            flat=(curv == 0.0),
            hermitian_nonpositive=(curv <= 0.0),
            name=f"spaceform{d}(c={curv})",
        )

    @classmethod
    def hyperbolic_plane(cls) -> "TargetManifold":
        """Upper half plane coordinates (p, q), q > 0, metric (dp^2+dq^2)/q^2."""

        def metric(F: np.ndarray) -> np.ndarray:
            q = F[:, 1].real
            h = np.zeros((F.shape[0], 2, 2))
            h[:, 0, 0] = 1.0 / q**2
            h[:, 1, 1] = 1.0 / q**2
            return h

        def christoffel(F: np.ndarray) -> np.ndarray:
            q = F[:, 1].real
            G = np.zeros((F.shape[0], 2, 2, 2))
            G[:, 0, 0, 1] = -1.0 / q
            G[:, 0, 1, 0] = -1.0 / q
            G[:, 1, 0, 0] = 1.0 / q
            G[:, 1, 1, 1] = -1.0 / q
            return G

        def curvature(F: np.ndarray) -> np.ndarray:
            q = F[:, 1].real
            eye = np.eye(2)
            R0 = np.einsum("ac,bd->abcd", eye, eye) - np.einsum("ad,bc->abcd", eye, eye)
            return -R0[None] / q[:, None, None, None, None] ** 4

        return cls(
            dimension=2,
            metric=metric,
            christoffel=christoffel,
            curvature=curvature,
            flat=False,
            hermitian_nonpositive=True,
            name="hyperbolic_plane",
        )

    def check_pointwise(self, F: np.ndarray, tol: float = 1e-9) -> None:
        """Metric positivity and curvature symmetries at the sampled points."""
        h = self.metric(F)
        if np.max(np.abs(h - np.swapaxes(h, 1, 2))) > tol:
            raise ValueError("target metric is not symmetric")
        if np.min(np.linalg.eigvalsh(0.5 * (h + np.swapaxes(h, 1, 2)))) <= 0:
            raise ValueError("target metric is not positive definite")
        R = self.curvature(F)
        if np.max(np.abs(R + np.swapaxes(R, 1, 2))) > tol * (1 + np.max(np.abs(R))):
            raise ValueError("curvature not antisymmetric in the first slots")
        pair = np.einsum("xabcd->xcdab", R)
        if np.max(np.abs(R - pair)) > tol * (1 + np.max(np.abs(R))):
            raise ValueError("curvature not symmetric under pair exchange")
        bianchi = R + np.einsum("xabcd->xbcad", R) + np.einsum("xabcd->xcabd", R)
        if np.max(np.abs(bianchi)) > tol * (1 + np.max(np.abs(R))):
            raise ValueError("curvature violates the first Bianchi identity")


# -- maps ---------------------------------------------------------------


def _require_torus(geom: Any) -> None:
    if not hasattr(geom, "tau") or not hasattr(geom, "S"):
        raise ValueError("energy operations need a torus-type backend")


def _chart_jacobian(geom: Any) -> np.ndarray:
    """J[mu, i] = d(coord_mu)/d z_i for lattice coordinates (x, y)."""
    n = geom.n
    Sinv = np.linalg.inv(geom.S)
    dy = -0.5j * Sinv  # dy_j / dz_i, symmetric in (i, j)
    dx = 0.5j * Sinv @ np.conjugate(geom.tau)  # dx_j / dz_i
    J = np.zeros((2 * n, n), dtype=complex)
    J[:n, :] = dx.T
    J[n:, :] = dy.T
    return J


def _node_coords(geom: Any) -> np.ndarray:
    axes = [np.arange(geom.M) / geom.M for _ in range(2 * geom.n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


@dataclass
class TorusMap:
    """Map to a d-dimensional target: affine class part plus periodic part.

    linear[alpha, mu] multiplies the lattice coordinate mu and encodes
    the homotopy class; periodic[x, alpha] is the smooth nodal part.
    """

    linear: np.ndarray
    periodic: np.ndarray

    def __post_init__(self) -> None:
        self.linear = np.asarray(self.linear, dtype=float)
        self.periodic = np.asarray(self.periodic, dtype=complex)
        if self.linear.ndim != 2 or self.periodic.ndim != 2:
            raise ValueError("map parts must be 2d arrays")
        if self.linear.shape[0] != self.periodic.shape[1]:
            raise ValueError("target dimensions of the map parts disagree")

    @property
    def dimension(self) -> int:
        return self.linear.shape[0]

    @classmethod
    def affine(cls, geom: Any, linear: np.ndarray) -> "TorusMap":
        linear = np.asarray(linear, dtype=float)
        return cls(linear, np.zeros((geom.nnodes, linear.shape[0]), dtype=complex))

    def values(self, geom: Any) -> np.ndarray:
        return _node_coords(geom) @ self.linear.T + self.periodic


@dataclass
class MapFamily:
    """Base map and its first-order variation along the deformation."""

    base: TorusMap
    u_linear: np.ndarray | None = None
    u_periodic: np.ndarray | None = None

    def variation(self, geom: Any) -> tuple[np.ndarray, np.ndarray]:
        d = self.base.dimension
        if self.u_linear is None and self.u_periodic is None:
            raise ValueError("map family is missing the first-order variation u")
        lin = (
            np.zeros((d, 2 * geom.n), dtype=complex)
            if self.u_linear is None
            else np.asarray(self.u_linear, dtype=complex)
        )
        per = (
            np.zeros((geom.nnodes, d), dtype=complex)
            if self.u_periodic is None
            else np.asarray(self.u_periodic, dtype=complex)
        )
        return lin, per


@dataclass
class VariationReport:
    energy0: float
    first_t: complex
    hessian_formula: float
    hessian_fd: float | None
    weighted_curvature: float
    weighted_gradient: float
    variation_curvature: float
    variation_gradient: float
    consistency_gap: float
    resolvent_weight: PointField
    grid_min: float | None
    diagnostics: dict[str, float] = field(default_factory=dict)


# -- chart derivatives --------------------------------------------------


def _check_resolved(pkg: DenseHodgePackage, nodes: np.ndarray, label: str) -> None:
    u = pkg.project(TRIV, 0, nodes)
    back = pkg.synth(u).values
    scale = float(np.max(np.abs(nodes))) if nodes.size else 0.0
    if np.max(np.abs(back - nodes)) > 1e-7 * (1.0 + scale):
        raise ValueError(f"{label} is not resolved on this grid (aliasing)")


def _dz_map(pkg: DenseHodgePackage, linear: np.ndarray, periodic: np.ndarray,
            conjugate_chart: bool) -> np.ndarray:
    """d f^alpha / d z_i (or zbar_i) at nodes: (x, n, d)."""
    geom = pkg.geometry
    n, d = geom.n, linear.shape[0]
    J = _chart_jacobian(geom)
    if conjugate_chart:
        J = np.conjugate(J)
    out = np.empty((geom.nnodes, n, d), dtype=complex)
    const = np.asarray(linear, dtype=complex) @ J  # (d, n)
    for a in range(d):
        for i in range(n):
            if conjugate_chart:
                der = geom.dzbar_nodes(periodic[:, a], i)
            else:
                der = geom.dz_nodes(periodic[:, a], i)
            out[:, i, a] = const[a, i] + der
    return out


def _map_fields(pkg: DenseHodgePackage, tmap: TorusMap, target: TargetManifold):
    geom = pkg.geometry
    _require_torus(geom)
    if tmap.periodic.shape[0] != geom.nnodes:
        raise ValueError("map nodal part does not match the backend grid")
    if tmap.dimension != target.dimension:
        raise ValueError("map and target dimensions disagree")
    for a in range(tmap.dimension):
        _check_resolved(pkg, tmap.periodic[:, a], f"map component {a}")
    F = tmap.values(geom)
    dz = _dz_map(pkg, tmap.linear, tmap.periodic, conjugate_chart=False)
    dzb = _dz_map(pkg, tmap.linear, tmap.periodic, conjugate_chart=True)
    return F, dz, dzb


def tension_field(pkg: DenseHodgePackage, tmap: TorusMap, target: TargetManifold) -> np.ndarray:
    """Tension Delta f^a + g^{i jbar} Gamma^a_{bc} d_i f^b d_jbar f^c at nodes.

    The Laplacian term is the inverse-metric trace of the mixed chart
    Hessian; on the Kaehler torus metrics this is the full function
    Laplacian, so the affine part drops out exactly.
    """
    geom = pkg.geometry
    F, dz, dzb = _map_fields(pkg, tmap, target)
    cg = np.conjugate(geom.ginv_nodes)
    n, d = geom.n, tmap.dimension
    lap = np.zeros((geom.nnodes, d), dtype=complex)
    for a in range(d):
        for j in range(n):
            col = geom.dzbar_nodes(tmap.periodic[:, a], j)
            for i in range(n):
                lap[:, a] += cg[:, i, j] * geom.dz_nodes(col, i)
    gam = target.christoffel(F)
    quad = np.einsum("xij,xabc,xib,xjc->xa", cg, gam, dz, dzb)
    return lap + quad


def energy(pkg: DenseHodgePackage, tmap: TorusMap, target: TargetManifold) -> float:
    """Quadrature of the squared (1,0)-derivative with the backend volume."""
    geom = pkg.geometry
    F, dz, dzb = _map_fields(pkg, tmap, target)
    h = target.metric(F)
    cg = np.conjugate(geom.ginv_nodes)
    dens = np.einsum("xij,xia,xjb,xab->x", cg, dz, dzb, h)
    val = complex(np.sum(geom.quad_weights * dens))
    if abs(val.imag) > 1e-9 * (1.0 + abs(val.real)):
        raise RuntimeError(f"energy density has an imaginary part {val.imag:.2e}")
    return float(val.real)


def harmonic_residual(pkg: DenseHodgePackage, tmap: TorusMap, target: TargetManifold) -> float:
    """L2 norm of the tension field, zero exactly for harmonic maps."""
    geom = pkg.geometry
    F = tmap.values(geom)
    h = target.metric(F)
    T = tension_field(pkg, tmap, target)
    dens = np.einsum("xab,xa,xb->x", h, T, np.conjugate(T)).real
    return float(np.sqrt(np.sum(geom.quad_weights * dens)))


def hopf(pkg: DenseHodgePackage, tmap: TorusMap, target: TargetManifold) -> PointField:
    """Holomorphic quadratic differential h_ab d_i f^a d_k f^b as nodes."""
    F, dz, _ = _map_fields(pkg, tmap, target)
    h = target.metric(F)
    H = np.einsum("xab,xia,xkb->xik", h, dz, dz)
    return PointField(pkg.backend_id, H)


def double_divergence(pkg: DenseHodgePackage, H: np.ndarray) -> np.ndarray:
    """Twice antiholomorphic-divergence of a (2,0)-tensor node field.

    Contracts each antiholomorphic derivative with the inverse metric;
    on holomorphic-index tensors the Chern connection needs no symbols
    in the antiholomorphic direction, and on a Kaehler metric the
    quadrature integral of the result vanishes for any smooth field.
    """
    geom = pkg.geometry
    _require_torus(geom)
    cg = np.conjugate(geom.ginv_nodes)
    n = geom.n
    inner = np.zeros((geom.nnodes, n), dtype=complex)
    for k in range(n):
        for i in range(n):
            for j in range(n):
                inner[:, k] += cg[:, i, j] * geom.dzbar_nodes(H[:, i, k], j)
    out = np.zeros(geom.nnodes, dtype=complex)
    for k in range(n):
        for l in range(n):
            out += cg[:, k, l] * geom.dzbar_nodes(inner[:, k], l)
    return out


def _covariant_gradient(pkg, tmap, target, F, dz, dzb) -> np.ndarray:
    """W[x, i, j, a] = d_i d_jbar f^a + Gamma^a_bc d_i f^b d_jbar f^c."""
    geom = pkg.geometry
    n, d = geom.n, tmap.dimension
    W = np.zeros((geom.nnodes, n, n, d), dtype=complex)
    for a in range(d):
        for j in range(n):
            col = geom.dzbar_nodes(tmap.periodic[:, a], j)
            for i in range(n):
                W[:, i, j, a] = geom.dz_nodes(col, i)
    gam = target.christoffel(F)
    W += np.einsum("xabc,xib,xjc->xija", gam, dz, dzb)
    return W


def siu_sampson_residual(
    pkg: DenseHodgePackage,
    tmap: TorusMap,
    target: TargetManifold,
    tol: float = HARMONIC_TOL,
) -> tuple[float, tuple[float, float]]:
    """Residual of the double-divergence identity for a harmonic map.

    Returns (L2 residual of lhs - rhs, (integrated curvature term,
    integrated squared covariant gradient)).  For Hermitian nonpositive
    targets both members of the pair vanish for harmonic maps.
    """
    geom = pkg.geometry
    res = harmonic_residual(pkg, tmap, target)
    scale = 1.0 + float(np.max(np.abs(tmap.linear))) if tmap.linear.size else 1.0
    if res > tol * scale:
        raise ValueError(f"map is not harmonic (tension residual {res:.2e})")
    F, dz, dzb = _map_fields(pkg, tmap, target)
    h = target.metric(F)
    cg = np.conjugate(geom.ginv_nodes)
    n = geom.n

    H = np.einsum("xab,xia,xkb->xik", h, dz, dz)
    lhs = double_divergence(pkg, H)

    R = target.curvature(F)
    M = np.einsum("xij,xia,xjc->xac", cg, dz, dzb)
    curv = np.einsum("xabcd,xac,xbd->x", R, M, M)
    W = _covariant_gradient(pkg, tmap, target, F, dz, dzb)
    grad = np.einsum("xik,xlj,xija,xklb,xab->x", cg, cg, W, np.conjugate(W), h)

    mismatch = lhs - (-curv + grad)
    residual = float(np.sqrt(np.sum(geom.quad_weights * np.abs(mismatch) ** 2)))
    curv_int = complex(np.sum(geom.quad_weights * curv))
    grad_int = complex(np.sum(geom.quad_weights * grad))
    return residual, (float(curv_int.real), float(grad_int.real))


# -- variation formulas -------------------------------------------------


def _beltrami_nodes(pkg: DenseHodgePackage, phi: FormVector, tol: float) -> np.ndarray:
    if phi.key != (TANGENT, 1):
        raise ValueError("deformation direction must be a tangent-valued (0,1)-form")
    hr = pkg.norm(pkg.box_apply(phi))
    if hr > tol * max(1.0, pkg.norm(phi)):
        raise ValueError(f"deformation direction is not harmonic (residual {hr:.2e})")
    return pkg.synth(phi).values


def first_variation(
    pkg: DenseHodgePackage,
    phi: FormVector,
    tmap: TorusMap,
    target: TargetManifold,
    tol: float = HARMONIC_TOL,
) -> complex:
    """Holomorphic t-derivative of the energy along the deformation.

    Minus the integral of the inverse-metric trace pairing the Beltrami
    direction with the quadratic differential of the base map.
    """
    geom = pkg.geometry
    res = harmonic_residual(pkg, tmap, target)
    scale = 1.0 + float(np.max(np.abs(tmap.linear))) if tmap.linear.size else 1.0
    if res > tol * scale:
        raise ValueError(f"map is not harmonic (tension residual {res:.2e})")
    phi_nodes = _beltrami_nodes(pkg, phi, tol)
    H = hopf(pkg, tmap, target).values
    cg = np.conjugate(geom.ginv_nodes)
    dens = np.einsum("xij,xik,xkj->x", phi_nodes, H, cg)
    return -complex(np.sum(geom.quad_weights * dens))


def second_variation(
    pkg: DenseHodgePackage,
    phi: FormVector,
    family: MapFamily,
    target: TargetManifold,
    energy_of_t: Callable[[complex], float] | None = None,
    tol: float = HARMONIC_TOL,
    fd_step: float = 1e-3,
    grid_radius: float = 0.1,
    grid_size: int = 5,
) -> VariationReport:
    """Mixed t, tbar second derivative of the energy with all four terms.

    Two terms carry the resolvent weight of the squared Beltrami density
    (nonpositive-Einstein convention); two involve the first-order map
    variation u.  For Hermitian nonpositive targets the weighted pair
    must vanish and the result is nonnegative.  When an energy callable
    for the full family is supplied, finite differences and a grid scan
    of the mixed Hessian are reported as independent checks.
    """
    geom = pkg.geometry
    tmap = family.base
    res = harmonic_residual(pkg, tmap, target)
    scale = 1.0 + float(np.max(np.abs(tmap.linear))) if tmap.linear.size else 1.0
    if res > tol * scale:
        raise ValueError(f"map is not harmonic (tension residual {res:.2e})")
    phi_nodes = _beltrami_nodes(pkg, phi, tol)
    F, dz, dzb = _map_fields(pkg, tmap, target)
    h = target.metric(F)
    cg = np.conjugate(geom.ginv_nodes)
    qw = geom.quad_weights
    n, d = geom.n, tmap.dimension

    # resolvent weight of the squared deformation density
    exp = volume_expansion_general_type(pkg, [phi])
    K_form = exp.rho_ij[0][0]
    K = pkg.synth(K_form).values
    if np.max(np.abs(K.imag)) > 1e-9 * (1.0 + np.max(np.abs(K.real))):
        raise RuntimeError("resolvent weight is not real")
    K = K.real

    R = target.curvature(F)
    M = np.einsum("xij,xia,xjc->xac", cg, dz, dzb)
    curv_dens = np.einsum("xabcd,xac,xbd->x", R, M, M).real
    W = _covariant_gradient(pkg, tmap, target, F, dz, dzb)
    grad_dens = np.einsum("xik,xlj,xija,xklb,xab->x", cg, cg, W, np.conjugate(W), h).real
    t1 = -float(np.sum(qw * curv_dens * K))
    t2 = float(np.sum(qw * grad_dens * K))

    # terms quadratic in the map variation
    u_lin, u_per = family.variation(geom)
    for a in range(d):
        _check_resolved(pkg, u_per[:, a], f"variation component {a}")
    u = _node_coords(geom) @ u_lin.T + u_per
    t3 = -2.0 * float(np.sum(qw * np.einsum("xac,xabcd,xb,xd->x", M, R, u, np.conjugate(u)).real))

    # nabla^{1,0} ubar minus the conjugate Beltrami contraction of dbar f
    ubar_lin = np.conjugate(u_lin)
    ubar_per = np.conjugate(u_per)
    dz_ubar = _dz_map(pkg, np.zeros((d, 2 * n)), ubar_per, conjugate_chart=False)
    dz_ubar += np.transpose(
        np.broadcast_to((ubar_lin @ _chart_jacobian(geom)), (geom.nnodes, d, n)), (0, 2, 1)
    )
    gam = target.christoffel(F)
    V = dz_ubar + np.einsum("xabc,xjb,xc->xja", gam, dz, np.conjugate(u))
    V -= np.einsum("xij,xia->xja", np.conjugate(phi_nodes), dzb)
    t4 = 2.0 * float(np.sum(qw * np.einsum("xjk,xja,xkb,xab->x", cg, V, np.conjugate(V), h).real))

    hess = t1 + t2 + t3 + t4

    # integration-by-parts form of the weighted pair, as a consistency check
    lapK = np.zeros(geom.nnodes, dtype=complex)
    hessK = np.zeros((geom.nnodes, n, n), dtype=complex)
    for q in range(n):
        col = geom.dzbar_nodes(K, q)
        for p in range(n):
            hessK[:, p, q] = geom.dz_nodes(col, p)
    lapK = np.einsum("xij,xij->x", cg, hessK)
    e_pq = np.einsum("xia,xjb,xab->xij", dz, dzb, h)
    alt1 = float(np.sum(qw * (np.einsum("xij,xij->x", cg, e_pq) * lapK).real))
    alt2 = -float(
        np.sum(qw * np.einsum("xiq,xpj,xij,xpq->x", cg, cg, e_pq, hessK).real)
    )
    consistency_gap = abs((t1 + t2) - (alt1 + alt2))

    if target.hermitian_nonpositive:
        ref = 1.0 + abs(t4)
        if abs(t1) > 1e-6 * ref or abs(t2) > 1e-6 * ref:
            raise RuntimeError(
                "weighted curvature and gradient terms must vanish on a "
                f"Hermitian nonpositive target (got {t1:.2e}, {t2:.2e})"
            )
        if hess < -1e-8 * ref:
            raise RuntimeError(f"mixed second derivative {hess:.2e} is negative")

    first = first_variation(pkg, phi, tmap, target, tol=tol)
    e0 = energy(pkg, tmap, target)

    fd = None
    grid_min = None
    diagnostics: dict[str, float] = {"harmonic_residual": res}
    if energy_of_t is not None:
        fd = fd_mixed_derivative(energy_of_t, fd_step)
        d1 = fd_first_derivative(energy_of_t, fd_step)
        diagnostics["fd_first_gap"] = abs(d1 - first)
        grid_min = hessian_grid_min(energy_of_t, grid_radius, grid_size, fd_step)

    return VariationReport(
        energy0=e0,
        first_t=first,
        hessian_formula=hess,
        hessian_fd=fd,
        weighted_curvature=t1,
        weighted_gradient=t2,
        variation_curvature=t3,
        variation_gradient=t4,
        consistency_gap=consistency_gap,
        resolvent_weight=PointField(pkg.backend_id, K),
        grid_min=grid_min,
        diagnostics=diagnostics,
    )


# -- closed-form affine family -----------------------------------------


def deformed_tau(tau0: np.ndarray, phi_mat: np.ndarray, t: complex) -> np.ndarray:
    """Period matrix of the torus deformed by a constant Beltrami matrix.

    The deformed holomorphic coordinate is w = z + t phi zbar to first
    order, which moves the period matrix in the direction -2i phi Imtau.
    Staying inside the symmetric (polarized) period domain requires
    phi Imtau symmetric; the family is taken linear in that direction,
    which is holomorphic in t, and the mixed t derivatives of any
    function along a holomorphic family depend on the direction only.
    """
    tau0 = np.asarray(tau0, dtype=complex)
    phi_mat = np.asarray(phi_mat, dtype=complex)
    step = phi_mat @ tau0.imag
    if np.max(np.abs(step - step.T)) > 1e-12 * (1.0 + np.max(np.abs(step))):
        raise ValueError(
            "Beltrami direction does not preserve the polarization: "
            "phi Imtau must be symmetric"
        )
    return tau0 - 2j * t * step


def _affine_energy_at_tau(
    tau: np.ndarray, linear: np.ndarray, h_const: np.ndarray, scale: float
) -> float:
    n = tau.shape[0]
    S = tau.imag
    if np.min(np.linalg.eigvalsh(S)) <= 0:
        raise ValueError("deformed period matrix left the Siegel domain")
    Sinv = np.linalg.inv(S)
    J = np.zeros((2 * n, n), dtype=complex)
    J[:n, :] = (0.5j * Sinv @ np.conjugate(tau)).T
    J[n:, :] = (-0.5j * Sinv).T
    P = np.asarray(linear, dtype=complex) @ J  # (d, n): d_i f^a
    Q = np.asarray(linear, dtype=complex) @ np.conjugate(J)
    g = scale * np.pi * Sinv
    cg = np.conjugate(np.linalg.inv(g))
    vol = (scale * np.pi) ** n
    dens = np.einsum("ij,ai,bj,ab->", cg, P, Q, h_const)
    return float(vol * dens.real)


def affine_energy_function(
    pkg: DenseHodgePackage,
    phi_mat: np.ndarray,
    linear: np.ndarray,
    target: TargetManifold,
) -> Callable[[complex], float]:
    """Closed-form energy of an affine map along the constant-Beltrami family.

    Flat backends and flat targets only: the harmonic representative of
    the class stays the same affine map for every t, so the energy needs
    no quadrature and serves as the oracle for the variation formulas.
    """
    geom = pkg.geometry
    _require_torus(geom)
    if getattr(geom.config, "epsilon", 0.0) != 0.0:
        raise ValueError("closed-form family needs the flat (epsilon = 0) backend")
    if not target.flat:
        raise ValueError("closed-form family needs a flat target")
    h_const = target.metric(np.zeros((1, target.dimension)))[0]
    tau0 = geom.tau
    scale = geom.config.metric_scale
    linear = np.asarray(linear, dtype=float)

    def evaluate(t: complex) -> float:
        return _affine_energy_at_tau(deformed_tau(tau0, phi_mat, t), linear, h_const, scale)

    return evaluate


# -- finite differences -------------------------------------------------


def fd_first_derivative(E: Callable[[complex], float], step: float) -> complex:
    def once(s: float) -> complex:
        re = (E(s) - E(-s)) / (2 * s)
        im = (E(1j * s) - E(-1j * s)) / (2 * s)
        return 0.5 * (re - 1j * im)

    return (4.0 * once(step / 2) - once(step)) / 3.0


def fd_mixed_derivative(E: Callable[[complex], float], step: float, at: complex = 0.0) -> float:
    def once(s: float) -> float:
        return (
            E(at + s) + E(at - s) + E(at + 1j * s) + E(at - 1j * s) - 4.0 * E(at)
        ) / (4.0 * s * s)

    return (4.0 * once(step / 2) - once(step)) / 3.0


def hessian_grid_min(
    E: Callable[[complex], float], radius: float, size: int, step: float
) -> float:
    """Smallest mixed t, tbar Hessian over a square grid of base points."""
    pts = np.linspace(-radius, radius, size)
    best = np.inf
    for a in pts:
        for b in pts:
            best = min(best, fd_mixed_derivative(E, step, at=complex(a, b)))
    return float(best)
