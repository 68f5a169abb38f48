"""Order-by-order deformation solver and gauge diagnostics.

Given a backend package and a basis of harmonic tangent-valued (0,1) forms,
the solver produces the coefficients of the unique formal family

    phi(t) = sum_i t_i phi_i + sum_{|I| >= 2} t^I phi_I,

where each higher coefficient is fixed by the recursion

    phi_I = (1/2) dbar* G sum_{J + K = I} [phi_J, phi_K]

over ordered splittings with both parts nonzero.  The companion diagnostics
report, per order, how well the truncated family satisfies the integrability
equation, the coclosed gauge, the divergence-free condition, the vanishing
contraction with the Kaehler form, and the harmonic obstruction of the
quadratic term.

The module also evaluates the induced volume-ratio potential
log det(I - phi conj(phi)), the first-order pairing of a unit-eigenvalue
function against a product of deformation fields, a numerical test for
whether such products are orthogonal to the unit eigenspace, and the
classical holomorphy-weighted integral of a vector field against a potential.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hodge import Bundle, DenseHodgePackage, FormVector, PointField
from .series import MultiIndex, multiindices_of_order

__all__ = [
    "KuranishiSolution",
    "GaugeReport",
    "gauge_compatible_basis",
    "solve_kuranishi",
    "evaluate_phi",
    "check_integrability",
    "check_gauge",
    "ricci_potential",
    "mu_supremum",
    "lie_action_pairing",
    "TrivialityResult",
    "triviality_test",
    "futaki",
]

T = Bundle.tangent()
TRIV = Bundle.trivial()

CONSTRUCTION_TOL = 1e-10
GEOMETRIC_TOL = 1e-8
SUP_RADIUS = 0.5


@dataclass
class KuranishiSolution:
    """Immutable record of a solved deformation family."""

    package: DenseHodgePackage
    basis: list[FormVector]
    order: int
    coeffs: dict[MultiIndex, FormVector]
    diagnostics: list[dict] = field(default_factory=list)
    gauge: str = "dbar_star"

    @property
    def backend_id(self) -> str:
        return self.package.backend_id

    @property
    def num_params(self) -> int:
        return len(self.basis)

    def coefficient(self, index: MultiIndex | tuple[int, ...]) -> FormVector:
        if not isinstance(index, MultiIndex):
            index = MultiIndex(tuple(int(i) for i in index))
        return self.coeffs[index]

    def summary(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "num_params": self.num_params,
            "order": self.order,
            "gauge": self.gauge,
            "coeff_norms": {
                ",".join(map(str, I.exponents)): float(np.linalg.norm(v.coeffs))
                for I, v in sorted(self.coeffs.items(), key=lambda kv: kv[0]._key())
            },
            "diagnostics": self.diagnostics,
        }


@dataclass
class GaugeReport:
    """Per-order residual norms of the gauge and obstruction quantities.

    ``columns`` names the residuals; ``rows`` holds one list of nonnegative
    floats per computed order, aligned with ``orders``.
    """

    backend_id: str
    orders: list[int]
    columns: list[str]
    rows: list[list[float]]
    detail: list[dict] = field(default_factory=list)

    def by_order(self, order: int) -> dict[str, float]:
        i = self.orders.index(order)
        return dict(zip(self.columns, self.rows[i]))

    def max_entry(self, column: str) -> float:
        j = self.columns.index(column)
        return max(row[j] for row in self.rows)


def gauge_compatible_basis(
    pkg: DenseHodgePackage, tol: float = 1e-6, count: int | None = None
) -> list[FormVector]:
    """Harmonic deformation fields with symmetric lowered tensor.

    Seeds the harmonic projector with raised constant symmetric tensors and
    orthonormalizes the results.  On a flat background these satisfy the
    divergence and Kaehler-contraction gauge conditions exactly; the
    construction is deterministic because it never chooses an eigenbasis
    inside a degenerate harmonic space.  ``count`` truncates the seed list,
    which saves the unused harmonic projections when only the leading
    elements are needed.
    """
    geom = pkg.geometry
    n = geom.n
    raised = np.conjugate(geom.ginv_nodes)
    seeds = [(k, l) for k in range(n) for l in range(k, n)]
    if count is not None:
        seeds = seeds[: int(count)]
    candidates: list[FormVector] = []
    for k, l in seeds:
        S = np.zeros((n, n), dtype=complex)
        S[k, l] = 1.0
        S[l, k] = 1.0
        nodes = np.einsum("xil,lj->xij", raised, S)
        u = pkg.harmonic_project(pkg.project(T, 1, nodes))
        candidates.append(u)
    basis: list[FormVector] = []
    for u in candidates:
        for v in basis:
            u = u - v * pkg.inner(v, u)
        nu = pkg.norm(u)
        if nu > tol:
            basis.append(u * (1.0 / nu))
    return basis


def _check_basis(pkg: DenseHodgePackage, basis: list[FormVector]) -> None:
    if not basis:
        raise ValueError("basis must contain at least one form")
    for i, phi in enumerate(basis):
        if phi.key != (T, 1):
            raise ValueError("basis elements must be tangent-valued (0,1) forms")
        if phi.backend_id != pkg.backend_id:
            raise ValueError("basis element belongs to a different backend")
        res = pkg.norm(pkg.box_apply(phi))
        if res > GEOMETRIC_TOL * max(1.0, pkg.norm(phi)):
            raise ValueError(f"non-harmonic input basis (element {i + 1}, residual {res:.3e})")


def _has_degree_two(pkg: DenseHodgePackage) -> bool:
    """One-dimensional fibers carry no (0,2) forms: brackets vanish."""
    target = pkg.dbar_codomain((T, 1))
    return target is not None and target in pkg.space_keys


def _quadratic_source(
    pkg: DenseHodgePackage, coeffs: dict[MultiIndex, FormVector], I: MultiIndex
) -> FormVector:
    """Sum of [phi_J, phi_K] over ordered splittings J + K = I, |J|,|K| >= 1."""
    out = pkg.zero_form(T, 2)
    for J, K in I.splittings(min_order=1):
        out = out + pkg.bracket(coeffs[J], coeffs[K])
    return out


def _divergence_gauge_solve(
    pkg: DenseHodgePackage, rhs: FormVector, ops: dict[str, np.ndarray]
) -> FormVector:
    """Solve dbar x = rhs with div x = 0 and x contracted with omega = 0.

    Particular solution by least squares on the dbar matrix, then corrected
    inside the dbar-exact subspace to enforce the two gauge constraints.
    """
    x, *_ = np.linalg.lstsq(ops["dbar1"], rhs.coeffs, rcond=None)
    stacked = np.vstack([ops["div1"], ops["con1"]])
    A = stacked @ ops["dbar0"]
    b = -stacked @ x
    beta, *_ = np.linalg.lstsq(A, b, rcond=None)
    return pkg.form(T, 1, x + ops["dbar0"] @ beta)


def solve_kuranishi(
    pkg: DenseHodgePackage,
    basis: list[FormVector],
    d: int,
    gauge: str = "dbar_star",
) -> KuranishiSolution:
    """Compute the family coefficients up to total order d.

    ``gauge`` selects how the dbar equation is inverted at each order:
    ``dbar_star`` uses the coclosed Green-operator route; ``divergence``
    solves the same equation by least squares and then corrects within the
    exact subspace so that the divergence and the Kaehler-form contraction
    vanish.  On a Kaehler-Einstein background both routes must agree.
    """
    if int(d) != d or d < 1:
        raise ValueError("order must be an integer >= 1")
    if gauge not in ("dbar_star", "divergence"):
        raise ValueError("gauge must be 'dbar_star' or 'divergence'")
    _check_basis(pkg, basis)
    m = len(basis)
    coeffs: dict[MultiIndex, FormVector] = {}
    for i in range(m):
        coeffs[MultiIndex.unit(m, i)] = basis[i]

    ops: dict[str, np.ndarray] = {}
    if gauge == "divergence":
        if not hasattr(pkg, "matrix_of"):
            raise ValueError("divergence gauge requires a dense operator backend")
        ops["dbar1"] = pkg.matrix_of(pkg.dbar, (T, 1))
        ops["dbar0"] = pkg.matrix_of(pkg.dbar, (T, 0))
        ops["div1"] = pkg.matrix_of(pkg.divergence, (T, 1))
        ops["con1"] = pkg.matrix_of(pkg.contract_form, (T, 1))

    has2 = _has_degree_two(pkg)
    diagnostics: list[dict] = []
    for p in range(2, int(d) + 1):
        worst = {"order": p, "obstruction": 0.0, "dbar_star_residual": 0.0}
        for I in multiindices_of_order(m, p):
            if not has2:
                coeffs[I] = pkg.zero_form(T, 1)
                continue
            source = _quadratic_source(pkg, coeffs, I)
            if gauge == "dbar_star":
                phi_I = pkg.coexact_potential(source) * 0.5
            else:
                phi_I = _divergence_gauge_solve(pkg, source * 0.5, ops)
            coeffs[I] = phi_I
            worst["obstruction"] = max(
                worst["obstruction"], pkg.norm(pkg.harmonic_project(source))
            )
            worst["dbar_star_residual"] = max(
                worst["dbar_star_residual"], pkg.norm(pkg.dbar_star(phi_I))
            )
        diagnostics.append(worst)
    return KuranishiSolution(pkg, list(basis), int(d), coeffs, diagnostics, gauge)


def evaluate_phi(sol: KuranishiSolution, t) -> FormVector:
    """Truncated family member sum_I t^I phi_I as a form vector."""
    t = np.asarray(t, dtype=complex).reshape(-1)
    if t.shape[0] != sol.num_params:
        raise ValueError("parameter vector length mismatch")
    out = sol.package.zero_form(T, 1)
    for I, phi in sol.coeffs.items():
        out = out + phi * I.monomial(t)
    return out


def _sup_operator_norm(nodes: np.ndarray) -> float:
    sv = np.linalg.svd(nodes, compute_uv=False)
    return float(np.max(sv[:, 0])) if sv.ndim == 2 else float(np.max(sv))


def _evaluated_nodes(sol: KuranishiSolution, t) -> np.ndarray:
    phi_t = evaluate_phi(sol, t)
    nodes = sol.package.synth(phi_t).values
    sup = _sup_operator_norm(nodes)
    if sup > SUP_RADIUS:
        raise ValueError(
            f"parameter outside the convergence guard: sup operator norm {sup:.3f} > {SUP_RADIUS}"
        )
    return nodes


def check_integrability(sol: KuranishiSolution, t) -> float:
    """L2 norm of dbar phi(t) - (1/2)[phi(t), phi(t)] for the truncation.

    Expected to scale like |t|^(d+1).  The bracket is evaluated pointwise on
    the de-aliased grid and measured with the quadrature inner product, so
    no projection truncation enters the residual.
    """
    pkg = sol.package
    geom = pkg.geometry
    nodes = _evaluated_nodes(sol, t)
    if not _has_degree_two(pkg):
        return 0.0
    phi_t = evaluate_phi(sol, t)
    lhs = pkg.synth(pkg.dbar(phi_t)).values
    rhs = 0.5 * geom.bracket_nodes(nodes, nodes)
    diff = lhs - rhs
    dens = geom.pair_nodes(T, 2, diff, diff).real
    return float(np.sqrt(max(0.0, np.sum(geom.quad_weights * dens))))


def check_gauge(sol: KuranishiSolution) -> GaugeReport:
    """Residual norms of the gauge conditions at every computed order.

    Divergence and Kaehler-contraction residuals are evaluated pointwise on
    the quadrature grid, so basis truncation cannot hide any component of
    those fields.  The equation, coclosedness and obstruction entries live
    in the discrete form spaces where the recursion is posed.
    """
    pkg = sol.package
    geom = pkg.geometry
    columns = [
        "dbar_equation",
        "dbar_star",
        "divergence",
        "kahler_contraction",
        "obstruction",
    ]
    orders: list[int] = []
    rows: list[list[float]] = []
    detail: list[dict] = []
    has2 = _has_degree_two(pkg)
    for p in range(1, sol.order + 1):
        vals = {c: 0.0 for c in columns}
        for I in multiindices_of_order(sol.num_params, p):
            phi_I = sol.coeffs[I]
            nodes_I = pkg.synth(phi_I).values
            if has2:
                source = (
                    _quadratic_source(pkg, sol.coeffs, I) if p >= 2 else pkg.zero_form(T, 2)
                )
                dbar_eq = pkg.norm(pkg.dbar(phi_I) - source * 0.5)
                contraction = _l2_node_norm(
                    geom, geom.contract_form_nodes(nodes_I), TRIV, 2
                )
                obstruction = pkg.norm(pkg.harmonic_project(source))
            else:
                # no (0,2) forms exist: the equation and the contraction are
                # identities between zero spaces
                dbar_eq = 0.0
                contraction = 0.0
                obstruction = 0.0
            entry = {
                "index": I.exponents,
                "dbar_equation": dbar_eq,
                "dbar_star": pkg.norm(pkg.dbar_star(phi_I)),
                "divergence": _l2_node_norm(
                    geom, geom.divergence_nodes(nodes_I, 1), TRIV, 1
                ),
                "kahler_contraction": contraction,
                "obstruction": obstruction,
            }
            detail.append(entry)
            for c in columns:
                vals[c] = max(vals[c], entry[c])
        orders.append(p)
        rows.append([vals[c] for c in columns])
    return GaugeReport(pkg.backend_id, orders, columns, rows, detail)


def ricci_potential(sol: KuranishiSolution, t) -> PointField:
    """Volume-ratio potential log det(I - phi(t) conj(phi(t))) at nodes.

    On flat backends with a clean divergence gauge the associated vector
    field mu must vanish; this is verified as an internal consistency check.
    """
    pkg = sol.package
    nodes = _evaluated_nodes(sol, t)
    h = pkg.log_det_deform(PointField(pkg.backend_id, nodes))
    geom = pkg.geometry
    flat = float(np.max(np.abs(geom.ric_nodes))) == 0.0
    if flat:
        div_norm = _l2_node_norm(geom, geom.divergence_nodes(nodes, 1), TRIV, 1)
        if div_norm < CONSTRUCTION_TOL:
            mu = mu_supremum(pkg, nodes)
            if mu > GEOMETRIC_TOL:
                raise ValueError(
                    f"internal inconsistency: mu field {mu:.3e} despite clean divergence"
                )
    return h


def _l2_node_norm(geom, nodes: np.ndarray, bundle: Bundle, q: int) -> float:
    dens = geom.pair_nodes(bundle, q, nodes, nodes).real
    return float(np.sqrt(max(0.0, np.sum(geom.quad_weights * dens))))


def mu_supremum(pkg: DenseHodgePackage, phi_nodes: np.ndarray) -> float:
    """Sup norm of mu^k = (I - phi conj(phi))^{ik} w_i at nodes, where

        w_i = conj(phi^j_i) (div phi)_j - conj((div phi)_i).

    Both terms vanish when the divergence of phi vanishes, so this measures
    how far the potential above is from being a genuine Ricci potential.
    """
    geom = pkg.geometry
    div = geom.divergence_nodes(phi_nodes, 1)  # (x, j)
    w = np.einsum("xji,xj->xi", np.conjugate(phi_nodes), div) - np.conjugate(div)
    n = phi_nodes.shape[1]
    M = np.eye(n)[None, :, :] - geom.endo_from_beltrami(phi_nodes, phi_nodes)
    mu = np.einsum("xik,xi->xk", np.linalg.inv(M), w)
    return float(np.max(np.abs(mu)))


def lie_action_pairing(
    pkg: DenseHodgePackage,
    f: FormVector,
    phi: FormVector,
    psi: FormVector,
    tol: float = GEOMETRIC_TOL,
) -> complex:
    """(i/2) integral of f times the pointwise pairing phi . conj(psi).

    ``f`` must lie in the unit eigenspace of the scalar Laplacian and the
    two deformation fields must be harmonic.
    """
    if f.key != (TRIV, 0):
        raise ValueError("f must be a scalar function")
    pkg._own(f)
    res = pkg.norm(pkg.box_apply(f) - f)
    if res > tol * max(1.0, pkg.norm(f)):
        raise ValueError("f is not in the unit eigenspace of the Laplacian")
    for w in (phi, psi):
        if pkg.norm(pkg.box_apply(w)) > tol * max(1.0, pkg.norm(w)):
            raise ValueError("deformation fields must be harmonic")
    dens = pkg.synth(f).values * pkg.pointwise_dot(phi, psi).values
    return 0.5j * pkg.integrate(dens)


@dataclass
class TrivialityResult:
    is_trivial: bool
    max_projection: float
    witness: tuple[int, int] | None


def triviality_test(
    pkg: DenseHodgePackage,
    mock_lambda1: list | None = None,
    tol: float = GEOMETRIC_TOL,
) -> TrivialityResult:
    """Orthogonality of harmonic-product functions to the unit eigenspace.

    Products phi_i . conj(phi_j) over the harmonic basis span the candidate
    function space; the result is trivial when every product has negligible
    projection onto the unit eigenspace of the scalar Laplacian.  The pair
    indices in the witness count from 1 to match the basis numbering.
    A mock unit eigenspace (node fields or scalar forms) can be injected
    for synthetic checks.
    """
    basis = pkg.harmonic_basis(T, 1)
    if mock_lambda1 is not None:
        lam_nodes = [
            u.values if isinstance(u, PointField) else pkg.synth(u).values
            for u in mock_lambda1
        ]
    else:
        lam_nodes = [pkg.synth(u).values for u in pkg.first_eigenspace()]
    if not basis or not lam_nodes:
        return TrivialityResult(True, 0.0, None)
    norms = []
    for u in lam_nodes:
        norms.append(np.sqrt(max(np.real(pkg.integrate(np.abs(u) ** 2)), 1e-300)))
    best = (0.0, None)
    for i, phi in enumerate(basis):
        for j, psi in enumerate(basis):
            q = pkg.pointwise_dot(phi, psi).values
            for u, nu in zip(lam_nodes, norms):
                proj = abs(pkg.integrate(np.conjugate(u) * q)) / nu
                if proj > best[0]:
                    best = (proj, (i + 1, j + 1))
    is_trivial = best[0] <= tol
    return TrivialityResult(is_trivial, best[0], None if is_trivial else best[1])


def futaki(
    pkg: DenseHodgePackage,
    xi: FormVector,
    h: PointField,
    tol: float = GEOMETRIC_TOL,
) -> complex:
    """Integral of the xi-derivative of a potential against the volume form."""
    if xi.key != (T, 0):
        raise ValueError("xi must be a holomorphic vector field (degree zero)")
    pkg._own(xi)
    hol = pkg.norm(pkg.dbar(xi))
    if hol > tol * max(1.0, pkg.norm(xi)):
        raise ValueError(f"xi is not holomorphic (dbar residual {hol:.3e})")
    geom = pkg.geometry
    xi_nodes = pkg.synth(xi).values
    dh = np.stack([geom.dz_nodes(h.values, i) for i in range(geom.n)], axis=1)
    return pkg.integrate(np.einsum("xi,xi->x", xi_nodes, dh))
