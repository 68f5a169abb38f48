"""Fubini-Study geometry on low-dimensional complex projective space.

The metric is normalized so the Ricci form equals the Kaehler form
(Einstein constant one): in the affine chart it reads
(n+1) [ (1+|z|^2) delta_ij - zbar_i z_j ] / (1+|z|^2)^2, with total
volume (n+1)^n pi^n / n!.  All form spaces are spanned by chart
monomial ratios z^a zbar^b (1+|z|^2)^{-L/2}:

* scalar functions are the restrictions of bidegree-(D,D) sphere
  monomials (index boxes |a|, |b| <= D at level D), which span whole
  Laplace eigenspaces, so scalar spectra are exact;
* tangent fields use the Euler-sequence presentation sum_j F_j d/du_j
  with F bihomogeneous of bidegree (D+1, D); the Euler direction is a
  null direction of the quadrature Gram and is removed by eigenvalue
  pruning;
* (0,1)-form spaces are spanned by the dbar-images of the degree-zero
  raw bases.  In dimension one this is the entire (0,1) space (there
  are no (0,2)-forms and the relevant first cohomology vanishes); in
  dimension two it omits the coexact directions fed from (0,2)-forms,
  on which the Laplacian is bounded below, so kernel dimensions
  computed here (rigidity, holomorphic field counts) are exact on the
  represented span.

Quadrature is a product rule on the odd sphere pushed through the Hopf
quotient: uniform phase grids times Gauss-Legendre on the simplex of
squared moduli, where the sphere measure pushes forward to the uniform
Dirichlet measure.  Every declared-degree polynomial integrand is
integrated exactly, so Gram and dbar matrices are exact to rounding.

Sections of the k-th anticanonical power are holomorphic monomials of
homogeneous degree k(n+1), stored as unitary-frame node values with
pointwise pairing weight one; all levels up to the configured maximum
coexist in one package so Bergman sweeps reuse a single quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Any

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..hodge import Bundle, DenseHodgePackage

TRIV = Bundle.trivial()
TANGENT = Bundle.tangent()

# raw Gram eigenvalues below this relative threshold are null directions
PRUNE_REL = 1e-10
PRUNE_ABS = 1e-13
# residual allowed when fitting node data in the polynomial calculus span
SPAN_TOL = 1e-8

_CHUNK = 4096

Mono = tuple[tuple[int, ...], tuple[int, ...], int]  # (a, b, half-level L)
MonoDict = dict[Mono, complex]


def _box_indices(n: int, deg: int) -> list[tuple[int, ...]]:
    """All n-tuples of nonnegative integers with sum at most deg."""
    return [a for a in product(range(deg + 1), repeat=n) if sum(a) <= deg]


def _homog_indices(m: int, deg: int) -> list[tuple[int, ...]]:
    """All m-tuples of nonnegative integers with sum exactly deg."""
    return [a for a in product(range(deg + 1), repeat=m) if sum(a) == deg]


def _bump(idx: tuple[int, ...], i: int, step: int = 1) -> tuple[int, ...]:
    out = list(idx)
    out[i] += step
    return tuple(out)


def _dz_dict(d: MonoDict, i: int) -> MonoDict:
    """d/dz_i of a monomial combination, exact coefficient arithmetic."""
    out: MonoDict = {}
    for (a, b, lev), c in d.items():
        if a[i]:
            key = (_bump(a, i, -1), b, lev)
            out[key] = out.get(key, 0.0) + c * a[i]
        if lev:
            key = (a, _bump(b, i), lev + 2)
            out[key] = out.get(key, 0.0) - 0.5 * lev * c
    return out


def _dzbar_dict(d: MonoDict, i: int) -> MonoDict:
    out: MonoDict = {}
    for (a, b, lev), c in d.items():
        if b[i]:
            key = (a, _bump(b, i, -1), lev)
            out[key] = out.get(key, 0.0) + c * b[i]
        if lev:
            key = (_bump(a, i), b, lev + 2)
            out[key] = out.get(key, 0.0) - 0.5 * lev * c
    return out


@dataclass(frozen=True)
class ProjectiveConfig:
    n: int
    k: int
    function_cutoff: int
    tangent_cutoff: int
    quad_margin: int

    @classmethod
    def from_dict(cls, cfg: dict[str, Any]) -> "ProjectiveConfig":
        known = {"kind", "n", "k", "function_cutoff", "tangent_cutoff", "quad_margin"}
        extra = sorted(set(cfg) - known)
        if extra:
            raise ValueError(f"unknown projective config keys {extra}")
        n = int(cfg.get("n", 1))
        if n not in (1, 2):
            raise ValueError("projective backend supports n = 1 and n = 2 only")
        k = int(cfg.get("k", 0))
        if k < 0:
            raise ValueError("maximum power level k must be nonnegative")
        fc = int(cfg.get("function_cutoff", 5 if n == 1 else 2))
        tc = int(cfg.get("tangent_cutoff", 3 if n == 1 else 1))
        if fc < 1:
            raise ValueError("function_cutoff must be at least 1")
        if tc < 1:
            raise ValueError("tangent_cutoff must be at least 1")
        qm = int(cfg.get("quad_margin", 4))
        if qm < 0:
            raise ValueError("quad_margin must be nonnegative")
        return cls(n=n, k=k, function_cutoff=fc, tangent_cutoff=tc, quad_margin=qm)


class ProjectiveSpace:
    """One form space: raw basis = Gram eigen-combinations of monomials."""

    def __init__(
        self,
        geom: "ProjectiveGeometry",
        bundle: Bundle,
        q: int,
        comp_shape: tuple[int, ...],
        terms: list[list[MonoDict]],
    ) -> None:
        self.geom = geom
        self.bundle = bundle
        self.q = q
        self.comp_shape = comp_shape
        self.ncomp = int(np.prod(comp_shape)) if comp_shape else 1
        self.terms = terms
        self.nmono = len(terms)
        self._combos: np.ndarray | None = None
        self._lam: np.ndarray | None = None
        self._vcache: np.ndarray | None = None

    # -- raw monomial evaluation --------------------------------------

    def _mono_chunk(self, sl: slice) -> np.ndarray:
        """Node values of all monomial elements on a chunk: (len, C, R)."""
        geom = self.geom
        Z = geom.z_nodes[sl]
        S = geom._sqrt_opr2[sl]
        m = Z.shape[0]
        out = np.zeros((m, self.ncomp, self.nmono), dtype=complex)
        for r, comps in enumerate(self.terms):
            for c, d in enumerate(comps):
                if not d:
                    continue
                acc = np.zeros(m, dtype=complex)
                for (a, b, lev), coeff in d.items():
                    v = np.full(m, complex(coeff))
                    for i in range(geom.n):
                        if a[i]:
                            v = v * Z[:, i] ** a[i]
                        if b[i]:
                            v = v * np.conjugate(Z[:, i]) ** b[i]
                    if lev:
                        v = v * S ** (-lev)
                    acc = acc + v
                out[:, c, r] = acc
        return out

    def _finalize(self) -> None:
        if self._lam is not None:
            return
        geom = self.geom
        W = geom.pair_weight(self.bundle, self.q)
        G = np.zeros((self.nmono, self.nmono), dtype=complex)
        cache: list[np.ndarray] | None = []
        if geom.nnodes * self.ncomp * self.nmono > 4_000_000:
            cache = None
        for sl in geom._chunks():
            V = self._mono_chunk(sl)
            if cache is not None:
                cache.append(V)
            t = np.einsum("xcd,xdr->xcr", W[sl], V)
            t *= geom.quad_weights[sl, None, None]
            G += np.einsum("xcr,xcs->rs", np.conjugate(V), t)
        G = 0.5 * (G + G.conj().T)
        evals, evecs = np.linalg.eigh(G)
        lam_max = float(evals[-1]) if len(evals) else 0.0
        keep = evals > max(PRUNE_ABS, PRUNE_REL * lam_max)
        self._combos = np.ascontiguousarray(evecs[:, keep])
        self._lam = np.ascontiguousarray(evals[keep])
        if cache is not None:
            self._vcache = np.concatenate(cache, axis=0)

    @property
    def combos(self) -> np.ndarray:
        self._finalize()
        return self._combos

    @property
    def lam(self) -> np.ndarray:
        self._finalize()
        return self._lam

    # -- hodge-package interface --------------------------------------

    def gram(self) -> np.ndarray:
        self._finalize()
        return np.diag(self._lam.astype(complex))

    def synth(self, raw: np.ndarray) -> np.ndarray:
        self._finalize()
        y = self._combos @ np.asarray(raw, dtype=complex)
        geom = self.geom
        if self._vcache is not None:
            vals = np.einsum("xcr,r->xc", self._vcache, y)
        else:
            vals = np.empty((geom.nnodes, self.ncomp), dtype=complex)
            for sl in geom._chunks():
                vals[sl] = np.einsum("xcr,r->xc", self._mono_chunk(sl), y)
        return vals.reshape((geom.nnodes,) + self.comp_shape)

    def project_quad(self, nodes: np.ndarray) -> np.ndarray:
        self._finalize()
        geom = self.geom
        F = np.asarray(nodes, dtype=complex).reshape(geom.nnodes, self.ncomp)
        W = geom.pair_weight(self.bundle, self.q)
        p = np.zeros(self.nmono, dtype=complex)
        for sl in geom._chunks():
            V = self._vcache[sl] if self._vcache is not None else self._mono_chunk(sl)
            t = np.einsum("xcd,xd,x->xc", W[sl], F[sl], geom.quad_weights[sl])
            p += np.einsum("xcr,xc->r", np.conjugate(V), t)
        return self._combos.conj().T @ p


class ProjectiveGeometry:
    """Chart-exact Fubini-Study operator data for the dense Hodge package."""

    def __init__(self, config: ProjectiveConfig) -> None:
        self.config = config
        self.n = config.n
        self.k = config.k
        self.einstein_constant = 1.0
        n = self.n
        d_max = config.k * (n + 1)
        self.design_degree = (
            max(3 * config.function_cutoff + 8, 2 * config.tangent_cutoff + 10, 2 * d_max + 4)
            + config.quad_margin
        )
        self.phase_count = self.design_degree + 3
        self.radial_count = self.design_degree // 2 + 3
        self.backend_id = (
            f"projective(n={n},k={config.k},fc={config.function_cutoff},"
            f"tc={config.tangent_cutoff},deg={self.design_degree})"
        )
        self.volume = (n + 1) ** n * np.pi**n / math.factorial(n)
        self._build_nodes()
        opr2 = 1.0 + np.sum(np.abs(self.z_nodes) ** 2, axis=1)
        self._sqrt_opr2 = np.sqrt(opr2)
        eye = np.eye(n)
        outer = np.einsum("xi,xj->xij", np.conjugate(self.z_nodes), self.z_nodes)
        self.g_nodes = (n + 1) * (opr2[:, None, None] * eye - outer) / opr2[:, None, None] ** 2
        self.ginv_nodes = opr2[:, None, None] * (eye + outer) / (n + 1)
        self.detg_nodes = (n + 1) ** n / opr2 ** (n + 1)
        self._space_cache: dict[tuple[Bundle, int], ProjectiveSpace] = {}
        self._pair_cache: dict[tuple[Bundle, int], np.ndarray] = {}
        self._calc: tuple | None = None
        self._div_cache: np.ndarray | None = None

    # -- quadrature ----------------------------------------------------

    def _build_nodes(self) -> None:
        n = self.n
        M = self.phase_count
        Q = self.radial_count
        t, w = np.polynomial.legendre.leggauss(Q)
        xq = 0.5 * (t + 1.0)
        wq = 0.5 * w
        th = 2.0 * np.pi * np.arange(M) / M
        if n == 1:
            TH, XQ = np.meshgrid(th, xq, indexing="ij")
            WQ = np.meshgrid(th, wq, indexing="ij")[1]
            x1 = XQ.ravel()
            z = np.sqrt(x1 / (1.0 - x1)) * np.exp(1j * TH.ravel())
            self.z_nodes = z[:, None]
            self.quad_weights = self.volume * WQ.ravel() / M
        else:
            T1, T2, XI, ETA = np.meshgrid(th, th, xq, xq, indexing="ij")
            WXI = np.meshgrid(th, th, wq, xq, indexing="ij")[2]
            WETA = np.meshgrid(th, th, xq, wq, indexing="ij")[3]
            xi = XI.ravel()
            eta = ETA.ravel()
            x1 = xi
            x2 = eta * (1.0 - xi)
            x0 = (1.0 - xi) * (1.0 - eta)
            z1 = np.sqrt(x1 / x0) * np.exp(1j * T1.ravel())
            z2 = np.sqrt(x2 / x0) * np.exp(1j * T2.ravel())
            self.z_nodes = np.stack([z1, z2], axis=1)
            prob = 2.0 * (1.0 - xi) * WXI.ravel() * WETA.ravel()
            self.quad_weights = self.volume * prob / M**2
        self.nnodes = self.z_nodes.shape[0]

    def _chunks(self) -> list[slice]:
        return [slice(i, min(i + _CHUNK, self.nnodes)) for i in range(0, self.nnodes, _CHUNK)]

    def describe(self) -> dict:
        cfg = self.config
        return {
            "kind": "projective",
            "n": self.n,
            "k": cfg.k,
            "function_cutoff": cfg.function_cutoff,
            "tangent_cutoff": cfg.tangent_cutoff,
            "design_degree": self.design_degree,
            "phase_count": self.phase_count,
            "radial_count": self.radial_count,
            "nnodes": self.nnodes,
        }

    # -- spaces --------------------------------------------------------

    def supported_space_keys(self) -> list[tuple[Bundle, int]]:
        keys = [(TRIV, 0), (TRIV, 1), (TANGENT, 0), (TANGENT, 1)]
        keys += [(Bundle.power(j), 0) for j in range(1, self.k + 1)]
        return keys

    def _scalar_terms(self) -> list[list[MonoDict]]:
        deg = self.config.function_cutoff
        lev = 2 * deg
        idx = _box_indices(self.n, deg)
        return [[{(a, b, lev): 1.0}] for a in idx for b in idx]

    def _tangent_terms(self) -> list[list[MonoDict]]:
        n = self.n
        deg = self.config.tangent_cutoff
        lev = 2 * deg
        elements: list[list[MonoDict]] = []
        for j in range(n + 1):
            for A in _homog_indices(n + 1, deg + 1):
                for B in _homog_indices(n + 1, deg):
                    comps: list[MonoDict] = [dict() for _ in range(n)]
                    Ap, Bp = A[1:], B[1:]
                    if j == 0:
                        for i in range(n):
                            comps[i][(_bump(Ap, i), Bp, lev)] = -1.0
                    else:
                        comps[j - 1][(Ap, Bp, lev)] = 1.0
                    elements.append(comps)
        return elements

    def _section_terms(self, level: int) -> list[list[MonoDict]]:
        d = level * (self.n + 1)
        zero = (0,) * self.n
        return [[{(a, zero, d): 1.0}] for a in _box_indices(self.n, d)]

    @staticmethod
    def _image_terms(src: list[list[MonoDict]], n: int) -> list[list[MonoDict]]:
        out = []
        for comps in src:
            new: list[MonoDict] = []
            for d in comps:
                for l in range(n):
                    new.append(_dzbar_dict(d, l))
            out.append(new)
        return out

    def space_def(self, bundle: Bundle, q: int) -> ProjectiveSpace:
        key = (bundle, q)
        if key in self._space_cache:
            return self._space_cache[key]
        n = self.n
        if bundle == TRIV and q == 0:
            sp = ProjectiveSpace(self, bundle, q, (), self._scalar_terms())
        elif bundle == TRIV and q == 1:
            sp = ProjectiveSpace(self, bundle, q, (n,), self._image_terms(self._scalar_terms(), n))
        elif bundle == TANGENT and q == 0:
            sp = ProjectiveSpace(self, bundle, q, (n,), self._tangent_terms())
        elif bundle == TANGENT and q == 1:
            sp = ProjectiveSpace(
                self, bundle, q, (n, n), self._image_terms(self._tangent_terms(), n)
            )
        elif bundle.kind == "power" and q == 0:
            if not 1 <= bundle.k <= self.k:
                raise ValueError(
                    f"power level {bundle.k} not configured; set k >= {bundle.k} at build time"
                )
            sp = ProjectiveSpace(self, bundle, q, (), self._section_terms(bundle.k))
        else:
            raise ValueError(f"space {key} is not represented on the projective backend")
        self._space_cache[key] = sp
        return sp

    def dbar_target(self, bundle: Bundle, q: int) -> tuple[Bundle, int] | None:
        if q == 0 and bundle in (TRIV, TANGENT):
            return (bundle, 1)
        return None

    def dbar_raw_matrix(self, bundle: Bundle, q: int) -> np.ndarray:
        if self.dbar_target(bundle, q) is None:
            raise ValueError(f"no dbar matrix out of {(bundle, q)}")
        src = self.space_def(bundle, 0)
        tgt = self.space_def(bundle, 1)
        # image element r of the target list is dbar of monomial element r
        # of the source list, so the raw map is a change of eigenbasis
        return tgt.combos.conj().T @ src.combos

    # -- pairings ------------------------------------------------------

    def pair_weight(self, bundle: Bundle, q: int) -> np.ndarray:
        key = (bundle, q)
        if key in self._pair_cache:
            return self._pair_cache[key]
        n = self.n
        if q == 0:
            form = np.ones((self.nnodes, 1, 1), dtype=complex)
        elif q == 1:
            form = np.conjugate(self.ginv_nodes)
        else:
            raise ValueError("degree-two pairings are not represented on the projective backend")
        if bundle.kind == "tangent":
            vec = np.conjugate(self.g_nodes)
            W = np.einsum("xik,xab->xiakb", vec, form)
            C = W.shape[1] * W.shape[2]
            W = W.reshape(self.nnodes, C, C)
        else:
            W = form
        self._pair_cache[key] = W
        return W

    def pair_nodes(self, bundle: Bundle, q: int, U: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Nodal inner product field, conjugate linear in U."""
        W = self.pair_weight(bundle, q)
        C = W.shape[1]
        Uf = U.reshape(self.nnodes, C)
        Vf = V.reshape(self.nnodes, C)
        return np.einsum("xc,xcd,xd->x", np.conjugate(Uf), W, Vf)

    # -- exact chart calculus -----------------------------------------

    def _calculus(self) -> tuple:
        if self._calc is None:
            n = self.n
            deg = self.config.function_cutoff + 2
            lev = 2 * deg
            idx = _box_indices(n, deg)
            mons: list[Mono] = [(a, b, lev) for a in idx for b in idx]
            R = len(mons)
            B = np.empty((self.nnodes, R), dtype=complex)
            dz_tabs = [np.empty((self.nnodes, R), dtype=complex) for _ in range(n)]
            dzb_tabs = [np.empty((self.nnodes, R), dtype=complex) for _ in range(n)]
            helper = ProjectiveSpace(self, TRIV, 0, (), [[{m: 1.0}] for m in mons])
            for sl in self._chunks():
                B[sl] = helper._mono_chunk(sl)[:, 0, :]
            for i in range(n):
                dsp = ProjectiveSpace(
                    self, TRIV, 0, (), [[_dz_dict({m: 1.0}, i)] for m in mons]
                )
                bsp = ProjectiveSpace(
                    self, TRIV, 0, (), [[_dzbar_dict({m: 1.0}, i)] for m in mons]
                )
                for sl in self._chunks():
                    dz_tabs[i][sl] = dsp._mono_chunk(sl)[:, 0, :]
                    dzb_tabs[i][sl] = bsp._mono_chunk(sl)[:, 0, :]
            G = (B.conj().T * self.quad_weights) @ B
            G = 0.5 * (G + G.conj().T)
            cho = cho_factor(G, lower=True, check_finite=False)
            self._calc = (B, cho, dz_tabs, dzb_tabs)
        return self._calc

    def _fit_scalar(self, field: np.ndarray) -> np.ndarray:
        f = np.asarray(field, dtype=complex)
        if f.shape != (self.nnodes,):
            raise ValueError("projective derivative calculus expects scalar node fields")
        B, cho, _, _ = self._calculus()
        c = cho_solve(cho, B.conj().T @ (self.quad_weights * f), check_finite=False)
        res = B @ c - f
        scale = float(np.sqrt(np.sum(self.quad_weights * np.abs(f) ** 2)))
        err = float(np.sqrt(np.sum(self.quad_weights * np.abs(res) ** 2)))
        if err > SPAN_TOL * (1.0 + scale):
            raise ValueError(
                "field is outside the polynomial calculus span; raise function_cutoff"
            )
        return c

    def dz_nodes(self, field: np.ndarray, i: int) -> np.ndarray:
        c = self._fit_scalar(field)
        return self._calculus()[2][i] @ c

    def dzbar_nodes(self, field: np.ndarray, i: int) -> np.ndarray:
        c = self._fit_scalar(field)
        return self._calculus()[3][i] @ c

    def gradient_holo_nodes(self, f: np.ndarray) -> np.ndarray:
        """(1,0)-part of the metric gradient of a scalar field."""
        df = np.stack([self.dzbar_nodes(f, j) for j in range(self.n)], axis=1)
        return np.einsum("xij,xj->xi", np.conjugate(self.ginv_nodes), df)

    def _div_table(self, sp: ProjectiveSpace) -> np.ndarray:
        if self._div_cache is None:
            n = self.n
            div_terms: list[list[MonoDict]] = []
            for comps in sp.terms:
                total: MonoDict = {}
                for i in range(n):
                    for key, c in _dz_dict(comps[i], i).items():
                        total[key] = total.get(key, 0.0) + c
                    # d_i log det g = -(n+1) zbar_i / (1+|z|^2)
                    for (a, b, lev), c in comps[i].items():
                        key = (a, _bump(b, i), lev + 2)
                        total[key] = total.get(key, 0.0) - (n + 1) * c
                div_terms.append([total])
            helper = ProjectiveSpace(self, TRIV, 0, (), div_terms)
            tab = np.empty((self.nnodes, sp.nmono), dtype=complex)
            for sl in self._chunks():
                tab[sl] = helper._mono_chunk(sl)[:, 0, :]
            self._div_cache = tab
        return self._div_cache

    def divergence_nodes(self, X: np.ndarray, q: int) -> np.ndarray:
        """Volume-weighted divergence (1/det g) d_i(det g X^i) at nodes."""
        if q != 0:
            raise ValueError("projective divergence supports degree-zero fields only")
        sp = self.space_def(TANGENT, 0)
        Xf = np.asarray(X, dtype=complex).reshape(self.nnodes, self.n)
        c = sp.project_quad(Xf) / sp.lam
        rec = sp.synth(c)
        scale = float(np.sqrt(np.sum(self.quad_weights * np.sum(np.abs(Xf) ** 2, axis=1))))
        err = float(
            np.sqrt(np.sum(self.quad_weights * np.sum(np.abs(rec - Xf) ** 2, axis=1)))
        )
        if err > SPAN_TOL * (1.0 + scale):
            raise ValueError(
                "vector field is outside the tangent span; raise tangent_cutoff"
            )
        return self._div_table(sp) @ (sp.combos @ c)


def build_projective_geometry(config: dict[str, Any] | ProjectiveConfig) -> ProjectiveGeometry:
    if not isinstance(config, ProjectiveConfig):
        config = ProjectiveConfig.from_dict(config)
    return ProjectiveGeometry(config)


def build_projective_package(config: dict[str, Any] | ProjectiveConfig) -> DenseHodgePackage:
    geom = build_projective_geometry(config)
    return DenseHodgePackage(geom, geom.supported_space_keys())
