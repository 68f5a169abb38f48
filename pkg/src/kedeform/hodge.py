"""Finite dimensional Dolbeault complexes with metric structure.

A :class:`DenseHodgePackage` wraps a concrete geometry (torus, polarized
abelian family, projective space) and exposes the operator system on the
antiholomorphic form spaces A^{0,q}(X, E): del-bar, its metric adjoint,
Hodge Laplacians, Green operator, harmonic projector, shifted resolvents,
and the pointwise nonlinear operations (bracket, contractions, divergence,
determinant deformations) evaluated pseudospectrally on the geometry's
quadrature grid.

The geometry object must provide, per supported (bundle, q):

* ``space_def(bundle, q)`` with ``raw_dim``, ``gram()``, ``synth(raw)``,
  ``project_quad(nodes)`` and component metadata;
* ``dbar_target(bundle, q)`` and ``dbar_raw_matrix(bundle, q)``, the exact
  derivative in the raw (non orthonormalized) basis;
* quadrature node data (weights summing to the volume) and whatever node
  level tensor calculus the nonlinear wrappers below need.

Linear operators act on orthonormal-basis coefficient vectors, obtained
from the raw basis by a Cholesky factorization of the quadrature Gram
matrix.  In these bases the L2 pairing is the standard Hermitian dot
product and the adjoint of a matrix is its conjugate transpose, so the
complex identities (adjointness, dbar^2 = 0, Hodge decomposition) hold to
roundoff by construction; geometric identities hold to quadrature
accuracy.

Sign conventions, fixed once for the whole package:

* box = dbar dbar* + dbar* dbar is nonnegative on every space;
* on functions the scalar Laplacian is Delta0 = -box (nonpositive
  spectrum), so the first eigenspace condition reads (Delta0 + 1) f = 0;
* ``function_resolvent`` exposes (Delta0 + 1)^{-1} under the ``fano``
  convention and (1 - Delta0)^{-1} under ``general_type``; the two differ
  by the sign of the spectrum shift and must never be mixed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy.linalg import cholesky, eigh, solve_triangular

__all__ = [
    "Bundle",
    "FormVector",
    "PointField",
    "OperatorHandle",
    "DenseHodgePackage",
]

_BUNDLE_KINDS = ("trivial", "tangent", "power")


@dataclass(frozen=True)
class Bundle:
    """Coefficient bundle tag: trivial, holomorphic tangent, or L^k."""

    kind: str
    k: int = 0

    def __post_init__(self) -> None:
        if self.kind not in _BUNDLE_KINDS:
            raise ValueError(f"unknown bundle kind {self.kind!r}")
        if self.kind == "power" and self.k < 1:
            raise ValueError("power bundle needs k >= 1")
        if self.kind != "power" and self.k != 0:
            raise ValueError("k is reserved for power bundles")

    @classmethod
    def trivial(cls) -> "Bundle":
        return cls("trivial")

    @classmethod
    def tangent(cls) -> "Bundle":
        return cls("tangent")

    @classmethod
    def power(cls, k: int) -> "Bundle":
        return cls("power", k)

    def __repr__(self) -> str:
        if self.kind == "power":
            return f"Bundle.power({self.k})"
        return f"Bundle.{self.kind}()"


@dataclass
class FormVector:
    """Element of A^{0,q}(X, E) as coefficients in a declared basis.

    For dense packages the basis is L2-orthonormal, so norms and inner
    products of coefficient vectors agree with the L2 ones.
    """

    backend_id: str
    bundle: Bundle
    q: int
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.ndim != 1:
            raise ValueError("coefficients must be a vector")

    @property
    def key(self) -> tuple[Bundle, int]:
        return (self.bundle, self.q)

    def _like(self, coeffs: np.ndarray) -> "FormVector":
        return FormVector(self.backend_id, self.bundle, self.q, coeffs)

    def _check(self, other: "FormVector") -> None:
        if (
            self.backend_id != other.backend_id
            or self.bundle != other.bundle
            or self.q != other.q
        ):
            raise ValueError("form vectors live in different spaces")

    def __add__(self, other: "FormVector") -> "FormVector":
        self._check(other)
        return self._like(self.coeffs + other.coeffs)

    def __sub__(self, other: "FormVector") -> "FormVector":
        self._check(other)
        return self._like(self.coeffs - other.coeffs)

    def __mul__(self, c: complex) -> "FormVector":
        return self._like(self.coeffs * c)

    __rmul__ = __mul__

    def __neg__(self) -> "FormVector":
        return self._like(-self.coeffs)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def inner(self, other: "FormVector") -> complex:
        """Hermitian product, conjugate linear in self."""
        self._check(other)
        return complex(np.vdot(self.coeffs, other.coeffs))


@dataclass
class PointField:
    """Nodal values of a scalar or tensor field, node axis first."""

    backend_id: str
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)

    @property
    def tensor_shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    def _like(self, values: np.ndarray) -> "PointField":
        return PointField(self.backend_id, values)

    def __add__(self, other: "PointField") -> "PointField":
        return self._like(self.values + other.values)

    def __sub__(self, other: "PointField") -> "PointField":
        return self._like(self.values - other.values)

    def __mul__(self, c) -> "PointField":
        if isinstance(c, PointField):
            return self._like(self.values * c.values)
        return self._like(self.values * c)

    __rmul__ = __mul__

    def conj(self) -> "PointField":
        return self._like(np.conjugate(self.values))


@dataclass
class OperatorHandle:
    """Named linear operator between two (bundle, q) spaces."""

    backend_id: str
    name: str
    domain: tuple[Bundle, int]
    codomain: tuple[Bundle, int]
    apply_fn: Callable[[FormVector], FormVector]

    def apply(self, u: FormVector) -> FormVector:
        if u.key != self.domain:
            raise ValueError(f"operator {self.name} expects domain {self.domain}, got {u.key}")
        return self.apply_fn(u)


@dataclass
class _SpaceState:
    key: tuple[Bundle, int]
    space: Any
    chol: np.ndarray  # lower factor of the raw Gram
    dim: int
    dbar: np.ndarray | None = None  # orthonormal-basis matrix to q+1
    evals: np.ndarray | None = None
    evecs: np.ndarray | None = None
    cached: dict = field(default_factory=dict)


class DenseHodgePackage:
    """Operator system for one geometry, dense linear algebra throughout."""

    # kernel detection: eigenvalues below max(abs_tol, rel_tol * lambda_max)
    kernel_abs_tol = 1e-10
    kernel_rel_tol = 1e-11

    def __init__(self, geometry: Any, space_keys: list[tuple[Bundle, int]]) -> None:
        self.geometry = geometry
        self.backend_id = geometry.backend_id
        self._keys = list(space_keys)
        self._states: dict[tuple[Bundle, int], _SpaceState] = {}

    # -- space bookkeeping --------------------------------------------

    @property
    def space_keys(self) -> list[tuple[Bundle, int]]:
        return list(self._keys)

    def _state(self, key: tuple[Bundle, int]) -> _SpaceState:
        if key not in self._states:
            if key not in self._keys:
                raise ValueError(f"space {key} not declared for this package")
            bundle, q = key
            space = self.geometry.space_def(bundle, q)
            gram = space.gram()
            # raw Gram is Hermitian positive definite for any positive metric
            L = cholesky(gram, lower=True, check_finite=False)
            self._states[key] = _SpaceState(key=key, space=space, chol=L, dim=gram.shape[0])
        return self._states[key]

    def dim(self, key: tuple[Bundle, int]) -> int:
        return self._state(key).dim

    def form(self, bundle: Bundle, q: int, coeffs: np.ndarray) -> FormVector:
        st = self._state((bundle, q))
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.shape != (st.dim,):
            raise ValueError(f"expected {st.dim} coefficients for {(bundle, q)}")
        return FormVector(self.backend_id, bundle, q, coeffs)

    def zero_form(self, bundle: Bundle, q: int) -> FormVector:
        return self.form(bundle, q, np.zeros(self._state((bundle, q)).dim, dtype=complex))

    def random_form(self, bundle: Bundle, q: int, rng: np.random.Generator) -> FormVector:
        st = self._state((bundle, q))
        c = rng.standard_normal(st.dim) + 1j * rng.standard_normal(st.dim)
        return self.form(bundle, q, c / np.linalg.norm(c))

    def _own(self, u: FormVector) -> _SpaceState:
        if u.backend_id != self.backend_id:
            raise ValueError("form vector belongs to a different backend")
        return self._state(u.key)

    # -- synthesis and projection -------------------------------------

    def raw_coeffs(self, u: FormVector) -> np.ndarray:
        """Coefficients in the geometry's raw basis: c = L^{-dagger} u."""
        st = self._own(u)
        return solve_triangular(st.chol, u.coeffs, lower=True, trans="C", check_finite=False)

    def synth(self, u: FormVector) -> PointField:
        """Node values of the form, component axes after the node axis."""
        st = self._own(u)
        return PointField(self.backend_id, st.space.synth(self.raw_coeffs(u)))

    def project(self, bundle: Bundle, q: int, nodes: PointField | np.ndarray) -> FormVector:
        """L2-orthogonal projection of nodal data onto the basis span."""
        st = self._state((bundle, q))
        values = nodes.values if isinstance(nodes, PointField) else np.asarray(nodes)
        p = st.space.project_quad(values)
        u = solve_triangular(st.chol, p, lower=True, trans="N", check_finite=False)
        return FormVector(self.backend_id, bundle, q, u)

    def inner(self, u: FormVector, v: FormVector) -> complex:
        """L2 Hermitian product, conjugate linear in the first slot."""
        u._check(v)
        self._own(u)
        return complex(np.vdot(u.coeffs, v.coeffs))

    def norm(self, u: FormVector) -> float:
        self._own(u)
        return float(np.linalg.norm(u.coeffs))

    # -- dbar and its adjoint -----------------------------------------

    def dbar_codomain(self, key: tuple[Bundle, int]) -> tuple[Bundle, int] | None:
        return self.geometry.dbar_target(*key)

    def _dbar_matrix(self, key: tuple[Bundle, int]) -> tuple[np.ndarray, tuple[Bundle, int]] | None:
        st = self._state(key)
        target = self.dbar_codomain(key)
        if target is None or target not in self._keys:
            return None
        if st.dbar is None:
            A = self.geometry.dbar_raw_matrix(*key)
            st_t = self._state(target)
            # orthonormal-basis matrix: D = L_t^dagger A L^{-dagger}
            Y = solve_triangular(st.chol, A.conj().T, lower=True, trans="N", check_finite=False)
            st.dbar = st_t.chol.conj().T @ Y.conj().T
        return st.dbar, target

    def dbar(self, u: FormVector) -> FormVector:
        got = self._dbar_matrix(u.key)
        if got is None:
            raise ValueError(f"no dbar target declared for {u.key}")
        D, target = got
        return FormVector(self.backend_id, target[0], target[1], D @ u.coeffs)

    def dbar_star(self, v: FormVector) -> FormVector:
        """Metric adjoint, mapping degree q to q - 1."""
        self._own(v)
        bundle, q = v.key
        if q == 0:
            raise ValueError("dbar_star undefined on degree zero")
        source = (bundle, q - 1)
        got = self._dbar_matrix(source)
        if got is None or got[1] != v.key:
            raise ValueError(f"no dbar from {source} into {v.key}")
        D, _ = got
        return FormVector(self.backend_id, bundle, q - 1, D.conj().T @ v.coeffs)

    # -- Laplacian, spectral calculus ---------------------------------

    def box_matrix(self, key: tuple[Bundle, int]) -> np.ndarray:
        """Hodge Laplacian dbar dbar* + dbar* dbar on the space."""
        st = self._state(key)
        if "box" not in st.cached:
            dim = st.dim
            box = np.zeros((dim, dim), dtype=complex)
            up = self._dbar_matrix(key)
            if up is not None:
                D = up[0]
                box += D.conj().T @ D
            bundle, q = key
            if q > 0 and (bundle, q - 1) in self._keys:
                down = self._dbar_matrix((bundle, q - 1))
                if down is not None and down[1] == key:
                    Dd = down[0]
                    box += Dd @ Dd.conj().T
            st.cached["box"] = box
        return st.cached["box"]

    def spectrum(self, key: tuple[Bundle, int]) -> tuple[np.ndarray, np.ndarray]:
        st = self._state(key)
        if st.evals is None:
            box = self.box_matrix(key)
            evals, evecs = eigh(box, check_finite=False)
            st.evals = evals
            st.evecs = evecs
            st.cached.pop("box", None)
        return st.evals, st.evecs

    def _kernel_mask(self, evals: np.ndarray) -> np.ndarray:
        lam_max = float(evals[-1]) if len(evals) else 0.0
        tol = max(self.kernel_abs_tol, self.kernel_rel_tol * lam_max)
        return evals < tol

    def harmonic_basis(self, bundle: Bundle, q: int) -> list[FormVector]:
        """Orthonormal basis of ker box on the space."""
        evals, evecs = self.spectrum((bundle, q))
        mask = self._kernel_mask(evals)
        return [
            FormVector(self.backend_id, bundle, q, evecs[:, j].copy())
            for j in np.nonzero(mask)[0]
        ]

    def _spectral_apply(self, u: FormVector, weight: Callable[[np.ndarray], np.ndarray]) -> FormVector:
        evals, evecs = self.spectrum(u.key)
        proj = evecs.conj().T @ u.coeffs
        return u._like(evecs @ (weight(evals) * proj))

    def harmonic_project(self, u: FormVector) -> FormVector:
        self._own(u)
        return self._spectral_apply(u, lambda ev: self._kernel_mask(ev).astype(float))

    def green(self, u: FormVector) -> FormVector:
        """Partial inverse of box on the orthogonal complement of its kernel."""
        self._own(u)

        def w(ev: np.ndarray) -> np.ndarray:
            mask = self._kernel_mask(ev)
            safe = np.where(mask, 1.0, ev)
            return np.where(mask, 0.0, 1.0 / safe)

        return self._spectral_apply(u, w)

    def box_apply(self, u: FormVector) -> FormVector:
        self._own(u)
        return u._like(self.box_matrix(u.key) @ u.coeffs)

    def coexact_potential(self, v: FormVector) -> FormVector:
        """Minimum-norm potential whose dbar equals the exact part of v."""
        return self.dbar_star(self.green(v))

    def box_plus_shift_inverse(self, u: FormVector, c: float) -> FormVector:
        """(box + c)^{-1} u for c > 0; operator norm is at most 1/c."""
        if c <= 0:
            raise ValueError("shift must be positive")
        self._own(u)
        return self._spectral_apply(u, lambda ev: 1.0 / (ev + c))

    def function_resolvent(self, u: FormVector, convention: str) -> FormVector:
        """Resolvent of the scalar Laplacian on functions.

        ``fano``: (Delta0 + 1)^{-1} = (1 - box)^{-1}, requires the
        spectrum of box to stay away from 1 (the first eigenspace must be
        empty or explicitly projected out by the caller).
        ``general_type``: (1 - Delta0)^{-1} = (1 + box)^{-1}.
        """
        self._own(u)
        if u.key != (Bundle.trivial(), 0):
            raise ValueError("function resolvent acts on scalar functions")
        if convention == "fano":
            evals, _ = self.spectrum(u.key)
            gap = np.min(np.abs(evals - 1.0))
            if gap < 1e-8:
                raise ValueError(
                    "box has spectrum at 1; project out the first eigenspace first"
                )
            return self._spectral_apply(u, lambda ev: 1.0 / (1.0 - ev))
        if convention == "general_type":
            return self._spectral_apply(u, lambda ev: 1.0 / (1.0 + ev))
        raise ValueError("convention must be 'fano' or 'general_type'")

    def first_eigenspace(self, tol: float = 1e-8) -> list[FormVector]:
        """Orthonormal basis of ker(Delta0 + 1) = ker(box - 1) on functions."""
        key = (Bundle.trivial(), 0)
        evals, evecs = self.spectrum(key)
        idx = np.nonzero(np.abs(evals - 1.0) < tol)[0]
        return [FormVector(self.backend_id, *key, evecs[:, j].copy()) for j in idx]

    # -- named operator handles ---------------------------------------

    def operator(self, name: str, bundle: Bundle, q: int, shift: float = 0.0) -> OperatorHandle:
        key = (bundle, q)
        table: dict[str, tuple[tuple[Bundle, int], Callable[[FormVector], FormVector]]] = {}
        target = self.dbar_codomain(key)
        if target is not None and target in self._keys:
            table["dbar"] = (target, self.dbar)
        if q > 0:
            table["dbar_star"] = ((bundle, q - 1), self.dbar_star)
        table["laplacian"] = (key, self.box_apply)
        table["green"] = (key, self.green)
        table["harmonic_proj"] = (key, self.harmonic_project)
        if shift > 0.0:
            table["box_plus_shift"] = (key, lambda u: self.box_plus_shift_inverse(u, shift))
        if name not in table:
            raise ValueError(f"operator {name!r} unavailable on {key}")
        codomain, fn = table[name]
        return OperatorHandle(self.backend_id, name, key, codomain, fn)

    def matrix_of(self, fn: Callable[[FormVector], FormVector], domain: tuple[Bundle, int]) -> np.ndarray:
        """Dense matrix of a linear map in orthonormal coordinates.

        Applies ``fn`` to every coordinate basis vector of the domain space;
        intended for moderate dimensions (diagnostic subspace computations).
        """
        dim = self.dim(domain)
        cols = []
        for j in range(dim):
            e = np.zeros(dim, dtype=complex)
            e[j] = 1.0
            cols.append(fn(self.form(domain[0], domain[1], e)).coeffs)
        return np.stack(cols, axis=1)

    # -- nonlinear pointwise operations -------------------------------

    def _nodes(self, u: FormVector) -> np.ndarray:
        return self.synth(u).values

    def bracket(self, phi: FormVector, psi: FormVector) -> FormVector:
        """Symmetric bracket of two tangent-valued (0,1) forms, degree 2 output."""
        for w in (phi, psi):
            if w.key != (Bundle.tangent(), 1):
                raise ValueError("bracket expects tangent-valued (0,1) forms")
        self._own(phi)
        self._own(psi)
        out = self.geometry.bracket_nodes(self._nodes(phi), self._nodes(psi))
        return self.project(Bundle.tangent(), 2, out)

    def contract_form(self, phi: FormVector) -> FormVector:
        """Contraction of a tangent-valued (0,1) form with the Kaehler form."""
        if phi.key != (Bundle.tangent(), 1):
            raise ValueError("contract_form expects a tangent-valued (0,1) form")
        self._own(phi)
        out = self.geometry.contract_form_nodes(self._nodes(phi))
        return self.project(Bundle.trivial(), 2, out)

    def divergence(self, u: FormVector) -> FormVector:
        """Covariant divergence on the vector index, degree preserved."""
        bundle, q = u.key
        if bundle != Bundle.tangent():
            raise ValueError("divergence expects a tangent-valued form")
        self._own(u)
        out = self.geometry.divergence_nodes(self._nodes(u), q)
        return self.project(Bundle.trivial(), q, out)

    def contract_nabla(self, phi: FormVector, s: FormVector) -> FormVector:
        """phi contracted with the Chern connection derivative of a section."""
        if phi.key != (Bundle.tangent(), 1):
            raise ValueError("contract_nabla expects a tangent-valued (0,1) form")
        if s.bundle.kind != "power":
            raise ValueError("second argument must be a section of a power bundle")
        self._own(phi)
        self._own(s)
        out = self.geometry.contract_nabla_nodes(self._nodes(phi), self._nodes(s), s.bundle.k, s.q)
        return self.project(s.bundle, s.q + 1, out)

    def pointwise_dot(self, phi: FormVector, psi: FormVector) -> PointField:
        """Nodal Hermitian pairing phi . conj(psi), linear in phi."""
        phi._check(psi)
        self._own(phi)
        bundle, q = phi.key
        vals = self.geometry.pair_nodes(bundle, q, self._nodes(psi), self._nodes(phi))
        return PointField(self.backend_id, vals)

    def log_det_deform(self, phi_nodes: PointField) -> PointField:
        """log det(I - phi conj(phi)) at nodes for a Beltrami node field."""
        comp = self.geometry.endo_from_beltrami(phi_nodes.values, phi_nodes.values)
        n = comp.shape[-1]
        eye = np.eye(n)
        mats = eye[None, :, :] - comp
        # spectral radius guard: the deformation must stay a complex structure
        sign, logdet = np.linalg.slogdet(mats)
        if np.any(sign.real <= 0) or np.any(np.abs(sign.imag) > 1e-9):
            raise ValueError("deformation too large: det(I - phi conj(phi)) not positive")
        return PointField(self.backend_id, logdet)

    def integrate(self, f: PointField | np.ndarray) -> complex:
        vals = f.values if isinstance(f, PointField) else np.asarray(f)
        return complex(np.sum(self.geometry.quad_weights * vals))

    def volume(self) -> float:
        return float(np.sum(self.geometry.quad_weights))

    # -- cache export --------------------------------------------------

    def cache_key(self) -> str:
        payload = json.dumps(self.geometry.describe(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def save_cache(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays: dict[str, np.ndarray] = {}
        spaces_meta = []
        for i, key in enumerate(self._keys):
            if key not in self._states:
                continue
            st = self._states[key]
            arrays[f"chol_{i}"] = st.chol
            if st.dbar is not None:
                arrays[f"dbar_{i}"] = st.dbar
            if st.evals is not None:
                arrays[f"evals_{i}"] = st.evals
                arrays[f"evecs_{i}"] = st.evecs
            spaces_meta.append({"index": i, "bundle": [key[0].kind, key[0].k], "q": key[1]})
        np.savez_compressed(directory / "operators.npz", **arrays)
        meta = {
            "cache_key": self.cache_key(),
            "geometry": self.geometry.describe(),
            "spaces": spaces_meta,
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return directory

    def load_cache(self, directory: str | Path) -> bool:
        """Restore precomputed factorizations; returns False on key mismatch."""
        directory = Path(directory)
        meta_path = directory / "meta.json"
        npz_path = directory / "operators.npz"
        if not meta_path.exists() or not npz_path.exists():
            return False
        meta = json.loads(meta_path.read_text())
        if meta.get("cache_key") != self.cache_key():
            return False
        data = np.load(npz_path)
        for entry in meta["spaces"]:
            i = entry["index"]
            kind, k = entry["bundle"]
            key = (Bundle(kind, k), entry["q"])
            if key not in self._keys:
                continue
            space = self.geometry.space_def(*key)
            st = _SpaceState(key=key, space=space, chol=data[f"chol_{i}"], dim=data[f"chol_{i}"].shape[0])
            if f"dbar_{i}" in data:
                st.dbar = data[f"dbar_{i}"]
            if f"evals_{i}" in data:
                st.evals = data[f"evals_{i}"]
                st.evecs = data[f"evecs_{i}"]
            self._states[key] = st
        return True
