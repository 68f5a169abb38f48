"""Concrete model geometries and the backend construction entry point."""

from __future__ import annotations

from typing import Any

from ..hodge import Bundle, DenseHodgePackage, FormVector

__all__ = [
    "build_backend",
    "Bundle",
    "harmonic_beltrami_basis",
    "holomorphic_vector_fields",
]


def build_backend(config: dict[str, Any]) -> DenseHodgePackage:
    """Build the full operator package for a backend config dict.

    Config schema: {"kind": "torus" | "abelian" | "projective", ...}; the
    remaining keys are forwarded to the geometry constructor of the kind.
    """
    if not isinstance(config, dict):
        raise ValueError("backend config must be a dict")
    kind = config.get("kind")
    if kind == "torus":
        from .torus import build_torus_package

        return build_torus_package(config)
    if kind == "abelian":
        from .theta import build_abelian_package

        return build_abelian_package(config)
    if kind == "projective":
        from .projective import build_projective_package

        return build_projective_package(config)
    raise ValueError(f"unknown backend kind {kind!r}")


def harmonic_beltrami_basis(pkg: DenseHodgePackage) -> list[FormVector]:
    """Orthonormal basis of harmonic tangent-valued (0,1)-forms.

    These span the tangent space of the deformation family at the base
    point; an empty list certifies rigidity at the resolution of the
    backend's represented spaces.
    """
    return pkg.harmonic_basis(Bundle.tangent(), 1)


def holomorphic_vector_fields(pkg: DenseHodgePackage) -> list[FormVector]:
    """Orthonormal basis of the holomorphic vector fields.

    The degree-zero tangent Laplacian is dbar-star dbar, so its kernel
    is exactly the dbar-closed fields; the count is the dimension of
    the automorphism algebra seen by the backend.
    """
    return pkg.harmonic_basis(Bundle.tangent(), 0)
