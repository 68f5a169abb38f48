"""Spectral toolkit for deformation families of compact Kaehler model geometries.

Subpackages and modules:

* ``series``       arithmetic of truncated power series in deformation
                   parameters and their conjugates
* ``hodge``        finite dimensional Dolbeault complexes with metric,
                   Green operator, and pointwise nonlinear evaluation
* ``backends``     concrete geometries: flat/perturbed tori, polarized
                   abelian families with theta sections, projective spaces
* ``kuranishi``    order by order solution of the deformation equation,
                   gauge diagnostics, Ricci potential, symmetry pairings
* ``direct_image`` section extension across the family, L2 metrics on
                   spaces of holomorphic sections, curvature, Bergman data
* ``ke_expand``    second order expansion of fiberwise volume data and
                   normalization vector fields
* ``energy``       harmonic map energy on torus domains, variation
                   formulas, plurisubharmonicity checks
* ``cli``          batch experiment driver with deterministic outputs
"""

from .series import BiSeries, MultiIndex

__all__ = ["BiSeries", "MultiIndex"]

__version__ = "0.1.0"
