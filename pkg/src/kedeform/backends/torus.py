"""Flat and metrically perturbed complex tori as spectral geometries.

The torus C^n / (Z^n + tau Z^n) is coordinatized by real coordinates
(x, y) in [0,1)^{2n} through z = x + tau y.  All form spaces use global
coordinate frames dzbar^j and d/dz_i, so the raw basis of every space is
"Fourier mode times tensor component" and the del-bar operator is exact
and mode diagonal.  The metric is

    g_{i jbar} = scale * pi * S^{-1} + epsilon * (d^2 psi / dz_i dzbar_j)

with S = Im tau and psi a real trigonometric polynomial; the default
scale 1 gives total volume (scale*pi)^n, the normalization under which a
principal polarization has k^n sections at level k.  epsilon = 0 is the
flat Kaehler-Einstein (Ricci-flat) case.

Index conventions used by every node-level routine here:

* beltrami fields phi: array (nodes, n, n), phi[x, i, j] = phi^i_{jbar};
* (0,2) components are stored on ordered pairs j < k, no 1/2! weights;
* the Kaehler form is (i/2) g_{i jbar} dz^i wedge dzbar^j, and the
  contraction of a beltrami field with a (1,1)-form H keeps that (i/2):
  (phi contract H)_{jbar lbar} = (i/2)(phi^i_{jbar} H_{i lbar} -
  phi^i_{lbar} H_{i jbar}).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any

import numpy as np

from ..hodge import Bundle, DenseHodgePackage

__all__ = [
    "TorusConfig",
    "TorusGeometry",
    "build_torus_geometry",
    "build_torus_package",
    "torus_space_keys",
]


@dataclass
class TorusConfig:
    n: int
    tau: np.ndarray
    bandwidth: int
    grid: int | None = None
    epsilon: float = 0.0
    psi_modes: dict[tuple[int, ...], complex] | None = None
    metric_scale: float = 1.0

    @classmethod
    def from_dict(cls, cfg: dict[str, Any]) -> "TorusConfig":
        n = int(cfg["n"])
        tau = np.asarray(cfg["tau"], dtype=complex)
        if tau.shape == () and n == 1:
            tau = tau.reshape(1, 1)
        psi = None
        if cfg.get("psi_modes"):
            psi = {}
            for key, val in cfg["psi_modes"].items():
                if isinstance(key, str):
                    key = tuple(int(t) for t in key.split(","))
                if isinstance(val, (list, tuple)):
                    val = complex(val[0], val[1])
                psi[tuple(key)] = complex(val)
        return cls(
            n=n,
            tau=tau,
            bandwidth=int(cfg["bandwidth"]),
            grid=int(cfg["grid"]) if cfg.get("grid") else None,
            epsilon=float(cfg.get("epsilon", 0.0)),
            psi_modes=psi,
            metric_scale=float(cfg.get("metric_scale", 1.0)),
        )


def _pairs(n: int) -> list[tuple[int, int]]:
    return [(j, k) for j in range(n) for k in range(j + 1, n)]


class TorusGeometry:
    """Spectral data shared by all torus form spaces."""

    def __init__(self, config: TorusConfig) -> None:
        n = config.n
        tau = np.asarray(config.tau, dtype=complex)
        if tau.shape != (n, n):
            raise ValueError(f"tau must be {n}x{n}")
        if np.max(np.abs(tau - tau.T)) > 1e-12:
            raise ValueError("tau must be symmetric (Siegel space)")
        S = tau.imag.copy()
        evals = np.linalg.eigvalsh(S)
        if np.min(evals) <= 0:
            raise ValueError("Im tau must be positive definite")
        self.config = config
        self.n = n
        self.tau = tau
        self.S = S
        self.N = int(config.bandwidth)
        if self.N < 1:
            raise ValueError("bandwidth must be at least 1")

        psi = config.psi_modes or {}
        psi_band = 0
        for key in psi:
            if len(key) != 2 * n:
                raise ValueError("psi mode keys must have 2n integer entries")
            psi_band = max(psi_band, max(abs(t) for t in key))
        min_grid = 4 * self.N + 2 * psi_band + 2
        self.M = int(config.grid) if config.grid else max(min_grid, 2 * (2 * self.N + 1))
        if self.M < min_grid:
            raise ValueError(f"grid {self.M} too small; need at least {min_grid} for de-aliasing")

        self.grid_shape = (self.M,) * (2 * n)
        self.nnodes = self.M ** (2 * n)
        self.backend_id = f"torus:{self._describe_hashable()}"

        # modes (p, q), |p_i|, |q_i| <= N, graded by nothing: plain lex order
        rng = range(-self.N, self.N + 1)
        self.modes = np.array(list(itertools.product(rng, repeat=2 * n)), dtype=int)
        self.nmodes = len(self.modes)
        self._mode_flat_idx = np.ravel_multi_index(
            (self.modes % self.M).T, self.grid_shape
        )

        # d/dz_i = sum_j a[i,j] d/dx_j + b[i,j] d/dy_j
        Sinv = np.linalg.inv(S)
        self._b = -0.5j * Sinv
        self._a = 0.5j * Sinv @ np.conjugate(tau)
        pq = self.modes.astype(float)
        self.zeta = 2j * np.pi * (pq[:, :n] @ self._a.T + pq[:, n:] @ self._b.T)
        self.xi = -np.conjugate(self.zeta)  # d/dzbar_i factors on modes

        # full-grid frequency factors for spectral derivatives of node data
        freqs = np.rint(np.fft.fftfreq(self.M, d=1.0 / self.M)).astype(int)
        mesh = np.meshgrid(*([freqs] * (2 * n)), indexing="ij")
        P = np.stack(mesh[:n], axis=0).astype(float)
        Q = np.stack(mesh[n:], axis=0).astype(float)
        self.zeta_grid = 2j * np.pi * (
            np.tensordot(self._a, P, axes=1) + np.tensordot(self._b, Q, axes=1)
        )
        self.xi_grid = -np.conjugate(self.zeta_grid)

        self._build_metric(psi)
        self._pair_cache: dict[tuple[Bundle, int], np.ndarray] = {}
        self._space_cache: dict[tuple[Bundle, int], TorusSpace] = {}

    # -- metric and curvature data ------------------------------------

    def _build_metric(self, psi: dict[tuple[int, ...], complex]) -> None:
        n, M = self.n, self.M
        cfg = self.config
        g0 = cfg.metric_scale * np.pi * np.linalg.inv(self.S)
        self.g0 = g0.astype(complex)

        hess = np.zeros((self.nnodes, n, n), dtype=complex)
        psi_nodes = np.zeros(self.nnodes)
        if psi and cfg.epsilon != 0.0:
            spec = np.zeros(self.grid_shape, dtype=complex)
            for key, amp in psi.items():
                kvec = np.array(key, dtype=int)
                spec[tuple(kvec % M)] += amp
                spec[tuple((-kvec) % M)] += np.conjugate(amp)
            psi_field = np.fft.ifftn(spec) * self.nnodes
            if np.max(np.abs(psi_field.imag)) > 1e-10 * max(1.0, np.max(np.abs(psi_field.real))):
                raise ValueError("psi must be a real trigonometric polynomial")
            psi_nodes = psi_field.real.reshape(-1)
            spec_grid = np.fft.fftn(psi_field)
            for i in range(n):
                for j in range(n):
                    comp = np.fft.ifftn(self.zeta_grid[i] * self.xi_grid[j] * spec_grid)
                    hess[:, i, j] = comp.reshape(-1)
        self.psi_nodes = psi_nodes

        self.g_nodes = self.g0[None, :, :] + cfg.epsilon * hess
        herm_err = np.max(np.abs(self.g_nodes - np.conjugate(np.swapaxes(self.g_nodes, 1, 2))))
        if herm_err > 1e-9:
            raise ValueError("metric is not Hermitian; check psi coefficients")
        eigs = np.linalg.eigvalsh(self.g_nodes)
        if np.min(eigs) <= 0:
            raise ValueError("perturbation destroys metric positivity")
        self.metric_min_eig = float(np.min(eigs))

        self.ginv_nodes = np.linalg.inv(self.g_nodes)
        sign, logdet = np.linalg.slogdet(self.g_nodes)
        self.detg_nodes = sign.real * np.exp(logdet.real)
        self.logdetg_nodes = logdet.real

        dens = self.detg_nodes * np.linalg.det(self.S)
        self.quad_weights = dens / self.nnodes
        self.volume = float(np.sum(self.quad_weights))

        # Ricci tensor R_{i jbar} = - d_i d_jbar log det g, spectral
        ric = np.zeros((self.nnodes, n, n), dtype=complex)
        if cfg.epsilon != 0.0 and psi:
            ld_grid = np.fft.fftn(self.logdetg_nodes.reshape(self.grid_shape).astype(complex))
            for i in range(n):
                for j in range(n):
                    comp = np.fft.ifftn(self.zeta_grid[i] * self.xi_grid[j] * ld_grid)
                    ric[:, i, j] = -comp.reshape(-1)
        self.ric_nodes = ric
        self.einstein_constant = 0.0  # flat model; Ricci-flat at epsilon = 0

    def describe(self) -> dict:
        cfg = self.config
        psi = cfg.psi_modes or {}
        return {
            "kind": "torus",
            "n": self.n,
            "tau_re": np.real(self.tau).tolist(),
            "tau_im": np.imag(self.tau).tolist(),
            "bandwidth": self.N,
            "grid": self.M,
            "epsilon": cfg.epsilon,
            "metric_scale": cfg.metric_scale,
            "psi": sorted(
                (list(k), [float(np.real(v)), float(np.imag(v))]) for k, v in psi.items()
            ),
        }

    def _describe_hashable(self) -> str:
        cfg = self.config
        bits = [
            f"n={self.n}",
            f"tau={np.round(self.tau, 12).tolist()}",
            f"N={self.N}",
            f"M={self.M}",
            f"eps={cfg.epsilon}",
            f"scale={cfg.metric_scale}",
        ]
        if cfg.psi_modes:
            bits.append(f"psi={sorted(cfg.psi_modes.items())}")
        return ";".join(bits)

    # -- grid helpers --------------------------------------------------

    def _to_grid(self, field: np.ndarray) -> np.ndarray:
        return field.reshape(self.grid_shape + field.shape[1:])

    def _to_nodes(self, grid: np.ndarray) -> np.ndarray:
        return grid.reshape((self.nnodes,) + grid.shape[2 * self.n :])

    def dz_nodes(self, field: np.ndarray, i: int) -> np.ndarray:
        """Spectral d/dz_i of a nodal field (node axis first)."""
        grid = self._to_grid(np.asarray(field, dtype=complex))
        axes = tuple(range(2 * self.n))
        spec = np.fft.fftn(grid, axes=axes)
        zg = self.zeta_grid[i].reshape(self.grid_shape + (1,) * (grid.ndim - 2 * self.n))
        return self._to_nodes(np.fft.ifftn(spec * zg, axes=axes))

    def dzbar_nodes(self, field: np.ndarray, i: int) -> np.ndarray:
        grid = self._to_grid(np.asarray(field, dtype=complex))
        axes = tuple(range(2 * self.n))
        spec = np.fft.fftn(grid, axes=axes)
        xg = self.xi_grid[i].reshape(self.grid_shape + (1,) * (grid.ndim - 2 * self.n))
        return self._to_nodes(np.fft.ifftn(spec * xg, axes=axes))

    # -- spaces --------------------------------------------------------

    def _comp_shape(self, bundle: Bundle, q: int) -> tuple[int, ...]:
        if bundle.kind == "power":
            raise ValueError("plain torus geometry has no power bundle spaces")
        npairs = len(_pairs(self.n))
        form: tuple[int, ...]
        if q == 0:
            form = ()
        elif q == 1:
            form = (self.n,)
        elif q == 2:
            form = (npairs,)
        else:
            raise ValueError("only degrees 0, 1, 2 are supported")
        if bundle.kind == "tangent":
            return (self.n,) + form
        return form

    def supported_space_keys(self) -> list[tuple[Bundle, int]]:
        keys = []
        for bundle in (Bundle.trivial(), Bundle.tangent()):
            for q in (0, 1, 2):
                shape = self._comp_shape(bundle, q)
                if int(np.prod(shape)) > 0:
                    keys.append((bundle, q))
        return keys

    def space_def(self, bundle: Bundle, q: int) -> "TorusSpace":
        key = (bundle, q)
        if key not in self._space_cache:
            shape = self._comp_shape(bundle, q)
            if int(np.prod(shape)) == 0:
                raise ValueError(f"space {key} is empty in dimension {self.n}")
            self._space_cache[key] = TorusSpace(self, bundle, q, shape)
        return self._space_cache[key]

    def dbar_target(self, bundle: Bundle, q: int) -> tuple[Bundle, int] | None:
        if q + 1 > 2 or int(np.prod(self._comp_shape(bundle, q + 1) or (0,))) == 0:
            return None
        if len(_pairs(self.n)) == 0 and q + 1 == 2:
            return None
        return (bundle, q + 1)

    def _scalar_dbar_factors(self, q: int) -> np.ndarray:
        """Per-mode component matrices of del-bar on scalar-valued forms."""
        if q == 0:
            out = self.xi[:, :, None]  # (modes, n, 1)
            return out
        if q == 1:
            pairs = _pairs(self.n)
            F = np.zeros((self.nmodes, len(pairs), self.n), dtype=complex)
            for a, (j, k) in enumerate(pairs):
                F[:, a, k] += self.xi[:, j]
                F[:, a, j] -= self.xi[:, k]
            return F
        raise ValueError("no del-bar beyond degree 2")

    def dbar_factor_blocks(self, bundle: Bundle, q: int) -> np.ndarray:
        """Per-mode del-bar blocks of shape (modes, out components, in components)."""
        target = self.dbar_target(bundle, q)
        if target is None:
            raise ValueError(f"no del-bar target for {(bundle, q)}")
        F = self._scalar_dbar_factors(q)  # (modes, fout, fin)
        if bundle.kind == "tangent":
            eye = np.eye(self.n)
            # block diagonal over the vector index
            F = np.einsum("ik,mab->miakb", eye, F).reshape(
                self.nmodes, self.n * F.shape[1], self.n * F.shape[2]
            )
        return F

    def dbar_raw_matrix(self, bundle: Bundle, q: int) -> np.ndarray:
        F = self.dbar_factor_blocks(bundle, q)
        cin = F.shape[2]
        cout = F.shape[1]
        dim_in = self.nmodes * cin
        dim_out = self.nmodes * cout
        A = np.zeros((dim_out, dim_in), dtype=complex)
        rows = (np.arange(self.nmodes)[:, None, None] * cout + np.arange(cout)[None, :, None])
        cols = (np.arange(self.nmodes)[:, None, None] * cin + np.arange(cin)[None, None, :])
        A[rows, cols] = F
        return A

    # -- pairing weights ----------------------------------------------

    def pair_weight(self, bundle: Bundle, q: int) -> np.ndarray:
        """Nodal Hermitian pairing matrix, conjugate linear in the first slot.

        Shape (nodes, C, C) over flattened components:
        pair(u, v) = sum conj(u_c) W[c, c'] v_{c'}.
        """
        key = (bundle, q)
        if key in self._pair_cache:
            return self._pair_cache[key]
        n = self.n
        if q == 0:
            form = np.ones((self.nnodes, 1, 1), dtype=complex)
        elif q == 1:
            # row = conjugated slot, column = linear slot: the inverse metric
            # enters transposed, which for a Hermitian matrix is a conjugate
            form = np.conjugate(self.ginv_nodes)
        else:
            pairs = _pairs(n)
            P1 = np.conjugate(self.ginv_nodes)
            form = np.zeros((self.nnodes, len(pairs), len(pairs)), dtype=complex)
            for a, (j, k) in enumerate(pairs):
                for b, (l, m) in enumerate(pairs):
                    form[:, a, b] = P1[:, j, l] * P1[:, k, m] - P1[:, j, m] * P1[:, k, l]
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

    # -- nonlinear node calculus --------------------------------------

    def bracket_nodes(self, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
        """Symmetric bracket of beltrami node fields, output on pairs j < k."""
        n = self.n
        pairs = _pairs(n)
        dpsi = np.stack([self.dz_nodes(psi, l) for l in range(n)], axis=1)  # (x, l, i, j)
        dphi = np.stack([self.dz_nodes(phi, l) for l in range(n)], axis=1)
        # t1[x, i, j, k] = phi^l_{jbar} d_l psi^i_{kbar}
        t1 = np.einsum("xlj,xlik->xijk", phi, dpsi)
        t2 = np.einsum("xlj,xlik->xijk", psi, dphi)
        tot = t1 + t2
        out = np.empty((self.nnodes, n, len(pairs)), dtype=complex)
        for a, (j, k) in enumerate(pairs):
            out[:, :, a] = tot[:, :, j, k] - tot[:, :, k, j]
        return out

    def vector_bracket_nodes(self, v: np.ndarray, phi: np.ndarray) -> np.ndarray:
        """Lie action of a (1,0) vector field on a tangent-valued node field.

        Works for any form degree: trailing form axes ride along untouched.
        """
        n = self.n
        dphi = np.stack([self.dz_nodes(phi, l) for l in range(n)], axis=1)
        dv = np.stack([self.dz_nodes(v, l) for l in range(n)], axis=1)  # (x, l, i)
        t1 = np.einsum("xl,xli...->xi...", v, dphi)
        t2 = np.einsum("xl...,xli->xi...", phi, dv)
        return t1 - t2

    def contract_form_nodes(self, phi: np.ndarray, H: np.ndarray | None = None) -> np.ndarray:
        """(i/2)(phi^i_{jbar} H_{i lbar} - phi^i_{lbar} H_{i jbar}) on pairs."""
        if H is None:
            H = self.g_nodes
        pairs = _pairs(self.n)
        # lowered[x, l, j] = phi^i_{jbar} H_{i lbar}
        lowered = np.einsum("xij,xil->xlj", phi, H)
        out = np.empty((self.nnodes, len(pairs)), dtype=complex)
        for a, (j, k) in enumerate(pairs):
            out[:, a] = 0.5j * (lowered[:, k, j] - lowered[:, j, k])
        return out

    def divergence_nodes(self, X: np.ndarray, q: int) -> np.ndarray:
        """(1/det g) d_i (det g X^i_{...}) on the leading vector index."""
        weighted = X * self.detg_nodes.reshape((self.nnodes,) + (1,) * (X.ndim - 1))
        out = None
        for i in range(self.n):
            term = self.dz_nodes(weighted[:, i, ...], i)
            out = term if out is None else out + term
        return out / self.detg_nodes.reshape((self.nnodes,) + (1,) * (out.ndim - 1))

    def endo_from_beltrami(self, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
        """(phi psi-bar)^i_j = phi^i_{lbar} conj(psi^l_{jbar}) at nodes."""
        return np.einsum("xil,xlj->xij", phi, np.conjugate(psi))

    def gradient_holo_nodes(self, f: np.ndarray) -> np.ndarray:
        """(1,0)-part of the metric gradient of a scalar field."""
        # grad^i = [inverse metric with upper indices][i, j] dzbar_j f,
        # the matrix being conj(inv(G)) in this index layout
        n = self.n
        df = np.stack([self.dzbar_nodes(f, j) for j in range(n)], axis=1)  # (x, j)
        return np.einsum("xij,xj->xi", np.conjugate(self.ginv_nodes), df)


class TorusSpace:
    """One torus form space: raw basis = Fourier modes times components."""

    def __init__(self, geom: TorusGeometry, bundle: Bundle, q: int, comp_shape: tuple[int, ...]) -> None:
        self.geom = geom
        self.bundle = bundle
        self.q = q
        self.comp_shape = comp_shape
        self.ncomp = int(np.prod(comp_shape)) if comp_shape else 1
        self.raw_dim = geom.nmodes * self.ncomp

    def synth(self, raw: np.ndarray) -> np.ndarray:
        """Node values (nodes, *comp_shape) from raw coefficients."""
        geom = self.geom
        raw = np.asarray(raw, dtype=complex).reshape(geom.nmodes, self.ncomp)
        spec = np.zeros((self.ncomp,) + geom.grid_shape, dtype=complex)
        flat = spec.reshape(self.ncomp, geom.nnodes)
        flat[:, geom._mode_flat_idx] = raw.T
        axes = tuple(range(1, 1 + 2 * geom.n))
        field = np.fft.ifftn(spec, axes=axes) * geom.nnodes
        out = np.moveaxis(field.reshape(self.ncomp, geom.nnodes), 0, 1)
        return out.reshape((geom.nnodes,) + self.comp_shape)

    def project_quad(self, nodes: np.ndarray) -> np.ndarray:
        """Raw-basis quadrature pairings <e_mu, F> of a nodal field."""
        geom = self.geom
        F = np.asarray(nodes, dtype=complex).reshape(geom.nnodes, self.ncomp)
        W = geom.pair_weight(self.bundle, self.q)
        weighted = np.einsum("xcd,xd,x->cx", W, F, geom.quad_weights)
        spec = np.fft.fftn(
            weighted.reshape((self.ncomp,) + geom.grid_shape),
            axes=tuple(range(1, 1 + 2 * geom.n)),
        )
        picked = spec.reshape(self.ncomp, geom.nnodes)[:, geom._mode_flat_idx]
        return picked.T.reshape(self.raw_dim)

    def gram(self) -> np.ndarray:
        """Quadrature Gram of the raw basis, assembled from FFTs of weights."""
        geom = self.geom
        W = geom.pair_weight(self.bundle, self.q)  # (nodes, C, C)
        wq = W * geom.quad_weights[:, None, None]
        spec = np.fft.fftn(
            np.moveaxis(wq, 0, 2).reshape(self.ncomp, self.ncomp, *geom.grid_shape),
            axes=tuple(range(2, 2 + 2 * geom.n)),
        ).reshape(self.ncomp, self.ncomp, geom.nnodes)
        diff = geom.modes[:, None, :] - geom.modes[None, :, :]
        didx = np.ravel_multi_index((diff % geom.M).reshape(-1, 2 * geom.n).T, geom.grid_shape)
        blocks = spec[:, :, didx].reshape(self.ncomp, self.ncomp, geom.nmodes, geom.nmodes)
        gram = np.transpose(blocks, (2, 0, 3, 1)).reshape(self.raw_dim, self.raw_dim)
        return np.ascontiguousarray(gram)


def torus_space_keys(n: int) -> list[tuple[Bundle, int]]:
    keys = [(Bundle.trivial(), 0), (Bundle.trivial(), 1), (Bundle.tangent(), 0), (Bundle.tangent(), 1)]
    if n >= 2:
        keys.append((Bundle.trivial(), 2))
        keys.append((Bundle.tangent(), 2))
    return keys


def build_torus_geometry(config: dict[str, Any] | TorusConfig) -> TorusGeometry:
    if isinstance(config, TorusConfig):
        return TorusGeometry(config)
    return TorusGeometry(TorusConfig.from_dict(config))


def build_torus_package(config: dict[str, Any] | TorusConfig) -> DenseHodgePackage:
    geom = build_torus_geometry(config)
    return DenseHodgePackage(geom, torus_space_keys(geom.n))
