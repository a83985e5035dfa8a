"""Empirical PCA subspace over latent target vectors.

Fit uses the population (1/N) covariance; the rank-k reconstruction error on
the fit set then equals 1 - retained-variance ratio exactly, which the tests
and acceptance suite rely on. Bases are immutable after fit and can be
persisted bit-exactly to a small versioned binary file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, check_matrix, check_vector, sym_eig


class DegenerateFitError(ValueError):
    """Sample set has (numerically) zero variance along a required direction."""


_DEGENERATE_REL_TOL = 1e-12


@dataclass(frozen=True)
class PcaBasis:
    """Mean, orthonormal component matrix, and full eigenvalue spectrum."""

    mean: np.ndarray          # (d,)
    components: np.ndarray    # (d, k), orthonormal columns
    eigenvalues: np.ndarray   # (d,), descending
    k: int
    d: int
    total_variance: float = field(default=0.0)

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "components", np.asarray(self.components, dtype=np.float64))
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=np.float64))
        if self.mean.shape != (self.d,):
            raise DimensionError(f"mean must have shape ({self.d},)")
        if self.components.shape != (self.d, self.k):
            raise DimensionError(f"components must have shape ({self.d}, {self.k})")
        if self.eigenvalues.shape != (self.d,):
            raise DimensionError(f"eigenvalues must have shape ({self.d},)")
        if self.k > self.d or self.k < 1:
            raise ValueError(f"k must be in [1, d], got k={self.k}, d={self.d}")
        if np.any(self.eigenvalues < -1e-10):
            raise ValueError("eigenvalues must be non-negative (within tolerance)")
        gram = self.components.T @ self.components
        if np.max(np.abs(gram - np.eye(self.k))) > 1e-8:
            raise ValueError("component columns are not orthonormal")
        self.mean.setflags(write=False)
        self.components.setflags(write=False)
        self.eigenvalues.setflags(write=False)

    def truncated(self, k: int) -> "PcaBasis":
        """Basis keeping only the top-k components (k <= self.k)."""
        if not 1 <= k <= self.k:
            raise ValueError(f"k must be in [1, {self.k}], got {k}")
        return PcaBasis(
            mean=self.mean,
            components=self.components[:, :k],
            eigenvalues=self.eigenvalues,
            k=k,
            d=self.d,
            total_variance=self.total_variance,
        )


def _stack_samples(samples) -> np.ndarray:
    if len(samples) == 0:
        raise ValueError("sample list is empty")
    rows = [check_vector(s, f"samples[{i}]") for i, s in enumerate(samples)]
    d = rows[0].shape[0]
    for i, r in enumerate(rows):
        if r.shape[0] != d:
            raise DimensionError(f"samples[{i}] has dimension {r.shape[0]}, expected {d}")
    return np.stack(rows)


def _fit_full(samples):
    x = _stack_samples(samples)
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = (xc.T @ xc) / n
    lam, vecs = sym_eig(cov)
    lam = np.maximum(lam, 0.0)
    total = float(lam.sum())
    if total <= 0.0:
        raise DegenerateFitError("all samples identical: zero total variance")
    return mu, lam, vecs, total


def fit(samples, variance_target: float) -> PcaBasis:
    """Fit a basis retaining the smallest k reaching `variance_target`.

    k is the smallest integer with sum(lambda[:k]) / sum(lambda) >=
    variance_target. Directions with numerically zero variance never enter
    the component matrix; if they would be needed to reach the target, the
    fit fails instead of producing an ill-conditioned basis.
    """
    if not 0.0 < variance_target <= 1.0:
        raise ValueError(f"variance_target must be in (0, 1], got {variance_target}")
    mu, lam, vecs, total = _fit_full(samples)
    d = mu.shape[0]
    cum = np.cumsum(lam) / total
    k = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    k = min(k, d)
    usable = int(np.sum(lam >= _DEGENERATE_REL_TOL * total))
    if k > usable:
        raise DegenerateFitError(
            f"variance target {variance_target} needs {k} components but only "
            f"{usable} non-degenerate directions exist"
        )
    return PcaBasis(
        mean=mu,
        components=vecs[:, :k],
        eigenvalues=lam,
        k=k,
        d=d,
        total_variance=total,
    )


def fit_components(samples, k: int) -> PcaBasis:
    """Fit a basis with an explicitly chosen component count."""
    mu, lam, vecs, total = _fit_full(samples)
    d = mu.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    return PcaBasis(
        mean=mu,
        components=vecs[:, :k],
        eigenvalues=lam,
        k=k,
        d=d,
        total_variance=total,
    )


def project(basis: PcaBasis, v) -> np.ndarray:
    """Coefficients of v in the basis: P_k^T (v - mean)."""
    vv = check_vector(v, "v")
    if vv.shape[0] != basis.d:
        raise DimensionError(f"v has dimension {vv.shape[0]}, basis expects {basis.d}")
    return basis.components.T @ (vv - basis.mean)


def reconstruct(basis: PcaBasis, c) -> np.ndarray:
    """Affine reconstruction from coefficients: P_k c + mean."""
    cc = check_vector(c, "c")
    if cc.shape[0] != basis.k:
        raise DimensionError(f"c has dimension {cc.shape[0]}, basis expects {basis.k}")
    return basis.components @ cc + basis.mean


def rel_mse(basis: PcaBasis, samples) -> float:
    """Relative reconstruction error: mean squared residual over mean squared
    centered norm. On the fit set this equals 1 - retained-variance ratio."""
    x = _stack_samples(samples)
    if x.shape[1] != basis.d:
        raise DimensionError(f"samples have dimension {x.shape[1]}, basis expects {basis.d}")
    xc = x - basis.mean
    recon_c = (xc @ basis.components) @ basis.components.T
    num = float(np.mean(np.sum((xc - recon_c) ** 2, axis=1)))
    den = float(np.mean(np.sum(xc ** 2, axis=1)))
    if den <= 0.0:
        raise DegenerateFitError("zero centered energy in sample set")
    return num / den


def rel_mse_spectral(basis: PcaBasis, k: int | None = None) -> float:
    """Eigenvalue form of the relative reconstruction error: 1 - sum(top k) / sum(all)."""
    kk = basis.k if k is None else k
    lam = basis.eigenvalues
    return 1.0 - float(lam[:kk].sum()) / float(lam.sum())


# -- persistence ------------------------------------------------------------

_MAGIC = b"PCAB"
_VERSION = 1


def save_basis(basis: PcaBasis, path) -> None:
    """Write the basis as little-endian doubles: mean, eigenvalues, components
    (column-major), behind a {magic, version, d, k} header."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, basis.d, basis.k))
        f.write(struct.pack("<d", basis.total_variance))
        f.write(basis.mean.astype("<f8").tobytes())
        f.write(basis.eigenvalues.astype("<f8").tobytes())
        f.write(np.asfortranarray(basis.components).astype("<f8").tobytes(order="F"))


def load_basis(path) -> PcaBasis:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a basis file (bad magic {magic!r})")
        version, d, k = struct.unpack("<III", f.read(12))
        if version != _VERSION:
            raise ValueError(f"unsupported basis format version {version}")
        (total,) = struct.unpack("<d", f.read(8))
        mean = np.frombuffer(f.read(8 * d), dtype="<f8").copy()
        lam = np.frombuffer(f.read(8 * d), dtype="<f8").copy()
        comp = np.frombuffer(f.read(8 * d * k), dtype="<f8").reshape((d, k), order="F").copy()
    return PcaBasis(mean=mean, components=comp, eigenvalues=lam, k=k, d=d, total_variance=total)


def fit_report(basis: PcaBasis, samples, variance_target: float) -> dict:
    """JSON-ready summary emitted by the pca-fit command."""
    return {
        "d": basis.d,
        "k": basis.k,
        "variance_target": variance_target,
        "relmse": rel_mse(basis, samples),
    }


def save_samples(samples: np.ndarray, path) -> None:
    """Raw sample matrix file consumed by pca-fit: {magic, version, n, d} + doubles."""
    x = check_matrix(samples, "samples")
    with open(path, "wb") as f:
        f.write(b"VSMP")
        f.write(struct.pack("<III", 1, x.shape[0], x.shape[1]))
        f.write(x.astype("<f8").tobytes())


def load_samples(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != b"VSMP":
            raise ValueError("not a sample file")
        version, n, d = struct.unpack("<III", f.read(12))
        if version != 1:
            raise ValueError(f"unsupported sample file version {version}")
        return np.frombuffer(f.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
