"""Deterministic numerical kernels shared by the rest of the package.

Everything here runs in double precision. The eigensolver is a plain cyclic
Jacobi sweep: at desk scale (d <= 256) it is fast enough and keeps results
reproducible across platforms without depending on LAPACK dispatch.
"""

from __future__ import annotations

import math

import numpy as np


class DimensionError(ValueError):
    """Shapes of two operands do not line up."""


class ConvergenceError(RuntimeError):
    """Iterative routine exceeded its sweep cap."""


def check_vector(x, name: str = "x") -> np.ndarray:
    """Validate and return a 1-D double array with finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise DimensionError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_matrix(a, name: str = "a") -> np.ndarray:
    """Validate and return a 2-D double array with finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


class Rng:
    """Seeded random stream; identical seed gives an identical stream."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def gaussian(self, shape, scale: float = 1.0) -> np.ndarray:
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def shuffle(self, seq: list) -> None:
        self._gen.shuffle(seq)

    def spawn(self, salt: int) -> "Rng":
        """Derive an independent stream, e.g. one per example."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + salt) % (1 << 63))


def gaussian_vec(rng: Rng, d: int, scale: float) -> np.ndarray:
    """Draw a vector of i.i.d. zero-mean normals with standard deviation `scale`."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return rng.gaussian(d, scale)


def rmsnorm(x, gain, eps: float = 0.0) -> np.ndarray:
    """Root-mean-square normalization with a learned gain.

    output_i = gain_i * x_i / sqrt(mean_j(x_j^2) + eps)
    """
    xv = check_vector(x, "x")
    gv = check_vector(gain, "gain")
    if xv.shape != gv.shape:
        raise DimensionError(f"x and gain dimensions differ: {xv.shape[0]} vs {gv.shape[0]}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    ms = float(np.mean(xv * xv))
    denom = math.sqrt(ms + eps)
    if denom == 0.0:
        # zero vector with eps=0: numerator is zero as well
        return np.zeros_like(xv)
    return gv * (xv / denom)


def log_l2(x) -> float:
    """Natural log of the L2 norm; rejects the zero vector."""
    xv = check_vector(x, "x")
    n = float(np.linalg.norm(xv))
    if n <= 0.0:
        raise ValueError("log_l2 undefined for the zero vector")
    return math.log(n)


_JACOBI_SWEEP_CAP = 100
_JACOBI_TOL = 1e-12


def sym_eig(s, symmetry_tol: float = 1e-10):
    """Full eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvector matrix with orthonormal
    columns). Ties in the descending sort are broken by original index order.
    """
    a = check_matrix(s, "S").copy()
    d = a.shape[0]
    if a.shape[1] != d:
        raise DimensionError(f"S must be square, got {a.shape}")
    if np.max(np.abs(a - a.T)) > symmetry_tol:
        raise ValueError("S is not symmetric within tolerance")
    a = 0.5 * (a + a.T)
    v = np.eye(d)
    scale = max(1.0, float(np.max(np.abs(a))))
    for _ in range(_JACOBI_SWEEP_CAP):
        off = math.sqrt(float(np.sum(np.tril(a, -1) ** 2)))
        if off <= _JACOBI_TOL * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= _JACOBI_TOL * scale * 1e-4:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                rot = np.eye(2)
                rot[0, 0] = c
                rot[0, 1] = sn
                rot[1, 0] = -sn
                rot[1, 1] = c
                rows = a[[p, q], :]
                a[[p, q], :] = rot.T @ rows
                cols = a[:, [p, q]]
                a[:, [p, q]] = cols @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
    else:
        raise ConvergenceError(f"Jacobi did not converge within {_JACOBI_SWEEP_CAP} sweeps")
    lam = np.diag(a).copy()
    # stable sort keeps original index order on ties
    order = np.argsort(-lam, kind="stable")
    return lam[order], v[:, order]
