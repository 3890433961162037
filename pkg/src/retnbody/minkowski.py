"""Minkowski-space primitives: metric, four-vectors, boosts, field tensors.

Conventions used across the package:
  * metric signature (+, -, -, -), eta = diag(1, -1, -1, -1)
  * four-vectors are stored by their contravariant components v^mu
  * Faraday-type tensors are stored by their covariant components F_{mu nu}
    and must be antisymmetric
  * indices are raised/lowered with eta, which is its own inverse
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ETA = np.diag([1.0, -1.0, -1.0, -1.0])

# relative asymmetry above which a matrix is rejected as a field tensor
_ANTISYM_TOL = 1e-12


def _as_four(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (4,):
        raise ValueError(f"expected 4 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("four-vector components must be finite")
    return arr


@dataclass(frozen=True)
class FourVector:
    """A contravariant four-vector with finite float64 components."""

    components: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "components", _as_four(self.components))

    def __array__(self, dtype=None):
        if dtype is None:
            return self.components
        return self.components.astype(dtype)

    def __getitem__(self, idx):
        return self.components[idx]

    @property
    def time(self) -> float:
        return float(self.components[0])

    @property
    def spatial(self) -> np.ndarray:
        return self.components[1:]


@dataclass(frozen=True)
class FaradayTensor:
    """Covariant antisymmetric rank-2 tensor F_{mu nu}.

    The constructor rejects matrices whose symmetric part exceeds a
    small multiple of the matrix scale, so downstream force contractions
    are guaranteed to produce w.u = 0 identically.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("tensor entries must be finite")
        scale = np.max(np.abs(m))
        if scale > 0.0 and np.max(np.abs(m + m.T)) > _ANTISYM_TOL * scale:
            raise ValueError("matrix is not antisymmetric")
        # store the exactly antisymmetric part so roundoff cannot accumulate
        object.__setattr__(self, "matrix", 0.5 * (m - m.T))

    def __array__(self, dtype=None):
        if dtype is None:
            return self.matrix
        return self.matrix.astype(dtype)

    @property
    def electric(self) -> np.ndarray:
        """E_k = F_{0k} in the stored covariant components."""
        return self.matrix[0, 1:]


@dataclass(frozen=True)
class Boost:
    """A pure Lorentz boost parameterized by the velocity ratio beta.

    beta is the 3-vector v/c of the boosted frame; |beta| < 1 is required.
    """

    beta: np.ndarray
    gamma: float = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.shape != (3,):
            raise ValueError(f"beta must be a 3-vector, got shape {b.shape}")
        b2 = float(b @ b)
        if b2 >= 1.0:
            raise ValueError("Superluminal beta")
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "gamma", 1.0 / np.sqrt(1.0 - b2))

    def matrix(self) -> np.ndarray:
        """The 4x4 boost matrix acting on contravariant components.

        Applied to the rest four-velocity (1, 0, 0, 0) it yields
        (gamma, gamma*beta), i.e. the four-velocity of a particle moving
        with velocity beta*c.
        """
        b = self.beta
        b2 = float(b @ b)
        g = self.gamma
        lam = np.eye(4)
        lam[0, 0] = g
        lam[0, 1:] = g * b
        lam[1:, 0] = g * b
        if b2 > 0.0:
            lam[1:, 1:] += (g - 1.0) * np.outer(b, b) / b2
        return lam

    def inverse(self) -> "Boost":
        return Boost(-self.beta)


def dot(a, b) -> float:
    """Minkowski scalar product a^mu eta_{mu nu} b^nu of two four-vectors."""
    av = _as_four(np.asarray(a))
    bv = _as_four(np.asarray(b))
    return float(av[0] * bv[0] - av[1:] @ bv[1:])


def lower(v) -> np.ndarray:
    """Lower the index: v_mu = eta_{mu nu} v^nu (flips the spatial sign)."""
    arr = np.asarray(v, dtype=np.float64).copy()
    arr[..., 1:] *= -1.0
    return arr


def raise_index(v) -> np.ndarray:
    """Raise the index; eta is its own inverse so this equals lower()."""
    return lower(v)


def boost(v, b) -> np.ndarray:
    """Boost the contravariant four-vector v.

    b may be a Boost instance or a beta 3-vector.
    """
    if not isinstance(b, Boost):
        b = Boost(b)
    return b.matrix() @ _as_four(np.asarray(v))


def contract_force(F, u) -> np.ndarray:
    """Covariant force density w_mu = F_{mu nu} u^nu.

    F holds covariant components and u contravariant ones, so the
    contraction needs no metric factor. For antisymmetric F the result
    satisfies w_mu u^mu = 0 identically.
    """
    m = np.asarray(F, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"expected a 4x4 tensor, got shape {m.shape}")
    return m @ _as_four(np.asarray(u))


def gamma_of_u(u) -> float:
    """Relativistic factor read off the time component of u = (gamma, gamma*beta)."""
    return float(np.asarray(u)[0])


def velocity_of_u(u, c: float = 1.0) -> np.ndarray:
    """Coordinate velocity dr/dt = c * u_spatial / u^0."""
    arr = _as_four(np.asarray(u))
    return c * arr[1:] / arr[0]


def four_velocity(v3, c: float = 1.0) -> np.ndarray:
    """Dimensionless four-velocity u = (gamma, gamma*v/c) from a 3-velocity."""
    v = np.asarray(v3, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"velocity must be a 3-vector, got shape {v.shape}")
    b2 = float(v @ v) / c**2
    if b2 >= 1.0:
        raise ValueError("Superluminal velocity")
    g = 1.0 / np.sqrt(1.0 - b2)
    return np.concatenate(([g], g * v / c))
