"""Edge geometry, radial features and E(n) transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS_NORM = 1e-10


@dataclass
class EdgeGeometry:
    vec: Tensor  # [E, n], x_dst - x_src
    dist: Tensor  # [E]
    unit: Tensor  # [E, n]


def smoothed_norm(t: Tensor, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    """sqrt(|t|^2 + eps^2) along ``axis``; never exactly zero."""
    return T.sqrt(T.reduce_sum(T.square(t), axis) + eps * eps)


def compute_edge_geometry(x: Tensor, src: np.ndarray, dst: np.ndarray) -> EdgeGeometry:
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    if np.any(src == dst):
        raise ValueError("self-edges are not allowed in the edge list")
    vec = T.take_rows(x, dst) - T.take_rows(x, src)
    dist = smoothed_norm(vec, axis=1)
    unit = vec / T.reshape(dist, (-1, 1))
    return EdgeGeometry(vec, dist, unit)


def rbf_centers(n_basis: int, d_max: float) -> tuple[np.ndarray, float]:
    if n_basis < 2 or d_max <= 0:
        raise ValueError("need n_basis >= 2 and d_max > 0")
    mu = np.linspace(0.0, d_max, n_basis)
    return mu, mu[1] - mu[0]


def rbf_expand(dist: Tensor, n_basis: int = 50, d_max: float = 5.0) -> Tensor:
    """Gaussian radial basis, centers evenly on [0, d_max], width = spacing."""
    mu, sigma = rbf_centers(n_basis, d_max)
    diff = T.reshape(dist, (-1, 1)) - mu
    return T.exp(T.square(diff) * (-0.5 / sigma**2))


def cutoff_weight(dist: Tensor, d0: float) -> Tensor:
    """0.5 (cos(pi d / d0) + 1) inside d0, 0 beyond; C1 at d0."""
    if d0 <= 0:
        raise ValueError("cutoff distance must be positive")
    inside = Tensor((dist.data <= d0).astype(np.float64))
    return (T.cos(dist * (np.pi / d0)) + 1.0) * 0.5 * inside


# --- E(n) transforms ---------------------------------------------------------


@dataclass
class EnTransform:
    rotation: np.ndarray  # [n, n] orthogonal
    translation: np.ndarray  # [n]
    permutation: np.ndarray  # new node i is old node permutation[i]

    @property
    def n(self) -> int:
        return self.rotation.shape[0]

    def compose(self, first: "EnTransform") -> "EnTransform":
        """The transform equal to applying ``first`` and then ``self``."""
        return EnTransform(
            rotation=first.rotation @ self.rotation,
            translation=first.translation @ self.rotation + self.translation,
            permutation=first.permutation[self.permutation],
        )


def random_orthogonal(n: int, rng: np.random.Generator, reflect: bool | None = None) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    if reflect is None:
        reflect = bool(rng.random() < 0.5)
    if reflect:
        q[0, :] = -q[0, :]
    return q


def random_en_transform(n: int, seed, num_nodes: int = 1, reflect: bool | None = None) -> EnTransform:
    if n < 1:
        raise ValueError("dimension must be >= 1")
    rng = np.random.default_rng(seed)
    rot = random_orthogonal(n, rng, reflect)
    return EnTransform(rot, rng.standard_normal(n), rng.permutation(num_nodes))


def identity_transform(n: int, num_nodes: int) -> EnTransform:
    return EnTransform(np.eye(n), np.zeros(n), np.arange(num_nodes))


def apply_transform(t: EnTransform, x, v=None):
    """x' = P(xR + t), v' = P(vR); velocities never translate."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    xp = (x @ t.rotation + t.translation)[t.permutation]
    if v is None:
        return xp, None
    v = np.asarray(v.data if isinstance(v, Tensor) else v)
    return xp, (v @ t.rotation)[t.permutation]


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - x[None, :, :]
    return np.sqrt((d * d).sum(-1))
