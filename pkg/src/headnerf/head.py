"""Synthetic blendshape head: a linear identity/expression vertex model.

Vertices are ``base + identity_basis . beta + expression_basis . psi``. The
neutral (canonical) expression is the zero vector, so the per-vertex
displacement towards it is ``-expression_basis . psi`` regardless of beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor, parameter

# half-extents of the head ellipsoid (x: width, y: height, z: depth), metres
HEAD_SCALE = np.array([0.40, 0.50, 0.45])


def icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere after ``level`` midpoint subdivisions; 10 * 4**level + 2 vertices."""
    p = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
        (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
        (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


@dataclass
class HeadModel:
    base_vertices: np.ndarray      # (Nv, 3)
    identity_basis: np.ndarray     # (Nv, 3, Di)
    expression_basis: np.ndarray   # (Nv, 3, De)
    semantic_labels: np.ndarray    # (Nv,) ints in [0, S)
    num_semantic: int
    latent_codes: Tensor           # (Nv, Dz), trainable

    def __post_init__(self):
        # C-contiguous float64 so results never depend on how the arrays were produced
        self.base_vertices = np.ascontiguousarray(self.base_vertices, dtype=float)
        self.identity_basis = np.ascontiguousarray(self.identity_basis, dtype=float)
        self.expression_basis = np.ascontiguousarray(self.expression_basis, dtype=float)
        self.semantic_labels = np.ascontiguousarray(self.semantic_labels, dtype=np.int64)
        nv = self.base_vertices.shape[0]
        if nv < 4 or self.base_vertices.shape != (nv, 3):
            raise ContractError("head needs at least 4 vertices of shape (Nv, 3)")
        if self.identity_basis.shape[:2] != (nv, 3) or self.expression_basis.shape[:2] != (nv, 3):
            raise ContractError("basis arrays must be (Nv, 3, D)")
        for arr in (self.base_vertices, self.identity_basis, self.expression_basis):
            if not np.all(np.isfinite(arr)):
                raise ContractError("head arrays must be finite")
        if self.semantic_labels.shape != (nv,):
            raise ContractError("one semantic label per vertex required")
        if len(np.unique(self.semantic_labels)) < 2:
            raise ContractError("semantic labels must cover at least 2 classes")
        if self.latent_codes.shape[0] != nv:
            raise ContractError("one latent code per vertex required")

    @property
    def num_vertices(self) -> int:
        return self.base_vertices.shape[0]

    @property
    def identity_dim(self) -> int:
        return self.identity_basis.shape[2]

    @property
    def expression_dim(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def latent_dim(self) -> int:
        return self.latent_codes.shape[1]

    def _check(self, beta, psi) -> tuple[np.ndarray, np.ndarray]:
        beta = np.asarray(beta, dtype=float)
        psi = np.asarray(psi, dtype=float)
        if beta.shape != (self.identity_dim,):
            raise ContractError(f"beta must have length {self.identity_dim}, got shape {beta.shape}")
        if psi.shape != (self.expression_dim,):
            raise ContractError(f"psi must have length {self.expression_dim}, got shape {psi.shape}")
        return beta, psi

    def vertices(self, beta, psi) -> np.ndarray:
        beta, psi = self._check(beta, psi)
        return self.base_vertices + self.identity_basis @ beta + self.expression_basis @ psi

    def canonical_vertices(self, beta) -> np.ndarray:
        return self.vertices(beta, np.zeros(self.expression_dim))

    def displacement(self, beta, psi) -> np.ndarray:
        """Per-vertex offset from the posed mesh back to the neutral mesh."""
        return self.canonical_vertices(beta) - self.vertices(beta, psi)

    def semantic_one_hot(self) -> np.ndarray:
        labels = self.semantic_labels
        if labels.min() < 0 or labels.max() >= self.num_semantic:
            raise ContractError(f"semantic labels must lie in [0, {self.num_semantic})")
        out = np.zeros((self.num_vertices, self.num_semantic))
        out[np.arange(self.num_vertices), labels] = 1.0
        return out

    def to_dict(self) -> dict:
        return {
            "base_vertices": self.base_vertices.tolist(),
            "identity_basis": self.identity_basis.tolist(),
            "expression_basis": self.expression_basis.tolist(),
            "semantic_labels": self.semantic_labels.tolist(),
            "num_semantic": self.num_semantic,
            "latent_codes": self.latent_codes.data.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> HeadModel:
        return cls(
            base_vertices=np.array(d["base_vertices"], dtype=float),
            identity_basis=np.array(d["identity_basis"], dtype=float),
            expression_basis=np.array(d["expression_basis"], dtype=float),
            semantic_labels=np.array(d["semantic_labels"], dtype=np.int64),
            num_semantic=int(d["num_semantic"]),
            latent_codes=parameter(np.array(d["latent_codes"], dtype=float), name="latent_codes"),
        )


def _gaussian_bumps(verts: np.ndarray, centers: np.ndarray, directions: np.ndarray,
                    amplitude: float, width: float) -> np.ndarray:
    d2 = ((verts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)       # (Nv, D)
    falloff = amplitude * np.exp(-d2 / (2.0 * width**2))
    return falloff[:, None, :] * directions.T[None, :, :]                # (Nv, 3, D)


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic_head(
    seed: int,
    level: int = 3,
    identity_dim: int = 4,
    expression_dim: int = 8,
    num_semantic: int = 6,
    latent_dim: int = 8,
    expression_amplitude: float = 0.12,
    expression_width: float = 0.2,
    identity_amplitude: float = 0.03,
) -> HeadModel:
    """Deterministic blendshape head on a scaled icosphere.

    Expression columns are Gaussian bumps around vertices on the front
    (camera-facing, +z) half, each pushing along its own random direction.
    Semantic classes are equal azimuth sectors around the vertical axis.
    """
    if min(level + 1, identity_dim, expression_dim, num_semantic, latent_dim) <= 0:
        raise ContractError("head dimensions must be positive")
    rng = np.random.default_rng(seed)
    unit, _ = icosphere(level)
    base = unit * HEAD_SCALE
    nv = base.shape[0]

    id_centers = base[rng.choice(nv, identity_dim, replace=False)]
    identity = _gaussian_bumps(base, id_centers, _unit_vectors(rng, identity_dim),
                               identity_amplitude, 0.35)

    front = np.flatnonzero(unit[:, 2] > 0.2)
    if front.size < expression_dim:
        raise ContractError("not enough front-facing vertices for the expression basis")
    while True:
        centers = base[rng.choice(front, expression_dim, replace=False)]
        expression = _gaussian_bumps(base, centers, _unit_vectors(rng, expression_dim),
                                     expression_amplitude, expression_width)
        if np.linalg.matrix_rank(expression.reshape(-1, expression_dim)) == expression_dim:
            break

    azimuth = np.arctan2(unit[:, 0], unit[:, 2])
    labels = np.floor((azimuth + np.pi) / (2 * np.pi) * num_semantic).astype(np.int64)
    labels = np.clip(labels, 0, num_semantic - 1)
    if len(np.unique(labels)) != num_semantic:
        raise ContractError(f"some semantic class is empty at level {level}")

    codes = rng.normal(0.0, 0.01, size=(nv, latent_dim))
    return HeadModel(base, identity, expression, labels, num_semantic,
                     parameter(codes, name="latent_codes"))
