"""Sparse voxel volume carrying per-vertex motion features.

Vertices deposit feature vectors into the voxel containing them (averaged when
several share a voxel), a two-layer submanifold 3x3x3 convolution spreads the
features to neighbouring occupied voxels, and arbitrary points read the result
back by trilinear interpolation between voxel centres.

All three stages are expressed as constant sparse operators applied to dense
feature tensors, so gradients reach both the convolution weights and any
trainable per-vertex input (the latent codes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import itertools

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .head import HeadModel
from .tensor import ContractError, Tensor

PADDING_VOXELS = 2
HIDDEN_CHANNELS = 32
OUT_CHANNELS = 16

# tap order: offsets along voxel axes (0, 1, 2), lexicographic in -1..1
TAP_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


@dataclass
class VoxelLayout:
    """Occupancy pattern of a grid, independent of the feature values."""

    origin: np.ndarray
    voxel_size: float
    extents: tuple[int, int, int]
    coords: np.ndarray                     # (n, 3) occupied voxel indices, sorted
    _lookup: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.extents = tuple(int(e) for e in self.extents)
        if self.voxel_size <= 0:
            raise ContractError("voxel_size must be positive")
        c = self.coords
        if c.size and (c.min() < 0 or np.any(c >= np.array(self.extents))):
            raise ContractError("occupied voxel outside grid extents")
        if len(np.unique(self._linear(c))) != len(c):
            raise ContractError("occupied voxel coordinates must be unique")

    def _linear(self, coords: np.ndarray) -> np.ndarray:
        ex = self.extents
        return (coords[..., 0] * ex[1] + coords[..., 1]) * ex[2] + coords[..., 2]

    @property
    def num_occupied(self) -> int:
        return len(self.coords)

    @property
    def lookup(self) -> np.ndarray:
        """Dense (X, Y, Z) array of occupied row indices, -1 where empty."""
        if self._lookup is None:
            table = np.full(self.extents, -1, dtype=np.int64)
            if self.num_occupied:
                table[tuple(self.coords.T)] = np.arange(self.num_occupied)
            self._lookup = table
        return self._lookup

    def index_of(self, coords: np.ndarray) -> np.ndarray:
        """Row index for each voxel coordinate, -1 when empty or out of range."""
        coords = np.asarray(coords, dtype=np.int64)
        inside = np.all((coords >= 0) & (coords < np.array(self.extents)), axis=-1)
        out = np.full(coords.shape[:-1], -1, dtype=np.int64)
        c = coords[inside]
        out[inside] = self.lookup[c[:, 0], c[:, 1], c[:, 2]]
        return out

    def centers(self) -> np.ndarray:
        return self.origin + (self.coords + 0.5) * self.voxel_size

    @cached_property
    def neighbor_operator(self) -> sp.csr_matrix:
        """(n*27, n) selector: row p*27+k picks the k-th neighbour of voxel p."""
        n = self.num_occupied
        nbr = self.index_of(self.coords[:, None, :] + TAP_OFFSETS[None, :, :])   # (n, 27)
        rows = np.arange(n * 27).reshape(n, 27)
        ok = nbr >= 0
        return sp.csr_matrix((np.ones(ok.sum()), (rows[ok], nbr[ok])), shape=(n * 27, n))


@dataclass
class VoxelGrid:
    layout: VoxelLayout
    features: Tensor                       # (n, F)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.layout.num_occupied:
            raise ContractError("need one feature row per occupied voxel")

    @property
    def origin(self) -> np.ndarray:
        return self.layout.origin

    @property
    def voxel_size(self) -> float:
        return self.layout.voxel_size

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.layout.extents

    @property
    def occupied(self) -> np.ndarray:
        return self.layout.coords

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]


@dataclass
class Anchoring:
    """Layout plus the (occupied x points) averaging operator for a fixed point set."""

    layout: VoxelLayout
    average: sp.csr_matrix

    @classmethod
    def from_points(cls, points: np.ndarray, voxel_size: float,
                    origin: np.ndarray | None = None,
                    extents: tuple[int, int, int] | None = None) -> Anchoring:
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3 or not len(points):
            raise ContractError("points must be a non-empty (N, 3) array")
        if voxel_size <= 0:
            raise ContractError("voxel_size must be positive")
        if origin is None:
            lo, hi = points.min(axis=0), points.max(axis=0)
            if np.any(hi - lo <= 0):
                raise ContractError("degenerate point set: zero-size bounding box")
            origin = lo - PADDING_VOXELS * voxel_size
            extents = tuple(int(e) for e in np.floor((hi - lo) / voxel_size) + 1 + 2 * PADDING_VOXELS)
            # binning relative to the bbox corner keeps the padding exact under rounding
            vox = np.floor((points - lo) / voxel_size).astype(np.int64) + PADDING_VOXELS
        elif extents is None:
            raise ContractError("extents are required when origin is given")
        else:
            vox = np.floor((points - np.asarray(origin, dtype=float)) / voxel_size).astype(np.int64)
        origin = np.asarray(origin, dtype=float)
        if np.any(vox < 0) or np.any(vox >= np.array(extents)):
            raise ContractError("grid bounds do not enclose every point")
        ex = extents
        lin = (vox[:, 0] * ex[1] + vox[:, 1]) * ex[2] + vox[:, 2]
        uniq, inverse, counts = np.unique(lin, return_inverse=True, return_counts=True)
        coords = np.stack(np.unravel_index(uniq, ex), axis=1).astype(np.int64)
        weights = 1.0 / counts[inverse]
        avg = sp.csr_matrix((weights, (inverse, np.arange(len(points)))),
                            shape=(len(uniq), len(points)))
        return cls(VoxelLayout(origin, voxel_size, ex, coords), avg)

    def __call__(self, point_features) -> VoxelGrid:
        return VoxelGrid(self.layout, T.sparse_matmul(self.average, point_features))


def anchor_points(points, point_features, voxel_size: float,
                  origin=None, extents=None) -> VoxelGrid:
    return Anchoring.from_points(points, voxel_size, origin, extents)(point_features)


@dataclass(frozen=True)
class ChannelMask:
    """Which feature groups reach the volume (the rest are zeroed, width unchanged)."""

    displacement: bool = True
    expression: bool = True
    semantic: bool = True
    latent: bool = True


def vertex_features(head: HeadModel, beta, psi, mask: ChannelMask = ChannelMask()) -> Tensor:
    """Per-vertex ``[displacement(3), psi(De), one_hot(S), latent(Dz)]``."""
    nv = head.num_vertices
    psi = np.asarray(psi, dtype=float)
    disp = head.displacement(beta, psi) if mask.displacement else np.zeros((nv, 3))
    expr = np.broadcast_to(psi, (nv, psi.size)) if mask.expression else np.zeros((nv, psi.size))
    sem = head.semantic_one_hot() if mask.semantic else np.zeros((nv, head.num_semantic))
    const = T.Tensor(np.concatenate([disp, expr, sem], axis=1))
    codes = head.latent_codes if mask.latent else T.Tensor(np.zeros(head.latent_codes.shape))
    return T.concat([const, codes], axis=1)


def feature_width(head: HeadModel) -> int:
    return 3 + head.expression_dim + head.num_semantic + head.latent_dim


def anchor(head: HeadModel, psi, beta, voxel_size: float = 0.05,
           mask: ChannelMask = ChannelMask(), anchoring: Anchoring | None = None) -> VoxelGrid:
    """Deposit vertex features at the neutral-expression vertex positions.

    ``anchoring`` may carry a precomputed layout for ``head.canonical_vertices(beta)``.
    """
    if anchoring is None:
        anchoring = Anchoring.from_points(head.canonical_vertices(beta), voxel_size)
    return anchoring(vertex_features(head, beta, psi, mask))


class SparseConvNet:
    """Two submanifold 3x3x3 layers, ``F -> 32 -> 16``, ReLU between.

    Layer one has no bias; layer two's bias starts at zero.
    """

    def __init__(self, in_channels: int, hidden: int = HIDDEN_CHANNELS,
                 out_channels: int = OUT_CHANNELS, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_channels, self.hidden, self.out_channels = in_channels, hidden, out_channels
        # surface voxels see roughly 8 occupied taps, not 27
        self.w1 = T.parameter(rng.normal(0, np.sqrt(2.0 / (8 * in_channels)), (27 * in_channels, hidden)),
                              name="conv.w1")
        self.w2 = T.parameter(rng.normal(0, np.sqrt(2.0 / (8 * hidden)), (27 * hidden, out_channels)),
                              name="conv.w2")
        self.b2 = T.parameter(np.zeros(out_channels), name="conv.b2")

    def parameters(self) -> dict[str, Tensor]:
        return {"conv.w1": self.w1, "conv.w2": self.w2, "conv.b2": self.b2}

    def __call__(self, grid: VoxelGrid) -> VoxelGrid:
        return diffuse(grid, self)


def _sparse_conv(layout: VoxelLayout, x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    n, f = x.shape
    if w.shape[0] != 27 * f:
        raise ContractError(f"conv weights expect {w.shape[0] // 27} input channels, got {f}")
    gathered = T.reshape(T.sparse_matmul(layout.neighbor_operator, x), (n, 27 * f))
    return T.affine(gathered, w, b)


def diffuse(grid: VoxelGrid, net: SparseConvNet) -> VoxelGrid:
    """Apply the two-layer network; output support equals the input occupied set."""
    h = T.relu(_sparse_conv(grid.layout, grid.features, net.w1, None))
    return VoxelGrid(grid.layout, _sparse_conv(grid.layout, h, net.w2, net.b2))


def interpolation_operator(layout: VoxelLayout, x: np.ndarray) -> sp.csr_matrix:
    """(N, n) trilinear weights of each query point over occupied voxel centres.

    Empty corners keep their weight with a zero feature (no renormalisation).
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(x)):
        raise ContractError("query points must be finite")
    u = (x - layout.origin) / layout.voxel_size - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    rows, cols, vals = [], [], []
    qid = np.arange(len(x))
    for corner in itertools.product((0, 1), repeat=3):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        idx = layout.index_of(base + c)
        ok = (idx >= 0) & (w != 0)
        rows.append(qid[ok])
        cols.append(idx[ok])
        vals.append(w[ok])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(x), layout.num_occupied),
    )


def query(grid: VoxelGrid, x: np.ndarray) -> Tensor:
    """Trilinear feature lookup at points ``x`` of shape (N, 3) (or a single 3-vector)."""
    return T.sparse_matmul(interpolation_operator(grid.layout, x), grid.features)
