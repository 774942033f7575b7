"""Pinhole rays, rigid alignment into the canonical head frame, sampling and compositing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

FAR_DELTA = 1e10
WEIGHT_FLOOR = 1e-5


def _check_rotation(r: np.ndarray, what: str) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ContractError(f"{what}: rotation must be a finite 3x3 matrix")
    if not np.allclose(r.T @ r, np.eye(3), atol=1e-8) or abs(np.linalg.det(r) - 1.0) > 1e-8:
        raise ContractError(f"{what}: rotation is not orthonormal with det +1")
    return r


@dataclass
class Pose:
    """Rigid transform mapping local coordinates to world: ``X_w = R X + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = _check_rotation(self.rotation, "pose")
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def from_euler(cls, yaw: float, pitch: float, roll: float = 0.0, translation=(0, 0, 0)) -> Pose:
        """Angles in radians: yaw about +y, pitch about +x, roll about +z, applied roll-pitch-yaw."""
        cy, sy = np.cos(yaw), np.sin(yaw)
        cp, sp_ = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rx = np.array([[1, 0, 0], [0, cp, -sp_], [0, sp_, cp]])
        rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
        return cls(ry @ rx @ rz, np.asarray(translation, dtype=float))


@dataclass
class Camera:
    """Pinhole camera looking down its local -z axis, +y up; ``pose`` is world-from-camera."""

    focal: float
    cx: float
    cy: float
    height: int
    width: int
    pose: Pose = field(default_factory=Pose)

    @classmethod
    def looking_at_origin(cls, distance: float, fov_degrees: float, height: int, width: int) -> Camera:
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_degrees))
        return cls(focal, (width - 1) / 2.0, (height - 1) / 2.0, height, width,
                   Pose(np.eye(3), np.array([0.0, 0.0, distance])))

    def to_dict(self) -> dict:
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy, "height": self.height,
                "width": self.width, "rotation": self.pose.rotation.tolist(),
                "translation": self.pose.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(float(d["focal"]), float(d["cx"]), float(d["cy"]), int(d["height"]),
                   int(d["width"]), Pose(np.array(d["rotation"]), np.array(d["translation"])))


@dataclass
class RayBatch:
    origins: np.ndarray       # (N, 3)
    directions: np.ndarray    # (N, 3), unit
    near: float
    far: float
    pixels: np.ndarray        # (N, 2) (row, col)

    def __post_init__(self):
        if not self.near < self.far:
            raise ContractError(f"near ({self.near}) must be below far ({self.far})")

    def __len__(self) -> int:
        return len(self.origins)

    def points(self, depths: np.ndarray) -> np.ndarray:
        return self.origins[:, None, :] + depths[..., None] * self.directions[:, None, :]


def generate_rays(camera: Camera, head_pose: Pose, pixels: np.ndarray,
                  bound_radius: float | None = None, near: float | None = None,
                  far: float | None = None) -> RayBatch:
    """Rays through pixel centres, expressed in the canonical (head) frame.

    The head pose maps canonical to world, so rays are pulled back through its
    inverse. near/far come from the head bounding sphere (radius padded 1.5x)
    unless given explicitly.
    """
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if pixels.size and (pixels.min() < 0 or np.any(pixels[:, 0] >= camera.height)
                        or np.any(pixels[:, 1] >= camera.width)):
        raise ContractError("pixel outside image bounds")
    r_h = _check_rotation(head_pose.rotation, "head pose")
    d_cam = np.stack([(pixels[:, 1] - camera.cx) / camera.focal,
                      -(pixels[:, 0] - camera.cy) / camera.focal,
                      -np.ones(len(pixels))], axis=1)
    d_world = d_cam @ camera.pose.rotation.T
    o_world = np.broadcast_to(camera.pose.translation, d_world.shape)
    # X_c = R_h^T (X_w - t_h); row-vector form: (X_w - t_h) @ R_h
    origins = (o_world - head_pose.translation) @ r_h
    dirs = d_world @ r_h
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    if near is None or far is None:
        if bound_radius is None:
            raise ContractError("give either near/far or bound_radius")
        near, far = near_far(camera, head_pose, bound_radius)
    return RayBatch(np.ascontiguousarray(origins), dirs, float(near), float(far), pixels)


def near_far(camera: Camera, head_pose: Pose, bound_radius: float, pad: float = 1.5) -> tuple[float, float]:
    dist = float(np.linalg.norm(camera.pose.translation - head_pose.translation))
    return max(dist - pad * bound_radius, 1e-3), dist + pad * bound_radius


def all_pixels(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def sample_coarse(rays: RayBatch, num: int, stratified: bool,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """``num`` depths per ray, one per equal-width bin of [near, far]."""
    if num < 2:
        raise ContractError("need at least 2 coarse samples")
    n = len(rays)
    edges = np.linspace(rays.near, rays.far, num + 1)
    lower, width = edges[:-1], np.diff(edges)
    if not stratified:
        return np.broadcast_to(lower + 0.5 * width, (n, num)).copy()
    if rng is None:
        raise ContractError("stratified sampling needs an rng")
    return lower + rng.random((n, num)) * width


def bin_edges(rays: RayBatch, depths: np.ndarray) -> np.ndarray:
    """Per-sample intervals: midpoints between samples, clipped by near/far."""
    mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
    n = len(depths)
    return np.concatenate([np.full((n, 1), rays.near), mids, np.full((n, 1), rays.far)], axis=1)


def sample_pdf(edges: np.ndarray, weights: np.ndarray, num: int,
               rng: np.random.Generator | None) -> np.ndarray:
    """Inverse-transform sampling of a piecewise-constant density over ``edges``.

    ``rng=None`` uses the deterministic quantiles (i + 0.5) / num.
    """
    w = np.asarray(weights, dtype=float) + WEIGHT_FLOOR
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(pdf), 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(num) + 0.5) / num, (len(pdf), num))
    else:
        u = rng.random((len(pdf), num))
    n, nb = pdf.shape
    # one flat searchsorted: offset each row's cdf (values in [0, 1]) by 2 * row
    offset = 2.0 * np.arange(n)[:, None]
    flat = np.searchsorted((cdf + offset).ravel(), (u + offset).ravel(), side="right")
    k = np.clip(flat.reshape(n, num) - np.arange(n)[:, None] * (nb + 1) - 1, 0, nb - 1)
    rows = np.arange(n)[:, None]
    t = (u - cdf[rows, k]) / np.maximum(pdf[rows, k], 1e-300)
    lo, hi = edges[rows, k], edges[rows, k + 1]
    return lo + np.clip(t, 0.0, 1.0) * (hi - lo)


def sample_fine(rays: RayBatch, coarse_depths: np.ndarray, coarse_weights: np.ndarray,
                num_fine: int, rng: np.random.Generator | None) -> np.ndarray:
    """Importance samples from the coarse weights, merged with the coarse depths and sorted."""
    weights = np.asarray(coarse_weights, dtype=float)
    if weights.shape != coarse_depths.shape:
        raise ContractError("coarse weights must match coarse depths")
    if num_fine == 0:
        return coarse_depths
    fine = sample_pdf(bin_edges(rays, coarse_depths), weights, num_fine, rng)
    return np.sort(np.concatenate([coarse_depths, fine], axis=1), axis=1)


def deltas(depths: np.ndarray, last: float = FAR_DELTA) -> np.ndarray:
    d = np.diff(depths, axis=1)
    return np.concatenate([d, np.full((len(depths), 1), last)], axis=1)


@dataclass
class Composite:
    rgb: Tensor            # (N, 3) with background
    acc: Tensor            # (N,) accumulated alpha
    weights: Tensor        # (N, K)
    transmittance: Tensor  # (N, K)


def composite(sigma, rgb, delta: np.ndarray, background=(1.0, 1.0, 1.0)) -> Composite:
    """Alpha compositing along each ray.

    ``T_k = exp(-sum_{j<k} sigma_j delta_j)``, ``w_k = T_k (1 - exp(-sigma_k delta_k))``,
    colour ``sum_k w_k c_k + (1 - sum_k w_k) * background``.
    """
    sigma, rgb = T.as_tensor(sigma), T.as_tensor(rgb)
    n, k = sigma.shape
    if rgb.shape != (n, k, 3) or delta.shape != (n, k):
        raise ContractError(f"composite: sigma {sigma.shape}, rgb {rgb.shape}, delta {delta.shape}")
    if np.any(sigma.data < 0):
        raise ContractError("composite: density must be non-negative")
    optical = T.mul(sigma, delta)
    alpha = T.sub(1.0, T.exp(T.neg(optical)))
    # exclusive prefix sum without cancellation against the huge last delta
    prefix = T.concat([T.Tensor(np.zeros((n, 1))), T.cumsum(optical[:, : k - 1], axis=1)], axis=1)
    trans = T.exp(T.neg(prefix))
    weights = T.mul(trans, alpha)
    acc = T.tsum(weights, axis=1)
    color = T.tsum(T.mul(T.reshape(weights, (n, k, 1)), rgb), axis=1)
    bg = np.asarray(background, dtype=float).reshape(1, 3)
    color = T.add(color, T.mul(T.reshape(T.sub(1.0, acc), (n, 1)), bg))
    return Composite(color, acc, weights, trans)


class FieldFn(Protocol):
    def __call__(self, points: np.ndarray, dirs: np.ndarray, stage: str) -> tuple[Tensor, Tensor]:
        """Return (rgb (M, 3), sigma (M,)) at points (M, 3) seen along dirs (M, 3)."""


@dataclass(frozen=True)
class RenderSettings:
    num_coarse: int = 64
    num_fine: int = 64
    stratified: bool = True
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    chunk: int = 1024


@dataclass
class RayOutput:
    coarse: Composite
    fine: Composite | None
    coarse_depths: np.ndarray
    fine_depths: np.ndarray | None

    @property
    def final(self) -> Composite:
        return self.fine if self.fine is not None else self.coarse


def _evaluate(field_fn, rays: RayBatch, depths: np.ndarray, stage: str, background) -> Composite:
    n, k = depths.shape
    pts = rays.points(depths).reshape(-1, 3)
    dirs = np.repeat(rays.directions, k, axis=0)
    rgb, sigma = field_fn(pts, dirs, stage)
    return composite(T.reshape(sigma, (n, k)), T.reshape(rgb, (n, k, 3)), deltas(depths), background)


def render_rays(field_fn: FieldFn, rays: RayBatch, settings: RenderSettings,
                rng: np.random.Generator | None = None) -> RayOutput:
    """Coarse pass, then (if ``num_fine``) an importance-sampled fine pass.

    When ``settings.stratified`` is false, both passes are deterministic and
    ``rng`` may be None.
    """
    use_rng = rng if settings.stratified else None
    coarse_depths = sample_coarse(rays, settings.num_coarse, settings.stratified, use_rng)
    coarse = _evaluate(field_fn, rays, coarse_depths, "coarse", settings.background)
    if settings.num_fine <= 0:
        return RayOutput(coarse, None, coarse_depths, None)
    fine_depths = sample_fine(rays, coarse_depths, coarse.weights.data, settings.num_fine, use_rng)
    fine = _evaluate(field_fn, rays, fine_depths, "fine", settings.background)
    return RayOutput(coarse, fine, coarse_depths, fine_depths)


def render_image(field_fn: FieldFn, camera: Camera, head_pose: Pose, settings: RenderSettings,
                 bound_radius: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Full-frame render in ray chunks; returns (H, W, 3) colour and (H, W) alpha."""
    pixels = all_pixels(camera.height, camera.width)
    rgb = np.empty((len(pixels), 3))
    acc = np.empty(len(pixels))
    rng = np.random.default_rng(seed)
    with T.no_grad():
        for lo in range(0, len(pixels), settings.chunk):
            sl = slice(lo, lo + settings.chunk)
            rays = generate_rays(camera, head_pose, pixels[sl], bound_radius=bound_radius)
            out = render_rays(field_fn, rays, settings, rng).final
            rgb[sl] = out.rgb.data
            acc[sl] = out.acc.data
    return rgb.reshape(camera.height, camera.width, 3), acc.reshape(camera.height, camera.width)


def analytic_field_fn(density: Callable[[np.ndarray], np.ndarray],
                      color: Callable[[np.ndarray], np.ndarray]) -> FieldFn:
    """Wrap closed-form density/colour functions as a field, bypassing any network."""

    def fn(points, dirs, stage):
        return T.Tensor(color(points)), T.Tensor(density(points))

    return fn
