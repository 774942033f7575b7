"""Synthetic head scenes with exact ground truth, and the on-disk scene manifest.

The ground-truth scene is a sum of isotropic Gaussian density blobs centred on
a fixed subset of head vertices, posed by the same blendshape model the
network is conditioned on. Colour at a point is the palette colour of the
semantic class of the nearest blob centre. Frames are rendered with the same
compositing code the model uses.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint
from .head import HeadModel, generate_synthetic_head
from .render import Camera, Pose, RenderSettings, render_image
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "headnerf-scene"
MANIFEST_VERSION = 1
SPLITS = ("train", "test_seen_expr", "test_unseen_expr")

PALETTE = np.array([
    [0.86, 0.62, 0.50],
    [0.62, 0.28, 0.24],
    [0.96, 0.82, 0.66],
    [0.33, 0.24, 0.20],
    [0.74, 0.44, 0.42],
    [0.50, 0.62, 0.80],
])


def palette(num_classes: int) -> np.ndarray:
    if num_classes <= len(PALETTE):
        return PALETTE[:num_classes].copy()
    extra = np.random.default_rng(1234).uniform(0.2, 0.9, (num_classes - len(PALETTE), 3))
    return np.concatenate([PALETTE, extra])


def farthest_point_indices(points: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest-point subset starting from index 0."""
    count = min(count, len(points))
    chosen = [0]
    dist = np.linalg.norm(points - points[0], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


class AnalyticScene:
    """Closed-form density/colour of the head at expression ``psi``."""

    CHUNK = 1 << 15

    def __init__(self, head: HeadModel, beta, psi, anchor_ids: np.ndarray,
                 amplitude: float = 30.0, scale: float = 0.08):
        self.centers = head.vertices(beta, psi)[anchor_ids]
        self.classes = head.semantic_labels[anchor_ids]
        self.colors = palette(head.num_semantic)[self.classes]
        self.amplitude = amplitude
        self.scale = scale

    def _sq_dist(self, x: np.ndarray) -> np.ndarray:
        c = self.centers
        d2 = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
        return np.maximum(d2, 0.0)

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(density (N,), colour (N, 3)) at points (N, 3)."""
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        sigma = np.empty(len(x))
        rgb = np.empty((len(x), 3))
        for lo in range(0, len(x), self.CHUNK):
            d2 = self._sq_dist(x[lo:lo + self.CHUNK])
            sigma[lo:lo + self.CHUNK] = self.amplitude * np.exp(d2 * (-0.5 / self.scale**2)).sum(1)
            rgb[lo:lo + self.CHUNK] = self.colors[np.argmin(d2, axis=1)]
        return sigma, rgb

    def density(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)[0]

    def color(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)[1]

    def field_fn(self):
        def fn(points, dirs, stage):
            sigma, rgb = self.evaluate(points)
            return Tensor(rgb), Tensor(sigma)

        return fn


@dataclass
class DatasetConfig:
    seed: int = 0
    n_train: int = 32
    n_test_seen: int = 12
    n_test_unseen: int = 12
    height: int = 64
    width: int = 64
    yaw_deg: float = 30.0
    pitch_deg: float = 15.0
    max_translation: float = 0.03
    psi_train: float = 0.6
    psi_unseen: tuple[float, float] = (0.7, 1.0)
    head_level: int = 3
    identity_dim: int = 4
    expression_dim: int = 8
    num_semantic: int = 6
    latent_dim: int = 8
    num_anchors: int = 64
    amplitude: float = 30.0
    blob_scale: float = 0.08
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    camera_distance: float = 2.5
    fov_deg: float = 40.0
    quadrature_samples: int = 512
    raw_dumps: bool = True

    def __post_init__(self):
        if not 8 <= self.n_train <= 200:
            raise ContractError(f"n_train must lie in [8, 200], got {self.n_train}")
        self.psi_unseen = tuple(self.psi_unseen)
        self.background = tuple(self.background)
        if not self.psi_train < self.psi_unseen[0] <= self.psi_unseen[1]:
            raise ContractError("unseen expression range must lie beyond the training range")


@dataclass
class Frame:
    index: int
    split: str
    psi: np.ndarray
    pose: Pose
    image: str
    raw: str | None = None

    def to_dict(self) -> dict:
        return {"index": self.index, "split": self.split, "psi": self.psi.tolist(),
                "rotation": self.pose.rotation.tolist(), "translation": self.pose.translation.tolist(),
                "image": self.image, "raw": self.raw}

    @classmethod
    def from_dict(cls, d: dict) -> Frame:
        return cls(int(d["index"]), d["split"], np.array(d["psi"], dtype=float),
                   Pose(np.array(d["rotation"]), np.array(d["translation"])), d["image"], d.get("raw"))


@dataclass
class SceneManifest:
    head: HeadModel
    beta: np.ndarray
    camera: Camera
    frames: list[Frame]
    anchor_ids: np.ndarray
    bound_radius: float
    settings: DatasetConfig
    root: Path | None = None
    version: int = MANIFEST_VERSION
    _images: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        idx = [f.index for f in self.frames]
        if sorted(idx) != list(range(len(idx))):
            raise ContractError("frame indices must be unique and dense from 0")
        train = self.split("train")
        if [f.index for f in train] != list(range(len(train))):
            raise ContractError("training frames must occupy indices 0..n_train-1")
        check_unseen(self)

    def split(self, name: str) -> list[Frame]:
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}")
        return [f for f in self.frames if f.split == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def analytic_scene(self, psi) -> AnalyticScene:
        return AnalyticScene(self.head, self.beta, psi, self.anchor_ids,
                             self.settings.amplitude, self.settings.blob_scale)

    def render_settings(self) -> RenderSettings:
        return RenderSettings(num_coarse=self.settings.quadrature_samples, num_fine=0,
                              stratified=False, background=self.settings.background, chunk=256)

    def image(self, frame: Frame) -> np.ndarray:
        """8-bit image of a frame as floats in [0, 1]."""
        if frame.index not in self._images:
            if self.root is None:
                raise ContractError("manifest has no root directory")
            with Image.open(self.root / frame.image) as im:
                self._images[frame.index] = np.asarray(im.convert("RGB"), dtype=float) / 255.0
        return self._images[frame.index]

    def ground_truth(self, frame: Frame) -> np.ndarray:
        """Unquantised image from the raw dump when present, else the PNG."""
        if frame.raw and self.root is not None and (self.root / frame.raw).exists():
            return checkpoint.load(self.root / frame.raw)["rgb"]
        return self.image(frame)

    def to_dict(self) -> dict:
        settings = asdict(self.settings)
        return {
            "format": MANIFEST_FORMAT,
            "version": self.version,
            "generator": settings,
            "bound_radius": self.bound_radius,
            "beta": self.beta.tolist(),
            "anchor_ids": self.anchor_ids.tolist(),
            "camera": self.camera.to_dict(),
            "head": self.head.to_dict(),
            "frames": [f.to_dict() for f in self.frames],
        }

    def save(self, root: str | Path) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        path = root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=1))
        self.root = root
        return path

    @classmethod
    def load(cls, root: str | Path) -> SceneManifest:
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        d = json.loads(path.read_text())
        if d.get("format") != MANIFEST_FORMAT:
            raise ContractError(f"{path} is not a scene manifest")
        if d.get("version") != MANIFEST_VERSION:
            raise ContractError(f"unsupported manifest version {d.get('version')}")
        return cls(
            head=HeadModel.from_dict(d["head"]),
            beta=np.array(d["beta"], dtype=float),
            camera=Camera.from_dict(d["camera"]),
            frames=[Frame.from_dict(f) for f in d["frames"]],
            anchor_ids=np.array(d["anchor_ids"], dtype=np.int64),
            bound_radius=float(d["bound_radius"]),
            settings=DatasetConfig(**d["generator"]),
            root=path.parent,
        )


def check_unseen(manifest: SceneManifest) -> None:
    """Every unseen-expression psi leaves the training range in some coordinate."""
    train = np.array([f.psi for f in manifest.split("train")])
    if not len(train):
        return
    lo, hi = train.min(axis=0), train.max(axis=0)
    for f in manifest.split("test_unseen_expr"):
        if not np.any((f.psi < lo) | (f.psi > hi)):
            raise ContractError(f"frame {f.index}: unseen expression lies inside the training range")


def _sample_pose(rng: np.random.Generator, cfg: DatasetConfig) -> Pose:
    yaw = np.radians(rng.uniform(-cfg.yaw_deg, cfg.yaw_deg))
    pitch = np.radians(rng.uniform(-cfg.pitch_deg, cfg.pitch_deg))
    t = rng.uniform(-cfg.max_translation, cfg.max_translation, 3)
    return Pose.from_euler(yaw, pitch, 0.0, t)


def _sample_unseen_psi(rng: np.random.Generator, cfg: DatasetConfig) -> np.ndarray:
    psi = rng.uniform(-cfg.psi_train, cfg.psi_train, cfg.expression_dim)
    k = int(rng.integers(1, 3))
    coords = rng.choice(cfg.expression_dim, k, replace=False)
    psi[coords] = rng.choice([-1.0, 1.0], k) * rng.uniform(*cfg.psi_unseen, k)
    return psi


def build_manifest(cfg: DatasetConfig) -> SceneManifest:
    """Scene description (head, camera, frames) without rendering anything."""
    rng = np.random.default_rng(cfg.seed)
    head = generate_synthetic_head(cfg.seed, cfg.head_level, cfg.identity_dim, cfg.expression_dim,
                                   cfg.num_semantic, cfg.latent_dim)
    beta = rng.normal(0.0, 0.5, cfg.identity_dim)
    canonical = head.canonical_vertices(beta)
    anchor_ids = farthest_point_indices(canonical, cfg.num_anchors)
    bound_radius = float(np.linalg.norm(canonical, axis=1).max())
    camera = Camera.looking_at_origin(cfg.camera_distance, cfg.fov_deg, cfg.height, cfg.width)

    frames = []
    plan = ([("train", None)] * cfg.n_train + [("test_seen_expr", None)] * cfg.n_test_seen
            + [("test_unseen_expr", None)] * cfg.n_test_unseen)
    for index, (split, _) in enumerate(plan):
        pose = _sample_pose(rng, cfg)
        if split == "test_unseen_expr":
            psi = _sample_unseen_psi(rng, cfg)
        else:
            psi = rng.uniform(-cfg.psi_train, cfg.psi_train, cfg.expression_dim)
        raw = f"raw/frame_{index:04d}.bin" if cfg.raw_dumps else None
        frames.append(Frame(index, split, psi, pose, f"images/frame_{index:04d}.png", raw))
    return SceneManifest(head, beta, camera, frames, anchor_ids, bound_radius, cfg)


def render_ground_truth(manifest: SceneManifest, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    scene = manifest.analytic_scene(frame.psi)
    return render_image(scene.field_fn(), manifest.camera, frame.pose, manifest.render_settings(),
                        manifest.bound_radius)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path) -> SceneManifest:
    """Render every frame, write PNGs (+ raw dumps) and the manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    manifest = build_manifest(cfg)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if cfg.raw_dumps:
        (out_dir / "raw").mkdir(parents=True, exist_ok=True)
    for frame in manifest.frames:
        rgb, alpha = render_ground_truth(manifest, frame)
        Image.fromarray(quantize(rgb)).save(out_dir / frame.image)
        if frame.raw:
            checkpoint.save(out_dir / frame.raw, {"rgb": rgb, "alpha": alpha})
        log.debug("rendered frame %d (%s)", frame.index, frame.split)
    manifest.save(out_dir)
    return manifest
