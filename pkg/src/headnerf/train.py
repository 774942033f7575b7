"""Training loop, checkpointing, evaluation and the ablation sweep."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from . import checkpoint
from . import tensor as T
from .dataset import Frame, SceneManifest
from .losses import LossWeights, canonical_edge, hard_surface, photometric, total
from .metrics import psnr, ssim
from .model import Ablation, AvatarModel, IncompatibleCheckpoint, ModelConfig
from .optim import AdamState, adam_step
from .render import RenderSettings, generate_rays, render_image, render_rays
from .tensor import ContractError, NonFiniteError

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ["step", "frame", "photometric", "hard", "edge", "total"]
METRICS_HEADER = ["frame", "split", "psnr", "ssim"]


@dataclass
class TrainConfig:
    lr: float = 5e-4
    iterations: int = 5000
    rays_per_batch: int = 1024
    lambda1: float = 0.01
    lambda2: float = 0.01
    no_semantic: bool = False
    no_expression: bool = False
    no_reg_losses: bool = False
    no_displacement: bool = False
    seed: int = 0
    checkpoint_interval: int = 1000
    num_coarse: int = 64
    num_fine: int = 64
    num_probe_rays: int = 16
    probe_samples: int = 64
    hard_target: str = "ray"          # "ray": accumulated alpha, "sample": every compositing weight
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        if self.hard_target not in ("ray", "sample"):
            raise ContractError("hard_target must be 'ray' or 'sample'")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.no_semantic, self.no_expression, self.no_reg_losses, self.no_displacement)

    @property
    def loss_weights(self) -> LossWeights:
        if self.no_reg_losses:
            return LossWeights(0.0, 0.0)
        return LossWeights(self.lambda1, self.lambda2)

    def render_settings(self, train: bool) -> RenderSettings:
        return RenderSettings(self.num_coarse, self.num_fine, stratified=train,
                              background=(1.0, 1.0, 1.0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


# Named starting points for TrainConfig. "full" keeps the default network
# sizes; "desk" narrows the MLPs and ray budget so a 5000-step run fits in
# about an hour on a single CPU core.
PRESETS: dict[str, dict] = {
    "full": {},
    "desk": {
        "rays_per_batch": 256,
        "num_coarse": 32,
        "num_fine": 32,
        "model": {"fields": {"deform_width": 64, "trunk_width": 64, "color_width": 32}},
    },
}


def merge_settings(base: dict, override: dict) -> dict:
    """Recursive dict update; nested dicts merge, everything else is replaced."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_settings(out[k], v)
        else:
            out[k] = v
    return out


def preset_config(name: str = "full", **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig.from_dict(merge_settings(merge_settings(TrainConfig().to_dict(), PRESETS[name]), overrides))


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    """Independent generator per (seed, step, purpose); makes resumption exact."""
    return np.random.default_rng([seed, step, stream])


def draw_batch(seed: int, step: int, n_train: int, height: int, width: int,
               rays: int) -> tuple[int, np.ndarray]:
    rng = step_rng(seed, step, 0)
    frame = int(rng.integers(n_train))
    flat = rng.choice(height * width, size=min(rays, height * width), replace=False)
    return frame, np.stack([flat // width, flat % width], axis=1)


def model_signature(manifest: SceneManifest) -> np.ndarray:
    """Dimensions plus a digest of the head model, identity and frame count."""
    head = manifest.head
    h = hashlib.sha256()
    for arr in (head.base_vertices, head.identity_basis, head.expression_basis,
                head.semantic_labels.astype(float), np.asarray(manifest.beta, dtype=float)):
        h.update(np.ascontiguousarray(arr).tobytes())
    digest = h.digest()
    return np.array([head.num_vertices, head.expression_dim, head.num_semantic, head.latent_dim,
                     len(manifest.split("train")), int.from_bytes(digest[:6], "little")], dtype=float)


class Trainer:
    def __init__(self, manifest: SceneManifest, cfg: TrainConfig):
        self.manifest = manifest
        self.cfg = cfg
        self.train_frames = manifest.split("train")
        if not self.train_frames:
            raise ContractError("manifest has no training frames")
        # the head's latent codes are trained in place; keep the manifest's copy pristine
        head = type(manifest.head).from_dict(manifest.head.to_dict())
        self.model = AvatarModel(head, manifest.beta, len(self.train_frames), cfg.model,
                                 seed=cfg.seed, ablation=cfg.ablation)
        self.params = self.model.parameters()
        self.opt = AdamState()
        self.step_count = 0
        self.grad_seen = {g: False for g in self.model.parameter_groups()}
        self.draws: list[tuple[int, str]] = []

    # -- one iteration --------------------------------------------------------------
    def step(self) -> dict:
        cfg, man = self.cfg, self.manifest
        cam = man.camera
        fidx, pixels = draw_batch(cfg.seed, self.step_count, len(self.train_frames),
                                  cam.height, cam.width, cfg.rays_per_batch)
        self.draws.append((fidx, hashlib.sha1(pixels.tobytes()).hexdigest()[:12]))
        frame = self.train_frames[fidx]
        target = man.image(frame)[pixels[:, 0], pixels[:, 1]]

        rays = generate_rays(cam, frame.pose, pixels, bound_radius=man.bound_radius)
        field_fn = self.model.field_fn(frame.psi, frame.index, "train")
        out = render_rays(field_fn, rays, cfg.render_settings(True), step_rng(cfg.seed, self.step_count, 1))
        fine = out.final

        comps = {"photometric": photometric(out.coarse.rgb, fine.rgb, target)}
        if cfg.hard_target == "ray":
            comps["hard"] = hard_surface(fine.acc)
        else:
            comps["hard"] = hard_surface(T.reshape(fine.weights, (-1,)))
        comps["edge"] = canonical_edge(self.model.canonical_density, cfg.num_probe_rays,
                                       step_rng(cfg.seed, self.step_count, 2),
                                       1.5 * man.bound_radius, cfg.probe_samples)
        for name, value in comps.items():
            if not np.all(np.isfinite(value.data)):
                raise NonFiniteError(f"step {self.step_count}: loss component {name!r} is not finite")
        loss = total(comps, cfg.loss_weights)

        self.model.zero_grad()
        T.backward(loss)
        for group, params in self.model.parameter_groups().items():
            if not self.grad_seen[group]:
                self.grad_seen[group] = any(p.grad is not None and np.any(p.grad != 0) for p in params.values())
        grads = {k: p.grad for k, p in self.params.items()}
        try:
            adam_step(self.params, grads, self.opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        except NonFiniteError as exc:
            raise NonFiniteError(f"step {self.step_count}: {exc}") from None
        self.model.zero_grad()
        row = {"step": self.step_count, "frame": fidx,
               "photometric": comps["photometric"].item(), "hard": comps["hard"].item(),
               "edge": comps["edge"].item(), "total": loss.item()}
        self.step_count += 1
        return row

    # -- persistence ----------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.model.state_arrays()
        for k in self.params:
            if k in self.opt.m:
                arrays[f"adam.m/{k}"] = self.opt.m[k]
                arrays[f"adam.v/{k}"] = self.opt.v[k]
        arrays["__step__"] = np.array(float(self.step_count))
        arrays["__adam_t__"] = np.array(float(self.opt.t))
        arrays["__signature__"] = model_signature(self.manifest)
        return arrays

    def save(self, path: str | Path) -> Path:
        return checkpoint.save(path, self.state_arrays())

    def load(self, path_or_arrays) -> None:
        arrays = path_or_arrays if isinstance(path_or_arrays, dict) else checkpoint.load(path_or_arrays)
        check_compatible(arrays, self.manifest)
        self.model.load_arrays(arrays)
        self.opt = AdamState(
            m={k: arrays[f"adam.m/{k}"].copy() for k in self.params if f"adam.m/{k}" in arrays},
            v={k: arrays[f"adam.v/{k}"].copy() for k in self.params if f"adam.v/{k}" in arrays},
            t=int(arrays["__adam_t__"]),
        )
        self.step_count = int(arrays["__step__"])


def check_compatible(arrays: dict[str, np.ndarray], manifest: SceneManifest) -> None:
    sig = arrays.get("__signature__")
    if sig is None or not np.array_equal(sig, model_signature(manifest)):
        raise IncompatibleCheckpoint("checkpoint was trained on a different head model / frame set")


@dataclass
class TrainResult:
    trainer: Trainer
    log: list[dict]
    checkpoint: Path | None
    seconds: float

    @property
    def model(self) -> AvatarModel:
        return self.trainer.model


def _write_csv(path: Path, header: list[str], rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def train(manifest: SceneManifest, cfg: TrainConfig, out_dir: str | Path | None = None,
          resume: str | Path | None = None,
          on_step: Callable[[Trainer, dict], None] | None = None) -> TrainResult:
    """Run ``cfg.iterations`` steps (continuing from ``resume`` if given).

    With ``out_dir`` the loss log, run manifest, periodic checkpoints and a
    final ``checkpoint.bin`` are written there.
    """
    trainer = Trainer(manifest, cfg)
    if resume is not None:
        trainer.load(resume)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.json").write_text(json.dumps({"config": cfg.to_dict(),
                                                  "manifest": str(manifest.root)}, indent=1))
    rows: list[dict] = []
    t0 = time.perf_counter()
    while trainer.step_count < cfg.iterations:
        row = trainer.step()
        rows.append(row)
        if on_step is not None:
            on_step(trainer, row)
        if row["step"] % 50 == 0:
            log.info("step %d  L_p=%.5f total=%.5f", row["step"], row["photometric"], row["total"])
        if out is not None and cfg.checkpoint_interval and trainer.step_count % cfg.checkpoint_interval == 0:
            trainer.save(out / f"checkpoint_{trainer.step_count:06d}.bin")
    ckpt = None
    if out is not None:
        _write_csv(out / "loss_log.csv", LOSS_LOG_HEADER, rows)
        ckpt = trainer.save(out / "checkpoint.bin")
    return TrainResult(trainer, rows, ckpt, time.perf_counter() - t0)


# -- evaluation -------------------------------------------------------------------------


class FrameRenderer(Protocol):
    def __call__(self, frame: Frame) -> np.ndarray: ...


def model_renderer(model: AvatarModel, manifest: SceneManifest, settings: RenderSettings,
                   seed: int = 0) -> FrameRenderer:
    n_train = model.appearance.num_frames

    def render(frame: Frame) -> np.ndarray:
        mode = "train" if frame.split == "train" and frame.index < n_train else "test"
        fn = model.field_fn(frame.psi, frame.index if mode == "train" else None, mode)
        rgb, _ = render_image(fn, manifest.camera, frame.pose, settings, manifest.bound_radius, seed)
        return rgb

    return render


def analytic_renderer(manifest: SceneManifest) -> FrameRenderer:
    from .dataset import render_ground_truth

    return lambda frame: render_ground_truth(manifest, frame)[0]


@dataclass
class EvalTable:
    rows: list[dict]

    @property
    def mean(self) -> dict:
        return self.rows[-1]


def evaluate(renderer: FrameRenderer, manifest: SceneManifest, split: str,
             out_csv: str | Path | None = None) -> EvalTable:
    """Per-frame PSNR/SSIM against the ground truth, plus a final mean row."""
    rows = []
    for frame in manifest.split(split):
        img = renderer(frame)
        gt = manifest.ground_truth(frame)
        rows.append({"frame": frame.index, "split": split, "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
    if rows:
        mean = {"psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows]))}
    else:
        mean = {"psnr": math.nan, "ssim": math.nan}
    rows.append({"frame": "mean", "split": split, **mean})
    if out_csv is not None:
        _write_csv(Path(out_csv), METRICS_HEADER, rows)
    return EvalTable(rows)


def load_model(path: str | Path, manifest: SceneManifest, cfg: TrainConfig) -> AvatarModel:
    arrays = checkpoint.load(path)
    check_compatible(arrays, manifest)
    trainer = Trainer(manifest, cfg)
    trainer.model.load_arrays(arrays)
    return trainer.model


# -- ablations --------------------------------------------------------------------------

ABLATION_ROWS = {
    "w/o Semantic": {"no_semantic": True},
    "w/o Expression": {"no_expression": True},
    "w/o L_hard & L_edge": {"no_reg_losses": True},
    "w/o Displacement": {"no_displacement": True},
    "Full": {},
}


@dataclass
class AblationResult:
    runs: dict[str, dict[int, dict]]         # variant -> seed -> {"psnr", "ssim", "draws"}
    split: str

    def median(self, variant: str, metric: str) -> float:
        return statistics.median(r[metric] for r in self.runs[variant].values())

    def table(self) -> list[dict]:
        return [{"variant": v, "psnr": self.median(v, "psnr"), "ssim": self.median(v, "ssim")}
                for v in self.runs]


def ablation_suite(manifest: SceneManifest, base: TrainConfig, seeds: Iterable[int] = (7,),
                   variants: Iterable[str] | None = None, split: str = "test_unseen_expr",
                   out_dir: str | Path | None = None) -> AblationResult:
    """Train every variant with identical seeds and compare on ``split``.

    Table columns are PSNR and SSIM; perceptual metrics are not computed.
    """
    names = list(variants) if variants is not None else list(ABLATION_ROWS)
    runs: dict[str, dict[int, dict]] = {}
    for name in names:
        runs[name] = {}
        for seed in seeds:
            cfg = replace(base, seed=seed, **ABLATION_ROWS[name])
            res = train(manifest, cfg)
            table = evaluate(model_renderer(res.model, manifest, cfg.render_settings(False)), manifest, split)
            runs[name][seed] = {"psnr": table.mean["psnr"], "ssim": table.mean["ssim"],
                                "draws": list(res.trainer.draws)}
            log.info("ablation %s seed %d: psnr %.3f ssim %.4f", name, seed,
                     table.mean["psnr"], table.mean["ssim"])
    result = AblationResult(runs, split)
    if out_dir is not None:
        _write_csv(Path(out_dir) / "ablation.csv", ["variant", "psnr", "ssim"], result.table())
    return result
