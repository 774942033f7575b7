"""The full trainable avatar: motion volume, deformation field and coarse/fine radiance fields."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .fields import AppearanceCodes, DeformField, FieldConfig, RadianceField
from .head import HeadModel
from .render import FieldFn
from .tensor import ContractError, Tensor
from .volume import Anchoring, ChannelMask, SparseConvNet, anchor, feature_width, query


class IncompatibleCheckpoint(ContractError):
    """Stored parameters do not fit this model or scene."""


@dataclass(frozen=True)
class Ablation:
    """Feature and loss switches for the ablation variants."""

    no_semantic: bool = False
    no_expression: bool = False
    no_reg_losses: bool = False
    no_displacement: bool = False

    def channel_mask(self) -> ChannelMask:
        return ChannelMask(semantic=not self.no_semantic, expression=not self.no_expression)


@dataclass(frozen=True)
class ModelConfig:
    fields: FieldConfig = field(default_factory=FieldConfig)
    voxel_size: float = 0.05
    conv_hidden: int = 32
    conv_out: int = 16
    appearance_test_mode: str = "mean"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["fields"] = FieldConfig(**d.get("fields", {}))
        return cls(**d)


class AvatarModel:
    def __init__(self, head: HeadModel, beta, num_train_frames: int, cfg: ModelConfig = ModelConfig(),
                 seed: int = 0, ablation: Ablation = Ablation()):
        rng = np.random.default_rng(seed)
        self.head = head
        self.beta = np.asarray(beta, dtype=float)
        self.cfg = cfg
        self.ablation = ablation
        self.anchoring = Anchoring.from_points(head.canonical_vertices(self.beta), cfg.voxel_size)
        self.conv = SparseConvNet(feature_width(head), cfg.conv_hidden, cfg.conv_out, rng)
        self.deform = DeformField(head.expression_dim, cfg.conv_out, cfg.fields, rng)
        self.coarse = RadianceField(cfg.fields, rng, "coarse")
        self.fine = RadianceField(cfg.fields, rng, "fine")
        self.appearance = AppearanceCodes(num_train_frames, cfg.fields.appearance_dim, rng,
                                          cfg.appearance_test_mode)
        self.deformation_enabled = True

    # -- parameters -------------------------------------------------------------
    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        return {
            "canonical": {**self.coarse.parameters(), **self.fine.parameters()},
            "deform": self.deform.parameters(),
            "conv": self.conv.parameters(),
            "latent": {"latent_codes": self.head.latent_codes},
            "appearance": self.appearance.parameters(),
        }

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group in self.parameter_groups().values():
            out.update(group)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise IncompatibleCheckpoint(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise IncompatibleCheckpoint(f"parameter {k!r}: checkpoint shape {arrays[k].shape} != model {p.data.shape}")
            p.data[...] = arrays[k]

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # -- forward ----------------------------------------------------------------
    def volume(self, psi):
        """Diffused motion volume for expression ``psi`` (rebuilt on every call)."""
        grid = anchor(self.head, psi, self.beta, self.cfg.voxel_size,
                      self.ablation.channel_mask(), self.anchoring)
        return self.conv(grid)

    def field_fn(self, psi, frame_index: int | None, mode: str = "train") -> FieldFn:
        """Field closure for one frame: warp by the deformation MLP, then query a radiance field."""
        psi = np.asarray(psi, dtype=float)
        omega = self.appearance(frame_index, mode)
        use_volume = self.deformation_enabled and not self.ablation.no_displacement
        grid = self.volume(psi) if use_volume else None

        def fn(points: np.ndarray, dirs: np.ndarray, stage: str):
            n = len(points)
            if self.deformation_enabled:
                if grid is not None:
                    feat = query(grid, points)
                else:
                    feat = T.Tensor(np.zeros((n, self.cfg.conv_out)))
                offset = self.deform(points, psi, feat)
                x = T.add(points, offset)
            else:
                x = T.Tensor(points)
            radiance = self.coarse if stage == "coarse" else self.fine
            om = T.stack_rows(T.reshape(omega, (1, -1)), np.zeros(n, dtype=np.int64))
            return radiance(x, dirs, om)

        return fn

    def canonical_density(self, points: np.ndarray) -> Tensor:
        """Density of the fine canonical field, no deformation."""
        return self.fine.sigma(T.Tensor(points))
