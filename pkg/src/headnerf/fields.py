"""MLP fields: deformation into canonical space and canonical radiance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor


def encoded_size(in_dim: int, num_freqs: int, include_input: bool = True) -> int:
    return in_dim * (int(include_input) + 2 * num_freqs)


def encode(x, num_freqs: int, include_input: bool = True) -> Tensor:
    """Sinusoidal encoding ``[x, sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(L-1) pi x)]``.

    For (N, k) input each entry in the list is a block of k columns.
    """
    if num_freqs < 0:
        raise ContractError("num_freqs must be >= 0")
    x = T.as_tensor(x)
    if x.ndim == 1:
        return T.reshape(encode(T.reshape(x, (1, -1)), num_freqs, include_input), (-1,))
    n, k = x.shape
    parts = [x] if include_input else []
    if num_freqs:
        freqs = (2.0 ** np.arange(num_freqs) * np.pi).reshape(1, num_freqs, 1)
        scaled = T.mul(T.reshape(x, (n, 1, k)), freqs)                  # (n, L, k)
        s = T.reshape(T.sin(scaled), (n, num_freqs, 1, k))
        c = T.reshape(T.cos(scaled), (n, num_freqs, 1, k))
        parts.append(T.reshape(T.concat([s, c], axis=2), (n, 2 * num_freqs * k)))
    if not parts:
        return T.Tensor(np.zeros((n, 0)))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)


class Linear:
    """Dense layer with the usual uniform(+-1/sqrt(fan_in)) initialisation."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str,
                 zero: bool = False):
        bound = 1.0 / np.sqrt(fan_in)
        if zero:
            w, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
            b = rng.uniform(-bound, bound, fan_out)
        self.w = T.parameter(w, name=f"{name}.w")
        self.b = T.parameter(b, name=f"{name}.b")
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.w, self.b)

    def parameters(self) -> dict[str, Tensor]:
        return {self.w.name: self.w, self.b.name: self.b}


@dataclass(frozen=True)
class FieldConfig:
    deform_freqs: int = 6
    deform_depth: int = 5
    deform_width: int = 128
    pos_freqs: int = 10
    dir_freqs: int = 4
    trunk_depth: int = 6
    trunk_width: int = 128
    skip_layer: int = 4
    color_width: int = 64
    appearance_dim: int = 8


class DeformField:
    """``(x, psi, f') -> dx`` with a zero-initialised output layer (identity warp at init)."""

    def __init__(self, expression_dim: int, feature_dim: int, cfg: FieldConfig,
                 rng: np.random.Generator, prefix: str = "deform"):
        self.cfg = cfg
        self.expression_dim = expression_dim
        self.feature_dim = feature_dim
        in_dim = encoded_size(3, cfg.deform_freqs) + expression_dim + feature_dim
        self.hidden = []
        for i in range(cfg.deform_depth):
            self.hidden.append(Linear(in_dim if i == 0 else cfg.deform_width, cfg.deform_width,
                                      rng, f"{prefix}.l{i}"))
        self.out = Linear(cfg.deform_width, 3, rng, f"{prefix}.out", zero=True)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.hidden + [self.out]:
            out.update(layer.parameters())
        return out

    def __call__(self, x, psi, feature) -> Tensor:
        x = T.as_tensor(x)
        n = x.shape[0]
        psi = np.broadcast_to(np.asarray(psi, dtype=float), (n, self.expression_dim))
        feature = T.as_tensor(feature)
        if feature.shape != (n, self.feature_dim):
            raise ContractError(f"deformation feature must be ({n}, {self.feature_dim}), got {feature.shape}")
        h = T.concat([encode(x, self.cfg.deform_freqs), T.Tensor(np.ascontiguousarray(psi)), feature], axis=1)
        for layer in self.hidden:
            h = T.relu(layer(h))
        return self.out(h)


class RadianceField:
    """Canonical ``(x, d, omega) -> (rgb, sigma)``.

    The density head's last layer starts at zero so an untrained field is
    empty space. Its rectifier is ``maximum(., 0)``, whose gradient passes at
    the tie, otherwise the all-zero start would never receive a gradient.
    """

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator, prefix: str):
        self.cfg = cfg
        enc = encoded_size(3, cfg.pos_freqs)
        self.trunk = []
        for i in range(cfg.trunk_depth):
            fan_in = enc if i == 0 else cfg.trunk_width
            if i == cfg.skip_layer and i > 0:
                fan_in += enc
            self.trunk.append(Linear(fan_in, cfg.trunk_width, rng, f"{prefix}.trunk{i}"))
        self.density = Linear(cfg.trunk_width, 1, rng, f"{prefix}.sigma", zero=True)
        color_in = cfg.trunk_width + encoded_size(3, cfg.dir_freqs) + cfg.appearance_dim
        self.color_hidden = Linear(color_in, cfg.color_width, rng, f"{prefix}.rgb0")
        self.color_out = Linear(cfg.color_width, 3, rng, f"{prefix}.rgb1")

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.trunk + [self.density, self.color_hidden, self.color_out]:
            out.update(layer.parameters())
        return out

    def _features(self, x) -> Tensor:
        enc = encode(x, self.cfg.pos_freqs)
        h = enc
        for i, layer in enumerate(self.trunk):
            if i == self.cfg.skip_layer and i > 0:
                h = T.concat([h, enc], axis=1)
            h = T.relu(layer(h))
        return h

    def _sigma(self, h: Tensor) -> Tensor:
        return T.reshape(T.maximum(self.density(h), 0.0), (-1,))

    def sigma(self, x) -> Tensor:
        return self._sigma(self._features(x))

    def __call__(self, x, d, omega) -> tuple[Tensor, Tensor]:
        h = self._features(x)
        sigma = self._sigma(h)
        d = np.asarray(d, dtype=float)
        if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-6):
            raise ContractError("view directions must be unit length")
        omega = T.as_tensor(omega)
        if omega.shape != (h.shape[0], self.cfg.appearance_dim):
            raise ContractError(f"appearance code must be ({h.shape[0]}, {self.cfg.appearance_dim})")
        c = T.concat([h, encode(T.Tensor(d), self.cfg.dir_freqs), omega], axis=1)
        rgb = T.sigmoid(self.color_out(T.relu(self.color_hidden(c))))
        return rgb, sigma


class AppearanceCodes:
    """Per-training-frame codes; unseen frames use the mean (or zero) code."""

    def __init__(self, num_frames: int, dim: int, rng: np.random.Generator,
                 test_mode: str = "mean"):
        if test_mode not in ("mean", "zero"):
            raise ContractError("test_mode must be 'mean' or 'zero'")
        self.codes = T.parameter(rng.normal(0.0, 0.01, (num_frames, dim)), name="appearance")
        self.test_mode = test_mode

    @property
    def num_frames(self) -> int:
        return self.codes.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"appearance": self.codes}

    def __call__(self, frame_index: int | None, mode: str = "train") -> Tensor:
        if mode == "train":
            if frame_index is None or not 0 <= frame_index < self.num_frames:
                raise ContractError(f"training frame index {frame_index} out of range [0, {self.num_frames})")
            return self.codes[frame_index]
        if mode != "test":
            raise ContractError(f"unknown appearance mode {mode!r}")
        if self.test_mode == "zero":
            return T.Tensor(np.zeros(self.codes.shape[1]))
        return T.Tensor(self.codes.data.mean(axis=0))
