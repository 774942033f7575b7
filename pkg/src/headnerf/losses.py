"""Training objectives: photometric, hard-surface, canonical-edge and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .render import composite
from .tensor import ContractError, NonFiniteError, Tensor

# value of the bimodal penalty at 0 and 1
PENALTY_AT_ENDS = -math.log(1.0 + math.exp(-1.0))
PENALTY_AT_HALF = 0.5 - math.log(2.0)


@dataclass(frozen=True)
class LossWeights:
    hard: float = 0.01
    edge: float = 0.01

    def __post_init__(self):
        for name, v in (("hard", self.hard), ("edge", self.edge)):
            if not (math.isfinite(v) and v >= 0):
                raise ContractError(f"loss weight {name} must be finite and >= 0, got {v}")


def photometric(rgb_coarse, rgb_fine, target) -> Tensor:
    """Batch mean of ``|c_coarse - C|^2 + |c_fine - C|^2``."""
    rgb_coarse, rgb_fine = T.as_tensor(rgb_coarse), T.as_tensor(rgb_fine)
    target = np.asarray(target, dtype=float)
    if rgb_coarse.shape != target.shape or rgb_fine.shape != target.shape or target.ndim != 2:
        raise ContractError(f"photometric: shapes {rgb_coarse.shape}, {rgb_fine.shape}, {target.shape}")
    per_ray = T.add(T.tsum(T.square(T.sub(rgb_coarse, target)), axis=1),
                    T.tsum(T.square(T.sub(rgb_fine, target)), axis=1))
    return T.mean(per_ray)


def bimodal_penalty(w) -> Tensor:
    """Elementwise ``-log(exp(-|w|) + exp(-|1 - w|))``; lowest at 0 and 1, highest at 0.5."""
    w = T.as_tensor(w)
    return T.neg(T.log(T.add(T.exp(T.neg(T.tabs(w))), T.exp(T.neg(T.tabs(T.sub(1.0, w)))))))


def hard_surface(acc, tol: float = 1e-9) -> Tensor:
    """Mean bimodal penalty of per-ray accumulated alpha."""
    acc = T.as_tensor(acc)
    if acc.size == 0:
        raise ContractError("hard_surface: empty ray batch")
    if np.any(acc.data < -tol) or np.any(acc.data > 1 + tol):
        raise ContractError("hard_surface: accumulated alpha outside [0, 1]")
    return T.mean(bimodal_penalty(acc))


def probe_rays(num: int, radius: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chords of the bounding sphere: start on the surface, head to a uniform interior point.

    Returns origins (P, 3), unit directions (P, 3) and chord lengths (P,).
    """
    if num < 1:
        raise ContractError("need at least one probe ray")
    start = rng.normal(size=(num, 3))
    start = radius * start / np.linalg.norm(start, axis=1, keepdims=True)
    inner = rng.normal(size=(num, 3))
    inner /= np.linalg.norm(inner, axis=1, keepdims=True)
    inner *= radius * rng.random((num, 1)) ** (1.0 / 3.0)
    d = inner - start
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # start lies on the sphere, so the exit is at distance -2 (o . d)
    length = np.maximum(-2.0 * np.einsum("ij,ij->i", start, d), 1e-9)
    return start, d, length


def canonical_alpha(density_fn: Callable[[np.ndarray], Tensor], origins, dirs, lengths,
                    num_samples: int = 64) -> Tensor:
    """Accumulated alpha along finite chords through the canonical volume (midpoint samples)."""
    p = len(origins)
    frac = (np.arange(num_samples) + 0.5) / num_samples
    depths = lengths[:, None] * frac[None, :]
    delta = np.broadcast_to(lengths[:, None] / num_samples, (p, num_samples)).copy()
    pts = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    sigma = T.reshape(density_fn(pts.reshape(-1, 3)), (p, num_samples))
    dummy_rgb = T.Tensor(np.zeros((p, num_samples, 3)))
    return composite(sigma, dummy_rgb, delta).acc


def canonical_edge(density_fn: Callable[[np.ndarray], Tensor], num_probe_rays: int,
                   seed_or_rng, radius: float, num_samples: int = 64) -> Tensor:
    """Mean bimodal penalty of accumulated alpha on random straight canonical-space chords."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    o, d, length = probe_rays(num_probe_rays, radius, rng)
    return T.mean(bimodal_penalty(canonical_alpha(density_fn, o, d, length, num_samples)))


def total(components: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """``photometric + hard * L_hard + edge * L_edge``; missing regularisers count as 0."""
    for name, value in components.items():
        if not np.all(np.isfinite(T.as_tensor(value).data)):
            raise NonFiniteError(f"loss component {name!r} is not finite")
    out = T.as_tensor(components["photometric"])
    if "hard" in components and weights.hard:
        out = T.add(out, T.mul(components["hard"], weights.hard))
    if "edge" in components and weights.edge:
        out = T.add(out, T.mul(components["edge"], weights.edge))
    return out
