"""Fast closed-form and oracle checks run by ``headnerf selftest``.

Every check looks up the functions it exercises through their module at call
time, so a patched implementation is what gets tested.
"""

from __future__ import annotations

import itertools
import math
import time
import traceback
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import head as H
from . import losses as L
from . import metrics as M
from . import render as R
from . import tensor as T
from . import volume as V


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""


def _close(a, b, tol: float, what: str) -> None:
    err = float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))
    if not err <= tol:
        raise AssertionError(f"{what}: error {err:.3g} > {tol:g}")


def _fd_rel_error(build: Callable[[list], T.Tensor], arrays: list[np.ndarray], step: float = 1e-5) -> float:
    leaves = [T.parameter(a.copy()) for a in arrays]
    T.backward(build(leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        xs = [a.copy() for a in arrays]
        numeric = np.zeros_like(xs[i])
        for idx in np.ndindex(xs[i].shape):
            orig = xs[i][idx]
            vals = []
            for h in (step, -step):
                xs[i][idx] = orig + h
                with T.no_grad():
                    vals.append(float(build([T.Tensor(x) for x in xs]).data))
            xs[i][idx] = orig
            numeric[idx] = (vals[0] - vals[1]) / (2 * step)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


# -- compositing --------------------------------------------------------------------------


def _one_ray(sigma, rgb, delta):
    k = len(sigma)
    return R.composite(np.reshape(sigma, (1, k)), np.reshape(rgb, (1, k, 3)), np.reshape(delta, (1, k)),
                       background=(1.0, 1.0, 1.0))


def check_composite_empty():
    out = _one_ray([0.0, 0.0, 0.0], np.full((3, 3), 0.2), [0.1, 0.1, 1e10])
    _close(out.rgb.data, [[1, 1, 1]], 1e-10, "empty ray shows background")
    _close(out.acc.data, [0.0], 1e-10, "empty ray alpha")


def check_composite_opaque():
    rgb = np.array([[0.9, 0.1, 0.2], [0.0, 1.0, 0.0]])
    out = _one_ray([1e6, 0.0], rgb, [0.1, 1e10])
    _close(out.rgb.data, rgb[:1], 1e-10, "opaque first sample")
    _close(out.acc.data, [1.0], 1e-10, "opaque alpha")


def check_composite_half_split():
    sigma = math.log(2.0) / 0.1
    rgb = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    out = _one_ray([sigma, 1e6], rgb, [0.1, 0.1])
    _close(out.weights.data, [[0.5, 0.5]], 1e-10, "50/50 weights")
    _close(out.rgb.data, [[0.5, 0.0, 0.5]], 1e-10, "50/50 colour")


def check_composite_loop_oracle():
    rng = np.random.default_rng(0)
    n, k = 6, 9
    sigma = rng.exponential(2.0, (n, k))
    rgb = rng.random((n, k, 3))
    delta = rng.uniform(0.01, 0.3, (n, k))
    out = R.composite(sigma, rgb, delta)
    for i in range(n):
        trans, colour = 1.0, np.zeros(3)
        for j in range(k):
            a = 1 - math.exp(-sigma[i, j] * delta[i, j])
            colour += trans * a * rgb[i, j]
            trans *= 1 - a
        colour += trans * np.ones(3)
        _close(out.rgb.data[i], colour, 1e-12, f"ray {i} vs loop")


def check_composite_gradient():
    rng = np.random.default_rng(1)
    delta = rng.uniform(0.05, 0.2, (2, 4))
    w = rng.normal(size=(2, 3))

    def build(xs):
        out = R.composite(T.exp(xs[0]), T.sigmoid(xs[1]), delta)
        return T.tsum(T.mul(out.rgb, w))

    err = _fd_rel_error(build, [rng.normal(size=(2, 4)), rng.normal(size=(2, 4, 3))])
    if not err < 1e-4:
        raise AssertionError(f"composite gradient rel. error {err:.3g}")


# -- objectives ---------------------------------------------------------------------------


def check_hard_surface_closed_form():
    vals = L.bimodal_penalty(np.array([0.0, 0.5, 1.0])).data
    _close(vals, [-math.log(1 + math.exp(-1)), 0.5 - math.log(2), -math.log(1 + math.exp(-1))],
           1e-9, "bimodal penalty at 0, 0.5, 1")
    if not vals[1] > vals[0]:
        raise AssertionError("penalty should peak at 0.5")


def check_primitive_gradients():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.2, 0.8, (3, 4))
    m = rng.normal(size=(4, 2))
    cases = {
        "sigmoid/log": lambda xs: T.tsum(T.log(T.sigmoid(xs[0]))),
        "matmul/sin": lambda xs: T.tsum(T.sin(T.matmul(xs[0], xs[1]))),
        "cumsum/exp": lambda xs: T.tsum(T.mul(T.exp(T.neg(T.cumsum(xs[0], axis=1))), x)),
        "sqrt/square": lambda xs: T.mean(T.sqrt(T.add(T.square(xs[0]), 1.0))),
    }
    for name, build in cases.items():
        err = _fd_rel_error(build, [x, m])
        if not err < 1e-4:
            raise AssertionError(f"{name}: rel. error {err:.3g}")


# -- motion volume ------------------------------------------------------------------------


def check_trilinear_linear_field():
    rng = np.random.default_rng(3)
    coords = np.array(list(itertools.product(range(6), repeat=3)))
    layout = V.VoxelLayout(np.array([-0.3, -0.3, -0.3]), 0.1, (6, 6, 6), coords)
    a, c = rng.normal(size=(3, 2)), rng.normal(size=2)
    centres = layout.origin + (coords + 0.5) * layout.voxel_size
    grid = V.VoxelGrid(layout, T.Tensor(centres @ a + c))
    x = rng.uniform(-0.25 + 1e-9, 0.25 - 1e-9, (50, 3))
    _close(V.query(grid, x).data, x @ a + c, 1e-12, "linear field reproduction")


def check_diffuse_dense_oracle():
    rng = np.random.default_rng(4)
    occ = rng.random((8, 8, 8)) < 0.4
    coords = np.argwhere(occ)
    layout = V.VoxelLayout(np.zeros(3), 0.1, (8, 8, 8), coords)
    feats = rng.normal(size=(len(coords), 3))
    net = V.SparseConvNet(3, 4, 2, rng)
    net.b2.data[...] = rng.normal(size=2)
    out = V.diffuse(V.VoxelGrid(layout, T.Tensor(feats)), net).features.data

    def dense(vol, w, b, fin):
        padded = np.pad(vol, ((1, 1), (1, 1), (1, 1), (0, 0)))
        res = np.zeros(vol.shape[:3] + (w.shape[1],))
        for tap, (dx, dy, dz) in enumerate(itertools.product((-1, 0, 1), repeat=3)):
            res += padded[1 + dx:9 + dx, 1 + dy:9 + dy, 1 + dz:9 + dz] @ w[tap * fin:(tap + 1) * fin]
        return (res + (0 if b is None else b)) * occ[..., None]

    vol = np.zeros((8, 8, 8, 3))
    vol[tuple(coords.T)] = feats
    hidden = np.maximum(dense(vol, net.w1.data, None, 3), 0)
    ref = dense(hidden, net.w2.data, net.b2.data, 4)[tuple(coords.T)]
    _close(out, ref, 1e-10, "sparse vs dense convolution")


# -- head model ---------------------------------------------------------------------------


def check_head_displacement():
    head = H.generate_synthetic_head(seed=0, level=1)
    rng = np.random.default_rng(5)
    b1, b2 = rng.normal(size=(2, head.identity_dim))
    p, q = rng.uniform(-1, 1, (2, head.expression_dim))
    _close(head.displacement(b1, np.zeros(head.expression_dim)), 0.0, 1e-10, "zero at canonical")
    _close(head.displacement(b1, 2 * p - 3 * q),
           2 * head.displacement(b1, p) - 3 * head.displacement(b1, q), 1e-10, "linearity")
    _close(head.displacement(b1, p), head.displacement(b2, p), 1e-10, "identity independence")


# -- metrics ------------------------------------------------------------------------------


def check_psnr_closed_form():
    got = M.psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1))
    _close(got, 20.0, 1e-12, "PSNR at MSE 0.01")
    if M.psnr(np.ones((2, 2, 3)), np.ones((2, 2, 3))) != math.inf:
        raise AssertionError("PSNR of identical images should be +inf")


def check_ssim_identity():
    img = np.random.default_rng(6).random((16, 16, 3))
    _close(M.ssim(img, img), 1.0, 1e-12, "SSIM of identical images")


CHECKS: dict[str, Callable[[], None]] = {
    "composite: empty ray": check_composite_empty,
    "composite: opaque first sample": check_composite_opaque,
    "composite: 50/50 split": check_composite_half_split,
    "composite: per-ray loop oracle": check_composite_loop_oracle,
    "composite: gradient": check_composite_gradient,
    "hard-surface penalty closed forms": check_hard_surface_closed_form,
    "primitive gradients": check_primitive_gradients,
    "trilinear: linear field exact": check_trilinear_linear_field,
    "diffuse: dense convolution oracle": check_diffuse_dense_oracle,
    "head: displacement properties": check_head_displacement,
    "PSNR closed form": check_psnr_closed_form,
    "SSIM identity": check_ssim_identity,
}


def run_checks(checks: dict[str, Callable[[], None]] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in (checks or CHECKS).items():
        t0 = time.perf_counter()
        try:
            fn()
            results.append(CheckResult(name, True, time.perf_counter() - t0))
        except Exception as exc:  # a crash is a failed check, not a crashed report
            detail = str(exc) or traceback.format_exception_only(type(exc), exc)[-1].strip()
            results.append(CheckResult(name, False, time.perf_counter() - t0, detail))
    return results
