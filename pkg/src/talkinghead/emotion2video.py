"""Landmark-conditioned volume rendering of head and torso.

Both fields are small MLPs over positional encodings. The head field works
in head-canonical coordinates (rays are moved by the inverse head pose); the
torso field works in world coordinates and is conditioned on the rendered
head colour, the constant canonical direction, the flattened pose and the
landmarks. A pixel is ``C_head + T_res * C_torso`` where ``T_res`` is the
transmittance left after the head ray.

Quadrature: the interval ``[near, far]`` is cut into ``N`` equal bins, one
sample per bin (bin midpoint, or uniform in the bin when an RNG is given),
``delta_i`` is the bin width and

    C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_N * background
    T_i = exp(-sum_{j<i} sigma_j delta_j)
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .data import N_POINTS, face_template
from .numerics import (
    MlpParams,
    OptimizerState,
    ShapeError,
    check_finite_loss,
    mlp_backward,
    mlp_forward,
    training_step,
    relu,
    sigmoid,
    softplus,
)

log = logging.getLogger(__name__)

LM_DIM = N_POINTS * 3
CANONICAL_DIR = np.array([0.0, 0.0, -1.0])
FIELD_ACTIVATIONS = ["relu", "relu", "identity"]


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera looking down -z from ``origin``."""

    width: int = 32
    height: int = 32
    focal: float = 32.0
    origin: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 2.6]))
    near: float = 1.4
    far: float = 3.8

    def __post_init__(self) -> None:
        if not self.near < self.far:
            raise ValueError("camera near bound must be below far bound")

    @classmethod
    def square(cls, resolution: int) -> "Camera":
        return cls(resolution, resolution, float(resolution))

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions, ``(H*W, 3)`` each, row-major pixels."""
        j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d = np.stack([(j + 0.5 - self.width / 2) / self.focal,
                      -(i + 0.5 - self.height / 2) / self.focal,
                      -np.ones_like(j, dtype=float)], axis=-1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.origin, d.shape).copy()
        return o, d


def positional_encoding(x: np.ndarray, octaves: int) -> np.ndarray:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for ``k < octaves``."""
    x = np.asarray(x)
    parts = [x]
    if octaves:
        sn, cs = np.sin(np.pi * x), np.cos(np.pi * x)
        parts += [sn, cs]
        for _ in range(1, octaves):
            # double-angle recurrence; two multiplies instead of two transcendentals
            sn, cs = 2 * sn * cs, 1 - 2 * sn * sn
            parts += [sn, cs]
    return np.concatenate(parts, axis=-1)


def _encoded_dim(octaves: int) -> int:
    return 3 * (1 + 2 * octaves)


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------


class Field(Protocol):
    def summarize(self, landmarks: np.ndarray) -> np.ndarray: ...

    def evaluate(self, pts: np.ndarray, dirs: np.ndarray, summary: np.ndarray,
                 extra: np.ndarray | None = None): ...


@dataclass
class FieldParams:
    """MLP radiance field. ``kind`` is ``"head"`` or ``"torso"``.

    Head input per sample: ``PE(x), PE(d), s``. Torso input: ``PE(x), C_head,
    PE(d0), P, s``. ``s`` is a linear projection of the landmarks centered on
    the face template.
    """

    kind: str
    mlp: MlpParams
    lm_weight: np.ndarray  # (204, S)
    lm_bias: np.ndarray
    template: np.ndarray
    x_octaves: int = 6
    d_octaves: int = 2

    EXTRA_DIM = {"head": 0, "torso": 3 + 12}

    @property
    def summary_dim(self) -> int:
        return self.lm_weight.shape[1]

    @classmethod
    def input_dim(cls, kind: str, summary_dim: int, x_octaves: int, d_octaves: int) -> int:
        return (_encoded_dim(x_octaves) + _encoded_dim(d_octaves) + summary_dim
                + cls.EXTRA_DIM[kind])

    @classmethod
    def init(cls, kind: str, rng: np.random.Generator, hidden: int = 64, summary_dim: int = 32,
             x_octaves: int = 6, d_octaves: int = 2, dtype=np.float32) -> "FieldParams":
        if kind not in cls.EXTRA_DIM:
            raise ValueError(f"unknown field kind {kind!r}")
        d_in = cls.input_dim(kind, summary_dim, x_octaves, d_octaves)
        mlp = MlpParams.init([d_in, hidden, hidden, 4], FIELD_ACTIVATIONS, rng, dtype)
        mlp.weights[-1] *= 0.1
        lm_w = (rng.standard_normal((LM_DIM, summary_dim)) * 0.3).astype(dtype)
        return cls(kind, mlp, lm_w, np.zeros(summary_dim, dtype), face_template().astype(dtype),
                   x_octaves, d_octaves)

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {**self.mlp.named(f"{prefix}.mlp"), f"{prefix}.lm.weight": self.lm_weight,
                f"{prefix}.lm.bias": self.lm_bias}

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        meta = np.array([self.x_octaves, self.d_octaves], dtype=np.float32)
        return {**self.named(prefix), f"{prefix}.template": self.template, f"{prefix}.octaves": meta}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray], prefix: str, kind: str) -> "FieldParams":
        xo, do = (int(v) for v in t[f"{prefix}.octaves"])
        return cls(kind, MlpParams.from_named(t, f"{prefix}.mlp", FIELD_ACTIVATIONS),
                   t[f"{prefix}.lm.weight"], t[f"{prefix}.lm.bias"], t[f"{prefix}.template"], xo, do)

    def astype(self, dtype) -> "FieldParams":
        return FieldParams.from_tensors({k: v.astype(dtype) for k, v in self.tensors("f").items()},
                                        "f", self.kind)

    # --- landmark summary ---------------------------------------------------

    def summarize(self, landmarks: np.ndarray) -> np.ndarray:
        lm = np.asarray(landmarks)
        flat = (lm - self.template).reshape(lm.shape[:-2] + (LM_DIM,))
        return flat @ self.lm_weight + self.lm_bias

    def summarize_backward(self, landmarks: np.ndarray, g_summary: np.ndarray):
        lm = np.asarray(landmarks)
        flat = (lm - self.template).reshape(-1, LM_DIM)
        gs = g_summary.reshape(-1, self.summary_dim)
        return flat.T @ gs, gs.sum(0)

    # --- evaluation ---------------------------------------------------------

    def _ray_features(self, dirs, summary, extra):
        """Inputs that are constant along a ray, ``(R, D_ray)``."""
        r = summary.shape[0]
        dt = self.mlp.weights[0].dtype
        if self.kind == "head":
            parts = [positional_encoding(dirs, self.d_octaves)]
        else:
            if extra is None or extra.shape[-1] != 15:
                raise ShapeError("torso field needs per-ray extra = (C_head, pose) of width 15")
            d0 = positional_encoding(CANONICAL_DIR, self.d_octaves)
            parts = [extra[:, :3], np.broadcast_to(d0, (r, d0.size)), extra[:, 3:]]
        parts.append(summary)
        return np.concatenate([np.asarray(p, dtype=dt) for p in parts], axis=-1)

    def evaluate(self, pts, dirs, summary, extra=None, return_cache: bool = False):
        """``pts`` ``(R, N, 3)``, ``dirs`` ``(R, 3)``, ``summary`` ``(R, S)``.

        Returns ``rgb (R, N, 3)`` and ``sigma (R, N)``. The first layer is
        split: position encodings vary per sample, everything else per ray.
        """
        dt = self.mlp.weights[0].dtype
        r, n = pts.shape[:2]
        pe = positional_encoding(pts.astype(dt), self.x_octaves).reshape(r * n, -1)
        feats = self._ray_features(dirs, summary, extra)
        w0, b0 = self.mlp.weights[0], self.mlp.biases[0]
        k = pe.shape[1]
        if k + feats.shape[1] != w0.shape[0]:
            raise ShapeError(f"field input width {k + feats.shape[1]} != {w0.shape[0]}")
        z0 = (pe @ w0[:k]).reshape(r, n, -1) + (feats @ w0[k:] + b0)[:, None, :]
        h0 = relu(z0).reshape(r * n, -1)
        rest = MlpParams(self.mlp.weights[1:], self.mlp.biases[1:], self.mlp.activations[1:])
        out, cache = mlp_forward(rest, h0, return_cache=True)
        out = out.reshape(r, n, 4)
        rgb = sigmoid(out[..., :3])
        sigma = softplus(out[..., 3])
        if return_cache:
            return rgb, sigma, (pe, feats, z0, h0, rest, cache, out)
        return rgb, sigma

    def evaluate_backward(self, fcache, rgb, g_rgb, g_sigma):
        """Returns ``(mlp grads, g_summary (R, S), g_extra (R, E) | None)``."""
        pe, feats, z0, h0, rest, cache, out = fcache
        r, n = z0.shape[:2]
        g_out = np.concatenate([g_rgb * rgb * (1 - rgb),
                                (g_sigma * sigmoid(out[..., 3]))[..., None]], axis=-1)
        g_rest, g_h0 = mlp_backward(rest, h0, g_out.reshape(r * n, 4), cache)
        gz0 = g_h0.reshape(z0.shape) * (z0 > 0)
        k = pe.shape[1]
        w0 = self.mlp.weights[0]
        g_ray = gz0.sum(axis=1)
        g_w0 = np.concatenate([pe.T @ gz0.reshape(r * n, -1), feats.T @ g_ray], axis=0)
        g_mlp = MlpParams([g_w0, *g_rest.weights], [g_ray.sum(0), *g_rest.biases],
                          list(self.mlp.activations))
        g_feats = g_ray @ w0[k:].T
        s = self.summary_dim
        g_summary = g_feats[:, -s:]
        g_extra = None
        if self.kind == "torso":
            off = 3 + _encoded_dim(self.d_octaves)
            g_extra = np.concatenate([g_feats[:, :3], g_feats[:, off:off + 12]], axis=-1)
        return g_mlp, g_summary, g_extra


def field_eval(params: FieldParams, x, d, landmark_summary, extra=None):
    """Colour and density at single points ``x`` ``(3,)`` or ``(M, 3)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-6):
        raise ValueError("direction must be unit length")
    d = np.broadcast_to(d, x.shape)
    s = np.broadcast_to(np.atleast_2d(landmark_summary), (x.shape[0], params.summary_dim))
    ex = None if extra is None else np.broadcast_to(np.atleast_2d(extra), (x.shape[0], 15))
    rgb, sigma = params.evaluate(x[:, None], d, s, ex)
    return rgb[:, 0].squeeze(), sigma[:, 0].squeeze()


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


def transmittance(sigmas: np.ndarray, t_samples: np.ndarray) -> np.ndarray:
    """``T`` at each sample: ``exp(-sum_{j<i} sigma_j (t_{j+1} - t_j))``, ``T_0 = 1``."""
    sigmas = np.asarray(sigmas, dtype=float)
    t = np.asarray(t_samples, dtype=float)
    if t.shape != sigmas.shape[-t.ndim:] and t.shape != sigmas.shape:
        raise ShapeError("t_samples must match sigma samples")
    if np.any(np.diff(t, axis=-1) <= 0):
        raise ValueError("t_samples must be strictly increasing")
    tau = sigmas[..., :-1] * np.diff(t, axis=-1)
    acc = np.concatenate([np.zeros(sigmas.shape[:-1] + (1,)), np.cumsum(tau, axis=-1)], axis=-1)
    return np.exp(-acc)


def sample_depths(n_rays: int, near, far, n_samples: int,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample depths ``(R, N)`` and bin widths ``(R, N)``."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.broadcast_to(np.asarray(near, dtype=float), (n_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=float), (n_rays,))
    if np.any(far <= near):
        raise ValueError("degenerate ray: far bound must exceed near bound")
    width = (far - near) / n_samples
    offs = np.full((n_rays, n_samples), 0.5) if rng is None else rng.random((n_rays, n_samples))
    t = near[:, None] + (np.arange(n_samples)[None] + offs) * width[:, None]
    return t, np.broadcast_to(width[:, None], t.shape).copy()


@dataclass
class RenderCache:
    t: np.ndarray
    delta: np.ndarray
    rgb: np.ndarray
    sigma: np.ndarray
    trans: np.ndarray  # (R, N+1); last column is the residual transmittance
    weights: np.ndarray
    background: np.ndarray
    field_cache: object = None


def composite(rgb: np.ndarray, sigma: np.ndarray, delta: np.ndarray, background=0.0):
    """Discrete volume rendering. Returns ``(C (R, 3), T (R, N+1), weights (R, N))``."""
    tau = sigma * delta
    acc = np.concatenate([np.zeros(tau.shape[:-1] + (1,), tau.dtype), np.cumsum(tau, axis=-1)], -1)
    trans = np.exp(-acc)
    weights = trans[..., :-1] * (1.0 - np.exp(-tau))
    bg = np.broadcast_to(np.asarray(background, dtype=rgb.dtype), (3,))
    color = (weights[..., None] * rgb).sum(axis=-2) + trans[..., -1:] * bg
    return color, trans, weights


def composite_backward(cache: RenderCache, g_color: np.ndarray, g_tres: np.ndarray | None = None):
    """Gradients w.r.t. per-sample ``rgb`` and ``sigma``."""
    trans, w, rgb = cache.trans, cache.weights, cache.rgb
    g_rgb = g_color[:, None, :] * w[..., None]
    gc = (g_color[:, None, :] * rgb).sum(-1)  # g . c_i
    wgc = w * gc
    later = np.cumsum(wgc[:, ::-1], axis=-1)[:, ::-1] - wgc  # sum_{i>k} w_i g.c_i
    t_res = trans[:, -1]
    g_tau = trans[:, 1:] * gc - later - (t_res * (g_color @ cache.background))[:, None]
    if g_tres is not None:
        g_tau = g_tau - (g_tres * t_res)[:, None]
    return g_rgb, g_tau * cache.delta


def render_rays(fld, origins: np.ndarray, dirs: np.ndarray, summary: np.ndarray, near, far,
                n_samples: int, rng: np.random.Generator | None = None, background=0.0,
                extra: np.ndarray | None = None, return_cache: bool = False):
    """Render ``R`` rays through ``fld``. Returns ``(C (R, 3), T_res (R,))``."""
    origins = np.asarray(origins)
    dirs = np.asarray(dirs)
    r = origins.shape[0]
    t, delta = sample_depths(r, near, far, n_samples, rng)
    dt = origins.dtype if origins.dtype == np.float64 else np.float32
    pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).astype(dt)
    summary = np.broadcast_to(np.atleast_2d(summary), (r, np.atleast_2d(summary).shape[-1]))
    fcache = None
    if isinstance(fld, FieldParams):
        rgb, sigma, fcache = fld.evaluate(pts, dirs.astype(dt), summary, extra, return_cache=True)
    else:
        rgb, sigma = fld.evaluate(pts, dirs, summary, extra)
    delta = delta.astype(sigma.dtype)
    color, trans, weights = composite(rgb, sigma, delta, background)
    if return_cache:
        bg = np.broadcast_to(np.asarray(background, dtype=rgb.dtype), (3,)).copy()
        return color, trans[:, -1], RenderCache(t, delta, rgb, sigma, trans, weights, bg, fcache)
    return color, trans[:, -1]


def render_rays_backward(fld: FieldParams, cache: RenderCache, g_color, g_tres=None):
    g_rgb, g_sigma = composite_backward(cache, g_color, g_tres)
    return fld.evaluate_backward(cache.field_cache, cache.rgb, g_rgb, g_sigma)


def render_ray(fld, origin, direction, landmark_summary, n_samples: int, near: float,
               far: float, rng: np.random.Generator | None = None, background=0.0):
    """Single-ray convenience wrapper; returns the pixel colour ``(3,)``."""
    color, _ = render_rays(fld, np.asarray(origin, float)[None], np.asarray(direction, float)[None],
                           landmark_summary, near, far, n_samples, rng, background)
    return color[0]


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


def pose_rays(pose: np.ndarray, origins: np.ndarray, dirs: np.ndarray):
    """World rays expressed in head coordinates: ``x_head = R^T (x - t)``."""
    m = np.asarray(pose, dtype=float).reshape(3, 4)
    rot, tr = m[:, :3], m[:, 3]
    return (origins - tr) @ rot, dirs @ rot


@dataclass
class NerfModel:
    head: FieldParams
    torso: FieldParams

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.head.tensors("head"), **self.torso.tensors("torso")}

    def trainable(self) -> dict[str, np.ndarray]:
        return {**self.head.named("head"), **self.torso.named("torso")}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "NerfModel":
        return cls(FieldParams.from_tensors(t, "head", "head"),
                   FieldParams.from_tensors(t, "torso", "torso"))

    def astype(self, dtype) -> "NerfModel":
        return NerfModel.from_tensors({k: v.astype(dtype) for k, v in self.tensors().items()})


def render_pixels(head, torso, origins, dirs, landmarks, pose, camera: Camera, n_samples: int,
                  rng=None, return_parts: bool = False):
    """Head pass in head coordinates, torso pass in world coordinates, composited."""
    h_o, h_d = pose_rays(pose, origins, dirs)
    s_head = head.summarize(landmarks[None])[0]
    c_head, t_res = render_rays(head, h_o, h_d, s_head, camera.near, camera.far, n_samples, rng)
    extra = np.concatenate([c_head, np.broadcast_to(np.asarray(pose).ravel(), (len(origins), 12))],
                           axis=-1)
    s_torso = torso.summarize(landmarks[None])[0]
    c_torso, _ = render_rays(torso, origins, dirs, s_torso, camera.near, camera.far, n_samples,
                             rng, extra=extra)
    out = c_head + t_res[:, None] * c_torso
    if return_parts:
        return out, c_head, t_res, c_torso
    return out


def render_frame(head, torso, camera: Camera, landmarks: np.ndarray, pose: np.ndarray,
                 n_samples: int = 128, seed: int | None = None, chunk: int = 2048) -> np.ndarray:
    """``(H, W, 3)`` image. Stratified sampling when ``seed`` is given, midpoints otherwise."""
    origins, dirs = camera.rays()
    rng = None if seed is None else np.random.default_rng(seed)
    out = np.zeros((origins.shape[0], 3), dtype=np.float32)
    for s in range(0, origins.shape[0], chunk):
        out[s:s + chunk] = render_pixels(head, torso, origins[s:s + chunk], dirs[s:s + chunk],
                                         np.asarray(landmarks), pose, camera, n_samples, rng)
    return out.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# Procedural ground-truth scene
# ---------------------------------------------------------------------------


HEAD_CENTER = np.array([0.0, 0.05, 0.0])
HEAD_RADII = np.array([0.55, 0.72, 0.55])
TORSO_CENTER = np.array([0.0, -1.15, -0.2])
TORSO_RADII = np.array([0.8, 0.45, 0.45])
LIGHT = np.array([0.3, 0.4, 0.85]) / np.linalg.norm([0.3, 0.4, 0.85])


def _soft(x, width):
    return sigmoid(np.asarray(x / width, dtype=float))


def _ellipsoid(pts, center, radii, density, sharpness):
    q = pts - center
    r = np.linalg.norm(q / radii, axis=-1)
    sigma = density * _soft(1.0 - r, sharpness)
    normal = q / (radii ** 2)
    normal = normal / (np.linalg.norm(normal, axis=-1, keepdims=True) + 1e-9)
    shade = 0.55 + 0.45 * np.clip(normal @ LIGHT, 0.0, 1.0)
    return sigma, shade


@dataclass
class SceneHead:
    """Emissive ellipsoid head whose mouth and brows follow the landmarks.

    The summary vector is ``(mouth_y, mouth_half_height, mouth_half_width,
    smile_curvature, brow_y)`` in head coordinates.
    """

    density: float = 40.0
    sharpness: float = 0.03

    def summarize(self, landmarks: np.ndarray) -> np.ndarray:
        lm = np.asarray(landmarks, dtype=float)
        sx, sy = HEAD_RADII[0], HEAD_RADII[1]
        mouth_y = HEAD_CENTER[1] + sy * lm[..., 48:68, 1].mean(-1)
        opening = np.abs(lm[..., 62, 1] - lm[..., 66, 1])
        half_h = 0.5 * sy * opening + 0.02
        half_w = 0.5 * sx * np.abs(lm[..., 54, 0] - lm[..., 48, 0])
        corners = 0.5 * (lm[..., 48, 1] + lm[..., 54, 1])
        mids = 0.5 * (lm[..., 51, 1] + lm[..., 57, 1])
        curvature = sy * (corners - mids)
        brow_y = HEAD_CENTER[1] + sy * lm[..., 17:27, 1].mean(-1)
        return np.stack([mouth_y, half_h, half_w, curvature, brow_y], axis=-1)

    def evaluate(self, pts, dirs, summary, extra=None):
        pts = np.asarray(pts, dtype=float)
        sigma, shade = _ellipsoid(pts, HEAD_CENTER, HEAD_RADII, self.density, self.sharpness)
        s = np.asarray(summary, dtype=float)[:, None, :]
        mouth_y, half_h, half_w, curv, brow_y = (s[..., k] for k in range(5))
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        front = _soft(z - 0.1, 0.03)
        u = x / half_w
        v = (y - mouth_y - curv * u * u) / half_h
        mouth = front * _soft(1.0 - u * u - v * v, 0.15)
        brow = front * _soft(0.035 - np.abs(y - brow_y), 0.01) * _soft(0.17 - np.abs(np.abs(x) - 0.28), 0.02)
        eyes = front * _soft(0.065 - np.hypot(np.abs(x) - 0.22, y - 0.22), 0.01)
        skin = np.array([0.9, 0.7, 0.55])
        rgb = skin * shade[..., None]
        for mask, col in ((mouth, (0.45, 0.08, 0.1)), (brow, (0.3, 0.2, 0.1)),
                          (eyes, (0.1, 0.1, 0.15))):
            rgb = rgb * (1 - mask[..., None]) + mask[..., None] * np.asarray(col)
        return rgb, sigma


@dataclass
class SceneTorso:
    density: float = 40.0
    sharpness: float = 0.03

    def summarize(self, landmarks: np.ndarray) -> np.ndarray:
        return np.zeros(np.asarray(landmarks).shape[:-2] + (1,))

    def evaluate(self, pts, dirs, summary, extra=None):
        pts = np.asarray(pts, dtype=float)
        sigma, shade = _ellipsoid(pts, TORSO_CENTER, TORSO_RADII, self.density, self.sharpness)
        rgb = np.array([0.2, 0.3, 0.7]) * shade[..., None]
        return rgb, sigma


def render_ground_truth(camera: Camera, landmarks: np.ndarray, pose: np.ndarray,
                        n_samples: int = 128) -> np.ndarray:
    """Training target from the procedural scene, rendered by the same quadrature."""
    return render_frame(SceneHead(), SceneTorso(), camera, landmarks, pose, n_samples)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class NerfConfig:
    resolution: int = 32
    hidden: int = 64
    summary_dim: int = 32
    x_octaves: int = 6
    d_octaves: int = 2
    n_samples: int = 64
    n_samples_infer: int = 128
    steps: int = 700
    batch_rays: int = 1024
    lr: float = 5e-3
    lr_final: float = 3e-4


def nerf_loss_and_grads(model: NerfModel, camera: Camera, origins, dirs, frame_idx,
                        landmarks: np.ndarray, poses: np.ndarray, target: np.ndarray,
                        n_samples: int, rng: np.random.Generator | None = None,
                        need_grads: bool = True):
    """Mean over rays of the squared colour error, for rays drawn from several frames.

    ``frame_idx`` ``(R,)`` selects each ray's row of ``landmarks`` ``(F, 68, 3)`` and
    ``poses`` ``(F, 12)``; ``target`` is ``(R, 3)``.
    """
    head, torso = model.head, model.torso
    r = origins.shape[0]
    rot = poses.reshape(-1, 3, 4)[frame_idx]
    h_o = np.einsum("ri,rij->rj", origins - rot[:, :, 3], rot[:, :, :3])
    h_d = np.einsum("ri,rij->rj", dirs, rot[:, :, :3])
    s_head_f = head.summarize(landmarks)
    s_torso_f = torso.summarize(landmarks)
    c_head, t_res, ch = render_rays(head, h_o, h_d, s_head_f[frame_idx], camera.near, camera.far,
                                    n_samples, rng, return_cache=True)
    extra = np.concatenate([c_head, poses[frame_idx].astype(c_head.dtype)], axis=-1)
    c_torso, _, ct = render_rays(torso, origins, dirs, s_torso_f[frame_idx], camera.near,
                                 camera.far, n_samples, rng, extra=extra, return_cache=True)
    pred = c_head + t_res[:, None] * c_torso
    diff = pred - target
    loss = float((diff * diff).sum() / r)
    if not need_grads:
        return loss, None, pred
    g_pred = 2.0 * diff / r
    g_mlp_t, g_st, g_extra = render_rays_backward(torso, ct, t_res[:, None] * g_pred)
    g_c_head = g_pred + g_extra[:, :3]
    g_tres = (g_pred * c_torso).sum(-1)
    g_mlp_h, g_sh = render_rays_backward(head, ch, g_c_head, g_tres)[:2]
    grads = {**g_mlp_h.named("head.mlp"), **g_mlp_t.named("torso.mlp")}
    for prefix, fld, g_s in (("head", head, g_sh), ("torso", torso, g_st)):
        g_frames = np.zeros((landmarks.shape[0], fld.summary_dim), dtype=g_s.dtype)
        np.add.at(g_frames, frame_idx, g_s)
        gw, gb = fld.summarize_backward(landmarks, g_frames)
        grads[f"{prefix}.lm.weight"] = gw
        grads[f"{prefix}.lm.bias"] = gb
    return loss, grads, pred


@dataclass
class NerfFrame:
    image: np.ndarray  # (H, W, 3)
    landmarks: np.ndarray  # (68, 3)
    pose: np.ndarray  # (12,)


def train_nerf(frames: list[NerfFrame], config: NerfConfig | None = None, seed: int = 0,
               camera: Camera | None = None) -> tuple[NerfModel, list[float]]:
    """Fit head and torso fields jointly to the given frames."""
    cfg = config or NerfConfig()
    camera = camera or Camera.square(cfg.resolution)
    rng = np.random.default_rng(seed)
    model = NerfModel(
        FieldParams.init("head", rng, cfg.hidden, cfg.summary_dim, cfg.x_octaves, cfg.d_octaves),
        FieldParams.init("torso", rng, cfg.hidden, cfg.summary_dim, cfg.x_octaves, cfg.d_octaves))
    params = model.trainable()
    opt = OptimizerState("adam", cfg.lr)
    origins, dirs = camera.rays()
    n_pix = origins.shape[0]
    images = np.stack([f.image.reshape(-1, 3) for f in frames]).astype(np.float32)
    landmarks = np.stack([f.landmarks for f in frames]).astype(np.float32)
    poses = np.stack([np.asarray(f.pose).ravel() for f in frames]).astype(np.float32)
    curve = []
    decay = cfg.lr_final / cfg.lr
    for step in range(cfg.steps):
        fi = rng.integers(0, len(frames), cfg.batch_rays)
        pi = rng.integers(0, n_pix, cfg.batch_rays)
        loss, grads, _ = nerf_loss_and_grads(model, camera, origins[pi], dirs[pi], fi, landmarks,
                                             poses, images[fi, pi], cfg.n_samples, rng)
        check_finite_loss("train-nerf", step, loss)
        lr = cfg.lr * decay ** (step / max(1, cfg.steps - 1))
        training_step("train-nerf", step, opt, params, grads, lr)
        curve.append(loss)
        if step % 100 == 0:
            log.debug("nerf step %d loss %.5f", step, loss)
    return model, curve


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte separates the header from the payload
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    data = raw[m.end():]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / 255.0


def write_raw_image(path, image: np.ndarray) -> None:
    """``RAWF`` + u32 height, width, channels + f32 pixels (little-endian)."""
    img = np.ascontiguousarray(image, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    Path(path).write_bytes(b"RAWF" + struct.pack("<3I", *img.shape) + img.tobytes())


def read_raw_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"RAWF":
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    h, w, c = struct.unpack("<3I", raw[4:16])
    if len(raw) != 16 + 4 * h * w * c:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float32)
