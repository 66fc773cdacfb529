"""Neutral landmarks plus an emotion embedding to emotional landmarks.

The deformation network is FC-ReLU-FC-ReLU-FC on the concatenation of a
flattened neutral frame and the label's embedding row. It predicts a
per-point displacement that is added to the neutral frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import EMOTIONS, N_POINTS, Clip, emotion_index, face_template
from .numerics import (
    MlpParams,
    NonFiniteError,
    OptimizerState,
    ShapeError,
    TrainingDivergence,
    check_finite_loss,
    mlp_backward,
    mlp_forward,
    training_step,
)

log = logging.getLogger(__name__)

LM_DIM = N_POINTS * 3
LDM_ACTIVATIONS = ["relu", "relu", "identity"]


@dataclass
class LdmConfig:
    embed_dim: int = 16
    hidden: tuple[int, int] = (256, 256)
    steps: int = 1500
    batch: int = 128
    lr: float = 1e-3


@dataclass
class EmotionEmbedder:
    table: np.ndarray  # (8, d_e)

    def __post_init__(self) -> None:
        if self.table.ndim != 2 or self.table.shape[0] != len(EMOTIONS):
            raise ShapeError(f"embedding table must have {len(EMOTIONS)} rows")

    @classmethod
    def one_hot(cls, embed_dim: int = 16, dtype=np.float32) -> "EmotionEmbedder":
        """Row ``i`` is the unit vector on coordinate ``i`` (zero-padded to ``embed_dim``)."""
        if embed_dim < len(EMOTIONS):
            raise ValueError(f"embed_dim must be >= {len(EMOTIONS)}")
        return cls(np.eye(len(EMOTIONS), embed_dim, dtype=dtype))

    @property
    def dim(self) -> int:
        return self.table.shape[1]


def embed_emotion(embedder: EmotionEmbedder, label: str) -> np.ndarray:
    return embedder.table[emotion_index(label)].copy()


@dataclass
class LdmParams:
    mlp: MlpParams
    template: np.ndarray  # neutral input is centered on this before the first layer

    def __post_init__(self) -> None:
        if len(self.mlp.weights) != 3 or self.mlp.activations != LDM_ACTIVATIONS:
            raise ShapeError("LDM must be exactly FC-ReLU-FC-ReLU-FC")
        if self.mlp.out_dim != LM_DIM:
            raise ShapeError(f"LDM output dim must be {LM_DIM}")

    @property
    def embed_dim(self) -> int:
        return self.mlp.in_dim - LM_DIM

    @classmethod
    def init(cls, cfg: LdmConfig, rng: np.random.Generator, dtype=np.float32) -> "LdmParams":
        dims = [LM_DIM + cfg.embed_dim, *cfg.hidden, LM_DIM]
        mlp = MlpParams.init(dims, LDM_ACTIVATIONS, rng, dtype)
        mlp.weights[-1] *= 0.1
        return cls(mlp, face_template().astype(dtype))


@dataclass
class MotionToEmotion:
    """Trained LDM together with its embedder; what the checkpoint stores."""

    ldm: LdmParams
    embedder: EmotionEmbedder

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.trainable(), "ldm.template": self.ldm.template}

    def trainable(self) -> dict[str, np.ndarray]:
        return {**self.ldm.mlp.named("ldm"), "embedder.table": self.embedder.table}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "MotionToEmotion":
        mlp = MlpParams.from_named(t, "ldm", LDM_ACTIVATIONS)
        return cls(LdmParams(mlp, t["ldm.template"]), EmotionEmbedder(t["embedder.table"]))

    def astype(self, dtype) -> "MotionToEmotion":
        return MotionToEmotion.from_tensors({k: v.astype(dtype) for k, v in self.tensors().items()})

    def displacement(self, neutral: np.ndarray, label: str) -> np.ndarray:
        emb = embed_emotion(self.embedder, label)
        return ldm_forward(self.ldm, neutral, emb)

    def apply(self, neutral: np.ndarray, label: str) -> np.ndarray:
        return compose_emotional(neutral, self.displacement(neutral, label))


def _ldm_input(params: LdmParams, neutral: np.ndarray, emb: np.ndarray) -> np.ndarray:
    neutral = np.asarray(neutral)
    if neutral.shape[-2:] != (N_POINTS, 3):
        raise ShapeError(f"neutral landmarks must end in (68, 3), got {neutral.shape}")
    lead = neutral.shape[:-2]
    flat = (neutral - params.template).reshape(lead + (LM_DIM,))
    emb = np.asarray(emb, dtype=flat.dtype)
    if emb.shape[-1] != params.embed_dim:
        raise ShapeError(f"embedding width {emb.shape[-1]} != {params.embed_dim}")
    emb = np.broadcast_to(emb, lead + (emb.shape[-1],))
    return np.concatenate([flat, emb], axis=-1)


def ldm_forward(params: LdmParams, neutral: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """Displacement for each ``(..., 68, 3)`` neutral frame."""
    x = _ldm_input(params, neutral, emb)
    out = mlp_forward(params.mlp, x)
    return out.reshape(x.shape[:-1] + (N_POINTS, 3))


def compose_emotional(neutral: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    neutral = np.asarray(neutral)
    displacement = np.asarray(displacement)
    if neutral.shape != displacement.shape or neutral.shape[-2:] != (N_POINTS, 3):
        raise ShapeError(f"shape mismatch: {neutral.shape} vs {displacement.shape}")
    return neutral + displacement


def ldm_loss(target: np.ndarray, pred: np.ndarray) -> float:
    """Mean squared error over all 204 coordinates and all frames."""
    target = np.asarray(target)
    pred = np.asarray(pred)
    if target.shape != pred.shape:
        raise ShapeError(f"shape mismatch: {target.shape} vs {pred.shape}")
    d = target - pred
    val = float(np.mean(d * d))
    if not np.isfinite(val):
        raise NonFiniteError("LDM loss is not finite")
    return val


def ldm_loss_and_grads(model: MotionToEmotion, neutral: np.ndarray, labels: np.ndarray,
                       target: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for a batch: ``neutral``/``target`` ``(N, 68, 3)``, ``labels`` int ``(N,)``."""
    emb = model.embedder.table[labels]
    x = _ldm_input(model.ldm, neutral, emb)
    out, cache = mlp_forward(model.ldm.mlp, x, return_cache=True)
    pred = neutral + out.reshape(neutral.shape)
    loss = ldm_loss(target, pred)
    g_out = (2.0 / pred.size) * (pred - target).reshape(out.shape)
    g_mlp, g_x = mlp_backward(model.ldm.mlp, x, g_out, cache)
    g_table = np.zeros_like(model.embedder.table)
    np.add.at(g_table, labels, g_x[:, LM_DIM:])
    return loss, {**g_mlp.named("ldm"), "embedder.table": g_table}


def _frames(clips: list[Clip]):
    neutral = np.concatenate([c.neutral.values for c in clips])
    target = np.concatenate([c.landmarks.values for c in clips])
    labels = np.concatenate([np.full(c.neutral.frames, emotion_index(c.emotion)) for c in clips])
    return neutral, target, labels


def train_ldm(dataset: list[Clip], config: LdmConfig | None = None, seed: int = 0,
              neutral_override: list[np.ndarray] | None = None
              ) -> tuple[MotionToEmotion, list[float]]:
    """Fit the LDM and embedder jointly per frame.

    ``neutral_override`` (one array per clip) replaces the ground-truth neutral
    inputs, e.g. with VAE-decoded landmarks; targets stay the ground-truth
    emotional frames.
    """
    cfg = config or LdmConfig()
    rng = np.random.default_rng(seed)
    neutral, target, labels = _frames(dataset)
    if neutral_override is not None:
        neutral = np.concatenate(neutral_override).astype(np.float32)
        if neutral.shape != target.shape:
            raise ShapeError("neutral_override frames do not match the dataset")
    model = MotionToEmotion(LdmParams.init(cfg, rng), EmotionEmbedder.one_hot(cfg.embed_dim))
    params = model.trainable()
    opt = OptimizerState("adam", cfg.lr)
    curve = []
    n = neutral.shape[0]
    for step in range(cfg.steps):
        idx = rng.integers(0, n, min(cfg.batch, n))
        try:
            loss, grads = ldm_loss_and_grads(model, neutral[idx], labels[idx], target[idx])
        except NonFiniteError as exc:
            raise TrainingDivergence("train-ldm", step, str(exc)) from exc
        check_finite_loss("train-ldm", step, loss)
        lr = cfg.lr * (0.1 ** (step / max(1, cfg.steps)))
        training_step("train-ldm", step, opt, params, grads, lr)
        curve.append(loss)
    return model, curve
