"""Image, landmark, motion and emotion metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .data import EMOTIONS, MOUTH, N_POINTS, Clip, LandmarkSequence, PoseTensor, emotion_index, face_template
from .numerics import MlpParams, OptimizerState, ShapeError, mlp_backward, mlp_forward, training_step

SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03
MOUTH_INDICES = np.array(list(MOUTH))


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def psnr(img_a: np.ndarray, img_b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    d = np.abs(a - b)
    scale = float(d.max()) if d.size else 0.0
    if scale == 0.0:
        return math.inf
    # factor out the largest error so tiny differences cannot underflow to MSE = 0
    rel = float(np.mean((d / scale) ** 2))
    return 20.0 * math.log10(peak) - 20.0 * math.log10(scale) - 10.0 * math.log10(rel)


def _channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3 and img.shape[-1] in (1, 3):
        return np.moveaxis(img, -1, 0)
    raise ShapeError(f"expected (H, W) or (H, W, 1|3) image, got {img.shape}")


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
             peak: float = 1.0) -> np.ndarray:
    """Local SSIM on every fully contained ``window x window`` patch of 2-D ``a``, ``b``.

    Uniform weights with population (1/N) moments.
    """
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    h = window // 2
    crop = (slice(h, a.shape[0] - (window - 1 - h)), slice(h, a.shape[1] - (window - 1 - h)))

    def mean(x):
        # centered filter; valid windows are the interior after cropping
        return uniform_filter(x, size=window, mode="constant")[crop]

    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a ** 2
    var_b = mean(b * b) - mu_b ** 2
    cov = mean(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(img_a: np.ndarray, img_b: np.ndarray, window: int = SSIM_WINDOW, peak: float = 1.0) -> float:
    """Mean local SSIM, averaged over channels."""
    a, b = _channels(img_a), _channels(img_b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ValueError(f"image {a.shape[1:]} smaller than the {window}x{window} window")
    return float(np.mean([ssim_map(x, y, window, peak).mean() for x, y in zip(a, b)]))


# ---------------------------------------------------------------------------
# Landmarks and motion
# ---------------------------------------------------------------------------


def _lm_values(seq) -> np.ndarray:
    return seq.values if isinstance(seq, LandmarkSequence) else np.asarray(seq)


def lmd(seq_a, seq_b) -> tuple[float, float]:
    """Mean per-landmark Euclidean distance: ``(mouth, full face)``."""
    a = _lm_values(seq_a).astype(np.float64)
    b = _lm_values(seq_b).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"landmark sequences differ in shape: {a.shape} vs {b.shape}")
    dist = np.linalg.norm(a - b, axis=-1)
    return float(dist[:, MOUTH_INDICES].mean()), float(dist.mean())


@dataclass
class MotionStats:
    vel_avg: float
    vel_std: float
    acc_avg: float
    acc_std: float


def motion_stats(poses) -> MotionStats:
    """Mean/std of ``|x(t+1) - x(t)|`` and of ``|v(t+1) - v(t)|``."""
    x = poses.values if isinstance(poses, PoseTensor) else np.asarray(poses)
    x = x.astype(np.float64).reshape(x.shape[0], -1)
    if x.shape[0] < 3:
        raise ValueError("motion statistics need at least 3 frames")
    v = np.diff(x, axis=0)
    a = np.diff(v, axis=0)
    vn, an = np.linalg.norm(v, axis=1), np.linalg.norm(a, axis=1)
    return MotionStats(float(vn.mean()), float(vn.std()), float(an.mean()), float(an.std()))


# ---------------------------------------------------------------------------
# Emotion classifier proxy
# ---------------------------------------------------------------------------


class UntrainedClassifierError(RuntimeError):
    pass


@dataclass
class EmotionClassifier:
    """Per-frame landmark classifier: MLP over template-centered coordinates, softmax over labels."""

    mlp: MlpParams
    template: np.ndarray
    trained: bool = False

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 64) -> "EmotionClassifier":
        mlp = MlpParams.init([N_POINTS * 3, hidden, len(EMOTIONS)], ["relu", "identity"], rng)
        return cls(mlp, face_template().astype(np.float32))

    def _inputs(self, landmarks: np.ndarray) -> np.ndarray:
        lm = np.asarray(landmarks, dtype=np.float32)
        if lm.shape[-2:] != (N_POINTS, 3):
            raise ShapeError(f"landmarks must end in (68, 3), got {lm.shape}")
        # scaled so the small expression offsets reach unit-ish magnitudes
        return ((lm - self.template) * 10.0).reshape(-1, N_POINTS * 3)

    def probabilities(self, landmarks: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise UntrainedClassifierError("emotion classifier has not been trained")
        return softmax(mlp_forward(self.mlp, self._inputs(landmarks)))

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.mlp.named("cls"), "cls.template": self.template,
                "cls.trained": np.array([float(self.trained)], dtype=np.float32)}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "EmotionClassifier":
        mlp = MlpParams.from_named(t, "cls", ["relu", "identity"])
        return cls(mlp, t["cls.template"], bool(t["cls.trained"][0]))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def train_emotion_classifier(dataset: list[Clip], seed: int = 0, steps: int = 600,
                             batch: int = 128, lr: float = 3e-3, hidden: int = 64
                             ) -> tuple[EmotionClassifier, list[float]]:
    """Cross-entropy training on the ground-truth emotional frames."""
    rng = np.random.default_rng(seed)
    clf = EmotionClassifier.init(rng, hidden)
    x = clf._inputs(np.concatenate([c.landmarks.values for c in dataset]))
    y = np.concatenate([np.full(c.landmarks.frames, emotion_index(c.emotion)) for c in dataset])
    params = clf.mlp.named("cls")
    opt = OptimizerState("adam", lr)
    curve = []
    for step in range(steps):
        idx = rng.integers(0, x.shape[0], min(batch, x.shape[0]))
        logits, cache = mlp_forward(clf.mlp, x[idx], return_cache=True)
        p = softmax(logits)
        loss = float(-np.mean(np.log(p[np.arange(idx.size), y[idx]] + 1e-12)))
        g = p.copy()
        g[np.arange(idx.size), y[idx]] -= 1.0
        grads, _ = mlp_backward(clf.mlp, x[idx], g / idx.size, cache)
        training_step("train-classifier", step, opt, params, grads.named("cls"))
        curve.append(loss)
    clf.trained = True
    return clf, curve


def emotion_score(classifier: EmotionClassifier, seq, target: str) -> float:
    """Mean per-frame probability of ``target``."""
    probs = classifier.probabilities(_lm_values(seq))
    return float(probs[:, emotion_index(target)].mean())


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    ssim: float
    psnr: float
    emotion_score: float
    m_lmd: float
    f_lmd: float
    motion: MotionStats | None = None

    HEADER = ("ssim(7x7 uniform)", "psnr_db", "emotion_score(proxy)", "m_lmd", "f_lmd",
              "vel_avg", "vel_std", "acc_avg", "acc_std")

    def values(self) -> list[float]:
        m = self.motion or MotionStats(*(math.nan,) * 4)
        return [self.ssim, self.psnr, self.emotion_score, self.m_lmd, self.f_lmd,
                m.vel_avg, m.vel_std, m.acc_avg, m.acc_std]

    def to_keyvalue(self) -> str:
        keys = ["ssim", "psnr", "emotion_score", "m_lmd", "f_lmd", "vel_avg", "vel_std",
                "acc_avg", "acc_std"]
        return "\n".join(f"{k}={format_metric(v)}" for k, v in zip(keys, self.values())) + "\n"


def format_metric(v: float) -> str:
    if math.isinf(v):
        return "inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.6f}"
