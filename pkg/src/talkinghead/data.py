"""Domain containers, binary file formats and the synthetic talking-face data.

All binary formats are little-endian with a 4-byte magic:

``LMK1``  u32 frames, u32 points, u32 dims, f32[frames*points*dims]
``POS1``  u32 frames, u32 dim (=12), f32[frames*12]
``AUD1``  u32 frames, u32 feature_dim, f32[frames*feature_dim], f32[frames] energy
``EGCK``  u32 version, u64 seed, u32 count, then per tensor:
          u32 name_len, name (utf-8), u32 rank, u32 dims[rank], f32 data
"""

from __future__ import annotations

import configparser
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

N_POINTS = 68
POSE_DIM = 12
EMOTIONS = ("happy", "sad", "angry", "surprise", "disgust", "neutral", "contempt", "fear")
MOUTH = tuple(range(48, 68))
CHECKPOINT_VERSION = 1


class DataError(Exception):
    """Base class for data/format errors; ``code`` distinguishes the cause."""

    code = 0


class BadMagicError(DataError):
    code = 1


class TruncatedError(DataError):
    code = 2


class PointCountError(DataError):
    code = 3


class VersionError(DataError):
    code = 4


class DuplicateNameError(DataError):
    code = 5


class UnknownEmotionError(DataError, ValueError):
    code = 6


def emotion_index(label: str) -> int:
    try:
        return EMOTIONS.index(label)
    except ValueError:
        raise UnknownEmotionError(f"unknown emotion {label!r}; expected one of {EMOTIONS}") from None


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass
class LandmarkSequence:
    values: np.ndarray  # (frames, 68, 3)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValueError(f"landmarks must be (frames, 68, 3), got {self.values.shape}")
        if self.values.shape[1] != N_POINTS:
            raise PointCountError(f"expected {N_POINTS} points, got {self.values.shape[1]}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("landmarks contain non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]


@dataclass
class AudioFeatureSequence:
    features: np.ndarray  # (frames, feature_dim)
    energy: np.ndarray  # (frames,), RMS, >= 0

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.energy = np.asarray(self.energy, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValueError("features must be (frames, feature_dim)")
        if self.energy.shape != (self.features.shape[0],):
            raise ValueError("energy must have one value per frame")
        if np.any(self.energy < 0):
            raise ValueError("energy must be non-negative")

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class PoseTensor:
    values: np.ndarray  # (frames, 12): row-major [R | t]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] != POSE_DIM:
            raise ValueError(f"poses must be (frames, {POSE_DIM}), got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    def matrices(self) -> np.ndarray:
        return self.values.reshape(-1, 3, 4)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION
    seed: int = 0


# ---------------------------------------------------------------------------
# Binary IO
# ---------------------------------------------------------------------------


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise TruncatedError(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def _read_u32(buf, what: str, count: int = 1) -> tuple[int, ...]:
    return struct.unpack(f"<{count}I", _read_exact(buf, 4 * count, what))


def _check_magic(buf, magic: bytes) -> None:
    got = buf.read(4)
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")


def _read_f32(buf, count: int, what: str) -> np.ndarray:
    return np.frombuffer(_read_exact(buf, 4 * count, what), dtype="<f4").astype(np.float32)


def _ensure_eof(buf, what: str) -> None:
    if buf.read(1):
        raise TruncatedError(f"trailing bytes after {what} payload")


def save_landmarks(seq: LandmarkSequence, path) -> None:
    v = np.ascontiguousarray(seq.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"LMK1" + struct.pack("<3I", *v.shape))
        f.write(v.tobytes())


def load_landmarks(path) -> LandmarkSequence:
    with open(path, "rb") as f:
        _check_magic(f, b"LMK1")
        frames, points, dims = _read_u32(f, "header", 3)
        if points != N_POINTS:
            raise PointCountError(f"file declares {points} points, expected {N_POINTS}")
        if dims != 3:
            raise DataError(f"file declares {dims} dims, expected 3")
        data = _read_f32(f, frames * points * dims, "landmark payload")
        _ensure_eof(f, "landmark")
    return LandmarkSequence(data.reshape(frames, points, dims))


def save_poses(poses: PoseTensor, path) -> None:
    v = np.ascontiguousarray(poses.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"POS1" + struct.pack("<2I", *v.shape))
        f.write(v.tobytes())


def load_poses(path) -> PoseTensor:
    with open(path, "rb") as f:
        _check_magic(f, b"POS1")
        frames, dim = _read_u32(f, "header", 2)
        if dim != POSE_DIM:
            raise DataError(f"pose dim {dim}, expected {POSE_DIM}")
        data = _read_f32(f, frames * dim, "pose payload")
        _ensure_eof(f, "pose")
    return PoseTensor(data.reshape(frames, dim))


def save_audio(audio: AudioFeatureSequence, path) -> None:
    feats = np.ascontiguousarray(audio.features, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"AUD1" + struct.pack("<2I", *feats.shape))
        f.write(feats.tobytes())
        f.write(np.ascontiguousarray(audio.energy, dtype="<f4").tobytes())


def load_audio(path) -> AudioFeatureSequence:
    with open(path, "rb") as f:
        _check_magic(f, b"AUD1")
        frames, dim = _read_u32(f, "header", 2)
        feats = _read_f32(f, frames * dim, "feature payload").reshape(frames, dim)
        energy = _read_f32(f, frames, "energy payload")
        _ensure_eof(f, "audio")
    if np.any(energy < 0):
        raise DataError("negative energy in audio file")
    return AudioFeatureSequence(feats, energy)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write tensors as float32; names are sorted so output bytes are canonical."""
    if isinstance(ckpt.tensors, dict):
        items = sorted(ckpt.tensors.items())
    else:
        items = list(ckpt.tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise DuplicateNameError("duplicate tensor names in checkpoint")
    out = io.BytesIO()
    out.write(b"EGCK" + struct.pack("<IQI", ckpt.version, ckpt.seed, len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.write(a.tobytes())
    Path(path).write_bytes(out.getvalue())


def load_checkpoint(path, expected_version: int = CHECKPOINT_VERSION) -> Checkpoint:
    with open(path, "rb") as f:
        _check_magic(f, b"EGCK")
        version, seed, count = struct.unpack("<IQI", _read_exact(f, 16, "header"))
        if version != expected_version:
            raise VersionError(f"checkpoint version {version}, expected {expected_version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = _read_u32(f, "name length")
            name = _read_exact(f, n, "name").decode("utf-8")
            if name in tensors:
                raise DuplicateNameError(f"duplicate tensor {name!r}")
            (rank,) = _read_u32(f, "rank")
            shape = _read_u32(f, "dims", rank) if rank else ()
            size = int(np.prod(shape)) if rank else 1
            tensors[name] = _read_f32(f, size, f"tensor {name!r}").reshape(shape)
        _ensure_eof(f, "checkpoint")
    return Checkpoint(tensors, version, seed)


# ---------------------------------------------------------------------------
# Synthetic face generator
# ---------------------------------------------------------------------------


def _ellipse(cx, cy, rx, ry, angles, z):
    return [(cx + rx * np.cos(a), cy + ry * np.sin(a), z) for a in angles]


def face_template() -> np.ndarray:
    """Fixed 68-point neutral face in the centered unit box ([-1, 1], y up)."""
    pts: list[tuple[float, float, float]] = []
    for i in range(17):  # jaw, right ear -> chin -> left ear
        th = np.pi * i / 16
        pts.append((-0.8 * np.cos(th), 0.15 - 1.05 * np.sin(th), -0.3 * abs(np.cos(th))))
    for xs in (np.linspace(-0.65, -0.2, 5), np.linspace(0.2, 0.65, 5)):  # brows
        for x in xs:
            pts.append((x, 0.45 + 0.06 * (1 - ((abs(x) - 0.425) / 0.225) ** 2), 0.1))
    for k in range(4):  # nose bridge
        pts.append((0.0, 0.35 - 0.35 * k / 3, 0.15 + 0.1 * k))
    for x in np.linspace(-0.15, 0.15, 5):  # nostrils
        pts.append((x, -0.1 - 0.03 * (1 - abs(x) / 0.15), 0.2))
    eye_angles = np.pi - np.array([0, 1, 2, 3, 4, 5]) * np.pi / 3
    pts += _ellipse(-0.4, 0.25, 0.13, 0.06, eye_angles, 0.05)
    pts += _ellipse(0.4, 0.25, 0.13, 0.06, eye_angles, 0.05)
    outer = np.pi - np.arange(12) * np.pi / 6  # 48 left corner, over the top to 54
    pts += _ellipse(0.0, -0.45, 0.3, 0.12, outer, 0.15)
    inner = np.pi - np.arange(8) * np.pi / 4
    pts += _ellipse(0.0, -0.45, 0.2, 0.04, inner, 0.12)
    arr = np.array(pts, dtype=np.float32)
    assert arr.shape == (N_POINTS, 3)
    return arr


# per-point vertical weight of mouth opening (negative = downward)
MOUTH_OPEN_WEIGHTS = {
    **{i: -0.5 for i in range(6, 11)},  # chin
    **{i: 0.2 for i in (49, 50, 51, 52, 53)},
    **{i: -0.8 for i in (55, 56, 57, 58, 59)},
    **{i: 0.25 for i in (61, 62, 63)},
    **{i: -1.0 for i in (65, 66, 67)},
}


def _brows(dy, idx=range(17, 27)):
    return {i: (0.0, dy, 0.0) for i in idx}


DEFAULT_EMOTION_DELTAS: dict[str, dict[int, tuple[float, float, float]]] = {
    "neutral": {},
    "happy": {48: (-0.03, 0.08, 0.0), 54: (0.03, 0.08, 0.0),
              60: (-0.02, 0.05, 0.0), 64: (0.02, 0.05, 0.0)},
    "sad": {48: (0.0, -0.06, 0.0), 54: (0.0, -0.06, 0.0), 60: (0.0, -0.04, 0.0),
            64: (0.0, -0.04, 0.0), 21: (0.0, 0.05, 0.0), 22: (0.0, 0.05, 0.0)},
    "angry": {**_brows(-0.06), 21: (0.03, -0.08, 0.0), 22: (-0.03, -0.08, 0.0)},
    "surprise": {**_brows(0.1), 37: (0.0, 0.03, 0.0), 38: (0.0, 0.03, 0.0),
                 43: (0.0, 0.03, 0.0), 44: (0.0, 0.03, 0.0),
                 **{i: (0.0, -0.08, 0.0) for i in (56, 57, 58, 65, 66, 67)}},
    "disgust": {**{i: (0.0, 0.05, 0.0) for i in (49, 50, 51, 52, 53)},
                **{i: (0.0, 0.03, 0.0) for i in (31, 32, 33, 34, 35)}},
    "contempt": {54: (0.02, 0.06, 0.0), 64: (0.02, 0.04, 0.0)},
    "fear": {**_brows(0.06), 48: (-0.05, 0.0, 0.0), 54: (0.05, 0.0, 0.0)},
}


@dataclass
class GeneratorConfig:
    feature_dim: int = 16
    fps: float = 25.0
    n_sinusoids: int = 3
    mouth_gain: float = 0.25
    style_range: tuple[float, float] = (0.8, 1.2)
    noise_scale: float = 0.1
    noise_smoothing: float = 2.0
    pose_amplitude: float = 0.08
    loading_seed: int = 1234
    emotion_deltas: dict[str, dict[int, tuple[float, float, float]]] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_EMOTION_DELTAS.items()})

    def delta_array(self, label: str) -> np.ndarray:
        """Displacement table of ``label`` as a ``(68, 3)`` array."""
        emotion_index(label)
        out = np.zeros((N_POINTS, 3), dtype=np.float32)
        for i, d in self.emotion_deltas.get(label, {}).items():
            out[i] = d
        return out

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keep key case
        cp["data"] = {
            "feature_dim": str(self.feature_dim), "fps": repr(self.fps),
            "n_sinusoids": str(self.n_sinusoids), "mouth_gain": repr(self.mouth_gain),
            "style_range": f"{self.style_range[0]!r},{self.style_range[1]!r}",
            "noise_scale": repr(self.noise_scale), "noise_smoothing": repr(self.noise_smoothing),
            "pose_amplitude": repr(self.pose_amplitude), "loading_seed": str(self.loading_seed),
        }
        for label in EMOTIONS:
            table = self.emotion_deltas.get(label, {})
            cp["data"][f"delta.{label}"] = ";".join(
                f"{i}:{d[0]!r},{d[1]!r},{d[2]!r}" for i, d in sorted(table.items()))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_section(cls, sec) -> "GeneratorConfig":
        cfg = cls()
        for key, caster in (("feature_dim", int), ("fps", float), ("n_sinusoids", int),
                            ("mouth_gain", float), ("noise_scale", float),
                            ("noise_smoothing", float), ("pose_amplitude", float),
                            ("loading_seed", int)):
            if key in sec:
                setattr(cfg, key, caster(sec[key]))
        if "style_range" in sec:
            lo, hi = (float(v) for v in sec["style_range"].split(","))
            cfg.style_range = (lo, hi)
        for label in EMOTIONS:
            key = f"delta.{label}"
            if key in sec:
                cfg.emotion_deltas[label] = _parse_table(sec[key])
        for key in sec:
            if key.startswith("delta.") and key[6:] not in EMOTIONS:
                raise UnknownEmotionError(f"unknown emotion {key[6:]!r} in generator config")
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "GeneratorConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        return cls.from_section(cp["data"])


def _parse_table(text: str) -> dict[int, tuple[float, float, float]]:
    table = {}
    for item in filter(None, (s.strip() for s in text.split(";"))):
        idx, vec = item.split(":")
        x, y, z = (float(v) for v in vec.split(","))
        table[int(idx)] = (x, y, z)
    return table


@dataclass
class Clip:
    audio: AudioFeatureSequence
    landmarks: LandmarkSequence  # emotional ground truth
    neutral: LandmarkSequence
    emotion: str
    poses: PoseTensor
    style: float


def energy_envelope(rng: np.random.Generator, frames: int, cfg: GeneratorConfig) -> np.ndarray:
    """Non-negative sum of seeded sinusoids, in [0, 1]."""
    t = np.arange(frames) / cfg.fps
    freqs = rng.uniform(0.5, 3.0, cfg.n_sinusoids)
    phases = rng.uniform(0, 2 * np.pi, cfg.n_sinusoids)
    amps = rng.uniform(0.3, 1.0, cfg.n_sinusoids)
    s = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
    return np.clip(0.5 + 0.5 * s / amps.sum(), 0.0, 1.0).astype(np.float32)


def audio_features(rng: np.random.Generator, energy: np.ndarray, cfg: GeneratorConfig) -> np.ndarray:
    """Low-passed Gaussian channels plus fixed loadings of energy and its change."""
    load_rng = np.random.default_rng(cfg.loading_seed)
    u = load_rng.normal(size=cfg.feature_dim)
    v = load_rng.normal(size=cfg.feature_dim)
    noise = gaussian_filter1d(rng.normal(size=(energy.size, cfg.feature_dim)),
                              cfg.noise_smoothing, axis=0)
    de = np.diff(energy, prepend=energy[:1])
    feats = np.outer(energy, u) + 5.0 * np.outer(de, v) + cfg.noise_scale * noise
    return feats.astype(np.float32)


def neutral_landmarks(energy: np.ndarray, cfg: GeneratorConfig, style: float = 1.0,
                      template: np.ndarray | None = None) -> np.ndarray:
    """Template with the mouth opened in proportion to ``energy``."""
    template = face_template() if template is None else template
    weights = np.zeros(N_POINTS, dtype=np.float32)
    for i, w in MOUTH_OPEN_WEIGHTS.items():
        weights[i] = w
    out = np.repeat(template[None], energy.size, axis=0)
    out[:, :, 1] += (cfg.mouth_gain * style) * energy[:, None] * weights[None, :]
    return out


def emotional_landmarks(neutral: np.ndarray, label: str, cfg: GeneratorConfig) -> np.ndarray:
    return neutral + cfg.delta_array(label)[None]


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ rx @ ry


def pose_from_angles(yaw, pitch, roll, t) -> np.ndarray:
    return np.concatenate([rotation_matrix(yaw, pitch, roll), np.reshape(t, (3, 1))], axis=1).ravel()


def generate_pose_trace(rng: np.random.Generator, frames: int, amplitude: float = 0.08,
                        fps: float = 25.0, still_runs: int = 2) -> PoseTensor:
    """Smoothly moving head pose with a few held (still) stretches."""
    t = np.arange(frames) / fps
    angles = np.zeros((frames, 3))
    for k in range(3):
        f = rng.uniform(0.2, 1.0)
        ph = rng.uniform(0, 2 * np.pi)
        angles[:, k] = amplitude * np.sin(2 * np.pi * f * t + ph)
    trans = 0.03 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t[:, None] + rng.uniform(0, 6, 3))
    for _ in range(still_runs):
        if frames < 8:
            break
        length = int(rng.integers(2, max(3, frames // 6)))
        start = int(rng.integers(0, frames - length))
        angles[start:start + length] = angles[start]
        trans[start:start + length] = trans[start]
    rows = [pose_from_angles(*angles[i], trans[i]) for i in range(frames)]
    return PoseTensor(np.array(rows, dtype=np.float32))


def generate_synthetic_dataset(seed: int, n_clips: int, frames_per_clip: int,
                               config: GeneratorConfig | None = None,
                               emotions: tuple[str, ...] = EMOTIONS) -> list[Clip]:
    """Paired audio/landmark clips; clip ``i`` carries ``emotions[i % len(emotions)]``."""
    if frames_per_clip < 2:
        raise ValueError("frames_per_clip must be >= 2")
    cfg = config or GeneratorConfig()
    for e in emotions:
        emotion_index(e)
    template = face_template()
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        label = emotions[i % len(emotions)]
        energy = energy_envelope(rng, frames_per_clip, cfg)
        feats = audio_features(rng, energy, cfg)
        style = float(rng.uniform(*cfg.style_range))
        neutral = neutral_landmarks(energy, cfg, style, template)
        emo = emotional_landmarks(neutral, label, cfg)
        poses = generate_pose_trace(rng, frames_per_clip, cfg.pose_amplitude, cfg.fps)
        clips.append(Clip(AudioFeatureSequence(feats, energy), LandmarkSequence(emo),
                          LandmarkSequence(neutral), label, poses, style))
    return clips
