"""End-to-end orchestration: config, seeding, dataset files, training stages, inference, eval.

Directory layout produced by the stages::

    <dataset>/generator.cfg, clips.tsv, <clip>.aud, <clip>.lmk, <clip>.neutral.lmk, <clip>.pos
    <dataset>/nerf/frames.tsv, frame_<k>.rawf, frame_<k>.lmk, frame_<k>.pos
    <checkpoints>/sync.ckpt, classifier.ckpt, a2m.ckpt, ldm.ckpt, nerf.ckpt, curves/<stage>.tsv
    <infer out>/frames/frame_<i>.ppm|.rawf, landmarks.lmk, poses.pos, meta.cfg, report.txt
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio2motion as a2m
from . import emotion2video as e2v
from . import idlepose, metrics
from . import motion2emotion as m2e
from .data import (
    Checkpoint,
    Clip,
    DataError,
    GeneratorConfig,
    LandmarkSequence,
    PoseTensor,
    emotion_index,
    generate_pose_trace,
    generate_synthetic_dataset,
    load_audio,
    load_checkpoint,
    load_landmarks,
    load_poses,
    save_audio,
    save_checkpoint,
    save_landmarks,
    save_poses,
)
from .numerics import TrainingDivergence

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (exit code 2)."""


class DatasetMissingError(DataError):
    pass


class CheckpointMissingError(DataError):
    def __init__(self, stage: str, path: Path) -> None:
        super().__init__(f"missing {stage} checkpoint at {path}; run `{stage}` first")
        self.stage = stage


EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    seed: int = 0
    n_clips: int = 16
    frames_per_clip: int = 50
    nerf_frames: int = 4
    silence_rms: float = idlepose.SILENCE_RMS
    classifier_steps: int = 600


@dataclass
class PathConfig:
    dataset: str = "data"
    checkpoints: str = "checkpoints"
    output: str = "outputs"


@dataclass
class PipelineConfig:
    paths: PathConfig = field(default_factory=PathConfig)
    run: RunConfig = field(default_factory=RunConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    sync: a2m.SyncConfig = field(default_factory=a2m.SyncConfig)
    a2m: a2m.A2MConfig = field(default_factory=a2m.A2MConfig)
    ldm: m2e.LdmConfig = field(default_factory=m2e.LdmConfig)
    nerf: e2v.NerfConfig = field(default_factory=e2v.NerfConfig)
    idle: idlepose.SamplerConfig = field(default_factory=idlepose.SamplerConfig)

    SECTIONS = ("paths", "run", "sync", "a2m", "ldm", "nerf", "idle")

    @property
    def dataset_dir(self) -> Path:
        return Path(self.paths.dataset)

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.paths.checkpoints)

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output)

    def camera(self) -> e2v.Camera:
        return e2v.Camera.square(self.nerf.resolution)

    def sampler(self) -> idlepose.SamplerConfig:
        return dataclasses.replace(self.idle, seed=derive_seed(self.run.seed, "idle"),
                                   silence_rms=self.run.silence_rms)

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name in self.SECTIONS:
            obj = getattr(self, name)
            cp[name] = {f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                        if not (name == "idle" and f.name in ("seed", "silence_rms"))}
        gen = configparser.ConfigParser()
        gen.optionxform = str
        gen.read_string(self.generator.to_text())
        cp["generator"] = dict(gen["data"])
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        kind = type(current[0]) if current else int
        return tuple(kind(x) for x in raw.split(",") if x.strip())
    return raw


def _apply_section(obj, section: str, items) -> object:
    names = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in items:
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        try:
            updates[key] = _parse_value(raw, getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> PipelineConfig:
    """Defaults, then the config file, then ``section.key=value`` overrides."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            cp.read_string(p.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key] = value
    cfg = PipelineConfig()
    for section in cp.sections():
        if section == "generator":
            try:
                cfg.generator = GeneratorConfig.from_section(cp[section])
            except (ValueError, DataError) as exc:
                raise ConfigError(f"invalid [generator] settings: {exc}") from exc
        elif section in PipelineConfig.SECTIONS:
            setattr(cfg, section, _apply_section(getattr(cfg, section), section, cp[section].items()))
        else:
            raise ConfigError(f"unknown config section [{section}]")
    return cfg


def derive_seed(seed: int, tag: str) -> int:
    """Per-stage seed: global seed plus a stable hash of the stage tag, mod 2**32."""
    h = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")
    return (int(seed) + h) % (2 ** 32)


def write_resolved_config(cfg: PipelineConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / "resolved.cfg"
    out.write_text(cfg.to_text())
    return out


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def clip_name(i: int) -> str:
    return f"clip_{i:03d}"


def run_gen_data(cfg: PipelineConfig) -> list[str]:
    """Synthesize the dataset and the NeRF training frames."""
    root = cfg.dataset_dir
    root.mkdir(parents=True, exist_ok=True)
    clips = generate_synthetic_dataset(derive_seed(cfg.run.seed, "data"), cfg.run.n_clips,
                                       cfg.run.frames_per_clip, cfg.generator)
    (root / "generator.cfg").write_text(cfg.generator.to_text())
    rows = ["name\temotion\tframes\tstyle"]
    names = []
    for i, clip in enumerate(clips):
        name = clip_name(i)
        save_audio(clip.audio, root / f"{name}.aud")
        save_landmarks(clip.landmarks, root / f"{name}.lmk")
        save_landmarks(clip.neutral, root / f"{name}.neutral.lmk")
        save_poses(clip.poses, root / f"{name}.pos")
        rows.append(f"{name}\t{clip.emotion}\t{clip.audio.frames}\t{clip.style!r}")
        names.append(name)
    (root / "clips.tsv").write_text("\n".join(rows) + "\n")
    _write_nerf_frames(cfg, clips, names)
    write_resolved_config(cfg, root)
    log.info("wrote %d clips to %s", len(clips), root)
    return names


def _write_nerf_frames(cfg: PipelineConfig, clips: list[Clip], names: list[str]) -> None:
    nerf_dir = cfg.dataset_dir / "nerf"
    nerf_dir.mkdir(parents=True, exist_ok=True)
    camera = cfg.camera()
    n = min(cfg.run.nerf_frames, len(clips))
    rows = ["frame\tclip\tindex"]
    for k in range(n):
        clip = clips[k]
        idx = (k * 7 + clip.audio.frames // 2) % clip.audio.frames
        lm = clip.landmarks.values[idx]
        pose = clip.poses.values[idx]
        img = e2v.render_ground_truth(camera, lm, pose, cfg.nerf.n_samples_infer)
        e2v.write_raw_image(nerf_dir / f"frame_{k}.rawf", img)
        save_landmarks(LandmarkSequence(lm[None]), nerf_dir / f"frame_{k}.lmk")
        save_poses(PoseTensor(pose[None]), nerf_dir / f"frame_{k}.pos")
        rows.append(f"{k}\t{names[k]}\t{idx}")
    (nerf_dir / "frames.tsv").write_text("\n".join(rows) + "\n")


def _read_tsv(path: Path) -> list[dict[str, str]]:
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:] if ln.strip()]


def load_dataset(cfg: PipelineConfig) -> tuple[list[str], list[Clip]]:
    root = cfg.dataset_dir
    index = root / "clips.tsv"
    if not index.is_file():
        raise DatasetMissingError(f"no dataset at {root} (missing clips.tsv); run `gen-data` first")
    names, clips = [], []
    for row in _read_tsv(index):
        name = row["name"]
        clips.append(Clip(load_audio(root / f"{name}.aud"), load_landmarks(root / f"{name}.lmk"),
                          load_landmarks(root / f"{name}.neutral.lmk"), row["emotion"],
                          load_poses(root / f"{name}.pos"), float(row["style"])))
        names.append(name)
    return names, clips


def load_nerf_frames(cfg: PipelineConfig) -> list[e2v.NerfFrame]:
    nerf_dir = cfg.dataset_dir / "nerf"
    index = nerf_dir / "frames.tsv"
    if not index.is_file():
        raise DatasetMissingError(f"no NeRF frames at {nerf_dir}; run `gen-data` first")
    frames = []
    for row in _read_tsv(index):
        k = row["frame"]
        img = e2v.read_raw_image(nerf_dir / f"frame_{k}.rawf")
        lm = load_landmarks(nerf_dir / f"frame_{k}.lmk").values[0]
        pose = load_poses(nerf_dir / f"frame_{k}.pos").values[0]
        frames.append(e2v.NerfFrame(img, lm, pose))
    return frames


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


STAGE_FILES = {
    "train-proxies": ("sync.ckpt", "classifier.ckpt"),
    "train-a2m": ("a2m.ckpt",),
    "train-ldm": ("ldm.ckpt",),
    "train-nerf": ("nerf.ckpt",),
}


def _ckpt_path(cfg: PipelineConfig, filename: str) -> Path:
    return cfg.checkpoint_dir / filename


def _save(cfg: PipelineConfig, filename: str, tensors: dict[str, np.ndarray], seed: int) -> Path:
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    path = _ckpt_path(cfg, filename)
    save_checkpoint(Checkpoint(tensors, seed=seed), path)
    return path


def _load(cfg: PipelineConfig, filename: str, stage: str) -> dict[str, np.ndarray]:
    path = _ckpt_path(cfg, filename)
    if not path.is_file():
        raise CheckpointMissingError(stage, path)
    return load_checkpoint(path).tensors


def _write_curve(cfg: PipelineConfig, stage: str, curve) -> Path:
    d = cfg.checkpoint_dir / "curves"
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{stage}.tsv"
    if curve and isinstance(curve[0], dict):
        keys = list(curve[0])
        lines = ["\t".join(keys)] + ["\t".join(repr(float(r[k])) for k in keys) for r in curve]
    else:
        lines = ["step\tloss"] + [f"{i}\t{float(v)!r}" for i, v in enumerate(curve)]
    path.write_text("\n".join(lines) + "\n")
    return path


def _check_curve(stage: str, values: list[float]) -> None:
    if not all(math.isfinite(v) for v in values):
        raise TrainingDivergence(stage, next(i for i, v in enumerate(values) if not math.isfinite(v)))
    if len(values) > 1 and not values[-1] < values[0]:
        log.warning("%s: final loss %.4g did not drop below initial %.4g", stage, values[-1], values[0])


def load_sync(cfg: PipelineConfig) -> a2m.SyncProxy:
    return a2m.SyncProxy.from_tensors(_load(cfg, "sync.ckpt", "train-proxies"))


def load_classifier(cfg: PipelineConfig) -> metrics.EmotionClassifier:
    return metrics.EmotionClassifier.from_tensors(_load(cfg, "classifier.ckpt", "train-proxies"))


def load_vae(cfg: PipelineConfig) -> a2m.VaeParams:
    return a2m.VaeParams.from_tensors(_load(cfg, "a2m.ckpt", "train-a2m"))


def load_ldm(cfg: PipelineConfig) -> m2e.MotionToEmotion:
    return m2e.MotionToEmotion.from_tensors(_load(cfg, "ldm.ckpt", "train-ldm"))


def load_nerf(cfg: PipelineConfig) -> e2v.NerfModel:
    return e2v.NerfModel.from_tensors(_load(cfg, "nerf.ckpt", "train-nerf"))


# ---------------------------------------------------------------------------
# Training stages
# ---------------------------------------------------------------------------


def run_train_proxies(cfg: PipelineConfig) -> dict[str, list[float]]:
    _, clips = load_dataset(cfg)
    s_sync = derive_seed(cfg.run.seed, "sync")
    scorer, sync_curve = a2m.train_sync_proxy(clips, cfg.sync, s_sync)
    _save(cfg, "sync.ckpt", scorer.tensors(), s_sync)
    s_cls = derive_seed(cfg.run.seed, "classifier")
    clf, cls_curve = metrics.train_emotion_classifier(clips, s_cls, cfg.run.classifier_steps)
    _save(cfg, "classifier.ckpt", clf.tensors(), s_cls)
    for name, curve in (("sync", sync_curve), ("classifier", cls_curve)):
        _check_curve(f"train-proxies/{name}", curve)
        _write_curve(cfg, name, curve)
    return {"sync": sync_curve, "classifier": cls_curve}


def run_train_a2m(cfg: PipelineConfig) -> list[dict]:
    _, clips = load_dataset(cfg)
    scorer = load_sync(cfg) if cfg.a2m.sync_weight > 0 else None
    seed = derive_seed(cfg.run.seed, "a2m")
    params, curve = a2m.train_a2m(clips, cfg.a2m, seed, scorer)
    _check_curve("train-a2m", [r["total"] for r in curve])
    _save(cfg, "a2m.ckpt", params.tensors(), seed)
    _write_curve(cfg, "a2m", curve)
    return curve


def run_train_ldm(cfg: PipelineConfig) -> list[float]:
    _, clips = load_dataset(cfg)
    seed = derive_seed(cfg.run.seed, "ldm")
    model, curve = m2e.train_ldm(clips, cfg.ldm, seed)
    _check_curve("train-ldm", curve)
    _save(cfg, "ldm.ckpt", model.tensors(), seed)
    _write_curve(cfg, "ldm", curve)
    return curve


def run_train_nerf(cfg: PipelineConfig) -> list[float]:
    frames = load_nerf_frames(cfg)
    seed = derive_seed(cfg.run.seed, "nerf")
    model, curve = e2v.train_nerf(frames, cfg.nerf, seed, cfg.camera())
    _check_curve("train-nerf", curve)
    _save(cfg, "nerf.ckpt", model.tensors(), seed)
    _write_curve(cfg, "nerf", curve)
    psnrs = nerf_training_psnr(cfg, model, frames)
    (cfg.checkpoint_dir / "curves" / "nerf_psnr.txt").write_text(
        "".join(f"frame_{k}={metrics.format_metric(p)}\n" for k, p in enumerate(psnrs)))
    log.info("nerf training-frame PSNR: %s", ", ".join(f"{p:.2f}" for p in psnrs))
    return curve


def nerf_training_psnr(cfg: PipelineConfig, model: e2v.NerfModel,
                       frames: list[e2v.NerfFrame] | None = None) -> list[float]:
    frames = frames if frames is not None else load_nerf_frames(cfg)
    camera = cfg.camera()
    out = []
    for f in frames:
        img = e2v.render_frame(model.head, model.torso, camera, f.landmarks, f.pose,
                               cfg.nerf.n_samples_infer)
        out.append(metrics.psnr(img, f.image))
    return out


def run_train_all(cfg: PipelineConfig) -> dict[str, list]:
    """Sync and classifier proxies, then VAE, LDM and NeRF."""
    load_dataset(cfg)  # fail early with the gen-data hint
    curves: dict[str, list] = dict(run_train_proxies(cfg))
    curves["a2m"] = run_train_a2m(cfg)
    curves["ldm"] = run_train_ldm(cfg)
    curves["nerf"] = run_train_nerf(cfg)
    write_resolved_config(cfg, cfg.checkpoint_dir)
    return curves


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass
class InferResult:
    out_dir: Path
    landmarks: np.ndarray
    poses: np.ndarray
    frames: np.ndarray
    idle_engaged: bool
    report: metrics.MetricReport | None = None


def run_infer(cfg: PipelineConfig, audio_path: str | Path, emotion: str,
              out_dir: str | Path | None = None, no_ldm: bool = False,
              poses_path: str | Path | None = None, reference: str | None = None) -> InferResult:
    """Audio file to rendered frames.

    Poses come from ``poses_path``, from the ``reference`` dataset clip, or
    from a seeded synthetic trace. With ``reference`` the output is scored
    against that clip's emotional landmarks and its ground-truth renders,
    which are also written to ``<out>/reference``.
    """
    emotion_index(emotion)
    vae = load_vae(cfg)
    ldm = None if no_ldm else load_ldm(cfg)
    nerf = load_nerf(cfg)
    audio = load_audio(audio_path)
    n = audio.frames

    ref_clip = None
    if reference is not None:
        names, clips = load_dataset(cfg)
        if reference not in names:
            raise DataError(f"reference clip {reference!r} not in dataset")
        ref_clip = clips[names.index(reference)]
    if poses_path is not None:
        source = load_poses(poses_path)
    elif ref_clip is not None:
        source = ref_clip.poses
    else:
        source = generate_pose_trace(np.random.default_rng(derive_seed(cfg.run.seed, "infer-pose")),
                                     n, cfg.generator.pose_amplitude, cfg.generator.fps)
    if source.frames < n:
        raise DataError(f"pose trace has {source.frames} frames, audio has {n}")

    z = np.random.default_rng(derive_seed(cfg.run.seed, "infer-z")).standard_normal(vae.latent_dim)
    neutral = a2m.decode(vae, z.astype(np.float32), audio).values
    landmarks = neutral if ldm is None else ldm.apply(neutral, emotion).astype(np.float32)

    silent = idlepose.is_silent(audio, cfg.run.silence_rms)
    poses = idlepose.idle_pipeline(PoseTensor(source.values[:n]), audio, cfg.sampler())
    if silent:
        log.info("idle path engaged for %s", audio_path)

    out = Path(out_dir) if out_dir is not None else cfg.output_dir / "infer"
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    camera = cfg.camera()
    frames = np.stack([e2v.render_frame(nerf.head, nerf.torso, camera, landmarks[i],
                                        poses.values[i], cfg.nerf.n_samples_infer)
                       for i in range(n)])
    write_clip_dir(out, frames, landmarks, poses.values)
    meta = {"emotion": emotion, "no_ldm": str(no_ldm), "idle_engaged": str(silent),
            "audio": str(audio_path), "reference": reference or ""}
    (out / "meta.cfg").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    write_resolved_config(cfg, out)

    report = None
    if ref_clip is not None:
        ref_frames = np.stack([e2v.render_ground_truth(camera, ref_clip.landmarks.values[i],
                                                       poses.values[i], cfg.nerf.n_samples_infer)
                               for i in range(n)])
        write_clip_dir(out / "reference", ref_frames, ref_clip.landmarks.values[:n], poses.values)
        report = evaluate_clip(out, out / "reference", _maybe_classifier(cfg), emotion)
    else:
        report = evaluate_clip(out, None, _maybe_classifier(cfg), emotion)
    (out / "report.txt").write_text(report.to_keyvalue())
    return InferResult(out, landmarks, poses.values, frames, silent, report)


def write_clip_dir(out: Path, frames: np.ndarray, landmarks: np.ndarray, poses: np.ndarray) -> None:
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(frames):
        e2v.write_ppm(frames_dir / f"frame_{i:04d}.ppm", img)
        e2v.write_raw_image(frames_dir / f"frame_{i:04d}.rawf", img)
    save_landmarks(LandmarkSequence(np.asarray(landmarks, np.float32)), out / "landmarks.lmk")
    save_poses(PoseTensor(np.asarray(poses, np.float32)), out / "poses.pos")


def _maybe_classifier(cfg: PipelineConfig) -> metrics.EmotionClassifier | None:
    try:
        return load_classifier(cfg)
    except CheckpointMissingError:
        return None


# ---------------------------------------------------------------------------
# Idle sampling and evaluation
# ---------------------------------------------------------------------------


def run_idle_sample(poses_path, audio_path, out_path, gap: int, seed: int,
                    len_min: int | None = None, len_max: int | None = None,
                    cfg: PipelineConfig | None = None) -> PoseTensor:
    """Idle pose tensor for one pose/audio pair; explicit bounds skip idle detection."""
    cfg = cfg or PipelineConfig()
    poses = load_poses(poses_path)
    audio = load_audio(audio_path)
    sampler = dataclasses.replace(cfg.idle, len_gap=gap, seed=seed, silence_rms=cfg.run.silence_rms)
    if (len_min is None) != (len_max is None):
        raise ConfigError("--len-min and --len-max must be given together")
    if len_min is not None:
        if not idlepose.is_silent(audio, sampler.silence_rms):
            result = poses
        else:
            segs = idlepose.generate_segments(audio.frames, len_min, len_max, gap, seed,
                                              sampler.variant)
            log.info("idle path engaged: %d segments", len(segs))
            result = idlepose.build_idle_pose_tensor(poses, segs, audio.frames)
    else:
        result = idlepose.idle_pipeline(poses, audio, sampler)
    save_poses(result, out_path)
    return result


def _read_clip_dir(d: Path):
    frames_dir = d / "frames"
    if not frames_dir.is_dir():
        raise DataError(f"{d} has no frames/ directory")
    files = sorted(frames_dir.glob("frame_*.rawf"))
    if files:
        frames = np.stack([e2v.read_raw_image(f) for f in files])
    else:
        files = sorted(frames_dir.glob("frame_*.ppm"))
        if not files:
            raise DataError(f"{frames_dir} contains no frames")
        frames = np.stack([e2v.read_ppm(f) for f in files])
    lm = load_landmarks(d / "landmarks.lmk").values if (d / "landmarks.lmk").is_file() else None
    poses = load_poses(d / "poses.pos").values if (d / "poses.pos").is_file() else None
    meta = {}
    if (d / "meta.cfg").is_file():
        for line in (d / "meta.cfg").read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    return frames, lm, poses, meta


def evaluate_clip(gen_dir: Path, ref_dir: Path | None,
                  classifier: metrics.EmotionClassifier | None = None,
                  emotion: str | None = None) -> metrics.MetricReport:
    frames, lm, poses, meta = _read_clip_dir(Path(gen_dir))
    emotion = emotion or meta.get("emotion") or None
    nan = math.nan
    s = p = m = f = nan
    if ref_dir is not None:
        r_frames, r_lm, _, _ = _read_clip_dir(Path(ref_dir))
        if r_frames.shape != frames.shape:
            raise DataError(f"frame sets differ: {frames.shape} vs {r_frames.shape}")
        s = float(np.mean([metrics.ssim(a, b) for a, b in zip(frames, r_frames)]))
        p = metrics.psnr(frames, r_frames)
        if lm is not None and r_lm is not None:
            m, f = metrics.lmd(lm, r_lm)
    score = nan
    if classifier is not None and emotion and lm is not None:
        score = metrics.emotion_score(classifier, lm, emotion)
    motion = metrics.motion_stats(poses) if poses is not None and len(poses) >= 3 else None
    return metrics.MetricReport(s, p, score, m, f, motion)


def _clip_dirs(d: Path) -> list[Path]:
    if (d / "frames").is_dir():
        return [d]
    subs = sorted(p for p in d.iterdir() if p.is_dir() and (p / "frames").is_dir())
    if not subs:
        raise DataError(f"{d} contains no clip directories")
    return subs


def run_eval(cfg: PipelineConfig, gen_dir, ref_dir) -> tuple[dict[str, metrics.MetricReport], str, str]:
    """Per-clip reports plus ``(tsv, key=value summary)`` text."""
    gen_dir, ref_dir = Path(gen_dir), Path(ref_dir)
    gens = _clip_dirs(gen_dir)
    single = len(gens) == 1 and gens[0] == gen_dir
    clf = _maybe_classifier(cfg)
    reports = {}
    for g in gens:
        r = ref_dir if single else ref_dir / g.name
        reports[g.name] = evaluate_clip(g, r, clf)
    tsv = ["clip\t" + "\t".join(metrics.MetricReport.HEADER)]
    for name, rep in reports.items():
        tsv.append(name + "\t" + "\t".join(metrics.format_metric(v) for v in rep.values()))
    cols = np.array([rep.values() for rep in reports.values()], dtype=float)
    keys = ["ssim", "psnr", "emotion_score", "m_lmd", "f_lmd", "vel_avg", "vel_std", "acc_avg",
            "acc_std"]
    summary = [f"clips={len(reports)}", "ssim_window=7x7-uniform", "emotion_score_source=proxy"]
    for k, col in zip(keys, cols.T):
        summary.append(f"{k}={metrics.format_metric(float(np.mean(col)))}")
    return reports, "\n".join(tsv) + "\n", "\n".join(summary) + "\n"
