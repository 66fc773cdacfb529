"""Idle-state head pose sampling for silent audio.

Idle runs are stretches of consecutive poses whose cosine similarity stays
at 1 (within ``eps``). Their lengths bound the random idle lengths drawn by
the segment generator, which alternates idle segments with a fixed gap of
ordinary poses. The new pose tensor freezes the head during each segment
and otherwise plays the source trace forward.

Random draws come from a counter-based SplitMix64 stream (draw ``k`` of seed
``s`` is ``mix(mix(s) + k * golden)``), so the generator can run in
lockstep across many seeds and parameter sets with numpy while staying
bit-identical to a single call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import AudioFeatureSequence, PoseTensor

log = logging.getLogger(__name__)

PRNG_ALGORITHM = "splitmix64-counter"
SILENCE_RMS = 1e-3

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class NoIdleError(ValueError):
    """The pose trace contains no run of identical consecutive poses."""


@dataclass(frozen=True)
class IdleSegment:
    start: int
    end: int  # inclusive

    def __post_init__(self) -> None:
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid idle segment ({self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class IdleBounds:
    len_min: int
    len_max: int
    identified_idle_pose_indices: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError(f"invalid idle bounds ({self.len_min}, {self.len_max})")


@dataclass
class SamplerConfig:
    """Segment sampler settings.

    ``variant`` picks the ablation shape: ``"random"`` lengths with a fixed
    gap (the default), ``"fixed_length"`` (length ``len_max``, gap uniform in
    ``[0, 2*len_gap]``), ``"random_random"`` (both random), ``"even"``
    (length ``(len_min+len_max)//2``, fixed gap) or ``"none"``.
    """

    len_gap: int = 4
    seed: int = 0
    eps: float = 1e-6
    variant: str = "random"
    fallback_len_min: int = 2
    fallback_len_max: int = 8
    silence_rms: float = SILENCE_RMS
    algorithm: str = PRNG_ALGORITHM

    def __post_init__(self) -> None:
        if self.len_gap < 0:
            raise ValueError("len_gap must be >= 0")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown sampler variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.algorithm != PRNG_ALGORITHM:
            raise ValueError(f"unsupported PRNG algorithm {self.algorithm!r}")


# (length mode, gap mode)
VARIANTS = {
    "random": ("random", "fixed"),
    "fixed_length": ("max", "random"),
    "random_random": ("random", "random"),
    "even": ("mid", "fixed"),
    "none": (None, None),
}


# ---------------------------------------------------------------------------
# Similarity and idle detection
# ---------------------------------------------------------------------------


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def consecutive_similarities(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("pose trace contains a zero-norm row")
    u = v / norms[:, None]
    return np.clip((u[1:] * u[:-1]).sum(1), -1.0, 1.0)


def find_idle_bounds(poses: PoseTensor | np.ndarray, eps: float = 1e-6) -> IdleBounds:
    values = poses.values if isinstance(poses, PoseTensor) else np.asarray(poses)
    if values.shape[0] < 2:
        raise ValueError("need at least 2 poses to look for idle runs")
    still = consecutive_similarities(values) >= 1.0 - eps
    runs: list[tuple[int, int]] = []
    i = 0
    while i < still.size:
        if still[i]:
            j = i
            while j < still.size and still[j]:
                j += 1
            runs.append((i, j - i + 1))  # j - i similar pairs -> j - i + 1 poses
            i = j
        else:
            i += 1
    if not runs:
        raise NoIdleError("no idle run (consecutive poses at cosine similarity 1) found")
    lengths = [k for _, k in runs]
    return IdleBounds(min(lengths), max(lengths), [s for s, _ in runs])


# ---------------------------------------------------------------------------
# Segment generation
# ---------------------------------------------------------------------------


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def _draw(key: np.ndarray, counter: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Integer uniform in ``[lo, hi]`` from draw ``counter`` of stream ``key``.

    Uses the top 53 bits times the span, so the bias is below ``span / 2**53``.
    """
    with np.errstate(over="ignore"):
        x = _mix(key + counter.astype(np.uint64) * _GOLDEN)
    span = np.maximum(hi - lo + 1, 1).astype(np.uint64)
    return lo + ((x >> np.uint64(11)) * span >> np.uint64(53)).astype(np.int64)


def _stream_key(seed) -> np.ndarray:
    s = np.asarray(seed, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        return _mix(s + _GOLDEN)


def _validate_bounds(n, len_min, len_max, len_gap) -> None:
    if np.any(np.asarray(n) < 0):
        raise ValueError("n must be >= 0")
    if np.any(np.asarray(len_min) < 1) or np.any(np.asarray(len_min) > np.asarray(len_max)):
        raise ValueError("need 1 <= len_min <= len_max")
    if np.any(np.asarray(len_gap) < 0):
        raise ValueError("len_gap must be >= 0")


@dataclass
class SegmentBatch:
    """Segments for a batch of generator calls, flattened and grouped by row."""

    row: np.ndarray
    start: np.ndarray
    end: np.ndarray
    counts: np.ndarray

    def for_row(self, i: int) -> list[IdleSegment]:
        lo, hi = np.searchsorted(self.row, [i, i + 1])  # rows are sorted
        return [IdleSegment(int(s), int(e)) for s, e in zip(self.start[lo:hi], self.end[lo:hi])]


def generate_segments_batch(n, len_min, len_max, len_gap, seeds,
                            variant: str = "random") -> SegmentBatch:
    """Lockstep segment generation over broadcast (flattened) parameter/seed arrays."""
    _validate_bounds(n, len_min, len_max, len_gap)
    if variant not in VARIANTS:
        raise ValueError(f"unknown sampler variant {variant!r}")
    n, lmin, lmax, gap, seeds = (np.ravel(a).astype(np.int64) for a in
                                 np.broadcast_arrays(n, len_min, len_max, len_gap, seeds))
    length_mode, gap_mode = VARIANTS[variant]
    empty = np.zeros(0, dtype=np.int64)
    if length_mode is None:
        return SegmentBatch(empty, empty, empty, np.zeros(n.size, dtype=np.int64))
    key = _stream_key(seeds)
    idx = np.flatnonzero(n > 0)  # rows still generating
    pos = np.zeros(idx.size, dtype=np.int64)
    step = 0
    rows, starts, ends = [], [], []
    while idx.size:
        nn, lo, lm, gp, ky = n[idx], lmin[idx], lmax[idx], gap[idx], key[idx]
        hi = np.minimum(lm, nn - pos)
        ok = hi >= lo  # infeasible draw: stop rather than call Random(a, b) with b < a
        if length_mode == "random":
            length = _draw(ky, np.full(idx.size, 2 * step), lo, hi)
        elif length_mode == "max":
            length = np.minimum(lm, hi)
        else:
            length = np.minimum((lo + lm) // 2, hi)
        g = gp if gap_mode == "fixed" else _draw(ky, np.full(idx.size, 2 * step + 1), 0 * gp, 2 * gp)
        end = pos + length - 1
        ok &= end + g < nn
        rows.append(idx[ok])
        starts.append(pos[ok])
        ends.append(end[ok])
        pos = end + 1 + g
        ok &= pos < nn
        idx, pos = idx[ok], pos[ok]
        step += 1
    if rows:
        row, start, end = np.concatenate(rows), np.concatenate(starts), np.concatenate(ends)
        order = np.lexsort((start, row))
        row, start, end = row[order], start[order], end[order]
    else:
        row = start = end = empty
    return SegmentBatch(row, start, end, np.bincount(row, minlength=n.size))


def generate_segments(n: int, len_min: int, len_max: int, len_gap: int, seed: int,
                      variant: str = "random") -> list[IdleSegment]:
    """Idle segments over an output tensor of length ``n``; deterministic in ``seed``."""
    return generate_segments_batch(n, len_min, len_max, len_gap, seed, variant).for_row(0)


# ---------------------------------------------------------------------------
# Pose tensor construction
# ---------------------------------------------------------------------------


def build_idle_pose_tensor(source: PoseTensor | np.ndarray, segments: list[IdleSegment],
                           n_out: int, idle_pose_index: int | None = None) -> PoseTensor:
    """Freeze the pose inside each segment; consume ``source`` in order elsewhere.

    A segment holds the pose emitted just before it. A segment at position 0
    holds ``source[idle_pose_index]`` (the first identified idle pose) or
    ``source[0]`` when none is given.
    """
    src = source.values if isinstance(source, PoseTensor) else np.asarray(source, dtype=np.float32)
    covered = np.zeros(n_out, dtype=bool)
    prev_end = -1
    for seg in sorted(segments, key=lambda s: s.start):
        if seg.end >= n_out:
            raise ValueError(f"segment ({seg.start}, {seg.end}) exceeds output length {n_out}")
        if seg.start <= prev_end:
            raise ValueError("idle segments overlap")
        covered[seg.start:seg.end + 1] = True
        prev_end = seg.end
    needed = int((~covered).sum())
    if needed > src.shape[0]:
        raise ValueError(f"source has {src.shape[0]} poses, {needed} needed")
    out = np.empty((n_out, src.shape[1]), dtype=src.dtype)
    k = 0
    for i in range(n_out):
        if covered[i]:
            if i > 0:
                out[i] = out[i - 1]
            else:
                out[i] = src[idle_pose_index if idle_pose_index is not None else 0]
        else:
            out[i] = src[k]
            k += 1
    return PoseTensor(out)


def is_silent(audio: AudioFeatureSequence, threshold: float = SILENCE_RMS) -> bool:
    """Mean per-frame RMS energy below ``threshold``."""
    return float(np.mean(audio.energy)) < threshold


def idle_pipeline(source: PoseTensor, audio: AudioFeatureSequence,
                  config: SamplerConfig | None = None, n_out: int | None = None) -> PoseTensor:
    """Idle-state poses for silent audio; ``source`` unchanged otherwise."""
    cfg = config or SamplerConfig()
    if not is_silent(audio, cfg.silence_rms):
        return source
    n_out = audio.frames if n_out is None else n_out
    try:
        bounds = find_idle_bounds(source, cfg.eps)
        idle_idx: int | None = bounds.identified_idle_pose_indices[0]
    except NoIdleError:
        log.info("no idle run in source poses; using configured bounds")
        bounds = IdleBounds(cfg.fallback_len_min, cfg.fallback_len_max)
        idle_idx = None
    segments = generate_segments(n_out, bounds.len_min, bounds.len_max, cfg.len_gap, cfg.seed,
                                 cfg.variant)
    log.info("idle path engaged: %d segments over %d frames (len %d..%d, gap %d)",
             len(segments), n_out, bounds.len_min, bounds.len_max, cfg.len_gap)
    return build_idle_pose_tensor(source, segments, n_out, idle_idx)
