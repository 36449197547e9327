"""Emulation of upstream pose-pipeline errors on clean skeleton clips.

Three corruptions stand in for a live pose estimator and re-identification
stage: per-keypoint dropout (spatial noise), whole-skeleton dropout and
slot confusion per (person, frame) (frame-level temporal noise), and the
dynamic batching preprocessor that repeat-pads clips along the frame axis and
folds the person axis down to a fixed slot count.

Randomness is counter-based: every draw is a pure hash of (seed, stream tag,
structural indices), so corruption of any element is reproducible regardless
of iteration order, threading, or how many other elements were drawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Array

_MIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_M2 = np.uint64(0x94D049BB133111EB)

# distinct draw streams so the same indices never share randomness
STREAM_SPATIAL = 0x51
STREAM_FRAME_DROP = 0x52
STREAM_CONFUSE = 0x53
STREAM_TARGET = 0x54


def _mix64(z: Array) -> Array:
    """SplitMix64 finalizer, vectorized over uint64 arrays (wraparound intended)."""
    with np.errstate(over="ignore"):
        z = (z + _MIX_GAMMA).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _MIX_M1
        z = (z ^ (z >> np.uint64(27))) * _MIX_M2
        return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream: int, *indices) -> Array:
    """Deterministic uniforms in [0, 1) keyed by (seed, stream, indices).

    Index arguments broadcast; the result has the broadcast shape.
    """
    h = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(stream))
    for idx in indices:
        arr = np.asarray(idx, dtype=np.uint64)
        h = _mix64(np.bitwise_xor(h, arr))
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


@dataclass(frozen=True)
class NoiseConfig:
    spatial_drop_p: float = 0.0
    frame_drop_p: float = 0.0
    id_confusion_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("spatial_drop_p", "frame_drop_p", "id_confusion_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class LambdaPolicy:
    """Target person-slot count after reduction; 1 is the identity-agnostic mode."""

    lam: int = 1

    def __post_init__(self):
        if self.lam < 1:
            raise ConfigError(f"lambda must be >= 1, got {self.lam}")


def _keypoint_uniforms(config: NoiseConfig, stream: int, m: int, t: int, v: int) -> Array:
    persons = np.arange(m, dtype=np.uint64)[:, None, None]
    frames = np.arange(t, dtype=np.uint64)[None, :, None]
    joints = np.arange(v, dtype=np.uint64)[None, None, :]
    return counter_uniform(config.seed, stream, persons, frames, joints)


def _frame_uniforms(config: NoiseConfig, stream: int, m: int, t: int) -> Array:
    persons = np.arange(m, dtype=np.uint64)[:, None]
    frames = np.arange(t, dtype=np.uint64)[None, :]
    return counter_uniform(config.seed, stream, persons, frames)


def inject_spatial_noise(clip: Array, config: NoiseConfig) -> Array:
    """Zero both coordinates of each keypoint independently with probability
    ``spatial_drop_p``."""
    clip = np.asarray(clip, dtype=np.float64)
    m, _, t, v = clip.shape
    u = _keypoint_uniforms(config, STREAM_SPATIAL, m, t, v)
    dropped = u < config.spatial_drop_p
    return np.where(dropped[:, None, :, :], 0.0, clip)


def inject_temporal_noise(clip: Array, config: NoiseConfig) -> Array:
    """Per (person, frame): drop the whole skeleton with probability
    ``frame_drop_p``; independently, with probability ``id_confusion_p`` move
    it to a uniformly chosen other slot (overwriting what was there and
    leaving the source slot zero). With a single person slot confusion has no
    other slot to land in and is a no-op.
    """
    clip = np.asarray(clip, dtype=np.float64)
    m, _, t, _ = clip.shape
    drops = _frame_uniforms(config, STREAM_FRAME_DROP, m, t) < config.frame_drop_p
    dropped = np.where(drops[:, None, :, None], 0.0, clip)
    if m == 1 or config.id_confusion_p == 0.0:
        return dropped
    confuse = _frame_uniforms(config, STREAM_CONFUSE, m, t) < config.id_confusion_p
    target_draw = _frame_uniforms(config, STREAM_TARGET, m, t)
    out = dropped.copy()
    for frame in range(t):
        movers = [p for p in range(m) if confuse[p, frame]]
        if not movers:
            continue
        for p in movers:
            out[p, :, frame, :] = 0.0
        for p in movers:
            other = int(target_draw[p, frame] * (m - 1))
            other = min(other, m - 2)  # guard the u == 1-epsilon edge
            target = other if other < p else other + 1
            out[target, :, frame, :] = dropped[p, :, frame, :]
    return out


def repeat_pad_frames(clip: Array, target_len: int) -> Array:
    """Tile a clip from frame 0 until it covers ``target_len`` frames."""
    clip = np.asarray(clip, dtype=np.float64)
    t = clip.shape[2]
    if t == 0:
        raise DataError("cannot repeat-pad an empty clip")
    if t >= target_len:
        return clip[:, :, :target_len, :]
    reps = -(-target_len // t)
    return np.tile(clip, (1, 1, reps, 1))[:, :, :target_len, :]


def reduce_persons(clip: Array, policy: LambdaPolicy) -> Array:
    """Fold the person axis onto ``lam`` slots: slots are summed by index
    modulo lambda when there are too many, zero-padded when too few."""
    clip = np.asarray(clip, dtype=np.float64)
    m = clip.shape[0]
    lam = policy.lam
    if m == lam:
        return clip.copy()
    out = np.zeros((lam,) + clip.shape[1:])
    for slot in range(min(m, lam)) if m < lam else range(m):
        out[slot % lam] += clip[slot]
    return out


def dynamic_batch(clips: list[Array], policy: LambdaPolicy) -> Array:
    """Assemble variable-length, variable-person clips into one dense batch.

    Frames are repeat-padded to the longest clip in the batch; the person axis
    of every clip is reduced/padded to ``lam`` slots. Output shape is
    (batch, lam, channels, T_max, joints).
    """
    if not clips:
        raise DataError("dynamic_batch needs at least one clip")
    arrays = [np.asarray(c, dtype=np.float64) for c in clips]
    c0, v0 = arrays[0].shape[1], arrays[0].shape[3]
    for i, a in enumerate(arrays):
        if a.ndim != 4:
            raise DataError(f"clip {i} must be rank-4, got shape {a.shape}")
        if a.shape[1] != c0 or a.shape[3] != v0:
            raise DataError(
                f"clip {i} has (C={a.shape[1]}, V={a.shape[3]}), expected uniform (C={c0}, V={v0})"
            )
    t_max = max(a.shape[2] for a in arrays)
    batched = [reduce_persons(repeat_pad_frames(a, t_max), policy) for a in arrays]
    return np.stack(batched)
