"""Windowed streaming inference: sessions, consensus, and latency metrics.

A clip of T frames is processed as T/W contiguous windows of W frames each.
Every window yields one classification event; the running consensus is the
mean of all window logits seen so far. Feedback variants thread a compressed
summary of each window's final features into the next window's forward pass.

The two closed-form metrics: actions-per-second = (T/W) * clips-per-second
(exact rational arithmetic) and action-product-delay = W / fps_in seconds.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .feedback import FeedbackState, compress_features
from .network import Network
from .numerics import Array

MODES = ("consensus", "SF", "CF", "SF+CF")


@dataclass(frozen=True)
class WindowConfig:
    clip_len: int
    window_len: int
    fps_in: float
    mode: str = "consensus"

    def __post_init__(self):
        if self.window_len < 1 or self.window_len > self.clip_len:
            raise ConfigError(
                f"window length {self.window_len} must satisfy 1 <= W <= clip length {self.clip_len}"
            )
        if self.clip_len % self.window_len != 0:
            raise ConfigError(
                f"clip length {self.clip_len} is not a multiple of window length {self.window_len}"
            )
        if self.fps_in <= 0:
            raise ConfigError(f"fps_in must be positive, got {self.fps_in}")
        if self.mode not in MODES:
            raise ConfigError(f"mode {self.mode!r} must be one of {MODES}")

    @property
    def windows_per_clip(self) -> int:
        return self.clip_len // self.window_len

    @property
    def uses_feedback(self) -> bool:
        return self.mode != "consensus"


@dataclass
class ClassificationEvent:
    window_index: int
    window_logits: Array
    consensus_logits: Array
    predicted_class: int
    wall_time_ms: float

    def to_json_obj(self) -> dict:
        return {
            "window": self.window_index,
            "logits": [float(v) for v in self.window_logits],
            "consensus": [float(v) for v in self.consensus_logits],
            "class": self.predicted_class,
            "ms": self.wall_time_ms,
        }


class StreamSession:
    """Mutable per-stream state: feedback summary, consensus sum, event log."""

    def __init__(self, config: WindowConfig):
        self.config = config
        self.fb = FeedbackState.empty()
        self.logits_sum: Array | None = None
        self.windows_seen = 0
        self.events: list[ClassificationEvent] = []

    @property
    def consensus_logits(self) -> Array:
        if self.windows_seen < 1:
            raise StateError("no windows processed yet")
        return self.logits_sum / self.windows_seen


def split_windows(clip: Array, config: WindowConfig) -> list[Array]:
    """Cut a (M, C, T, V) clip into T/W contiguous windows of W frames."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4:
        raise DimensionError(f"clip must be rank-4, got shape {clip.shape}")
    t = clip.shape[2]
    if t != config.clip_len:
        raise DimensionError(f"clip has {t} frames but the configuration expects {config.clip_len}")
    w = config.window_len
    return [clip[:, :, i * w : (i + 1) * w, :] for i in range(config.windows_per_clip)]


def step(session: StreamSession, net: Network, window: Array) -> ClassificationEvent:
    """Run one window through the network and fold it into the consensus."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 4 or window.shape[2] != session.config.window_len:
        raise DimensionError(
            f"window must carry exactly {session.config.window_len} frames, got shape {window.shape}"
        )
    use_fb = session.config.uses_feedback
    if use_fb and net.feedback is None:
        raise StateError(f"mode {session.config.mode!r} needs a network with feedback attached")
    start = time.perf_counter()
    fb_in = session.fb if use_fb else None
    logits, features = net.forward(window, fb_in)
    if use_fb:
        session.fb = compress_features(features, net.feedback.compressor, window_index=session.windows_seen)
    elapsed_ms = (time.perf_counter() - start) * 1e3
    if session.logits_sum is None:
        session.logits_sum = np.zeros_like(logits)
    session.logits_sum = session.logits_sum + logits
    session.windows_seen += 1
    consensus = session.logits_sum / session.windows_seen
    event = ClassificationEvent(
        window_index=session.windows_seen - 1,
        window_logits=logits,
        consensus_logits=consensus,
        predicted_class=int(np.argmax(consensus)),  # argmax breaks ties toward the lowest index
        wall_time_ms=elapsed_ms,
    )
    session.events.append(event)
    return event


def classify_clip(net: Network, clip: Array, config: WindowConfig) -> ClassificationEvent:
    """Window a full clip through a fresh session; returns the final event."""
    session = StreamSession(config)
    event = None
    for window in split_windows(clip, config):
        event = step(session, net, window)
    return event


def compute_aps(clip_len: int, window_len: int, cps_in) -> Fraction:
    """Actions per second: (T/W) * clips-per-second, in exact rational arithmetic."""
    if clip_len <= 0 or window_len <= 0:
        raise ConfigError(f"clip and window lengths must be positive, got {clip_len}, {window_len}")
    if window_len > clip_len:
        raise ConfigError(f"window length {window_len} exceeds clip length {clip_len}")
    cps = Fraction(cps_in)
    if cps <= 0:
        raise ConfigError(f"clips-per-second must be positive, got {cps_in}")
    return Fraction(clip_len, window_len) * cps


def compute_apd(fps_in: float, window_len: int) -> float:
    """Action product delay in seconds: W / fps_in."""
    if fps_in <= 0:
        raise ConfigError(f"fps_in must be positive, got {fps_in}")
    if window_len < 1:
        raise ConfigError(f"window length must be >= 1, got {window_len}")
    return window_len / fps_in


def measure_aps(
    net: Network,
    config: WindowConfig,
    num_people: int,
    duration: float,
    seed: int = 0,
) -> float:
    """Measured classification throughput: drive synthetic windows for
    ``duration`` wall-clock seconds and report events per second.

    Hardware-specific by nature; callers compare trends, not absolute values.
    """
    if duration < 1:
        raise ConfigError(f"measurement duration must be at least 1 second, got {duration}")
    if num_people < 1:
        raise ConfigError(f"num_people must be >= 1, got {num_people}")
    rng = np.random.default_rng(seed)
    window = rng.normal(size=(num_people, net.config.in_channels, config.window_len, net.layout.num_joints))
    session = StreamSession(config)
    events = 0
    start = time.perf_counter()
    while True:
        step(session, net, window)
        events += 1
        elapsed = time.perf_counter() - start
        if elapsed >= duration:
            break
        if session.windows_seen >= config.windows_per_clip:
            session = StreamSession(config)  # roll to a fresh clip
    return events / elapsed


def events_to_jsonl(events: list[ClassificationEvent]) -> str:
    """One compact JSON object per line, in event order."""
    out = io.StringIO()
    for event in events:
        out.write(json.dumps(event.to_json_obj(), separators=(",", ":")))
        out.write("\n")
    return out.getvalue()


BENCH_CSV_HEADER = "T,W,fps_in,cps_in,aps_formula,aps_measured,apd_seconds"


def bench_csv_row(
    config: WindowConfig,
    cps_in,
    aps_measured: float,
) -> str:
    aps = compute_aps(config.clip_len, config.window_len, cps_in)
    apd = compute_apd(config.fps_in, config.window_len)
    return (
        f"{config.clip_len},{config.window_len},{config.fps_in},{float(cps_in)},"
        f"{float(aps)},{aps_measured},{apd}"
    )
