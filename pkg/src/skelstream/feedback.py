"""Attentive feedback between consecutive windows of a skeleton stream.

Two augmentations share a compressed 32-dimensional summary of the previous
window's final features:

* semantic feedback: each per-joint-per-frame token of the current input is
  scored against the summary (unnormalized cross-attention with a single
  combined key/value projection) and the scored values re-enter through a
  gated residual;
* control feedback: the summary drives a lightweight channel-attention
  multiplier on intermediate feature maps.

Both paths sit behind gates initialized at zero, so freshly grown blocks leave
the host network's outputs bit-for-bit unchanged, and both are exact
identities until the first window has produced a summary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, StateError
from .network import BatchNorm, Network
from .numerics import Array, Parameter, conv2d_backward, conv2d_forward, sigmoid

FEEDBACK_DIM = 32


@dataclass
class FeedbackState:
    """Per-stream summary of the previous window; invalid until one exists."""

    vector: Array
    window_index: int = -1
    valid: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (FEEDBACK_DIM,):
            raise DimensionError(f"feedback vector must have length {FEEDBACK_DIM}, got {self.vector.shape}")
        if not self.valid and np.any(self.vector != 0.0):
            raise StateError("invalid feedback state must carry an all-zero vector")

    @classmethod
    def empty(cls) -> "FeedbackState":
        return cls(np.zeros(FEEDBACK_DIM))


def compress_features(features: Array, compressor: Parameter, window_index: int = 0) -> FeedbackState:
    """Pool a (C, T, V) feature map and project it to the 32-entry summary."""
    features = np.asarray(features, dtype=np.float64)
    pooled = features.reshape(features.shape[0], -1).mean(axis=1)
    if compressor.value.shape[1] != pooled.shape[0]:
        raise DimensionError(
            f"compressor expects {compressor.value.shape[1]} channels, features have {pooled.shape[0]}"
        )
    vec = compressor.value @ pooled
    return FeedbackState(vec, window_index=window_index, valid=True)


def compress_features_cached(features: Array, compressor: Parameter, window_index: int = 0):
    state = compress_features(features, compressor, window_index)
    return state, (features.shape, features.reshape(features.shape[0], -1).mean(axis=1))


def compress_backward(cache, compressor: Parameter, grad_vec: Array) -> Array:
    """Backward of compress_features: accumulates into the compressor, returns grad wrt features."""
    feat_shape, pooled = cache
    compressor.grad += np.outer(grad_vec, pooled)
    grad_pooled = compressor.value.T @ grad_vec
    slab = int(np.prod(feat_shape[1:]))
    g = grad_pooled.reshape((feat_shape[0],) + (1,) * (len(feat_shape) - 1))
    return np.broadcast_to(g / slab, feat_shape).copy()


class SemanticAttentionBlock:
    """Gated cross-attention between current tokens and the past-window summary.

    score_i = (Q token_i) . fb / sqrt(32), unnormalized; attended_i = score_i *
    (KV fb); the attended map re-enters through a 1x1 conv, a zero-initialized
    batch norm, and a scalar residual gate. With an invalid summary the block
    short-circuits to an exact identity.
    """

    def __init__(self, channels: int, rng: np.random.Generator, fb_dim: int = FEEDBACK_DIM):
        self.channels = channels
        self.fb_dim = fb_dim
        self.q_proj = Parameter(rng.normal(0.0, 1.0 / math.sqrt(channels), size=(fb_dim, channels)))
        self.kv_proj = Parameter(rng.normal(0.0, 1.0 / math.sqrt(fb_dim), size=(channels, fb_dim)))
        self.gate_conv = Parameter(rng.normal(0.0, 1.0 / math.sqrt(channels), size=(channels, channels, 1, 1)))
        self.gate_bn = BatchNorm(channels, zero_init=True)
        self.res_gate = Parameter(np.zeros(()), decay=False)

    def forward(self, x: Array, fb: Optional[FeedbackState], training: bool = False):
        if x.shape[0] != self.channels:
            raise DimensionError(f"attention block built for {self.channels} channels, input has {x.shape[0]}")
        if fb is None or not fb.valid:
            return x, None
        qfb = self.q_proj.value.T @ fb.vector  # (C,), folds (Q x).fb into x.(Q^T fb)
        scores = np.tensordot(qfb, x, axes=([0], [0])) / math.sqrt(self.fb_dim)  # (T, V)
        value = self.kv_proj.value @ fb.vector  # (C,)
        att = value[:, None, None] * scores[None, :, :]
        h, conv_cache = conv2d_forward(att, self.gate_conv)
        g, bn_cache = self.gate_bn.forward(h, training)
        y = x + self.res_gate.value * g
        return y, (x, fb.vector, qfb, scores, value, conv_cache, bn_cache, g)

    def backward(self, cache, grad_out: Array):
        if cache is None:  # identity short-circuit
            return grad_out, None
        x, fb_vec, qfb, scores, value, conv_cache, bn_cache, g = cache
        grad_x = grad_out.copy()
        self.res_gate.grad += np.sum(grad_out * g)
        grad_g = grad_out * self.res_gate.value
        grad_h = self.gate_bn.backward(bn_cache, grad_g)
        grad_att, grad_conv_w = conv2d_backward(conv_cache, grad_h)
        self.gate_conv.grad += grad_conv_w
        grad_value = np.einsum("ctv,tv->c", grad_att, scores)
        grad_scores = np.einsum("ctv,c->tv", grad_att, value)
        self.kv_proj.grad += np.outer(grad_value, fb_vec)
        grad_fb = self.kv_proj.value.T @ grad_value
        scale = 1.0 / math.sqrt(self.fb_dim)
        grad_qfb = np.einsum("tv,ctv->c", grad_scores, x) * scale
        grad_x += qfb[:, None, None] * grad_scores[None, :, :] * scale
        self.q_proj.grad += np.outer(fb_vec, grad_qfb)
        grad_fb = grad_fb + self.q_proj.value @ grad_qfb
        return grad_x, grad_fb

    def iter_params(self, prefix: str):
        yield f"{prefix}.q_proj", self.q_proj
        yield f"{prefix}.kv_proj", self.kv_proj
        yield f"{prefix}.gate_conv", self.gate_conv
        yield from self.gate_bn.iter_params(f"{prefix}.gate_bn")
        yield f"{prefix}.res_gate", self.res_gate

    def iter_buffers(self, prefix: str):
        yield from self.gate_bn.iter_buffers(f"{prefix}.gate_bn")

    def num_params(self) -> int:
        return sum(p.size for _, p in self.iter_params("x"))


class ControlFeedbackBlock:
    """Channel attention driven by the past-window summary.

    The summary is projected to the attachment point's channel count, smoothed
    by a 3-tap conv across channels, and squashed to weights w in (0,1); each
    channel is scaled by 1 + gate * (2w - 1), so a zero gate is an exact
    identity and the multiplier stays inside [1-|gate|, 1+|gate|].
    """

    ECA_KERNEL = 3

    def __init__(self, channels: int, rng: np.random.Generator, fb_dim: int = FEEDBACK_DIM):
        self.channels = channels
        self.fb_dim = fb_dim
        self.proj = Parameter(rng.normal(0.0, 1.0 / math.sqrt(fb_dim), size=(channels, fb_dim)))
        self.eca_kernel = Parameter(rng.normal(0.0, 1.0 / math.sqrt(self.ECA_KERNEL), size=self.ECA_KERNEL))
        self.gate = Parameter(np.zeros(()), decay=False)

    def forward(self, x: Array, fb: Optional[FeedbackState]):
        if x.shape[0] != self.channels:
            raise DimensionError(f"control block built for {self.channels} channels, input has {x.shape[0]}")
        if fb is None or not fb.valid:
            return x, None
        h = self.proj.value @ fb.vector  # (C,)
        z = np.correlate(h, self.eca_kernel.value, mode="same")
        w = sigmoid(z)
        mult = 1.0 + self.gate.value * (2.0 * w - 1.0)
        y = x * mult[:, None, None]
        return y, (x, fb.vector, h, w, mult)

    def backward(self, cache, grad_out: Array):
        if cache is None:
            return grad_out, None
        x, fb_vec, h, w, mult = cache
        grad_x = grad_out * mult[:, None, None]
        grad_mult = np.einsum("ctv,ctv->c", grad_out, x)
        self.gate.grad += np.sum(grad_mult * (2.0 * w - 1.0))
        grad_w = grad_mult * self.gate.value * 2.0
        grad_z = grad_w * w * (1.0 - w)
        grad_h = np.convolve(grad_z, self.eca_kernel.value, mode="same")
        padded_h = np.pad(h, self.ECA_KERNEL // 2)
        self.eca_kernel.grad += np.correlate(padded_h, grad_z, mode="valid")
        self.proj.grad += np.outer(grad_h, fb_vec)
        grad_fb = self.proj.value.T @ grad_h
        return grad_x, grad_fb

    def iter_params(self, prefix: str):
        yield f"{prefix}.proj", self.proj
        yield f"{prefix}.eca_kernel", self.eca_kernel
        yield f"{prefix}.gate", self.gate

    def iter_buffers(self, prefix: str):
        return iter(())

    def num_params(self) -> int:
        return sum(p.size for _, p in self.iter_params("x"))


@dataclass
class FeedbackAttachment:
    variant: str
    compressor: Parameter
    semantic: Optional[SemanticAttentionBlock] = None
    control: dict = field(default_factory=dict)  # block index -> ControlFeedbackBlock

    def iter_params(self, prefix: str):
        yield f"{prefix}.compressor", self.compressor
        if self.semantic is not None:
            yield from self.semantic.iter_params(f"{prefix}.semantic")
        for idx in sorted(self.control):
            yield from self.control[idx].iter_params(f"{prefix}.control.{idx}")

    def iter_buffers(self, prefix: str):
        if self.semantic is not None:
            yield from self.semantic.iter_buffers(f"{prefix}.semantic")


VARIANTS = ("consensus", "SF", "CF", "SF+CF")


def semantic_attention_forward(block: SemanticAttentionBlock, x: Array, fb: Optional[FeedbackState]) -> Array:
    y, _ = block.forward(x, fb, training=False)
    return y


def control_feedback_forward(block: ControlFeedbackBlock, x: Array, fb: Optional[FeedbackState]) -> Array:
    y, _ = block.forward(x, fb)
    return y


def control_attach_indices(channels: tuple) -> list[int]:
    """Stage boundaries: the last block of each channel stage."""
    n = len(channels)
    return [i for i in range(n) if i == n - 1 or channels[i + 1] != channels[i]]


def grow_attach(net: Network, variant: str, seed: int = 0) -> Network:
    """Attach zero-gated feedback blocks for ``variant`` onto a built network.

    The consensus variant attaches nothing. Attaching a component that is
    already present is a state error. All gates start at zero, so outputs are
    unchanged until training moves them.
    """
    if variant not in VARIANTS:
        raise StateError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "consensus":
        return net
    want_sf = variant in ("SF", "SF+CF")
    want_cf = variant in ("CF", "SF+CF")
    if net.feedback is not None:
        if want_sf and net.feedback.semantic is not None:
            raise StateError("semantic feedback already attached")
        if want_cf and net.feedback.control:
            raise StateError("control feedback already attached")
    rng = np.random.default_rng(seed)
    if net.feedback is None:
        compressor = Parameter(rng.normal(0.0, 1.0 / math.sqrt(net.feature_dim), size=(FEEDBACK_DIM, net.feature_dim)))
        net.feedback = FeedbackAttachment(variant=variant, compressor=compressor)
    else:
        combined = sorted({net.feedback.variant, variant} - {"consensus"})
        net.feedback.variant = "SF+CF" if len(combined) > 1 else combined[0]
    if want_sf:
        net.feedback.semantic = SemanticAttentionBlock(net.config.in_channels, rng)
    if want_cf:
        for idx in control_attach_indices(net.config.channels):
            net.feedback.control[idx] = ControlFeedbackBlock(net.config.channels[idx], rng)
    return net
