"""Spatial-temporal graph convolution network over a skeleton joint graph.

The stack is: per-joint input normalization, 12 residual blocks (each a graph
convolution over partitioned adjacency followed by a 9-tap temporal
convolution), global average pooling, and a linear classifier. Every layer
carries an explicit backward pass driven by caches returned from its forward,
so window sequences can be unrolled and backpropagated without an autodiff
graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError
from .graph import PartitionedAdjacency, SkeletonLayout, build_coco18_layout, build_partitioned_adjacency
from .numerics import (
    Array,
    Parameter,
    RunningStats,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    global_avg_pool,
    global_avg_pool_backward,
    relu,
    relu_backward,
)

DEFAULT_CHANNELS = (64, 64, 64, 64, 128, 128, 128, 128, 256, 256, 256, 256)
DEFAULT_STRIDES = (1, 1, 1, 1, 2, 1, 1, 1, 2, 1, 1, 1)
TEMPORAL_KERNEL = 9
TEMPORAL_PAD = TEMPORAL_KERNEL // 2


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> Array:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class BatchNorm:
    """Stateful wrapper around the functional batch norm: owns affine + stats."""

    def __init__(self, channels: int, zero_init: bool = False, eps: float = 1e-5, momentum: float = 0.1):
        init = np.zeros(channels) if zero_init else np.ones(channels)
        self.gamma = Parameter(init, decay=False)
        self.beta = Parameter(np.zeros(channels), decay=False)
        self.stats = RunningStats.fresh(channels)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Array, training: bool):
        return batchnorm_forward(x, self.gamma.value, self.beta.value, self.stats, training, self.eps, self.momentum)

    def backward(self, cache, grad_out: Array) -> Array:
        gx, ggamma, gbeta = batchnorm_backward(cache, grad_out)
        self.gamma.grad += ggamma
        self.beta.grad += gbeta
        return gx

    def iter_params(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def iter_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.stats, "mean"
        yield f"{prefix}.running_var", self.stats, "var"


class GcnLayer:
    """Graph convolution: pointwise channel projection per partition, then a
    joint-axis contraction with the (optionally masked) partition matrices."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        adjacency: PartitionedAdjacency,
        rng: np.random.Generator,
        edge_importance: bool = True,
    ):
        p = adjacency.num_partitions
        self.c_in = c_in
        self.c_out = c_out
        self.adjacency = adjacency
        self.weight = Parameter(_he_normal(rng, (p * c_out, c_in, 1, 1), c_in))
        self.edge_importance: Optional[Parameter] = (
            Parameter(np.ones_like(adjacency.matrices)) if edge_importance else None
        )

    def _masked_adjacency(self) -> Array:
        if self.edge_importance is None:
            return self.adjacency.matrices
        return self.adjacency.matrices * self.edge_importance.value

    def forward(self, x: Array):
        if x.shape[-1] != self.adjacency.num_joints:
            raise DimensionError(
                f"input has {x.shape[-1]} joints but adjacency expects {self.adjacency.num_joints}"
            )
        p = self.adjacency.num_partitions
        proj_flat, conv_cache = conv2d_forward(x, self.weight)
        proj = proj_flat.reshape(p, self.c_out, x.shape[1], x.shape[2])
        masked = self._masked_adjacency()
        y = np.einsum("pctv,pvw->ctw", proj, masked)
        return y, (conv_cache, proj, masked)

    def backward(self, cache, grad_out: Array) -> Array:
        conv_cache, proj, masked = cache
        grad_proj = np.einsum("ctw,pvw->pctv", grad_out, masked)
        grad_masked = np.einsum("pctv,ctw->pvw", proj, grad_out)
        if self.edge_importance is not None:
            self.edge_importance.grad += grad_masked * self.adjacency.matrices
        grad_x, grad_w = conv2d_backward(conv_cache, grad_proj.reshape(-1, *grad_out.shape[1:]))
        self.weight.grad += grad_w
        return grad_x

    def iter_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.edge_importance is not None:
            yield f"{prefix}.edge_importance", self.edge_importance


class TcnLayer:
    """9-tap temporal convolution per joint (kernel 9x1, padding 4) plus batch norm."""

    def __init__(self, channels: int, stride_t: int, rng: np.random.Generator):
        self.channels = channels
        self.stride_t = stride_t
        self.weight = Parameter(
            _he_normal(rng, (channels, channels, TEMPORAL_KERNEL, 1), channels * TEMPORAL_KERNEL)
        )
        self.bn = BatchNorm(channels)

    def forward(self, x: Array, training: bool):
        h, conv_cache = conv2d_forward(x, self.weight, stride=(self.stride_t, 1), padding=(TEMPORAL_PAD, 0))
        y, bn_cache = self.bn.forward(h, training)
        return y, (conv_cache, bn_cache)

    def backward(self, cache, grad_out: Array) -> Array:
        conv_cache, bn_cache = cache
        grad_h = self.bn.backward(bn_cache, grad_out)
        grad_x, grad_w = conv2d_backward(conv_cache, grad_h)
        self.weight.grad += grad_w
        return grad_x

    def iter_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield from self.bn.iter_params(f"{prefix}.bn")

    def iter_buffers(self, prefix: str):
        yield from self.bn.iter_buffers(f"{prefix}.bn")


class _ResidualProj:
    """1x1 temporally-strided projection with batch norm for shape-changing residuals."""

    def __init__(self, c_in: int, c_out: int, stride_t: int, rng: np.random.Generator):
        self.weight = Parameter(_he_normal(rng, (c_out, c_in, 1, 1), c_in))
        self.stride_t = stride_t
        self.bn = BatchNorm(c_out)

    def forward(self, x: Array, training: bool):
        h, conv_cache = conv2d_forward(x, self.weight, stride=(self.stride_t, 1))
        y, bn_cache = self.bn.forward(h, training)
        return y, (conv_cache, bn_cache)

    def backward(self, cache, grad_out: Array) -> Array:
        conv_cache, bn_cache = cache
        grad_h = self.bn.backward(bn_cache, grad_out)
        grad_x, grad_w = conv2d_backward(conv_cache, grad_h)
        self.weight.grad += grad_w
        return grad_x

    def iter_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield from self.bn.iter_params(f"{prefix}.bn")

    def iter_buffers(self, prefix: str):
        yield from self.bn.iter_buffers(f"{prefix}.bn")


class StGcnBlock:
    """gcn -> bn -> relu -> tcn(+bn) -> +residual -> relu."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        stride_t: int,
        adjacency: PartitionedAdjacency,
        rng: np.random.Generator,
        residual: bool = True,
        edge_importance: bool = True,
    ):
        self.c_in = c_in
        self.c_out = c_out
        self.stride_t = stride_t
        self.gcn = GcnLayer(c_in, c_out, adjacency, rng, edge_importance)
        self.bn = BatchNorm(c_out)
        self.tcn = TcnLayer(c_out, stride_t, rng)
        if not residual:
            self.residual = None
        elif c_in == c_out and stride_t == 1:
            self.residual = "identity"
        else:
            self.residual = _ResidualProj(c_in, c_out, stride_t, rng)

    def forward(self, x: Array, training: bool):
        a, gcn_cache = self.gcn.forward(x)
        b, bn_cache = self.bn.forward(a, training)
        c = relu(b)
        d, tcn_cache = self.tcn.forward(c, training)
        if self.residual is None:
            r, res_cache = 0.0, None
        elif self.residual == "identity":
            r, res_cache = x, None
        else:
            r, res_cache = self.residual.forward(x, training)
        pre = d + r
        y = relu(pre)
        return y, (gcn_cache, bn_cache, b, tcn_cache, res_cache, pre)

    def backward(self, cache, grad_out: Array) -> Array:
        gcn_cache, bn_cache, b, tcn_cache, res_cache, pre = cache
        grad_pre = relu_backward(pre, grad_out)
        grad_c = self.tcn.backward(tcn_cache, grad_pre)
        grad_b = relu_backward(b, grad_c)
        grad_a = self.bn.backward(bn_cache, grad_b)
        grad_x = self.gcn.backward(gcn_cache, grad_a)
        if self.residual == "identity":
            grad_x = grad_x + grad_pre
        elif self.residual is not None:
            grad_x = grad_x + self.residual.backward(res_cache, grad_pre)
        return grad_x

    def iter_params(self, prefix: str):
        yield from self.gcn.iter_params(f"{prefix}.gcn")
        yield from self.bn.iter_params(f"{prefix}.bn")
        yield from self.tcn.iter_params(f"{prefix}.tcn")
        if isinstance(self.residual, _ResidualProj):
            yield from self.residual.iter_params(f"{prefix}.residual")

    def iter_buffers(self, prefix: str):
        yield from self.bn.iter_buffers(f"{prefix}.bn")
        yield from self.tcn.iter_buffers(f"{prefix}.tcn")
        if isinstance(self.residual, _ResidualProj):
            yield from self.residual.iter_buffers(f"{prefix}.residual")


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 120
    in_channels: int = 2
    channels: tuple = DEFAULT_CHANNELS
    strides: tuple = DEFAULT_STRIDES
    edge_importance: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.channels) != len(self.strides):
            raise DimensionError(
                f"{len(self.channels)} channel entries vs {len(self.strides)} strides"
            )
        if len(self.channels) == 0:
            raise DimensionError("network needs at least one block")
        if any(s < 1 for s in self.strides):
            raise DimensionError(f"strides must be >= 1, got {self.strides}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise DimensionError("num_classes and in_channels must be >= 1")

    @property
    def min_frames(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out


@dataclass
class NetCache:
    per_person: list  # one step list per person slot
    gaps: list  # per-person pooled feature vectors
    feat_mean: Array
    feature_shape: tuple
    num_persons: int
    fb_used: bool


class Network:
    """Full classifier over (person, channel, frame, joint) clips.

    Weights are deterministic functions of ``seed``. ``feedback`` starts out
    unattached; the feedback module grows attention blocks onto it later.
    """

    def __init__(
        self,
        config: NetworkConfig | None = None,
        layout: SkeletonLayout | None = None,
        seed: int = 0,
    ):
        self.config = config or NetworkConfig()
        self.layout = layout or build_coco18_layout()
        self.adjacency = build_partitioned_adjacency(self.layout)
        rng = np.random.default_rng(seed)
        v = self.layout.num_joints
        self.data_bn = BatchNorm(self.config.in_channels * v)
        self.blocks: list[StGcnBlock] = []
        c_prev = self.config.in_channels
        for i, (c_out, stride) in enumerate(zip(self.config.channels, self.config.strides)):
            self.blocks.append(
                StGcnBlock(
                    c_prev,
                    c_out,
                    stride,
                    self.adjacency,
                    rng,
                    residual=(i != 0),
                    edge_importance=self.config.edge_importance,
                )
            )
            c_prev = c_out
        self.feature_dim = c_prev
        self.fc_weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(c_prev), size=(c_prev, self.config.num_classes)))
        self.fc_bias = Parameter(np.zeros(self.config.num_classes))
        self.feedback = None  # set by the feedback module's grow step
        self.training = False

    # -- mode -------------------------------------------------------------

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        items = list(self.data_bn.iter_params("data_bn"))
        for i, block in enumerate(self.blocks):
            items.extend(block.iter_params(f"blocks.{i}"))
        items.append(("fc.weight", self.fc_weight))
        items.append(("fc.bias", self.fc_bias))
        if self.feedback is not None:
            items.extend(self.feedback.iter_params("feedback"))
        return items

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, object, str]]:
        items = list(self.data_bn.iter_buffers("data_bn"))
        for i, block in enumerate(self.blocks):
            items.extend(block.iter_buffers(f"blocks.{i}"))
        if self.feedback is not None:
            items.extend(self.feedback.iter_buffers("feedback"))
        return items

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward / backward -------------------------------------------------

    def _validate_clip(self, clip: Array) -> Array:
        clip = np.asarray(clip, dtype=np.float64)
        if clip.ndim != 4:
            raise DimensionError(f"clip must be rank-4 (persons, channels, frames, joints), got {clip.shape}")
        m, c, t, v = clip.shape
        if m < 1:
            raise DimensionError("clip needs at least one person slot")
        if c != self.config.in_channels:
            raise DimensionError(f"clip has {c} channels, network expects {self.config.in_channels}")
        if v != self.layout.num_joints:
            raise DimensionError(f"clip has {v} joints, network expects {self.layout.num_joints}")
        if t < self.config.min_frames:
            raise DimensionError(
                f"clip has {t} frames; this architecture needs at least {self.config.min_frames}"
            )
        return clip

    def _person_forward(self, x: Array, fb, training: bool):
        steps = []
        if self.feedback is not None and self.feedback.semantic is not None:
            x, cache = self.feedback.semantic.forward(x, fb, training)
            steps.append(("fb", self.feedback.semantic, cache))
        c, t, v = x.shape
        flat = x.transpose(0, 2, 1).reshape(c * v, t)
        normed, bn_cache = self.data_bn.forward(flat, training)
        steps.append(("data_bn", (c, t, v), bn_cache))
        x = normed.reshape(c, v, t).transpose(0, 2, 1)
        for idx, block in enumerate(self.blocks):
            x, cache = block.forward(x, training)
            steps.append(("block", block, cache))
            if self.feedback is not None and idx in self.feedback.control:
                cf = self.feedback.control[idx]
                x, cache = cf.forward(x, fb)
                steps.append(("fb", cf, cache))
        pooled = global_avg_pool(x)
        return pooled, x, steps

    def forward_cached(self, clip: Array, fb=None):
        clip = self._validate_clip(clip)
        training = self.training
        gaps, per_person, features = [], [], None
        for m in range(clip.shape[0]):
            pooled, feats, steps = self._person_forward(clip[m], fb, training)
            gaps.append(pooled)
            per_person.append(steps)
            if m == 0:
                features = feats
        feat_mean = np.mean(gaps, axis=0)
        logits = feat_mean @ self.fc_weight.value + self.fc_bias.value
        cache = NetCache(per_person, gaps, feat_mean, features.shape, clip.shape[0], fb is not None)
        return logits, features, cache

    def forward(self, clip: Array, fb=None):
        logits, features, _ = self.forward_cached(clip, fb)
        return logits, features

    def backward(self, cache: NetCache, grad_logits: Array, grad_features: Array | None = None):
        """Backpropagate into parameters; returns (grad_clip, grad_fb).

        ``grad_features`` is an extra gradient injected at person 0's final
        feature map (used when a later window's feedback depends on it).
        """
        self.fc_bias.grad += grad_logits
        self.fc_weight.grad += np.outer(cache.feat_mean, grad_logits)
        grad_feat_mean = self.fc_weight.value @ grad_logits
        m_total = cache.num_persons
        grad_clip = []
        grad_fb = None
        for m, steps in enumerate(cache.per_person):
            gx = global_avg_pool_backward(cache.feature_shape, grad_feat_mean / m_total)
            if m == 0 and grad_features is not None:
                gx = gx + grad_features
            for kind, obj, step_cache in reversed(steps):
                if kind == "fb":
                    gx, gfb = obj.backward(step_cache, gx)
                    if gfb is not None:
                        grad_fb = gfb if grad_fb is None else grad_fb + gfb
                elif kind == "data_bn":
                    c, t, v = obj
                    flat = gx.transpose(0, 2, 1).reshape(c * v, t)
                    gflat = self.data_bn.backward(step_cache, flat)
                    gx = gflat.reshape(c, v, t).transpose(0, 2, 1)
                else:
                    gx = obj.backward(step_cache, gx)
            grad_clip.append(gx)
        return np.stack(grad_clip), grad_fb


def network_forward(net: Network, clip: Array, fb=None) -> tuple[Array, Array]:
    """Classify one clip: returns (logits, person-0 final feature map)."""
    return net.forward(clip, fb)


def count_parameters(net: Network) -> int:
    """Exact number of trainable scalars."""
    return sum(p.size for p in net.parameters() if p.trainable)


def parameter_breakdown(net: Network) -> list[tuple[str, int]]:
    """Per-tensor itemization of the trainable parameter count."""
    return [(name, p.size) for name, p in net.named_parameters() if p.trainable]
