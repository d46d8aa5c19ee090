"""Focal modulation layers for video tokens.

A focal modulation layer aggregates context around every token first and
interacts with the query last: a stack of depthwise convolutions with growing
kernels builds a pyramid of context levels, learned per-position gates blend
the levels into a modulator, and the query is scaled elementwise by the
modulator. The two-stream layer runs this once over space (per frame) and
once over time (per spatial location) and fuses both modulators into the
query.

Five arrangements of the spatial and temporal streams are provided behind one
constructor, selected by ``variant``:

  a_spatial_avg        spatial modulation per frame only; time is mixed solely
                       by the mean over frames at the classifier head
  b_factorized_conv    spatial layer whose context pyramid interleaves a
                       temporal depthwise convolution after each spatial one
  c_factorized_encoder spatial-only blocks for the first half of the network,
                       temporal-only blocks for the second half
  d_alternating        every block applies a spatial sub-layer then a
                       temporal sub-layer (divided space-time)
  e_parallel           both streams inside one layer, fused multiplicatively
                       (default; ``fusion`` selects the combination rule)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Linear, Module, parameter, uniform_fan_in
from .tensor import ConfigError, NumericFault, ShapeError, Tensor

VARIANTS = ("a_spatial_avg", "b_factorized_conv", "c_factorized_encoder",
            "d_alternating", "e_parallel")
FUSIONS = ("multiply", "average", "learned_projection")


@dataclass
class FocalModulationConfig:
    channels: int
    focal_levels: int = 2
    base_kernel: int = 3
    kernel_step: int = 2
    fusion: str = "multiply"
    variant: str = "e_parallel"
    out_drop: float = 0.0

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.focal_levels < 1:
            raise ConfigError(f"focal_levels must be >= 1, got {self.focal_levels}")
        if self.base_kernel < 1 or self.base_kernel % 2 == 0:
            raise ConfigError(f"base_kernel must be odd, got {self.base_kernel}")
        if self.kernel_step < 2 or self.kernel_step % 2 != 0:
            raise ConfigError(
                f"kernel_step must be a positive even int, got {self.kernel_step}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}, expected one of {FUSIONS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if not 0.0 <= self.out_drop < 1.0:
            raise ConfigError(f"out_drop must be in [0, 1), got {self.out_drop}")

    @property
    def kernel_sizes(self) -> tuple:
        k = self.base_kernel
        out = []
        for _ in range(self.focal_levels):
            out.append(k)
            k += self.kernel_step
        return tuple(out)


@dataclass
class ModulatorPair:
    """Captured modulators of one layer forward, stored as plain arrays.

    ``temporal`` is materialized after broadcasting over H and W, so its
    values are exactly constant along those axes; ``spatial`` (or
    ``temporal`` for a branch that lacks the other stream) may be None.
    """
    spatial: np.ndarray | None
    temporal: np.ndarray | None


def hierarchical_contextualize_spatial(z, kernels) -> list:
    """Build the L+1 spatial context levels from projected features.

    z: (N, H, W, C). Levels 1..L are GeLU(depthwise conv) chains with the
    given kernels; level L+1 is the GeLU of the global spatial mean of level
    L, broadcast back over H, W.
    """
    n, h, w, c = z.shape
    levels = []
    cur = z
    for kern in kernels:
        k = kern.shape[0]
        if k > 2 * min(h, w) + 1:
            warnings.warn(
                f"focal kernel {k} exceeds 2*min(H,W)+1 = {2 * min(h, w) + 1}; "
                "zero padding absorbs the overhang", RuntimeWarning)
        cur = F.gelu(F.depthwise_conv2d(cur, kern))
        levels.append(cur)
    pooled = F.global_avg_pool(cur, axes=(1, 2), keepdims=True)
    levels.append(F.gelu(F.broadcast_to(pooled, cur.shape)))
    return levels


def hierarchical_contextualize_temporal(z, kernels) -> list:
    """1-D analogue of the spatial hierarchy along the frame axis.

    z: (N, T, C); level L+1 is the GeLU of the temporal mean of level L.
    """
    n, t, c = z.shape
    levels = []
    cur = z
    for kern in kernels:
        k = kern.shape[0]
        if k > 2 * t + 1:
            warnings.warn(
                f"focal kernel {k} exceeds 2*T+1 = {2 * t + 1}; "
                "zero padding absorbs the overhang", RuntimeWarning)
        cur = F.gelu(F.depthwise_conv1d(cur, kern))
        levels.append(cur)
    pooled = F.global_avg_pool(cur, axes=(1,), keepdims=True)
    levels.append(F.gelu(F.broadcast_to(pooled, cur.shape)))
    return levels


def gated_aggregate(levels, gates) -> Tensor:
    """Blend context levels with per-position gates: sum_l G_l * Z_l.

    ``gates`` carries one trailing slice per level; each slice broadcasts
    over the channel axis of its level.
    """
    gates = F.as_tensor(gates) if not isinstance(gates, Tensor) else gates
    if gates.shape[-1] != len(levels):
        raise ShapeError(
            f"gated_aggregate: {gates.shape[-1]} gate slices for {len(levels)} levels")
    out = None
    for i, level in enumerate(levels):
        term = F.mul(level, F.narrow(gates, -1, i, 1))
        out = term if out is None else F.add(out, term)
    return out


def _token_dims(x: Tensor) -> tuple:
    if x.ndim != 5:
        raise ShapeError(f"modulation expects tokens (B,T,H,W,C), got {x.shape}")
    return x.shape


def _check_modulator(m: Tensor, what: str) -> None:
    # always-on guard: a NaN here poisons every downstream token silently
    if not np.all(np.isfinite(m.data)):
        raise NumericFault(f"non-finite values in the {what}")


def _split_features_gates(packed: Tensor, channels: int):
    z = F.narrow(packed, -1, 0, channels)
    gates = F.narrow(packed, -1, channels, packed.shape[-1] - channels)
    return z, gates


# The layer output is a product of projections (query times one or two
# modulators), so at standard fan-in scales the branch starts several orders
# of magnitude below the residual stream and plain SGD never trains it. The
# context projections start hot to compensate; 8x puts the branch's gradients
# within one order of the MLP's at init.
_CTX_GAIN = 8.0


def _ctx_weight(rng, c: int, dtype):
    return parameter(_CTX_GAIN * uniform_fan_in(rng, (c, c), c, dtype))


class _ModulationBase(Module):
    """Shared projections and bookkeeping for every variant layer."""

    def __init__(self, cfg: FocalModulationConfig, rng, dtype):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.q_proj = Linear(c, c, rng, dtype=dtype)
        self.out_proj = Linear(c, c, rng, dtype=dtype)
        self.capture_modulators = False
        self.last_modulators: ModulatorPair | None = None

    def _finish(self, y: Tensor, rng) -> Tensor:
        out = self.out_proj(y)
        drop = self.cfg.out_drop
        if self.training and drop > 0.0:
            if rng is None:
                raise ConfigError("out_drop > 0 in training mode needs an rng")
            keep = 1.0 - drop
            mask = (rng.random(out.shape) < keep).astype(out.dtype) / keep
            out = F.mul(out, Tensor(mask))
        return out

    @staticmethod
    def _new_kernels_2d(rng, sizes, c, dtype):
        return [parameter(uniform_fan_in(rng, (k, k, c), k * k, dtype)) for k in sizes]

    @staticmethod
    def _new_kernels_1d(rng, sizes, c, dtype):
        return [parameter(uniform_fan_in(rng, (k, c), k, dtype)) for k in sizes]


class SpatialFocalModulation(_ModulationBase):
    """Per-frame spatial focal modulation; frames never exchange information."""

    def __init__(self, cfg: FocalModulationConfig, rng, dtype=np.float64):
        super().__init__(cfg, rng, dtype)
        c, levels = cfg.channels, cfg.focal_levels
        self.in_proj = Linear(c, c + levels + 1, rng, dtype=dtype)
        self.kernels = self._new_kernels_2d(rng, cfg.kernel_sizes, c, dtype)
        self.ctx_proj = _ctx_weight(rng, c, dtype)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        b, t, h, w, c = _token_dims(x)
        q = self.q_proj(x)
        packed = F.reshape(self.in_proj(x), (b * t, h, w, c + self.cfg.focal_levels + 1))
        z, gates = _split_features_gates(packed, c)
        levels = hierarchical_contextualize_spatial(z, self.kernels)
        m = F.pointwise_conv(gated_aggregate(levels, gates), self.ctx_proj)
        _check_modulator(m, "spatial modulator")
        m5 = F.reshape(m, (b, t, h, w, c))
        if self.capture_modulators:
            self.last_modulators = ModulatorPair(spatial=m5.data.copy(), temporal=None)
        return self._finish(F.mul(q, m5), rng)


class FactorizedConvModulation(_ModulationBase):
    """Spatial modulation whose context pyramid is built from factorized
    space-time convolutions: each level applies a k x k spatial depthwise
    conv then a length-k temporal depthwise conv before the GeLU."""

    def __init__(self, cfg: FocalModulationConfig, rng, dtype=np.float64):
        super().__init__(cfg, rng, dtype)
        c, levels = cfg.channels, cfg.focal_levels
        self.in_proj = Linear(c, c + levels + 1, rng, dtype=dtype)
        self.space_kernels = self._new_kernels_2d(rng, cfg.kernel_sizes, c, dtype)
        self.time_kernels = self._new_kernels_1d(rng, cfg.kernel_sizes, c, dtype)
        self.ctx_proj = _ctx_weight(rng, c, dtype)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        b, t, h, w, c = _token_dims(x)
        q = self.q_proj(x)
        packed = F.reshape(self.in_proj(x), (b * t, h, w, c + self.cfg.focal_levels + 1))
        z, gates = _split_features_gates(packed, c)
        cur = z
        levels = []
        for skern, tkern in zip(self.space_kernels, self.time_kernels):
            cur = F.depthwise_conv2d(cur, skern)
            seq = F.reshape(F.transpose(F.reshape(cur, (b, t, h, w, c)),
                                        (0, 2, 3, 1, 4)), (b * h * w, t, c))
            seq = F.depthwise_conv1d(seq, tkern)
            cur = F.reshape(F.transpose(F.reshape(seq, (b, h, w, t, c)),
                                        (0, 3, 1, 2, 4)), (b * t, h, w, c))
            cur = F.gelu(cur)
            levels.append(cur)
        pooled = F.global_avg_pool(cur, axes=(1, 2), keepdims=True)
        levels.append(F.gelu(F.broadcast_to(pooled, cur.shape)))
        m = F.pointwise_conv(gated_aggregate(levels, gates), self.ctx_proj)
        _check_modulator(m, "factorized spatio-temporal modulator")
        m5 = F.reshape(m, (b, t, h, w, c))
        if self.capture_modulators:
            self.last_modulators = ModulatorPair(spatial=m5.data.copy(), temporal=None)
        return self._finish(F.mul(q, m5), rng)


class TemporalFocalModulation(_ModulationBase):
    """Per-location temporal focal modulation; space is left untouched."""

    def __init__(self, cfg: FocalModulationConfig, rng, dtype=np.float64):
        super().__init__(cfg, rng, dtype)
        c, levels = cfg.channels, cfg.focal_levels
        self.in_proj = Linear(c, c + levels + 1, rng, dtype=dtype)
        self.kernels = self._new_kernels_1d(rng, cfg.kernel_sizes, c, dtype)
        self.ctx_proj = _ctx_weight(rng, c, dtype)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        b, t, h, w, c = _token_dims(x)
        q = self.q_proj(x)
        packed = F.reshape(F.transpose(self.in_proj(x), (0, 2, 3, 1, 4)),
                           (b * h * w, t, c + self.cfg.focal_levels + 1))
        z, gates = _split_features_gates(packed, c)
        levels = hierarchical_contextualize_temporal(z, self.kernels)
        m = F.pointwise_conv(gated_aggregate(levels, gates), self.ctx_proj)
        _check_modulator(m, "temporal modulator")
        m5 = F.transpose(F.reshape(m, (b, h, w, t, c)), (0, 3, 1, 2, 4))
        if self.capture_modulators:
            self.last_modulators = ModulatorPair(spatial=None, temporal=m5.data.copy())
        return self._finish(F.mul(q, m5), rng)


class SpatioTemporalFocalModulation(_ModulationBase):
    """Parallel two-stream focal modulation.

    The spatial stream aggregates per frame; the temporal stream aggregates
    per spatial location, and its modulator is averaged over space so a
    single temporal context vector per (frame, channel) scales every token of
    that frame. The fused modulators multiply the query token-wise.
    """

    def __init__(self, cfg: FocalModulationConfig, rng, dtype=np.float64):
        super().__init__(cfg, rng, dtype)
        c, levels = cfg.channels, cfg.focal_levels
        self.spatial_in = Linear(c, c + levels + 1, rng, dtype=dtype)
        self.temporal_in = Linear(c, c + levels + 1, rng, dtype=dtype)
        self.space_kernels = self._new_kernels_2d(rng, cfg.kernel_sizes, c, dtype)
        self.time_kernels = self._new_kernels_1d(rng, cfg.kernel_sizes, c, dtype)
        self.spatial_ctx = _ctx_weight(rng, c, dtype)
        self.temporal_ctx = _ctx_weight(rng, c, dtype)
        if cfg.fusion == "learned_projection":
            self.fusion_proj = Linear(2 * c, c, rng, dtype=dtype)
        else:
            self.fusion_proj = None

    def forward(self, x: Tensor, rng=None) -> Tensor:
        b, t, h, w, c = _token_dims(x)
        gate_count = self.cfg.focal_levels + 1
        q = self.q_proj(x)

        packed_s = F.reshape(self.spatial_in(x), (b * t, h, w, c + gate_count))
        z_s, gates_s = _split_features_gates(packed_s, c)
        levels_s = hierarchical_contextualize_spatial(z_s, self.space_kernels)
        m_s = F.pointwise_conv(gated_aggregate(levels_s, gates_s), self.spatial_ctx)
        _check_modulator(m_s, "spatial modulator")
        m_s = F.reshape(m_s, (b, t, h, w, c))

        packed_t = F.reshape(F.transpose(self.temporal_in(x), (0, 2, 3, 1, 4)),
                             (b * h * w, t, c + gate_count))
        z_t, gates_t = _split_features_gates(packed_t, c)
        levels_t = hierarchical_contextualize_temporal(z_t, self.time_kernels)
        m_t = F.pointwise_conv(gated_aggregate(levels_t, gates_t), self.temporal_ctx)
        _check_modulator(m_t, "temporal modulator")
        # collapse to one context vector per (frame, channel); every token of
        # a frame is then scaled by the same temporal modulator
        m_t = F.reshape(m_t, (b, h, w, t, c))
        m_t = F.global_avg_pool(m_t, axes=(1, 2), keepdims=True)
        m_t = F.transpose(m_t, (0, 3, 1, 2, 4))

        if self.cfg.fusion == "multiply":
            y = F.mul(F.mul(q, m_s), m_t)
        elif self.cfg.fusion == "average":
            y = F.mul(q, F.scale(F.add(m_s, m_t), 0.5))
        else:
            both = F.concat([m_s, F.broadcast_to(m_t, m_s.shape)], axis=-1)
            y = F.mul(q, self.fusion_proj(both))

        if self.capture_modulators:
            self.last_modulators = ModulatorPair(
                spatial=m_s.data.copy(),
                temporal=np.broadcast_to(m_t.data, m_s.shape).copy())
        return self._finish(y, rng)


def build_modulation(cfg: FocalModulationConfig, rng, dtype=np.float64,
                     role: str = "default") -> Module:
    """Construct the modulation layer for one block.

    ``role`` overrides the stream for the split designs: blocks of the
    factorized-encoder and alternating variants are built with explicit
    "spatial" / "temporal" roles; everything else passes "default".
    """
    if role == "spatial":
        return SpatialFocalModulation(cfg, rng, dtype)
    if role == "temporal":
        return TemporalFocalModulation(cfg, rng, dtype)
    if role != "default":
        raise ConfigError(f"unknown modulation role {role!r}")
    if cfg.variant == "a_spatial_avg":
        return SpatialFocalModulation(cfg, rng, dtype)
    if cfg.variant == "b_factorized_conv":
        return FactorizedConvModulation(cfg, rng, dtype)
    if cfg.variant == "e_parallel":
        return SpatioTemporalFocalModulation(cfg, rng, dtype)
    raise ConfigError(
        f"variant {cfg.variant!r} assembles per-block roles; build via the backbone")
