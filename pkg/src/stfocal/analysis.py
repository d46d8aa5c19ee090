"""Analytic cost model, self-attention comparator, gradient checker, and
modulator heatmap export.

The FLOP formulas here intentionally re-derive, from configuration arithmetic
alone, the exact costs the runtime op recorder observes (same conventions:
2 ops per multiply-accumulate, 1 per element for elementwise work, 1 per
input position for pooling, 7 per element for layer norm, data movement
free). Tests hold the two routes to exact equality per layer.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .backbone import FocalVideoNetwork, NetworkConfig
from .modulation import FocalModulationConfig
from .nn import Module
from .tensor import ComputationGraph, ConfigError, Tensor, UsageError, no_grad


@dataclass
class CostRow:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    input_shape: tuple
    rows: list

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        lines = ["layer,params,flops"]
        for r in self.rows:
            lines.append(f"{r.name},{r.params},{r.flops}")
        lines.append(f"total,{self.total_params},{self.total_flops}")
        return "\n".join(lines) + "\n"


def _linear_flops(rows: int, c_in: int, c_out: int, bias: bool = True) -> int:
    return 2 * rows * c_in * c_out + (rows * c_out if bias else 0)


def _linear_params(c_in: int, c_out: int, bias: bool = True) -> int:
    return c_in * c_out + (c_out if bias else 0)


def modulation_flops(cfg: FocalModulationConfig, tokens: int,
                     role: str = "default") -> int:
    """Forward cost of one modulation layer over ``tokens`` positions.

    Exactly linear in the token count for every variant: each hierarchy level,
    gate, and fusion term touches every position the same number of times.
    """
    c = cfg.channels
    gates = cfg.focal_levels + 1
    kernels = cfg.kernel_sizes
    p = tokens

    def hierarchy(conv_taps) -> int:
        total = 0
        for taps in conv_taps:
            total += 2 * p * c * taps + p * c  # conv + gelu
        total += p            # pool, one op per position
        total += p * c        # gelu of the broadcast pooled level
        return total

    gating = (2 * gates - 1) * p * c  # gates muls, gates-1 adds
    shared = _linear_flops(p, c, c) + _linear_flops(p, c, c)  # q_proj + out_proj

    kind = role if role in ("spatial", "temporal") else cfg.variant
    if kind in ("spatial", "a_spatial_avg"):
        return (shared + _linear_flops(p, c, c + gates)
                + hierarchy([k * k for k in kernels]) + gating
                + 2 * p * c * c    # context projection
                + p * c)           # q * modulator
    if kind == "temporal":
        return (shared + _linear_flops(p, c, c + gates)
                + hierarchy(list(kernels)) + gating
                + 2 * p * c * c + p * c)
    if kind == "b_factorized_conv":
        return (shared + _linear_flops(p, c, c + gates)
                + hierarchy([k * k + k for k in kernels]) + gating
                + 2 * p * c * c + p * c)
    if kind == "e_parallel":
        total = shared + 2 * _linear_flops(p, c, c + gates)
        total += hierarchy([k * k for k in kernels]) + gating + 2 * p * c * c
        total += hierarchy(list(kernels)) + gating + 2 * p * c * c
        total += p  # spatial mean of the temporal modulator
        if cfg.fusion == "multiply":
            total += 2 * p * c
        elif cfg.fusion == "average":
            total += 3 * p * c
        else:
            total += _linear_flops(p, 2 * c, c) + p * c
        return total
    raise ConfigError(
        f"variant {cfg.variant!r} has no single-layer cost; pass role explicitly")


def modulation_params(cfg: FocalModulationConfig, role: str = "default") -> int:
    c = cfg.channels
    gates = cfg.focal_levels + 1
    kernels = cfg.kernel_sizes
    shared = 2 * _linear_params(c, c)  # q_proj + out_proj
    in_proj = _linear_params(c, c + gates)
    kind = role if role in ("spatial", "temporal") else cfg.variant
    if kind in ("spatial", "a_spatial_avg"):
        return shared + in_proj + sum(k * k * c for k in kernels) + c * c
    if kind == "temporal":
        return shared + in_proj + sum(k * c for k in kernels) + c * c
    if kind == "b_factorized_conv":
        return shared + in_proj + sum((k * k + k) * c for k in kernels) + c * c
    if kind == "e_parallel":
        total = shared + 2 * in_proj + 2 * c * c
        total += sum(k * k * c for k in kernels) + sum(k * c for k in kernels)
        if cfg.fusion == "learned_projection":
            total += _linear_params(2 * c, c)
        return total
    raise ConfigError(
        f"variant {cfg.variant!r} has no single-layer parameter count; pass role")


def _block_roles(cfg: NetworkConfig, index: int, total: int) -> list:
    if cfg.variant == "c_factorized_encoder":
        split = total - total // 2
        return ["spatial" if index < split else "temporal"]
    if cfg.variant == "d_alternating":
        return ["spatial", "temporal"]
    return ["default"]


def block_flops(cfg: NetworkConfig, channels: int, tokens: int, roles: list) -> int:
    c, p = channels, tokens
    hidden = int(cfg.mlp_ratio * channels)
    focal = cfg.focal_config(channels)
    total = 0
    for role in roles:
        total += 7 * p * c                        # pre-norm
        total += modulation_flops(focal, p, role)
        total += p * c                            # residual add
    total += 7 * p * c                            # mlp pre-norm
    total += _linear_flops(p, c, hidden) + p * hidden + _linear_flops(p, hidden, c)
    total += p * c                                # residual add
    return total


def block_params(cfg: NetworkConfig, channels: int, roles: list) -> int:
    c = channels
    hidden = int(cfg.mlp_ratio * channels)
    focal = cfg.focal_config(channels)
    total = 0
    for role in roles:
        total += 2 * c + modulation_params(focal, role)
    total += 2 * c
    total += _linear_params(c, hidden) + _linear_params(hidden, c)
    return total


def cost_report(cfg: NetworkConfig, input_shape=None, batch: int = 1) -> CostReport:
    """Per-layer parameter and forward-FLOP table at inference."""
    t, h, w = input_shape if input_shape is not None else \
        (cfg.frames, cfg.height, cfg.width)
    if h % 32 or w % 32:
        raise ConfigError(f"input sides must be divisible by 32, got {h}x{w}")
    if cfg.embedding == "tubelet_2":
        if t % 2:
            raise ConfigError("tubelet_2 embedding needs an even frame count")
        t_tok, patch_dim = t // 2, 32 * cfg.in_channels
    else:
        t_tok, patch_dim = t, 16 * cfg.in_channels

    rows = []
    grid_h, grid_w = h // 4, w // 4
    tokens = batch * t_tok * grid_h * grid_w
    rows.append(CostRow("embed", _linear_params(patch_dim, cfg.embed_dim),
                        _linear_flops(tokens, patch_dim, cfg.embed_dim)))

    total_blocks = sum(cfg.blocks_per_stage)
    index = 0
    for s in range(4):
        width = cfg.stage_widths[s]
        for j in range(cfg.blocks_per_stage[s]):
            roles = _block_roles(cfg, index, total_blocks)
            rows.append(CostRow(f"stage{s}.block{j}",
                                block_params(cfg, width, roles),
                                block_flops(cfg, width, tokens, roles)))
            index += 1
        if s < 3:
            grid_h, grid_w = grid_h // 2, grid_w // 2
            out_tokens = batch * t_tok * grid_h * grid_w
            rows.append(CostRow(f"downsample{s}",
                                _linear_params(4 * width, 2 * width),
                                _linear_flops(out_tokens, 4 * width, 2 * width)))
            tokens = out_tokens

    top = cfg.stage_widths[3]
    head_flops = 7 * tokens * top          # final norm
    head_flops += tokens                   # per-frame token pool
    head_flops += batch * t_tok            # temporal pool
    head_flops += _linear_flops(batch, top, cfg.num_classes)
    rows.append(CostRow("head", 2 * top + _linear_params(top, cfg.num_classes),
                        head_flops))
    return CostReport(input_shape=(t, h, w), rows=rows)


def count_params(cfg: NetworkConfig) -> CostReport:
    return cost_report(cfg)


def count_flops(cfg: NetworkConfig, input_shape, batch: int = 1) -> CostReport:
    return cost_report(cfg, input_shape, batch=batch)


def self_attention_flops(tokens: int, channels: int) -> int:
    """Comparator: 4NC^2 for the q,k,v,out projections plus 4N^2C for scores
    and the weighted sum. Reported for comparison, never executed."""
    if tokens < 1 or channels < 1:
        raise ConfigError("token and channel counts must be positive")
    return 4 * tokens * channels ** 2 + 4 * tokens ** 2 * channels


def attention_crossover(cfg: FocalModulationConfig, role: str = "default") -> int:
    """Smallest token count beyond which self-attention out-costs modulation.

    Modulation cost is exactly linear in N, so the inequality
    4NC^2 + 4N^2C > N*m holds for every N above (m - 4C^2) / (4C).
    """
    per_token = modulation_flops(cfg, tokens=1, role=role)
    c = cfg.channels
    threshold = (per_token - 4 * c * c) / (4 * c)
    return max(1, math.floor(threshold) + 1)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    passed: bool
    note: str = ""


def gradcheck(module: Module, input_shape, rng=None, tolerance: float = 1e-4,
              step: float = 1e-5, coords_per_group: int = 64,
              atol: float = 1e-8) -> list:
    """Central finite differences vs analytic gradients, per parameter group.

    A random fixed projection turns the module output into a scalar. For each
    group (the input tensor plus every parameter) a random subsample of
    coordinates is perturbed by ±step; a coordinate passes when
    |analytic - numeric| <= tolerance * max(|analytic|, |numeric|) + atol.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    module.eval()
    x = Tensor(rng.standard_normal(input_shape), requires_grad=True)
    out = module(x)
    proj = rng.standard_normal(out.shape)
    loss = F.tensor_sum(F.mul(out, Tensor(proj)))
    groups = [("input", x)] + module.named_parameters()
    ComputationGraph(loss).backward([p for _, p in groups])

    def loss_value() -> float:
        with no_grad():
            return float(np.sum(module(x).data * proj))

    results = []
    for name, p in groups:
        flat = p.data.reshape(-1)
        count = min(coords_per_group, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        ok = True
        note = ""
        for idx in coords:
            saved = flat[idx]
            flat[idx] = saved + step
            plus = loss_value()
            flat[idx] = saved - step
            minus = loss_value()
            flat[idx] = saved
            numeric = (plus - minus) / (2.0 * step)
            analytic = float(p.grad.reshape(-1)[idx])
            if not (math.isfinite(numeric) and math.isfinite(analytic)):
                ok = False
                note = f"non-finite difference at flat index {int(idx)}"
                worst = math.inf
                break
            scale = max(abs(analytic), abs(numeric))
            err = abs(analytic - numeric)
            worst = max(worst, err / scale if scale > 0 else 0.0)
            if err > tolerance * scale + atol:
                ok = False
                note = f"mismatch at flat index {int(idx)}"
        results.append(GradCheckResult(name, worst, ok, note))
    return results


# ---------------------------------------------------------------------------
# modulator heatmaps

def normalize_unit(arr: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant input maps to zeros."""
    lo = float(arr.min())
    span = float(arr.max()) - lo
    if span == 0.0:
        return np.zeros_like(arr, dtype=np.float64)
    return (arr - lo) / span


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5), 8-bit, from values in [0, 1]."""
    if image.ndim != 2:
        raise UsageError(f"PGM image must be 2-d, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise UsageError("PGM input must be normalized to [0, 1]")
    h, w = image.shape
    data = np.round(image * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise OSError(f"{path}: not a binary PGM file")
        w, h = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        if maxval != 255:
            raise OSError(f"{path}: unsupported max value {maxval}")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def export_modulator_maps(net: FocalVideoNetwork, clip: np.ndarray, out_dir,
                          stage: int = 0, block: int = 0) -> list:
    """Write per-frame grayscale maps of the modulator magnitudes.

    For every frame, the channel-wise L2 magnitude of the captured spatial
    (and, when the layer has one, temporal) modulator at the chosen block is
    min-max normalized and written as frame<t>_<stream>.pgm. Returns the
    written paths.
    """
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise UsageError(f"expected one clip (T,H,W,C), got shape {clip.shape}")
    try:
        target = net.stages[stage][block]
    except IndexError:
        raise ConfigError(
            f"no block {block} in stage {stage} for this configuration")
    layers = [target.mod] + ([target.mod_t] if target.mod_t is not None else [])
    for layer in layers:
        layer.capture_modulators = True
        layer.last_modulators = None
    net.eval()
    try:
        with no_grad():
            net.forward(clip[None])
    finally:
        for layer in layers:
            layer.capture_modulators = False
    spatial = None
    temporal = None
    for layer in layers:
        pair = layer.last_modulators
        if pair is None:
            continue
        spatial = pair.spatial if pair.spatial is not None else spatial
        temporal = pair.temporal if pair.temporal is not None else temporal

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for stream, mod in (("spatial", spatial), ("temporal", temporal)):
        if mod is None:
            continue
        magnitude = np.sqrt(np.square(mod[0]).sum(axis=-1))  # (T, H', W')
        for t in range(magnitude.shape[0]):
            path = os.path.join(out_dir, f"frame{t:02d}_{stream}.pgm")
            write_pgm(path, normalize_unit(magnitude[t]))
            paths.append(path)
    return sorted(paths)
