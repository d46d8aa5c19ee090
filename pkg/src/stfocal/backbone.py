"""Four-stage video classification network built from focal modulation blocks.

Tokens live in channels-last layout (B, T, H', W', C) throughout. Each stage
halves the spatial grid and doubles the width; the frame axis is never
downsampled. The head normalizes, averages every spatio-temporal token, and
projects to class logits — so a design whose layers never mix frames is
invariant to frame order by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .modulation import FocalModulationConfig, build_modulation
from .nn import Linear, LayerNorm, Mlp, Module, drop_path
from .tensor import ConfigError, ShapeError, Tensor, UsageError, no_grad

EMBEDDINGS = ("patch_1", "tubelet_2")
PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass
class NetworkConfig:
    num_classes: int
    embed_dim: int = 96
    blocks_per_stage: tuple = (2, 2, 6, 2)
    focal_levels: int = 2
    base_kernel: int = 3
    kernel_step: int = 2
    fusion: str = "multiply"
    variant: str = "e_parallel"
    embedding: str = "patch_1"
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.1
    out_drop: float = 0.0
    in_channels: int = 3
    frames: int = 8
    height: int = 224
    width: int = 224
    precision: str = "float64"

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")
        if len(self.blocks_per_stage) != 4 or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError(
                f"blocks_per_stage needs four positive counts, got {self.blocks_per_stage}")
        if self.embedding not in EMBEDDINGS:
            raise ConfigError(f"unknown embedding {self.embedding!r}, expected {EMBEDDINGS}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")
        if self.height % 32 or self.width % 32:
            raise ConfigError(
                f"input sides must be divisible by 32, got {self.height}x{self.width}")
        if self.frames < 1:
            raise ConfigError(f"frames must be positive, got {self.frames}")
        if self.embedding == "tubelet_2" and self.frames % 2:
            raise ConfigError("tubelet_2 embedding needs an even frame count")
        if self.precision not in PRECISIONS:
            raise ConfigError(
                f"unknown precision {self.precision!r}, expected one of {tuple(PRECISIONS)}")
        # constructing the focal config validates the remaining fields
        self.focal_config(self.embed_dim)

    def focal_config(self, channels: int) -> FocalModulationConfig:
        return FocalModulationConfig(
            channels=channels, focal_levels=self.focal_levels,
            base_kernel=self.base_kernel, kernel_step=self.kernel_step,
            fusion=self.fusion, variant=self.variant, out_drop=self.out_drop)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def stage_widths(self) -> tuple:
        return tuple(self.embed_dim * (1 << s) for s in range(4))

    @property
    def token_frames(self) -> int:
        return self.frames // 2 if self.embedding == "tubelet_2" else self.frames


PRESETS = {
    "t": dict(embed_dim=96, blocks_per_stage=(2, 2, 6, 2)),
    "s": dict(embed_dim=96, blocks_per_stage=(2, 2, 18, 2)),
    "b": dict(embed_dim=128, blocks_per_stage=(2, 2, 18, 2)),
    "tiny": dict(embed_dim=32, blocks_per_stage=(1, 1, 2, 1)),
}


def preset_config(name: str, num_classes: int, **overrides) -> NetworkConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {tuple(PRESETS)}")
    fields = dict(PRESETS[name])
    fields.update(overrides)
    return NetworkConfig(num_classes=num_classes, **fields)


class PatchEmbed(Module):
    """Project non-overlapping 4x4 patches (optionally spanning 2 frames) to tokens."""

    def __init__(self, cfg: NetworkConfig, rng, dtype):
        super().__init__()
        self.mode = cfg.embedding
        self.in_channels = cfg.in_channels
        span = 2 if self.mode == "tubelet_2" else 1
        self.proj = Linear(span * 16 * cfg.in_channels, cfg.embed_dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, t, h, w, c = x.shape
        if h % 4 or w % 4:
            raise ConfigError(f"patch embedding needs H,W divisible by 4, got {h}x{w}")
        if self.mode == "tubelet_2":
            if t % 2:
                raise ConfigError(f"tubelet_2 needs an even frame count, got {t}")
            x = F.reshape(x, (b, t // 2, 2, h // 4, 4, w // 4, 4, c))
            x = F.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
            x = F.reshape(x, (b, t // 2, h // 4, w // 4, 2 * 16 * c))
        else:
            x = F.reshape(x, (b, t, h // 4, 4, w // 4, 4, c))
            x = F.transpose(x, (0, 1, 2, 4, 3, 5, 6))
            x = F.reshape(x, (b, t, h // 4, w // 4, 16 * c))
        return self.proj(x)


class Downsample(Module):
    """Merge 2x2 token neighborhoods into one token of twice the width."""

    def __init__(self, channels: int, rng, dtype):
        super().__init__()
        self.proj = Linear(4 * channels, 2 * channels, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, t, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"downsampling needs even H,W, got {h}x{w}")
        x = F.reshape(x, (b, t, h // 2, 2, w // 2, 2, c))
        x = F.transpose(x, (0, 1, 2, 4, 3, 5, 6))
        x = F.reshape(x, (b, t, h // 2, w // 2, 4 * c))
        return self.proj(x)


class Block(Module):
    """Pre-norm residual block: token mixing, then an MLP.

    The alternating variant carries a second mixing sub-layer, so one block
    applies spatial then temporal modulation before its MLP.
    """

    def __init__(self, channels: int, focal_cfg: FocalModulationConfig,
                 mlp_ratio: float, keep_prob: float, rng, dtype,
                 role: str = "default"):
        super().__init__()
        self.keep_prob = keep_prob
        self.norm1 = LayerNorm(channels, dtype=dtype)
        if focal_cfg.variant == "d_alternating" and role == "default":
            self.mod = build_modulation(focal_cfg, rng, dtype, role="spatial")
            self.norm_t = LayerNorm(channels, dtype=dtype)
            self.mod_t = build_modulation(focal_cfg, rng, dtype, role="temporal")
        else:
            self.mod = build_modulation(focal_cfg, rng, dtype, role=role)
            self.norm_t = None
            self.mod_t = None
        self.norm2 = LayerNorm(channels, dtype=dtype)
        self.mlp = Mlp(channels, int(mlp_ratio * channels), rng, dtype=dtype)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        x = F.add(x, drop_path(self.mod(self.norm1(x), rng),
                               self.keep_prob, self.training, rng))
        if self.mod_t is not None:
            x = F.add(x, drop_path(self.mod_t(self.norm_t(x), rng),
                                   self.keep_prob, self.training, rng))
        return F.add(x, drop_path(self.mlp(self.norm2(x)),
                                  self.keep_prob, self.training, rng))


class FocalVideoNetwork(Module):
    """Embedding, four block stages with downsampling, norm, mean pool, head."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        dtype = cfg.dtype
        rng = np.random.default_rng(seed)
        self.patch_embed = PatchEmbed(cfg, rng, dtype)
        total = sum(cfg.blocks_per_stage)
        split = total - total // 2  # first-half count for the two-encoder design
        stages = []
        downsamples = []
        index = 0
        for s in range(4):
            width = cfg.stage_widths[s]
            focal_cfg = cfg.focal_config(width)
            blocks = []
            for _ in range(cfg.blocks_per_stage[s]):
                keep = 1.0 if total == 1 else \
                    1.0 - cfg.drop_path_rate * index / (total - 1)
                role = "default"
                if cfg.variant == "c_factorized_encoder":
                    role = "spatial" if index < split else "temporal"
                blocks.append(Block(width, focal_cfg, cfg.mlp_ratio, keep,
                                    rng, dtype, role=role))
                index += 1
            stages.append(blocks)
            if s < 3:
                downsamples.append(Downsample(width, rng, dtype))
        self.stages = stages
        self.downsamples = downsamples
        self.norm = LayerNorm(cfg.stage_widths[3], dtype=dtype)
        self.head = Linear(cfg.stage_widths[3], cfg.num_classes, rng,
                           std=0.02, dtype=dtype)

    def _as_input(self, video) -> Tensor:
        cfg = self.config
        if isinstance(video, Tensor):
            x = video
        else:
            x = Tensor(np.asarray(video).astype(cfg.dtype, copy=False))
        if x.ndim != 5:
            raise ShapeError(f"expected video (B,T,H,W,C), got shape {x.shape}")
        b, t, h, w, c = x.shape
        if (t, h, w, c) != (cfg.frames, cfg.height, cfg.width, cfg.in_channels):
            raise ShapeError(
                f"clip shape {(t, h, w, c)} does not match the configured input "
                f"{(cfg.frames, cfg.height, cfg.width, cfg.in_channels)}")
        return x

    def forward(self, video, rng=None) -> Tensor:
        x = self.patch_embed(self._as_input(video))
        for s, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x, rng)
            if s < 3:
                x = self.downsamples[s](x)
        x = self.norm(x)
        frames = F.global_avg_pool(x, axes=(2, 3))
        clip = F.global_avg_pool(frames, axes=(1,))
        return self.head(clip)

    def iter_blocks(self):
        for blocks in self.stages:
            yield from blocks

    def modulation_layers(self):
        out = []
        for block in self.iter_blocks():
            out.append(block.mod)
            if block.mod_t is not None:
                out.append(block.mod_t)
        return out


def np_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def multi_view_inference(net: FocalVideoNetwork, views) -> np.ndarray:
    """Mean of per-view softmax probabilities. ``views``: (V,T,H,W,C) or a list."""
    views = np.asarray(views)
    if views.ndim == 4:
        views = views[None]
    if views.ndim != 5 or views.shape[0] == 0:
        raise UsageError("multi_view_inference needs at least one (T,H,W,C) view")
    net.eval()
    with no_grad():
        logits = net.forward(views).data
    return np_softmax(logits).mean(axis=0)


# ---------------------------------------------------------------------------
# checkpoints: text manifest of names/shapes/offsets + raw little-endian f64

_CKPT_MAGIC = b"STFCKPT1"


def save_checkpoint(path, module: Module) -> None:
    named = module.named_parameters()
    blobs = []
    lines = [b"%s %d\n" % (_CKPT_MAGIC, len(named))]
    offset = 0
    for name, p in named:
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        raw = arr.tobytes()
        shape = ",".join(str(d) for d in p.shape) if p.ndim else "scalar"
        lines.append(f"{name} {shape} {offset}\n".encode("ascii"))
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.writelines(lines)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != _CKPT_MAGIC:
            raise OSError(f"{path}: not a checkpoint file")
        count = int(header[1])
        entries = []
        for _ in range(count):
            line = fh.readline().split()
            if len(line) != 3:
                raise OSError(f"{path}: truncated checkpoint manifest")
            name = line[0].decode("ascii")
            shape = () if line[1] == b"scalar" else \
                tuple(int(d) for d in line[1].split(b","))
            entries.append((name, shape, int(line[2])))
        blob = fh.read()
    out = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(blob):
            raise OSError(f"{path}: checkpoint data ends before parameter {name}")
        out[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape)
    return out


def load_into(module: Module, state: dict) -> None:
    named = dict(module.named_parameters())
    missing = sorted(set(named) - set(state))
    extra = sorted(set(state) - set(named))
    if missing or extra:
        raise ConfigError(
            f"checkpoint does not match the model (missing {missing[:3]}, "
            f"unexpected {extra[:3]})")
    for name, p in named.items():
        arr = state[name]
        if arr.shape != p.shape:
            raise ConfigError(
                f"checkpoint parameter {name} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.astype(p.dtype)
        p.grad = None
