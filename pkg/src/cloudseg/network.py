"""Encoder-decoder segmentation network.

Each encoder layer runs the local block, optionally the global attention
block, fuses the two feature sets, and randomly downsamples before the
next layer. The decoder walks back up through nearest-neighbor feature
propagation with skip concatenations, ending in a per-point class head.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError
from .fusion import FusionParams, concat_fuse, fuse
from .geometry import PointCloud, nn_upsample_map, random_downsample, self_knn
from .global_encoder import AvgTransformerParams, avg_transformer_block
from .local_encoder import SWConvParams, local_block
from .nn import Linear, Mlp
from .tensor import RngState, Tensor

FUSION_MODES = ("orthogonal", "concat", "local")


@dataclass
class NetworkConfig:
    """Structural knobs of the network; validated at build time."""

    num_layers: int = 4
    channel_widths: tuple = (16, 64, 128, 256)
    k_neighbors: int = 16
    downsample_ratio: float = 0.25
    attention_points: int = 176
    heads: int = 4
    global_layers: tuple = (1, 2, 3, 4)   # 1-indexed encoder layers with a global block
    num_classes: int = 19
    in_dim: int = 3
    fusion_mode: str = "orthogonal"
    scalar_kernels: bool = False
    psi_on_query: bool = False
    normalize_attention: bool = False
    standardize_inputs: bool = True       # z-score raw input channels per cloud
    fps_start: Optional[int] = None       # fix the sampling start for reproducibility
    seed: int = 0

    def __post_init__(self):
        self.channel_widths = tuple(int(w) for w in self.channel_widths)
        self.global_layers = tuple(sorted(int(g) for g in self.global_layers))
        self.validate()

    def validate(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be at least 1")
        if len(self.channel_widths) != self.num_layers:
            raise ConfigError(
                f"channel_widths has {len(self.channel_widths)} entries for {self.num_layers} layers")
        if any(w <= 0 for w in self.channel_widths):
            raise ConfigError("channel widths must be positive")
        if not set(self.global_layers) <= set(range(1, self.num_layers + 1)):
            raise ConfigError(f"global_layers {self.global_layers} outside 1..{self.num_layers}")
        for g in self.global_layers:
            if self.channel_widths[g - 1] % self.heads != 0:
                raise ConfigError(
                    f"layer {g} width {self.channel_widths[g - 1]} not divisible by {self.heads} heads")
        if not 0.0 < self.downsample_ratio <= 1.0:
            raise ConfigError("downsample_ratio must be in (0, 1]")
        if self.attention_points < 1:
            raise ConfigError("attention_points must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.in_dim < 1:
            raise ConfigError("in_dim must be positive")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "NetworkConfig":
        d = json.loads(text)
        d["channel_widths"] = tuple(d["channel_widths"])
        d["global_layers"] = tuple(d["global_layers"])
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass
class EncoderLayer:
    conv: SWConvParams
    attn: Optional[AvgTransformerParams]
    fusion: Optional[FusionParams]


@dataclass
class ModelState:
    """All learnable tensors of one network instance."""

    lift: Mlp
    encoders: list
    decoders: list
    head: Linear
    config: NetworkConfig = field(repr=False, default=None)

    def named_parameters(self):
        out = list(self.lift.parameters())
        for i, enc in enumerate(self.encoders):
            out.extend(enc.conv.parameters())
            if enc.attn is not None:
                out.extend(enc.attn.parameters())
            if enc.fusion is not None:
                out.extend(enc.fusion.parameters())
        for dec in self.decoders:
            out.extend(dec.parameters())
        out.extend(self.head.parameters())
        names = [n for n, _ in out]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in model")
        return out

    def zero_grads(self):
        for _, p in self.named_parameters():
            p.zero_grad()


def build_model(cfg: NetworkConfig, rng: Optional[RngState] = None) -> ModelState:
    """Allocate and initialize every parameter tensor for a config."""
    cfg.validate()
    rng = rng or RngState(cfg.seed)
    widths = cfg.channel_widths
    # Linear lift: a rectifier here can zero out whole feature rows, which
    # sits exactly on the non-smooth point of the fusion's rejection.
    lift = Mlp([cfg.in_dim, widths[0]], rng, name="lift")
    encoders = []
    for i in range(cfg.num_layers):
        in_dim = widths[0] if i == 0 else widths[i - 1]
        conv = SWConvParams.create(rng, in_dim=in_dim, conv_dim=widths[i],
                                   scalar_kernels=cfg.scalar_kernels,
                                   psi_on_query=cfg.psi_on_query, name=f"enc{i}.conv")
        attn = None
        if (i + 1) in cfg.global_layers:
            attn = AvgTransformerParams.create(rng, dim=widths[i], heads=cfg.heads,
                                               downsample_count=cfg.attention_points,
                                               normalize=cfg.normalize_attention,
                                               name=f"enc{i}.attn")
        fusion = None
        if cfg.fusion_mode != "local":
            fusion = FusionParams.create(rng, dim=widths[i], name=f"enc{i}.fusion")
        encoders.append(EncoderLayer(conv=conv, attn=attn, fusion=fusion))
    decoders = []
    for lvl in range(cfg.num_layers):
        up_width = widths[lvl + 1] if lvl + 1 < cfg.num_layers else widths[-1]
        decoders.append(Mlp([widths[lvl] + up_width, widths[lvl]], rng,
                            final_relu=True, name=f"dec{lvl}"))
    head = Linear(widths[0], cfg.num_classes, rng, name="head")
    return ModelState(lift=lift, encoders=encoders, decoders=decoders, head=head, config=cfg)


def _check_input(cloud: PointCloud, cfg: NetworkConfig):
    if cloud.features is None:
        raise ConfigError("forward needs input features (positions and optional extras)")
    if cloud.features.shape[1] != cfg.in_dim:
        raise ConfigError(
            f"input features have width {cloud.features.shape[1]}, config expects {cfg.in_dim}")


def _standardize_features(raw):
    mu = raw.mean(axis=0, keepdims=True)
    sd = raw.std(axis=0, keepdims=True)
    return (raw - mu) / np.maximum(sd, 1e-6)


def _neighborhood_scale(positions, nbrs):
    """RMS neighbor offset; downsampled levels have wider neighborhoods, so
    each layer's position kernel sees unit-scale relative inputs."""
    rel = positions[nbrs.indices] - positions[:, None, :]
    return max(float(np.sqrt((rel ** 2).sum(axis=2).mean())), 1e-9)


def forward(cloud: PointCloud, model: ModelState, cfg: NetworkConfig,
            rng: Optional[RngState] = None) -> Tensor:
    """Per-point class logits [N x num_classes]; deterministic given rng."""
    _check_input(cloud, cfg)
    rng = rng or RngState(cfg.seed)
    raw = np.asarray(cloud.features, dtype=np.float64)
    if cfg.standardize_inputs:
        raw = _standardize_features(raw)
    x = model.lift(Tensor(raw))
    positions = cloud.positions
    skips = []
    for i, enc in enumerate(model.encoders):
        level = PointCloud(positions)
        k_eff = min(cfg.k_neighbors, level.n)
        nbrs = self_knn(level, k_eff)
        conv_view = PointCloud(positions / _neighborhood_scale(positions, nbrs))
        f_local = local_block(conv_view, nbrs, enc.conv, features=x)
        if enc.attn is not None:
            f_global = avg_transformer_block(level, enc.attn, rng, k=k_eff,
                                             features=f_local, start=cfg.fps_start)
        else:
            f_global = f_local
        if cfg.fusion_mode == "orthogonal":
            fused = fuse(f_local, f_global, enc.fusion)
        elif cfg.fusion_mode == "concat":
            fused = concat_fuse(f_local, f_global, enc.fusion)
        else:
            fused = f_local
        skips.append((positions, fused))
        _, kept = random_downsample(level, cfg.downsample_ratio, rng)
        positions = positions[kept]
        x = T.gather(fused, kept)

    deep_pos, deep_x = positions, x
    for lvl in range(cfg.num_layers - 1, -1, -1):
        fine_pos, skip_x = skips[lvl]
        up = nn_upsample_map(deep_pos, fine_pos)
        deep_x = model.decoders[lvl](T.concat([skip_x, T.gather(deep_x, up)], axis=1))
        deep_pos = fine_pos
    return model.head(deep_x)


def infer(cloud: PointCloud, model: ModelState, cfg: NetworkConfig,
          rng: Optional[RngState] = None) -> np.ndarray:
    """Predicted class per point; ties go to the lowest class index."""
    logits = forward(cloud, model, cfg, rng=rng)
    return np.argmax(logits.data, axis=1).astype(np.int64)


def param_count(model: ModelState) -> int:
    """Exact number of learnable scalars."""
    return sum(p.data.size for _, p in model.named_parameters())


def format_param_count(count) -> str:
    return f"{count / 1e6:.2f}M"


def dead_gradient_names(model: ModelState):
    """Parameters whose gradient is missing or identically zero after a backward."""
    dead = []
    for name, p in model.named_parameters():
        if p.grad is None or not np.any(p.grad):
            dead.append(name)
    return dead


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, config, then named tensor blobs

_MAGIC = b"CSEGCKPT"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def save_checkpoint(path, model: ModelState):
    cfg_json = model.config.to_json().encode()
    params = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(hashlib.sha256(cfg_json).digest())
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                fh.write(struct.pack("<I", d))
            code = _DTYPE_CODES.get(p.data.dtype)
            if code is None:
                raise DataFormatError(f"unsupported parameter dtype {p.data.dtype}")
            fh.write(struct.pack("<B", code))
            fh.write(np.ascontiguousarray(p.data, dtype=_CODE_DTYPES[code]).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path) -> ModelState:
    """Rebuild the model from a checkpoint; parameters restore bit-exactly."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC), "magic") != _MAGIC:
            raise DataFormatError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfg_json = _read_exact(fh, cfg_len, "config")
        digest = _read_exact(fh, 32, "config digest")
        if hashlib.sha256(cfg_json).digest() != digest:
            raise DataFormatError("checkpoint config digest mismatch")
        cfg = NetworkConfig.from_json(cfg_json.decode())
        model = build_model(cfg)
        lookup = dict(model.named_parameters())
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        if count != len(lookup):
            raise DataFormatError(
                f"checkpoint holds {count} tensors, model defines {len(lookup)}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "dim"))[0] for _ in range(ndim))
            (code,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
            if code not in _CODE_DTYPES:
                raise DataFormatError(f"unknown dtype code {code}")
            dtype = _CODE_DTYPES[code]
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, n_items * dtype.itemsize, f"tensor '{name}'")
            if name not in lookup:
                raise DataFormatError(f"checkpoint tensor '{name}' unknown to model")
            target = lookup[name]
            if target.data.shape != shape:
                raise DataFormatError(
                    f"tensor '{name}' shape {shape} != model shape {target.data.shape}")
            target.data = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype, copy=True)
        if fh.read(1):
            raise DataFormatError("trailing bytes after checkpoint payload")
    return model
