"""The two-pathway spatio-temporal network.

Each of the ten blocks is spatial module -> temporal module with a residual
connection. Blocks 1-4 run separately on coordinates and on their frame
differences; the two streams are concatenated before block 5.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, FormatError, ShapeError
from .graph import AdjacencyKernelSet, SkeletonGraph, kernel_set
from .nn import Linear, Pointwise, RngStream, TemporalConv, glorot_, temporal_maxpool
from .stc import STCModule, StcConfig

DEFAULT_CHANNELS = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
DEFAULT_STRIDES = (1, 1, 1, 1, 2, 1, 1, 2, 1, 1)


@dataclass(frozen=True)
class ModelConfig:
    graph: SkeletonGraph
    num_classes: int
    in_channels: int = 3
    block_channels: tuple[int, ...] = DEFAULT_CHANNELS
    temporal_strides: tuple[int, ...] = DEFAULT_STRIDES
    stc_blocks: tuple[int, ...] = (3, 6, 9)
    sigma: int = 0
    stc: StcConfig = field(default_factory=StcConfig)
    stream: str = "joint"

    def __post_init__(self) -> None:
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "temporal_strides", tuple(int(s) for s in self.temporal_strides))
        object.__setattr__(self, "stc_blocks", tuple(sorted(int(b) for b in self.stc_blocks)))
        if len(self.block_channels) != 10 or len(self.temporal_strides) != 10:
            raise ConfigError("block_channels and temporal_strides need exactly 10 entries")
        if any(not 1 <= b <= 10 for b in self.stc_blocks):
            raise ConfigError(f"stc_blocks must lie in 1..10, got {self.stc_blocks}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.stream not in ("joint", "bone"):
            raise ConfigError(f"stream must be 'joint' or 'bone', got {self.stream!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.stc_blocks:
            self.stc.validate(self.graph.num_nodes)

    @property
    def dilations(self) -> tuple[int, int]:
        return (2 * self.sigma + 1, 2 * self.sigma + 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["graph"] = self.graph.to_dict()
        d["stc"] = self.stc.to_dict()
        for key in ("block_channels", "temporal_strides", "stc_blocks"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["graph"] = SkeletonGraph.from_dict(d["graph"])
        d["stc"] = StcConfig(**d["stc"])
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# Input transforms -----------------------------------------------------------


def motion_vector(X):
    """Forward frame difference along the frame axis (second to last); last frame is zero."""
    out = X * 0
    if X.shape[-2] > 1:
        out[..., :-1, :] = X[..., 1:, :] - X[..., :-1, :]
    return out


def bone_vector(X, graph: SkeletonGraph):
    """Joint minus parent joint; the root keeps its own coordinates."""
    parents = [p if p >= 0 else i for i, p in enumerate(graph.parents)]
    out = X - X[..., parents]
    out[..., graph.root] = X[..., graph.root]
    return out


# Graph convolution ----------------------------------------------------------


def dkgc_forward(x: torch.Tensor, kernels, weights: torch.Tensor) -> torch.Tensor:
    """Sum over directions of ``A_k x W_k``.

    ``kernels`` is an AdjacencyKernelSet or a (3, V, V) tensor; ``weights``
    is (3, C_in, C_out).
    """
    if isinstance(kernels, AdjacencyKernelSet):
        kernels = torch.from_numpy(kernels.stacked()).to(x.dtype)
    N, C, T, V = x.shape
    if kernels.shape[-1] != V:
        raise ShapeError(f"dkgc: kernels are {kernels.shape[-1]}x{kernels.shape[-1]} but features have V={V}")
    if weights.shape[:2] != (3, C):
        raise ShapeError(f"dkgc: weights {tuple(weights.shape)} do not match {C} input channels")
    agg = torch.einsum("kuv,nctv->nkctu", kernels, x).reshape(N, 3 * C, T, V)
    return torch.einsum("nctv,cd->ndtv", agg, weights.reshape(3 * C, -1))


class DKGC(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernels: AdjacencyKernelSet, rng: RngStream):
        super().__init__()
        self.dilation = kernels.dilation
        self.register_buffer("A", torch.from_numpy(kernels.stacked()).float(), persistent=False)
        self.weight = nn.Parameter(glorot_(torch.empty(3, c_in, c_out), 3 * c_in, c_out, rng))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dkgc_forward(x, self.A, self.weight)


class SpatialModule(nn.Module):
    """STC (or a pointwise map) followed by two DK-GC branches on channel halves."""

    def __init__(self, c_in: int, c_out: int, cfg: ModelConfig, use_stc: bool, rng: RngStream):
        super().__init__()
        if c_out % 2:
            raise ConfigError(f"spatial module needs an even output width to split, got {c_out}")
        if use_stc:
            if c_in != c_out:
                raise ConfigError(f"STC blocks must keep the channel width ({c_in} -> {c_out})")
            self.pre = STCModule(c_in, cfg.stc, rng.child("stc"))
        else:
            self.pre = Pointwise(c_in, c_out, rng.child("pointwise"))
        half = c_out // 2
        self.branches = nn.ModuleList(
            DKGC(half, half, kernel_set(cfg.graph, d), rng.child("dkgc", d)) for d in cfg.dilations
        )
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x: torch.Tensor, rng: RngStream | None = None) -> torch.Tensor:
        if isinstance(self.pre, STCModule):
            x = self.pre(x, rng)
        else:
            x = self.pre(x)
        halves = torch.chunk(x, 2, dim=1)
        y = torch.cat([b(h) for b, h in zip(self.branches, halves)], dim=1)
        return torch.relu(self.bn(y))


class TemporalModule(nn.Module):
    """Four branches on quarter widths: conv k5 d1, conv k5 d2, max-pool k3, identity."""

    def __init__(self, channels: int, stride: int, rng: RngStream):
        super().__init__()
        if channels % 4:
            raise ConfigError(f"temporal module width must be divisible by 4, got {channels}")
        q = channels // 4
        self.stride = stride
        self.reduce = nn.ModuleList(
            Pointwise(channels, q, rng.child("reduce", i), stride=stride if i == 3 else 1) for i in range(4)
        )
        self.reduce_bn = nn.ModuleList(nn.BatchNorm2d(q) for _ in range(4))
        self.convs = nn.ModuleList(
            TemporalConv(q, q, 5, d, stride, rng.child("conv", d)) for d in (1, 2)
        )
        self.out_bn = nn.ModuleList(nn.BatchNorm2d(q) for _ in range(3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = []
        for i in range(4):
            h = self.reduce_bn[i](self.reduce[i](x))
            if i < 2:
                h = self.out_bn[i](self.convs[i](torch.relu(h)))
            elif i == 2:
                h = self.out_bn[2](temporal_maxpool(torch.relu(h), 3, self.stride))
            outs.append(h)
        return torch.cat(outs, dim=1)


class Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, cfg: ModelConfig, use_stc: bool, rng: RngStream):
        super().__init__()
        self.spatial = SpatialModule(c_in, c_out, cfg, use_stc, rng.child("spatial"))
        self.temporal = TemporalModule(c_out, stride, rng.child("temporal"))
        if c_in == c_out and stride == 1:
            self.residual = None
        else:
            self.residual = nn.Sequential(
                Pointwise(c_in, c_out, rng.child("residual"), stride=stride), nn.BatchNorm2d(c_out)
            )

    @property
    def stc(self) -> STCModule | None:
        return self.spatial.pre if isinstance(self.spatial.pre, STCModule) else None

    def forward(self, x: torch.Tensor, rng: RngStream | None = None) -> torch.Tensor:
        res = x if self.residual is None else self.residual(x)
        return torch.relu(self.temporal(self.spatial(x, rng)) + res)


class STCNet(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        self.cfg = cfg
        V = cfg.graph.num_nodes
        ch, st = cfg.block_channels, cfg.temporal_strides
        self.pathways = nn.ModuleDict()
        self.input_bn = nn.ModuleDict()
        for name in ("coord", "motion"):
            blocks = []
            c_in = cfg.in_channels
            for b in range(4):
                blocks.append(Block(c_in, ch[b], st[b], cfg, (b + 1) in cfg.stc_blocks, rng.child(name, b + 1)))
                c_in = ch[b]
            self.pathways[name] = nn.ModuleList(blocks)
            self.input_bn[name] = nn.BatchNorm1d(cfg.in_channels * V)
        trunk = []
        c_in = 2 * ch[3]
        for b in range(4, 10):
            trunk.append(Block(c_in, ch[b], st[b], cfg, (b + 1) in cfg.stc_blocks, rng.child("trunk", b + 1)))
            c_in = ch[b]
        self.trunk = nn.ModuleList(trunk)
        self.fc = Linear(ch[9], cfg.num_classes, rng.child("fc"))

    def named_blocks(self) -> list[tuple[str, Block]]:
        out = [(f"coord.{i + 1}", b) for i, b in enumerate(self.pathways["coord"])]
        out += [(f"motion.{i + 1}", b) for i, b in enumerate(self.pathways["motion"])]
        out += [(f"trunk.{i + 5}", b) for i, b in enumerate(self.trunk)]
        return out

    def stc_modules(self) -> list[tuple[str, STCModule]]:
        return [(name, b.stc) for name, b in self.named_blocks() if b.stc is not None]

    def set_soft_path(self, flag: bool) -> None:
        for _, m in self.stc_modules():
            m.soft_path = flag

    def set_record(self, flag: bool) -> None:
        for _, m in self.stc_modules():
            m.record = flag
            m.last_curves = None

    def _normalize_input(self, x: torch.Tensor, name: str) -> torch.Tensor:
        N, C, T, V = x.shape
        h = x.permute(0, 3, 1, 2).reshape(N, V * C, T)
        h = self.input_bn[name](h)
        return h.reshape(N, V, C, T).permute(0, 2, 3, 1)

    def forward(self, x: torch.Tensor, rng: RngStream | None = None) -> torch.Tensor:
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1] != cfg.in_channels or x.shape[3] != cfg.graph.num_nodes:
            raise ShapeError(
                f"expected input (N, {cfg.in_channels}, T, {cfg.graph.num_nodes}), got {tuple(x.shape)}"
            )
        if cfg.stream == "bone":
            x = bone_vector(x, cfg.graph)
        feats = []
        for name, inp in (("coord", x), ("motion", motion_vector(x))):
            h = self._normalize_input(inp, name)
            for i, block in enumerate(self.pathways[name]):
                h = block(h, rng.child(name, i + 1) if rng is not None else None)
            feats.append(h)
        h = torch.cat(feats, dim=1)
        for i, block in enumerate(self.trunk):
            h = block(h, rng.child("trunk", i + 5) if rng is not None else None)
        return self.fc(h.mean(dim=(2, 3)))


def build_model(cfg: ModelConfig, seed: int = 0) -> STCNet:
    return STCNet(cfg, RngStream(seed, "init"))


def stcnet_forward(sample: torch.Tensor, model: STCNet, rng: RngStream | None = None) -> torch.Tensor:
    """Class scores for a single (C, T, V) sample."""
    return model(sample.unsqueeze(0), rng)[0]


# Accounting -----------------------------------------------------------------


def count_params(cfg: ModelConfig) -> int:
    model = STCNet(cfg, RngStream(0, "count"))
    return sum(p.numel() for p in model.parameters())


def count_flops(cfg: ModelConfig, T: int, V: int | None = None) -> int:
    """Forward FLOPs for one sample, two per multiply-accumulate."""
    from torch.utils.flop_counter import FlopCounterMode

    if V is not None and V != cfg.graph.num_nodes:
        raise ShapeError(f"V={V} does not match the graph ({cfg.graph.num_nodes} nodes)")
    model = STCNet(cfg, RngStream(0, "count")).eval()
    x = torch.from_numpy(RngStream(0, "flops").normal((1, cfg.in_channels, T, cfg.graph.num_nodes))).float()
    counter = FlopCounterMode(display=False)
    with torch.no_grad(), counter:
        model(x)
    return int(counter.get_total_flops())


def ntu_config(num_classes: int = 120, **kw) -> ModelConfig:
    from .graph import ntu_graph

    return ModelConfig(graph=ntu_graph(), num_classes=num_classes, **kw)


# Checkpoint container -------------------------------------------------------

CKPT_MAGIC = b"STCK"
CKPT_VERSION = 1


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16:
        raise FormatError("checkpoint: file truncated")
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"checkpoint: bad magic {blob[:4]!r}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checkpoint: CRC mismatch")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint: unsupported version {version}")
    end = len(blob) - 4
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise FormatError("checkpoint: tensor table runs past end of file")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint: tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
        if name in out:
            raise FormatError(f"checkpoint: tensor {name!r} appears twice")
        out[name] = data
    if pos != end:
        raise FormatError("checkpoint: trailing bytes after tensor table")
    return out


def save_checkpoint(path: str | Path, model: STCNet, epoch: int = 0) -> None:
    tensors = {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    cfg_bytes = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    tensors["meta.config"] = np.frombuffer(cfg_bytes, dtype=np.uint8).astype(np.float32)
    tensors["meta.epoch"] = np.array([epoch], dtype=np.float32)
    Path(path).write_bytes(encode_tensors(tensors))


def load_checkpoint(path: str | Path) -> tuple[STCNet, int]:
    """Rebuild the model stored at ``path``; returns ``(model, epoch)``."""
    tensors = decode_tensors(Path(path).read_bytes())
    try:
        cfg_json = tensors.pop("meta.config").astype(np.uint8).tobytes().decode("utf-8")
        epoch = int(tensors.pop("meta.epoch")[0])
    except KeyError as exc:
        raise FormatError(f"checkpoint: missing {exc.args[0]}") from exc
    cfg = ModelConfig.from_dict(json.loads(cfg_json))
    model = STCNet(cfg, RngStream(0, "load"))
    state = model.state_dict()
    if set(state) != set(tensors):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise FormatError(f"checkpoint: tensor names do not match model (missing {missing[:3]}, extra {extra[:3]})")
    for name, ref in state.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"checkpoint: tensor {name!r} has shape {arr.shape}, expected {tuple(ref.shape)}")
    model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in tensors.items()})
    return model, epoch
