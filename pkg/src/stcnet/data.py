"""Synthetic skeleton sequences, the STCD container and light preprocessing."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .graph import SkeletonGraph
from .nn import RngStream

MAGIC = b"STCD"
VERSION = 1


@dataclass
class SkeletonSequenceDataset:
    graph: SkeletonGraph
    samples: np.ndarray  # (N, C, T, V) float32
    labels: np.ndarray  # (N,) int64

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise ValueError(f"samples must be (N, C, T, V), got shape {self.samples.shape}")
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.samples.shape[0]} samples but {self.labels.shape[0]} labels")
        if self.samples.shape[3] != self.graph.num_nodes:
            raise ValueError(f"samples have V={self.samples.shape[3]} but graph has {self.graph.num_nodes} nodes")
        if (self.labels < 0).any():
            raise ValueError("labels must be non-negative")
        if not np.isfinite(self.samples).all():
            raise ValueError("samples contain non-finite values")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SkeletonSequenceDataset):
            return NotImplemented
        return (
            self.graph.parents == other.graph.parents
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


# Synthetic bodies -----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    V: int = 15
    T: int = 32
    num_classes: int = 4
    samples_per_class: int = 100
    noise_std: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.V < 5:
            raise ValueError(f"V={self.V} is too small to form a spine and four limbs (need >= 5)")
        if self.T < 8:
            raise ValueError(f"T must be >= 8, got {self.T}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass(frozen=True)
class Body:
    graph: SkeletonGraph
    rest: np.ndarray  # (3, V)
    limbs: tuple[tuple[int, ...], ...]  # left arm, right arm, left leg, right leg
    anchors: tuple[int, ...]  # joint each limb rotates about


def body(V: int = 15) -> Body:
    """Spine chain from the pelvis (root 0) plus two arms at the top and two legs at the root."""
    if V < 5:
        raise ValueError(f"V={V} is too small to form a spine and four limbs (need >= 5)")
    limb = max(1, (V - 3) // 4)
    spine = V - 4 * limb
    parents = [-1] + list(range(spine - 1))
    rest = [(0.0, 0.0, 0.0)] + [(0.0, 0.25 * i, 0.0) for i in range(1, spine)]
    top = spine - 1
    limbs, anchors = [], []
    for anchor, sx, dy in ((top, -1, 0.0), (top, 1, 0.0), (0, -1, -1), (0, 1, -1)):
        ax, ay, _ = rest[anchor]
        chain = []
        prev = anchor
        for j in range(limb):
            idx = len(parents)
            parents.append(prev)
            if dy == 0.0:
                rest.append((ax + sx * 0.3 * (j + 1), ay, 0.0))
            else:
                rest.append((ax + sx * 0.1, ay - 0.3 * (j + 1), 0.0))
            chain.append(idx)
            prev = idx
        limbs.append(tuple(chain))
        anchors.append(anchor)
    return Body(SkeletonGraph.from_parents(parents), np.array(rest, dtype=np.float64).T, tuple(limbs), tuple(anchors))


def class_motion(c: int, n_limbs: int = 4) -> tuple[int, float, float]:
    """(limb index, cycles per sequence, base phase) animated by class ``c``."""
    return c % n_limbs, 1.0 + 0.5 * (c // n_limbs), (c * math.pi / 3.0) % (2 * math.pi)


def animate(bd: Body, c: int, T: int, amp: float, phase_jitter: float) -> np.ndarray:
    """Noise-free (3, T, V) sequence: the class's limb swings in the x-y plane about its anchor."""
    limb, cycles, phase = class_motion(c, len(bd.limbs))
    seq = np.repeat(bd.rest[:, None, :], T, axis=1)
    t = np.arange(T)
    theta = amp * np.sin(2 * math.pi * cycles * t / T + phase + phase_jitter)
    joints = list(bd.limbs[limb])
    pivot = bd.rest[:, bd.anchors[limb]]
    rel = bd.rest[:, joints] - pivot[:, None]
    cos, sin = np.cos(theta)[:, None], np.sin(theta)[:, None]
    seq[0][:, joints] = pivot[0] + cos * rel[0] - sin * rel[1]
    seq[1][:, joints] = pivot[1] + sin * rel[0] + cos * rel[1]
    return seq


def generate_synthetic(spec: SynthSpec, split: str = "train") -> SkeletonSequenceDataset:
    """Deterministic dataset: each class swings one limb with its own rhythm.

    Sample ``i`` of class ``c`` draws its amplitude, phase jitter and noise from
    its own stream, so it does not depend on how many other samples exist.
    """
    spec.validate()
    bd = body(spec.V)
    N = spec.num_classes * spec.samples_per_class
    samples = np.empty((N, 3, spec.T, spec.V), dtype=np.float32)
    labels = np.empty(N, dtype=np.int64)
    n = 0
    for i in range(spec.samples_per_class):
        for c in range(spec.num_classes):
            rng = RngStream(spec.seed, "synth", split, c, i)
            amp = 0.8 + 0.4 * rng.uniform(())
            jitter = 0.6 * (rng.uniform(()) - 0.5)
            seq = animate(bd, c, spec.T, float(amp), float(jitter))
            if spec.noise_std > 0:
                seq = seq + rng.normal(seq.shape, spec.noise_std)
            samples[n] = seq
            labels[n] = c
            n += 1
    return SkeletonSequenceDataset(bd.graph, samples, labels)


def animated_joints(V: int, c: int) -> tuple[int, ...]:
    bd = body(V)
    return bd.limbs[class_motion(c, len(bd.limbs))[0]]


def motion_energy(samples: np.ndarray) -> np.ndarray:
    """Mean squared frame-to-frame displacement per joint, shape (V,)."""
    d = np.diff(samples, axis=-2)
    return (d**2).sum(axis=-3).mean(axis=tuple(range(d.ndim - 3)) + (-2,))


# STCD container -------------------------------------------------------------


def encode_dataset(ds: SkeletonSequenceDataset) -> bytes:
    N, C, T, V = ds.samples.shape
    g = ds.graph
    parents = [g.parents[v] for v in range(V) if v != g.root]
    body_ = b"".join(
        [
            MAGIC,
            struct.pack("<I", VERSION),
            struct.pack("<4I", N, C, T, V),
            struct.pack("<II", V, g.root),
            struct.pack(f"<{V - 1}I", *parents),
            np.ascontiguousarray(ds.samples, dtype="<f4").tobytes(),
            np.ascontiguousarray(ds.labels, dtype="<u4").tobytes(),
        ]
    )
    return body_ + struct.pack("<I", zlib.crc32(body_))


def decode_dataset(blob: bytes) -> SkeletonSequenceDataset:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"dataset: bad magic {blob[:4]!r}")
    if len(blob) < 36:
        raise FormatError("dataset: file truncated in header")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("dataset: CRC mismatch")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"dataset: unsupported version {version}")
    N, C, T, V = struct.unpack_from("<4I", blob, 8)
    gV, root = struct.unpack_from("<II", blob, 24)
    if gV != V:
        raise FormatError(f"dataset: graph has {gV} nodes but header says V={V}")
    if V < 1:
        raise FormatError("dataset: V must be >= 1")
    pos = 32
    need = pos + 4 * (V - 1) + 4 * N * C * T * V + 4 * N + 4
    if len(blob) != need:
        raise FormatError(f"dataset: payload length {len(blob)} does not match header (expected {need})")
    nonroot = struct.unpack_from(f"<{V - 1}I", blob, pos)
    pos += 4 * (V - 1)
    if root >= V:
        raise FormatError(f"dataset: graph root {root} out of range")
    parents = [-1] * V
    it = iter(nonroot)
    for v in range(V):
        if v != root:
            parents[v] = next(it)
    try:
        graph = SkeletonGraph.from_parents([p if v != root else -1 for v, p in enumerate(parents)])
    except ValueError as exc:
        raise FormatError(f"dataset: graph field invalid ({exc})") from exc
    samples = np.frombuffer(blob, dtype="<f4", count=N * C * T * V, offset=pos).reshape(N, C, T, V).copy()
    pos += 4 * N * C * T * V
    labels = np.frombuffer(blob, dtype="<u4", count=N, offset=pos).astype(np.int64)
    try:
        return SkeletonSequenceDataset(graph, samples, labels)
    except ValueError as exc:
        raise FormatError(f"dataset: payload invalid ({exc})") from exc


def write_dataset(ds: SkeletonSequenceDataset, path: str | Path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def read_dataset(path: str | Path) -> SkeletonSequenceDataset:
    return decode_dataset(Path(path).read_bytes())


# Preprocessing --------------------------------------------------------------


def resample_indices(T: int, target_T: int) -> np.ndarray:
    """Uniform frame picks; shorter sequences are looped to fill ``target_T``."""
    if target_T < 1:
        raise ValueError(f"target_T must be >= 1, got {target_T}")
    if T >= target_T:
        return (np.arange(target_T) * T) // target_T
    return np.arange(target_T) % T


def preprocess(ds: SkeletonSequenceDataset, target_T: int) -> SkeletonSequenceDataset:
    """Center on the first-frame root joint and resample to ``target_T`` frames."""
    x = ds.samples.astype(np.float64)
    x = x - x[:, :, :1, ds.graph.root][..., None]
    x = x[:, :, resample_indices(x.shape[2], target_T)]
    return SkeletonSequenceDataset(ds.graph, x.astype(np.float32), ds.labels.copy())
