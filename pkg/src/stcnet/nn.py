"""Differentiable primitives on top of torch autograd.

Everything here works in whatever floating dtype the inputs carry; training
uses float32 and the gradient checks run in float64.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError


class RngStream:
    """Counter-based random stream keyed by a seed and a tuple of labels.

    Streams with different labels are independent; recreating a stream with
    the same seed and labels replays the exact same sequence.
    """

    def __init__(self, seed: int, *labels: str | int):
        self.seed = int(seed)
        self.labels = tuple(labels)
        digest = hashlib.blake2b(repr((self.seed, self.labels)).encode(), digest_size=16).digest()
        key = np.frombuffer(digest, dtype=np.uint64).copy()
        self._bitgen = np.random.Philox(key=key)
        self.gen = np.random.Generator(self._bitgen)

    def child(self, *labels: str | int) -> "RngStream":
        return RngStream(self.seed, *self.labels, *labels)

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        return self.gen.random(tuple(shape))

    def normal(self, shape: Sequence[int], scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.gen.integers(0, 2**63 - 1)))
        return g

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, labels={self.labels})"


def glorot_(w: torch.Tensor, fan_in: int, fan_out: int, rng: RngStream) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=rng.torch_generator())
    return w


def linear(x: torch.Tensor, W: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ W (+ bias)`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {tuple(x.shape)} does not match weight {tuple(W.shape)}")
    y = x @ W
    if bias is not None:
        if bias.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias {tuple(bias.shape)} does not match weight {tuple(W.shape)}")
        y = y + bias
    return y


def pointwise(x: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Channel map on an (N, C, T, V) tensor with ``W`` of shape (C_in, C_out)."""
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"pointwise: input {tuple(x.shape)} does not match weight {tuple(W.shape)}")
    return torch.einsum("nctv,cd->ndtv", x, W)


def temporal_conv(
    x: torch.Tensor, W: torch.Tensor, kernel: int, dilation: int = 1, stride: int = 1
) -> torch.Tensor:
    """Convolution along frames only.

    ``x`` is (N, C_in, T, V), ``W`` is (C_out, C_in, kernel). Zero padding of
    ``dilation * (kernel - 1) / 2`` keeps T unchanged at stride 1; output
    length is ``ceil(T / stride)``.
    """
    if kernel % 2 != 1:
        raise ValueError(f"temporal_conv: kernel must be odd, got {kernel}")
    if dilation < 1 or stride < 1:
        raise ValueError("temporal_conv: dilation and stride must be >= 1")
    if x.dim() != 4:
        raise ShapeError(f"temporal_conv: expected (N, C, T, V), got {tuple(x.shape)}")
    if W.shape != (W.shape[0], x.shape[1], kernel):
        raise ShapeError(f"temporal_conv: weight {tuple(W.shape)} incompatible with input {tuple(x.shape)}")
    T = x.shape[2]
    if T < 1:
        raise ShapeError("temporal_conv: empty frame axis")
    pad = dilation * (kernel - 1) // 2
    return F.conv2d(x, W.unsqueeze(-1), stride=(stride, 1), padding=(pad, 0), dilation=(dilation, 1))


def temporal_maxpool(x: torch.Tensor, kernel: int = 3, stride: int = 1) -> torch.Tensor:
    pad = (kernel - 1) // 2
    return F.max_pool2d(x, kernel_size=(kernel, 1), stride=(stride, 1), padding=(pad, 0))


def gumbel_softmax(
    logits: torch.Tensor,
    temperature: float = 1.0,
    mode: str = "train",
    rng: RngStream | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard/soft Gumbel-softmax pair over the last axis.

    Returns ``(onehot, soft)``. ``onehot`` carries no gradient; combine with
    :func:`straight_through` to send gradients through ``soft``. In ``eval``
    mode no noise is drawn and the choice is the plain argmax of ``logits``.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if logits.shape[-1] < 1:
        raise ShapeError("gumbel_softmax: need at least one logit")
    if mode == "train":
        if rng is None:
            raise ValueError("gumbel_softmax: train mode needs an RngStream")
        tiny = np.finfo(np.float64).tiny
        u = np.clip(rng.uniform(logits.shape), tiny, 1.0 - np.finfo(np.float64).epsneg)
        g = torch.from_numpy(-np.log(-np.log(u))).to(logits.dtype)
        soft = torch.softmax((logits + g) / temperature, dim=-1)
        index = soft.detach().argmax(dim=-1)
    elif mode == "eval":
        soft = torch.softmax(logits / temperature, dim=-1)
        index = logits.detach().argmax(dim=-1)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    onehot = F.one_hot(index, logits.shape[-1]).to(logits.dtype)
    return onehot, soft


def straight_through(onehot: torch.Tensor, soft: torch.Tensor) -> torch.Tensor:
    """Equals ``onehot`` exactly in value, differentiates like ``soft``."""
    return onehot + (soft - soft.detach())


def attentive_pool(x: torch.Tensor, w_score: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax-weighted sum of the columns of ``x`` along ``dim``.

    ``x`` has channels on axis 1 (or axis 0 when 2-D); each column gets the
    scalar score ``w_score . x[:, m]`` and the scores are normalized over
    ``dim``.
    """
    cdim = 0 if x.dim() == 2 else 1
    if x.shape[dim] < 1:
        raise ShapeError("attentive_pool: nothing to pool over")
    if w_score.shape != (x.shape[cdim],):
        raise ShapeError(f"attentive_pool: score weight {tuple(w_score.shape)} vs channels {x.shape[cdim]}")
    shape = [1] * x.dim()
    shape[cdim] = -1
    scores = (x * w_score.view(shape)).sum(dim=cdim, keepdim=True)
    attn = torch.softmax(scores, dim=dim)
    return (attn * x).sum(dim=dim)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    rng: RngStream | None = None,
) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated with each coordinate of ``params`` nudged by ``±h``.
    With ``max_coords_per_tensor`` only a random subset of coordinates per
    tensor is checked.
    """
    for p in params:
        if p.grad is not None:
            p.grad = None
    out = f()
    if out.numel() != 1:
        raise ShapeError("grad_check: closure must return a scalar")
    if not torch.isfinite(out).all():
        raise NumericError("grad_check: closure returned a non-finite value")
    out.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.view(-1)
        gflat = g.view(-1)
        idx = np.arange(flat.numel())
        if max_coords_per_tensor is not None and flat.numel() > max_coords_per_tensor:
            picker = rng if rng is not None else RngStream(0, "grad_check")
            idx = np.sort(picker.gen.choice(flat.numel(), max_coords_per_tensor, replace=False))
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite value at coordinate {i}")
            num = (fp - fm) / (2 * h)
            a = gflat[i].item()
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst


class Pointwise(nn.Module):
    """Bias-free 1x1 channel map on (N, C, T, V) tensors."""

    def __init__(self, c_in: int, c_out: int, rng: RngStream, stride: int = 1):
        super().__init__()
        self.weight = nn.Parameter(glorot_(torch.empty(c_in, c_out), c_in, c_out, rng))
        self.stride = stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.stride > 1:
            x = x[:, :, :: self.stride]
        return pointwise(x, self.weight)


class Linear(nn.Module):
    def __init__(self, c_in: int, c_out: int, rng: RngStream, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(glorot_(torch.empty(c_in, c_out), c_in, c_out, rng))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


class TemporalConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int, stride: int, rng: RngStream):
        super().__init__()
        self.kernel, self.dilation, self.stride = kernel, dilation, stride
        w = glorot_(torch.empty(c_out, c_in, kernel), c_in * kernel, c_out * kernel, rng)
        self.weight = nn.Parameter(w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return temporal_conv(x, self.weight, self.kernel, self.dilation, self.stride)


class AttentivePool(nn.Module):
    def __init__(self, channels: int, rng: RngStream):
        super().__init__()
        self.weight = nn.Parameter(glorot_(torch.empty(channels), channels, 1, rng))

    def forward(self, x: torch.Tensor, dim: int) -> torch.Tensor:
        return attentive_pool(x, self.weight, dim=dim)
