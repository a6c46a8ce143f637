"""Differentiable tensor substrate.

Thin, shape-checked functional ops over :mod:`torch` plus the few layer
modules the model is assembled from. Every layer in the package routes its
arithmetic through the functions here, so the naive-loop oracles in the test
suite cover what the model actually computes.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

Tensor = torch.Tensor


def set_deterministic(seed: int | None = None, threads: int = 1) -> None:
    """Pin torch to a single-threaded, deterministic schedule."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


def _as_pair(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def _check_conv(x: Tensor, kernel: Tensor, nsp: int, stride, padding, name: str):
    if x.dim() != nsp + 2:
        raise ValueError(f"{name}: input must have {nsp + 2} dims [N,Cin,...], got shape {tuple(x.shape)}")
    if kernel.dim() != nsp + 2:
        raise ValueError(f"{name}: kernel must have {nsp + 2} dims [Cout,Cin,...], got shape {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"{name}: input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    stride = _as_pair(stride, nsp)
    padding = _as_pair(padding, nsp)
    for ax in range(nsp):
        size = x.shape[2 + ax] + 2 * padding[ax]
        if kernel.shape[2 + ax] > size:
            raise ValueError(
                f"{name}: kernel extent {kernel.shape[2 + ax]} exceeds padded size {size} on spatial axis {ax}"
            )
        if stride[ax] < 1:
            raise ValueError(f"{name}: stride must be >= 1")
    return stride, padding


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    stride, padding = _check_conv(x, kernel, 1, stride, padding, "conv1d")
    return F.conv1d(x, kernel, bias, stride=stride, padding=padding)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Zero-padded 2D cross-correlation, ``[N,Cin,H,W] -> [N,Cout,H',W']``."""
    stride, padding = _check_conv(x, kernel, 2, stride, padding, "conv2d")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Zero-padded 3D cross-correlation, ``[N,Cin,D,H,W] -> [N,Cout,D',H',W']``."""
    stride, padding = _check_conv(x, kernel, 3, stride, padding, "conv3d")
    return F.conv3d(x, kernel, bias, stride=stride, padding=padding)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input feature dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    return F.linear(x, weight, bias)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def avg_pool_1x1(x: Tensor) -> Tensor:
    """Average over the trailing two (spatial) axes, keeping them as size 1."""
    return x.mean(dim=(-2, -1), keepdim=True)


def concat(tensors: Sequence[Tensor], dim: int = 0) -> Tensor:
    return torch.cat(list(tensors), dim=dim)


def multi_head_attention(
    x: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor | None,
    w_out: Tensor,
    b_out: Tensor | None,
    n_heads: int,
) -> Tensor:
    """Self-attention over ``x[..., T, D]`` with a fused QKV projection."""
    d = x.shape[-1]
    if d % n_heads:
        raise ValueError(f"attention: dim {d} not divisible by {n_heads} heads")
    qkv = linear(x, w_qkv, b_qkv)
    q, k, v = qkv.split(d, dim=-1)
    hd = d // n_heads

    def heads(t):
        return t.reshape(*t.shape[:-1], n_heads, hd).transpose(-3, -2)

    q, k, v = heads(q), heads(k), heads(v)
    att = softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
    out = (att @ v).transpose(-3, -2).reshape(*x.shape[:-1], d)
    return linear(out, w_out, b_out)


def grad(loss: Tensor, params: Iterable[Tensor], allow_unused: bool = True) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. ``params``.

    Parameters the loss does not depend on get a zero gradient.
    """
    params = list(params)
    if loss.numel() != 1:
        raise ValueError(f"grad: loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise ValueError("grad: loss was not produced by a recorded computation")
    grads = torch.autograd.grad(loss, params, allow_unused=allow_unused)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# --- layers -----------------------------------------------------------------


def _uniform_(t: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        return t.uniform_(-bound, bound)


class _ConvNd(nn.Module):
    nsp = 0
    fn = None

    def __init__(self, cin, cout, kernel, stride=1, padding=0, bias=True):
        super().__init__()
        kernel = _as_pair(kernel, self.nsp)
        self.stride = _as_pair(stride, self.nsp)
        self.padding = _as_pair(padding, self.nsp)
        self.weight = nn.Parameter(torch.empty(cout, cin, *kernel))
        self.bias = nn.Parameter(torch.empty(cout)) if bias else None
        fan_in = cin * math.prod(kernel)
        _uniform_(self.weight, fan_in)
        if self.bias is not None:
            _uniform_(self.bias, fan_in)

    def forward(self, x):
        return type(self).fn(x, self.weight, self.bias, self.stride, self.padding)


class Conv1d(_ConvNd):
    nsp = 1
    fn = staticmethod(conv1d)


class Conv2d(_ConvNd):
    nsp = 2
    fn = staticmethod(conv2d)


class Conv3d(_ConvNd):
    nsp = 3
    fn = staticmethod(conv3d)


class Linear(nn.Module):
    def __init__(self, din, dout, bias=True):
        super().__init__()
        self.weight = nn.Parameter(_uniform_(torch.empty(dout, din), din))
        self.bias = nn.Parameter(_uniform_(torch.empty(dout), din)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class Mlp(nn.Module):
    def __init__(self, dim, hidden=None, dout=None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dout or dim)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)

    def forward(self, x):
        return multi_head_attention(
            x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias, self.n_heads
        )


class TransformerLayer(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, dim, n_heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
