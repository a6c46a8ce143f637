"""S5 state-space layer: HiPPO-N init, ZOH discretization and scans.

The continuous system is kept in diagonal form, ``dx/dt = Λx + B̃u`` and
``y = Re(C̃x) + D⊙u``, discretized per-state with zero-order hold and
unrolled either sequentially or with an associative (parallel) scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import tensor_engine as te

ZOH_EPS = 1e-12


@dataclass
class SsmParams:
    """Complex diagonal S5 parameters for one layer."""

    lambda_: torch.Tensor  # [P] complex
    b_tilde: torch.Tensor  # [P, Din] complex
    c_tilde: torch.Tensor  # [Dout, P] complex
    d_diag: torch.Tensor  # [Dout] real
    delta: torch.Tensor  # [P] real > 0

    def validate(self) -> None:
        P = self.lambda_.shape[0]
        if self.b_tilde.shape[0] != P or self.c_tilde.shape[1] != P or self.delta.shape[0] != P:
            raise ValueError("SsmParams: state dimension mismatch")
        if self.c_tilde.shape[0] != self.d_diag.shape[0]:
            raise ValueError("SsmParams: output dimension mismatch between c_tilde and d_diag")
        if self.b_tilde.shape[1] != self.d_diag.shape[0]:
            raise ValueError("SsmParams: diagonal feedthrough D needs Din == Dout")
        if torch.any(self.delta <= 0):
            raise ValueError("SsmParams: delta must be positive")


@dataclass
class DiscreteSsm:
    lambda_bar: torch.Tensor  # [P] complex
    b_bar: torch.Tensor  # [P, Din] complex


def hippo_n_matrix(P: int) -> np.ndarray:
    """Normal part of HiPPO-LegS: ``-I/2 + S`` with ``S`` skew-symmetric."""
    if P <= 0:
        raise ValueError(f"state size must be >= 1, got {P}")
    q = np.sqrt(np.arange(P) + 0.5)
    s = np.outer(q, q)
    s = np.triu(s, 1) - np.tril(s, -1)
    return -0.5 * np.eye(P) + s


def hippo_n_init(P: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Eigenvalues and unitary eigenvectors of the HiPPO-N matrix.

    The skew part ``S`` is diagonalized through the Hermitian matrix ``-iS``,
    so every eigenvalue has real part exactly ``-1/2``.
    """
    A = hippo_n_matrix(P)
    S = A + 0.5 * np.eye(P)
    w, V = np.linalg.eigh(-1j * S)
    lam = -0.5 + 1j * w
    return torch.from_numpy(lam.astype(np.complex128)), torch.from_numpy(V.astype(np.complex128))


def zoh_discretize(p: SsmParams) -> DiscreteSsm:
    lam, delta = p.lambda_, p.delta.to(p.lambda_.dtype)
    lambda_bar = torch.exp(delta * lam)
    small = lam.abs() < ZOH_EPS
    safe = torch.where(small, torch.ones_like(lam), lam)
    # (exp(δλ) - 1)/λ -> δ as λ -> 0
    scale = torch.where(small, delta, (lambda_bar - 1) / safe)
    return DiscreteSsm(lambda_bar, scale[:, None] * p.b_tilde)


def combine(left, right):
    """Scan operator ``(a1,b1)•(a2,b2) = (a2 a1, a2 b1 + b2)``."""
    a1, b1 = left
    a2, b2 = right
    return a2 * a1, a2 * b1 + b2


def associative_scan(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Inclusive scan of :func:`combine` along axis 0 (even/odd recursion)."""
    T = a.shape[0]
    if T < 2:
        return a, b
    pa, pb = combine((a[0 : T - 1 : 2], b[0 : T - 1 : 2]), (a[1::2], b[1::2]))
    odd_a, odd_b = associative_scan(pa, pb)
    n_rest = (T - 1) // 2
    ra, rb = combine((odd_a[:n_rest], odd_b[:n_rest]), (a[2::2], b[2::2]))
    even_a = torch.cat([a[:1], ra])
    even_b = torch.cat([b[:1], rb])
    return _interleave(even_a, odd_a, T), _interleave(even_b, odd_b, T)


def _interleave(even, odd, T):
    n = odd.shape[0]
    head = torch.stack([even[:n], odd], dim=1).reshape(2 * n, *odd.shape[1:])
    if T % 2:
        head = torch.cat([head, even[n:]])
    return head


def sequential_scan(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Reference recurrence ``x_t = a_t x_{t-1} + b_t`` with ``x_{-1} = 0``."""
    xs = []
    x = torch.zeros_like(b[0])
    for t in range(b.shape[0]):
        x = a[t] * x + b[t]
        xs.append(x)
    return torch.stack(xs)


def ssm_apply(p: SsmParams, u: torch.Tensor, mode: str = "parallel") -> torch.Tensor:
    """Run the discretized SSM over ``u[..., T, Din]`` and return real ``[..., T, Dout]``."""
    if u.shape[-1] != p.b_tilde.shape[1]:
        raise ValueError(f"ssm_apply: input dim {u.shape[-1]} != Din {p.b_tilde.shape[1]}")
    if u.shape[-2] < 1:
        raise ValueError("ssm_apply: empty sequence")
    p.validate()
    disc = zoh_discretize(p)
    uc = u.to(disc.b_bar.dtype)
    bu = torch.einsum("pd,...td->...tp", disc.b_bar, uc)
    bu = bu.movedim(-2, 0)
    a = disc.lambda_bar.expand_as(bu)
    if mode == "parallel":
        _, x = associative_scan(a, bu)
    elif mode == "sequential":
        x = sequential_scan(a, bu)
    else:
        raise ValueError(f"unknown scan mode {mode!r}")
    x = x.movedim(0, -2)
    y = torch.einsum("dp,...tp->...td", p.c_tilde, x).real
    return y + p.d_diag * u


class S5(nn.Module):
    """Learnable S5 layer holding real-valued views of the complex parameters.

    ``Re(Λ) = -exp(log_neg_re)`` keeps the system stable throughout training.
    """

    def __init__(self, din: int, dout: int | None = None, state: int = 16,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        dout = dout or din
        lam, V = hippo_n_init(state)
        B = torch.randn(state, din, dtype=torch.float64) / math.sqrt(din)
        C = torch.randn(dout, state, dtype=torch.float64) / math.sqrt(state)
        b_tilde = V.conj().T @ B.to(V.dtype)
        c_tilde = C.to(V.dtype) @ V
        f32 = torch.get_default_dtype()
        self.log_neg_re = nn.Parameter(torch.log(-lam.real).to(f32))
        self.lambda_im = nn.Parameter(lam.imag.to(f32))
        self.b_re = nn.Parameter(b_tilde.real.to(f32))
        self.b_im = nn.Parameter(b_tilde.imag.to(f32))
        self.c_re = nn.Parameter(c_tilde.real.to(f32))
        self.c_im = nn.Parameter(c_tilde.imag.to(f32))
        self.d = nn.Parameter(torch.randn(dout))
        u = torch.rand(state)
        self.log_delta = nn.Parameter(math.log(dt_min) + u * (math.log(dt_max) - math.log(dt_min)))
        self.mode = "parallel"

    def params(self) -> SsmParams:
        return SsmParams(
            lambda_=torch.complex(-torch.exp(self.log_neg_re), self.lambda_im),
            b_tilde=torch.complex(self.b_re, self.b_im),
            c_tilde=torch.complex(self.c_re, self.c_im),
            d_diag=self.d,
            delta=torch.exp(self.log_delta),
        )

    def forward(self, u):
        return ssm_apply(self.params(), u, self.mode)


class SSMBlock(nn.Module):
    """``z' = SSM(LN(z)) + z``; ``out = MLP(LN(z')) + z'``."""

    def __init__(self, dim: int, state: int = 16, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = te.LayerNorm(dim)
        self.ssm = S5(dim, dim, state)
        self.norm2 = te.LayerNorm(dim)
        self.mlp = te.Mlp(dim, mlp_ratio * dim)

    def forward(self, z):
        z = self.ssm(self.norm1(z)) + z
        return self.mlp(self.norm2(z)) + z
