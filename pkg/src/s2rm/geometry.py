"""Spherical positional embeddings and the truncated spherical Gaussian kernel."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, DegenerateInputError
from .tensorcore import l2_normalize


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth ``epsilon`` and cosine truncation threshold ``tau``.

    ``epsilon = 0`` together with ``tau = -1`` turns the kernel into the
    constant 1, which disables all spatial structure.
    """

    epsilon: float = 1.0
    tau: float = 0.6

    def __post_init__(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"kernel epsilon must be a finite non-negative number, got {self.epsilon}")
        if not -1.0 <= self.tau < 1.0:
            raise ConfigError(f"kernel tau must lie in [-1, 1), got {self.tau}")


def frequency_scales(n_dims: int, d: int) -> torch.Tensor:
    """Geometric ladder ``10000 ** (i / F)`` for ``i < F = d / (2 n_dims)``."""
    if n_dims < 1 or d < 1 or d % (2 * n_dims):
        raise ConfigError(f"embedding size {d} must be a positive multiple of 2*{n_dims}")
    per_dim = d // (2 * n_dims)
    return 10000.0 ** (torch.arange(per_dim, dtype=torch.float64) / per_dim)


def embed_position(x, d: int) -> torch.Tensor:
    """Map points ``x`` of shape ``(..., n)`` onto the unit sphere in ``R^d``.

    Layout: for input dimension ``m`` and frequency slot ``i`` the pair
    ``(sin, cos)`` of ``x_m / scale_i`` occupies positions ``2 (m F + i)`` and
    ``2 (m F + i) + 1``.
    """
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.get_default_dtype())
    if x.dim() == 0:
        x = x.reshape(1)
    n = x.shape[-1]
    scales = frequency_scales(n, d).to(x.dtype)
    phase = x.unsqueeze(-1) / scales  # (..., n, F)
    s = torch.stack((torch.sin(phase), torch.cos(phase)), dim=-1)  # (..., n, F, 2)
    s = s.reshape(*x.shape[:-1], d)
    return l2_normalize(s, axis=-1)


class _TruncatedExp(torch.autograd.Function):
    """Truncated kernel on cosine similarities with a straight-through backward.

    Forward returns 0 below ``tau``; backward always uses the derivative of
    the untruncated exponential.
    """

    @staticmethod
    def forward(ctx, dots, epsilon, tau):
        # rounding can push a unit-vector dot product slightly past 1
        full = torch.exp(-2.0 * epsilon * (1.0 - dots.clamp(max=1.0)))
        ctx.save_for_backward(full)
        ctx.epsilon = epsilon
        if tau <= -1.0:
            return full
        return torch.where(dots >= tau, full, torch.zeros_like(full))

    @staticmethod
    def backward(ctx, grad_out):
        (full,) = ctx.saved_tensors
        return grad_out * (2.0 * ctx.epsilon) * full, None, None


def kernel_from_dots(dots: torch.Tensor, cfg: KernelConfig) -> torch.Tensor:
    return _TruncatedExp.apply(dots, float(cfg.epsilon), float(cfg.tau))


def kernel(p: torch.Tensor, s: torch.Tensor, cfg: KernelConfig) -> torch.Tensor:
    """Kernel value for a single pair of unit vectors (0-d tensor)."""
    return kernel_from_dots((p * s).sum(-1), cfg)


def kernel_batch(P: torch.Tensor, S: torch.Tensor, cfg: KernelConfig) -> torch.Tensor:
    """Local weights ``W[..., m, a] = Z(P[m], S[..., a])``.

    ``P`` is ``(M, d)`` or batched ``(..., M, d)``; ``S`` is ``(..., A, d)``.
    """
    dots = P @ S.transpose(-1, -2)
    return kernel_from_dots(dots, cfg)


class ModuleEmbeddings(nn.Module):
    """Learnable bank of ``M`` unit vectors in ``R^d``, one per recurrent module.

    ``init="positions"`` places each row at the embedding of a uniformly drawn
    point of ``[0, domain]^2`` so every module starts with a non-empty enclave;
    ``init="sphere"`` draws rows uniformly on the sphere, which at small ``d``
    and ``tau = 0.6`` typically leaves every kernel value at exactly zero.
    """

    INITS = ("positions", "sphere")

    def __init__(self, n_modules: int, d: int, seed: int = 0, init: str = "positions", domain: float = 48.0):
        super().__init__()
        if n_modules < 1 or d < 1:
            raise ConfigError("module count and embedding size must be positive")
        if init not in self.INITS:
            raise ConfigError(f"unknown embedding init {init!r}; expected one of {self.INITS}")
        gen = torch.Generator().manual_seed(seed)
        if init == "positions":
            points = torch.rand(n_modules, 2, generator=gen, dtype=torch.float64) * domain
            rows = embed_position(points, d)
        else:
            rows = torch.randn(n_modules, d, generator=gen, dtype=torch.float64)
        rows = rows / rows.norm(dim=1, keepdim=True)
        self.P = nn.Parameter(rows.to(torch.get_default_dtype()))

    @property
    def n_modules(self) -> int:
        return self.P.shape[0]

    def forward(self) -> torch.Tensor:
        return self.P

    def renormalize(self) -> None:
        renormalize_embeddings(self)


@torch.no_grad()
def renormalize_embeddings(bank: ModuleEmbeddings | torch.Tensor) -> None:
    """Project every row back onto the unit sphere, in place."""
    P = bank.P if isinstance(bank, ModuleEmbeddings) else bank
    norms = P.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateInputError("module embedding row has zero norm")
    P.div_(norms)
