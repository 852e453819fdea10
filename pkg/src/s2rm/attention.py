"""Kernel-gated multi-head attention: input, inter-cell and output attention.

Shapes use a leading batch of arbitrary rank (written ``...``):
observations ``e`` are ``(..., A, E)``, module states ``h`` are ``(..., M, H)``,
local weights are ``(..., M, A)`` or ``(M, M)``.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import DimensionError
from .geometry import KernelConfig, kernel_batch
from .tensorcore import contract


class AttentionParams(nn.Module):
    """Query/key/value projections plus the head-merging output projection.

    ``query`` has shape ``(query_in, heads, key_size)``, ``key`` has shape
    ``(key_in, heads, key_size)``, ``value`` has ``(value_in, heads, value_size)``
    and ``out`` maps the flattened ``heads * value_size`` vector to ``out_dim``.
    """

    def __init__(self, query_in, key_in, value_in, out_dim, heads, key_size, value_size, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        dtype = torch.get_default_dtype()

        def init(fan_in, *shape):
            w = torch.randn(*shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
            return nn.Parameter(w.to(dtype))

        self.query = init(query_in, query_in, heads, key_size)
        self.key = init(key_in, key_in, heads, key_size)
        self.value = init(value_in, value_in, heads, value_size)
        self.out = init(heads * value_size, heads * value_size, out_dim)

    @property
    def heads(self) -> int:
        return self.query.shape[1]


class GateParams(nn.Module):
    """Two-layer perceptron ``concat(candidate, bypass) -> (0, 1)``, one scalar per module."""

    def __init__(self, width: int, hidden: int = 64, zero: bool = False, seed: int = 0):
        super().__init__()
        self.width = width
        self.hidden = nn.Linear(2 * width, hidden)
        self.output = nn.Linear(hidden, 1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in (self.hidden, self.output):
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=gen))
                layer.bias.zero_()
            if zero:
                for p in self.parameters():
                    p.zero_()

    def forward(self, candidate: torch.Tensor, bypass: torch.Tensor) -> torch.Tensor:
        z = torch.relu(self.hidden(torch.cat((candidate, bypass), dim=-1)))
        return torch.sigmoid(self.output(z))


def gate(candidate: torch.Tensor, bypass: torch.Tensor, params: GateParams):
    """Return ``(g, g * bypass + (1 - g) * candidate)`` with ``g`` of shape ``(..., 1)``."""
    if candidate.shape[-1] != bypass.shape[-1]:
        raise DimensionError(
            f"candidate width {candidate.shape[-1]} differs from bypass width {bypass.shape[-1]}"
        )
    if candidate.shape[-1] != params.width:
        raise DimensionError(f"gate expects width {params.width}, got {candidate.shape[-1]}")
    g = params(candidate, bypass)
    return g, g * bypass + (1.0 - g) * candidate


def _attend(queries, keys, values, local, params, scale_scores, mask_before_softmax):
    """Shared core. ``queries`` (..., M, Iq), ``keys``/``values`` (..., S, Ik/Iv),
    ``local`` (..., M, S). Returns (candidate (..., M, out), bypass-free weights)."""
    Q = torch.einsum("...mi,ikd->...mkd", queries, params.query)
    K = torch.einsum("...si,ikd->...skd", keys, params.key)
    V = torch.einsum("...si,ikv->...skv", values, params.value)
    scores = torch.einsum("...mkd,...skd->...msk", Q, K)
    if scale_scores:
        scores = scores / math.sqrt(Q.shape[-1])
    local = local.unsqueeze(-1)
    if mask_before_softmax:
        scores = scores.masked_fill(local == 0, float("-inf"))
        w_bar = torch.nan_to_num(torch.softmax(scores, dim=-2), nan=0.0)
    else:
        w_bar = torch.softmax(scores, dim=-2)
    w = local * w_bar
    mixed = torch.einsum("...msk,...skv->...mkv", w, V)
    mixed = mixed.reshape(*mixed.shape[:-2], -1) @ params.out
    return mixed, w_bar, w


def input_attention(
    e: torch.Tensor,
    h: torch.Tensor,
    local: torch.Tensor,
    params: AttentionParams,
    gate_params: GateParams,
    *,
    scale_scores: bool = False,
    mask_before_softmax: bool = False,
    return_weights: bool = False,
):
    """Route observation encodings ``e`` (..., A, E) to module inputs (..., M, E).

    Queries come from observations and keys from module states; the softmax
    runs over observations and is then multiplied by the local weights. With
    no observations (``A = 0``) both the attention output and the bypass are
    zero and only the gate runs.
    """
    A, E = e.shape[-2], e.shape[-1]
    M = h.shape[-2]
    if local.shape[-2:] != (M, A):
        raise DimensionError(f"local weights {tuple(local.shape)} do not match (M={M}, A={A})")
    if params.query.shape[0] != E or params.key.shape[0] != h.shape[-1]:
        raise DimensionError("attention projections do not match encoding/state widths")
    # Q from observations, K from states: scores are indexed (m, a, k) after the swap below.
    Q = torch.einsum("...ai,ikd->...akd", e, params.query)
    K = torch.einsum("...mj,jkd->...mkd", h, params.key)
    V = torch.einsum("...ai,ikv->...akv", e, params.value)
    scores = torch.einsum("...akd,...mkd->...mak", Q, K)
    if scale_scores:
        scores = scores / math.sqrt(Q.shape[-1])
    w_local = local.unsqueeze(-1)
    if mask_before_softmax:
        scores = scores.masked_fill(w_local == 0, float("-inf"))
        w_bar = torch.nan_to_num(torch.softmax(scores, dim=-2), nan=0.0)
    else:
        w_bar = torch.softmax(scores, dim=-2)
    w = w_local * w_bar
    mixed = torch.einsum("...mak,...akv->...mkv", w, V)
    candidate = mixed.reshape(*mixed.shape[:-2], -1) @ params.out
    bypass = contract_local(local, e)
    _, u = gate(candidate, bypass, gate_params)
    if return_weights:
        return u, w_bar, w
    return u


def contract_local(local: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Kernel-weighted sum ``sum_a local[..., m, a] x[..., a, :]``."""
    if local.dim() == 2 and x.dim() == 2:
        return contract("ma,ai->mi", local, x)
    return local @ x


def inter_cell_attention(
    h: torch.Tensor,
    local: torch.Tensor,
    params: AttentionParams,
    gate_params: GateParams,
    *,
    scale_scores: bool = False,
    mask_before_softmax: bool = False,
    return_weights: bool = False,
):
    """Aggregate module states ``h`` (..., M, H) through module-to-module attention.

    ``local`` is the ``(M, M)`` kernel matrix of the module embeddings.
    """
    M = h.shape[-2]
    if local.shape[-2:] != (M, M):
        raise DimensionError(f"module-pair weights {tuple(local.shape)} do not match M={M}")
    candidate, w_bar, w = _attend(h, h, h, local, params, scale_scores, mask_before_softmax)
    bypass = contract_local(local, h)
    _, h_bar = gate(candidate, bypass, gate_params)
    if return_weights:
        return h_bar, w_bar, w
    return h_bar


def output_attention(h: torch.Tensor, s_q: torch.Tensor, P: torch.Tensor, cfg: KernelConfig) -> torch.Tensor:
    """Read-out ``d_q = sum_m Z(s_q, p_m) h_m`` for queries ``s_q`` (..., Q, d).

    Returns ``(..., Q, H)``. A single query vector of shape ``(d,)`` gives ``(H,)``.
    """
    single = s_q.dim() == 1
    if single:
        s_q = s_q.unsqueeze(0)
    weights = kernel_batch(s_q, P, cfg)  # (..., Q, M)
    d_q = weights @ h
    return d_q[..., 0, :] if single and h.dim() == 2 else d_q
