"""Recurrent cores: the spatially structured module bank and the GQN-style baselines.

All models share one interface used by training and evaluation:

* ``init_state(batch)`` returns the initial state,
* ``step(state, centers, crops)`` consumes one time step of observations
  (``centers`` is ``(B, A, 2)`` pixel positions, ``crops`` is ``(B, A, 11, 11)``),
* ``query(state, centers)`` returns ``(B, Q, 121)`` logits for crops at
  ``centers`` and never mutates ``state``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .attention import AttentionParams, GateParams, input_attention, inter_cell_attention, output_attention
from .codec import CROP, CropDecoder, CropEncoder
from .errors import ConfigError, DimensionError, InputError
from .geometry import KernelConfig, ModuleEmbeddings, embed_position, frequency_scales, kernel_batch

FRAME = 48


@dataclass
class S2RMConfig:
    """Model hyperparameters. Defaults are the desk-scale setting; see :meth:`paper_scale`."""

    n_modules: int = 4
    hidden: int = 32
    embed_dim: int = 16
    epsilon: float = 1.0
    tau: float = 0.6
    input_heads: int = 2
    input_key: int = 16
    input_value: int = 32
    ic_heads: int = 2
    ic_key: int = 16
    ic_value: int = 32
    enc_width: int = 64
    codec_hidden: int = 256
    gate_hidden: int = 32
    decoder_uses_query: bool = True
    scale_scores: bool = False
    mask_before_softmax: bool = False
    embed_init: str = "positions"
    domain: float = FRAME
    seed: int = 0

    def __post_init__(self):
        if self.embed_init not in ModuleEmbeddings.INITS:
            raise ConfigError(f"embed_init must be one of {ModuleEmbeddings.INITS}")
        for name in ("n_modules", "hidden", "embed_dim", "input_heads", "input_key", "input_value",
                     "ic_heads", "ic_key", "ic_value", "enc_width", "codec_hidden", "gate_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        frequency_scales(2, self.embed_dim)
        self.kernel  # validates epsilon / tau

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.epsilon, self.tau)

    @classmethod
    def paper_scale(cls, **overrides) -> "S2RMConfig":
        base = dict(n_modules=10, hidden=128, embed_dim=16, epsilon=1.0, tau=0.6,
                    input_heads=2, input_key=16, input_value=128,
                    ic_heads=4, ic_key=16, ic_value=128,
                    enc_width=128, codec_hidden=256, gate_hidden=64)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class S2RMState:
    h: torch.Tensor
    c: torch.Tensor | None = None


@dataclass
class BaselineState:
    h: torch.Tensor
    c: torch.Tensor | None = None


@dataclass
class GRUParams:
    """Gate-stacked GRU weights (update, reset, candidate)."""

    W: torch.Tensor  # ([M,] in, 3H)
    U: torch.Tensor  # ([M,] H, 3H)
    b: torch.Tensor  # ([M,] 3H)


def gru_step(u: torch.Tensor, h_prev: torch.Tensor, params: GRUParams) -> torch.Tensor:
    """One GRU update. With 3-d weights each module ``m`` has its own parameters.

    ``z = sig(W_z u + U_z h + b_z)``, ``r = sig(W_r u + U_r h + b_r)``,
    ``c = tanh(W_h u + U_h (r * h) + b_h)``, ``h' = (1 - z) h + z c``.
    """
    W, U, b = params.W, params.U, params.b
    H = h_prev.shape[-1]
    if W.shape[-2] != u.shape[-1] or U.shape[-2] != H or W.shape[-1] != 3 * H:
        raise DimensionError(
            f"GRU weights {tuple(W.shape)}/{tuple(U.shape)} do not fit input {u.shape[-1]}, state {H}"
        )
    if W.dim() == 3:
        gx = torch.einsum("...mi,mig->...mg", u, W) + b
        U_zr, U_h = U[..., : 2 * H], U[..., 2 * H:]
        gh = torch.einsum("...mj,mjg->...mg", h_prev, U_zr)
    else:
        gx = u @ W + b
        U_zr, U_h = U[:, : 2 * H], U[:, 2 * H:]
        gh = h_prev @ U_zr
    z = torch.sigmoid(gx[..., :H] + gh[..., :H])
    r = torch.sigmoid(gx[..., H:2 * H] + gh[..., H:])
    rh = r * h_prev
    if W.dim() == 3:
        cand = torch.tanh(gx[..., 2 * H:] + torch.einsum("...mj,mjg->...mg", rh, U_h))
    else:
        cand = torch.tanh(gx[..., 2 * H:] + rh @ U_h)
    return (1.0 - z) * h_prev + z * cand


class GRUBank(nn.Module):
    """``M`` independent GRU cells evaluated in parallel."""

    def __init__(self, n_modules: int | None, input_size: int, hidden: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        lead = () if n_modules is None else (n_modules,)
        bound = 1.0 / math.sqrt(hidden)
        dtype = torch.get_default_dtype()

        def init(*shape):
            w = torch.empty(*shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen)
            return nn.Parameter(w.to(dtype))

        self.W = init(*lead, input_size, 3 * hidden)
        self.U = init(*lead, hidden, 3 * hidden)
        self.b = init(*lead, 3 * hidden)

    @property
    def params(self) -> GRUParams:
        return GRUParams(self.W, self.U, self.b)

    def forward(self, u, h_prev):
        return gru_step(u, h_prev, self.params)


def check_centers(centers: torch.Tensor, domain: float = FRAME) -> None:
    if centers.shape[-1] != 2:
        raise DimensionError(f"positions must have 2 coordinates, got {centers.shape[-1]}")
    if centers.numel() and (bool((centers < 0).any()) or bool((centers > domain).any())):
        raise InputError(f"position outside the spatial domain [0, {domain}]^2")


def check_observations(centers: torch.Tensor, crops: torch.Tensor, domain: float = FRAME) -> None:
    check_centers(centers, domain)
    if tuple(crops.shape[-2:]) != (CROP, CROP) or crops.shape[:-2] != centers.shape[:-1]:
        raise DimensionError(
            f"crops {tuple(crops.shape)} do not match positions {tuple(centers.shape)}"
        )


class S2RM(nn.Module):
    """Spatially structured recurrent modules with GRU cores (S2GRU)."""

    uses_future_observations = False

    def __init__(self, config: S2RMConfig | None = None):
        super().__init__()
        cfg = config or S2RMConfig()
        self.config = cfg
        s = cfg.seed * 100
        M, H, E, d = cfg.n_modules, cfg.hidden, cfg.enc_width, cfg.embed_dim
        self.encoder = CropEncoder(E, cfg.codec_hidden, seed=s + 1)
        self.embeddings = ModuleEmbeddings(M, d, seed=s + 2, init=cfg.embed_init, domain=cfg.domain)
        self.input_attn = AttentionParams(E, H, E, E, cfg.input_heads, cfg.input_key, cfg.input_value, seed=s + 3)
        self.input_gate = GateParams(E, cfg.gate_hidden, seed=s + 4)
        self.ic_attn = AttentionParams(H, H, H, H, cfg.ic_heads, cfg.ic_key, cfg.ic_value, seed=s + 5)
        self.ic_gate = GateParams(H, cfg.gate_hidden, seed=s + 6)
        self.cells = GRUBank(M, E, H, seed=s + 7)
        self.decoder = CropDecoder(H + (d if cfg.decoder_uses_query else 0), cfg.codec_hidden, seed=s + 8)

    def init_state(self, batch: int = 1) -> S2RMState:
        cfg = self.config
        return S2RMState(torch.zeros(batch, cfg.n_modules, cfg.hidden, dtype=self.embeddings.P.dtype))

    def embed(self, centers: torch.Tensor) -> torch.Tensor:
        return embed_position(centers.to(self.embeddings.P.dtype), self.config.embed_dim)

    def step(self, state: S2RMState, centers, crops) -> S2RMState:
        cfg = self.config
        dtype = self.embeddings.P.dtype
        centers = torch.as_tensor(centers, dtype=dtype)
        crops = torch.as_tensor(crops, dtype=dtype)
        check_observations(centers, crops, cfg.domain)
        P = self.embeddings.P
        e = self.encoder(crops)
        local_in = kernel_batch(P, self.embed(centers), cfg.kernel)
        u = input_attention(e, state.h, local_in, self.input_attn, self.input_gate,
                            scale_scores=cfg.scale_scores, mask_before_softmax=cfg.mask_before_softmax)
        local_ic = kernel_batch(P, P, cfg.kernel)
        h_bar = inter_cell_attention(state.h, local_ic, self.ic_attn, self.ic_gate,
                                     scale_scores=cfg.scale_scores, mask_before_softmax=cfg.mask_before_softmax)
        return S2RMState(self.cells(u, h_bar), state.c)

    def readout(self, state: S2RMState, centers) -> torch.Tensor:
        """Kernel-weighted module read-out ``d_q`` for each query position."""
        centers = torch.as_tensor(centers, dtype=self.embeddings.P.dtype)
        check_centers(centers, self.config.domain)
        return output_attention(state.h, self.embed(centers), self.embeddings.P, self.config.kernel)

    def query(self, state: S2RMState, centers) -> torch.Tensor:
        centers = torch.as_tensor(centers, dtype=self.embeddings.P.dtype)
        check_centers(centers, self.config.domain)
        s_q = self.embed(centers)
        d_q = output_attention(state.h, s_q, self.embeddings.P, self.config.kernel)
        if self.config.decoder_uses_query:
            d_q = torch.cat((d_q, s_q), dim=-1)
        return self.decoder(d_q)

    def after_update(self) -> None:
        """Hook run after every optimizer step: keep module embeddings on the sphere."""
        self.embeddings.renormalize()


@dataclass
class BaselineConfig:
    core: str = "gru"  # gru | lstm | tto
    hidden: int = 128
    embed_dim: int = 16
    enc_width: int = 64
    codec_hidden: int = 256
    tto_hidden: int = 512
    domain: float = FRAME
    seed: int = 0

    def __post_init__(self):
        if self.core not in ("gru", "lstm", "tto"):
            raise ConfigError(f"unknown baseline core {self.core!r}")
        frequency_scales(2, self.embed_dim)

    @classmethod
    def paper_scale(cls, core="lstm", **overrides) -> "BaselineConfig":
        base = dict(core=core, hidden=512, enc_width=128, codec_hidden=256, tto_hidden=512)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def baseline_aggregate(encodings: torch.Tensor) -> torch.Tensor:
    """Additive set aggregation ``r = sum_a e_a`` over axis -2; empty set gives zeros."""
    return encodings.sum(dim=-2)


class QueryBaseline(nn.Module):
    """Additive-aggregation encoder, a single recurrent core and a query decoder.

    ``core='tto'`` is the time-travelling oracle: a stateless two-layer MLP fed
    with the aggregate of the *next* step's observations
    (``uses_future_observations`` tells the training and evaluation loops to
    pass those).
    """

    def __init__(self, config: BaselineConfig | None = None):
        super().__init__()
        cfg = config or BaselineConfig()
        self.config = cfg
        s = cfg.seed * 100 + 50
        self.encoder = CropEncoder(cfg.enc_width, cfg.codec_hidden, position_dim=cfg.embed_dim, seed=s + 1)
        gen = torch.Generator().manual_seed(s + 2)
        if cfg.core == "gru":
            self.core = GRUBank(None, cfg.enc_width, cfg.hidden, seed=s + 2)
        elif cfg.core == "lstm":
            self.core = nn.LSTMCell(cfg.enc_width, cfg.hidden)
            bound = 1.0 / math.sqrt(cfg.hidden)
            with torch.no_grad():
                for p in self.core.parameters():
                    p.uniform_(-bound, bound, generator=gen)
        else:
            self.core = nn.Sequential(nn.Linear(cfg.enc_width, cfg.tto_hidden), nn.ReLU(),
                                      nn.Linear(cfg.tto_hidden, cfg.hidden))
            with torch.no_grad():
                for layer in (self.core[0], self.core[2]):
                    bound = 1.0 / math.sqrt(layer.in_features)
                    layer.weight.uniform_(-bound, bound, generator=gen)
                    layer.bias.uniform_(-bound, bound, generator=gen)
        self.decoder = CropDecoder(cfg.hidden + cfg.embed_dim, cfg.codec_hidden, seed=s + 3)

    @property
    def uses_future_observations(self) -> bool:
        return self.config.core == "tto"

    @property
    def _dtype(self):
        return self.decoder.fc1.weight.dtype

    def init_state(self, batch: int = 1) -> BaselineState:
        h = torch.zeros(batch, self.config.hidden, dtype=self._dtype)
        c = torch.zeros_like(h) if self.config.core == "lstm" else None
        return BaselineState(h, c)

    def embed(self, centers):
        return embed_position(centers.to(self._dtype), self.config.embed_dim)

    def aggregate(self, centers, crops) -> torch.Tensor:
        centers = torch.as_tensor(centers, dtype=self._dtype)
        crops = torch.as_tensor(crops, dtype=self._dtype)
        check_observations(centers, crops, self.config.domain)
        return baseline_aggregate(self.encoder(crops, self.embed(centers)))

    def step(self, state: BaselineState, centers, crops) -> BaselineState:
        r = self.aggregate(centers, crops)
        return self.step_aggregate(state, r)

    def step_aggregate(self, state: BaselineState, r: torch.Tensor) -> BaselineState:
        if r.shape[-1] != self.config.enc_width:
            raise DimensionError(f"aggregate width {r.shape[-1]} != {self.config.enc_width}")
        core = self.config.core
        if core == "gru":
            return BaselineState(self.core(r, state.h))
        if core == "lstm":
            h, c = self.core(r, (state.h, state.c))
            return BaselineState(h, c)
        return BaselineState(self.core(r))

    def tto_step(self, r_next: torch.Tensor) -> torch.Tensor:
        if self.config.core != "tto":
            raise ConfigError("tto_step requires core='tto'")
        return self.core(r_next)

    def query(self, state: BaselineState, centers) -> torch.Tensor:
        centers = torch.as_tensor(centers, dtype=self._dtype)
        check_centers(centers, self.config.domain)
        s_q = self.embed(centers)
        h = state.h.unsqueeze(-2).expand(*s_q.shape[:-1], state.h.shape[-1])
        return self.decoder(torch.cat((h, s_q), dim=-1))

    def after_update(self) -> None:
        pass


MODEL_KINDS = ("s2gru", "baseline-gru", "baseline-lstm", "tto")


def build_model(kind: str, **params) -> nn.Module:
    """Construct a model by CLI kind name; ``params`` are config fields."""
    if kind == "s2gru":
        return S2RM(S2RMConfig(**params))
    params.pop("core", None)
    core = {"baseline-gru": "gru", "baseline-lstm": "lstm", "tto": "tto"}.get(kind)
    if core is None:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return QueryBaseline(BaselineConfig(core=core, **params))


def model_kind(model: nn.Module) -> str:
    if isinstance(model, S2RM):
        return "s2gru"
    return {"gru": "baseline-gru", "lstm": "baseline-lstm", "tto": "tto"}[model.config.core]
