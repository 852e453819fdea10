"""Finite-difference gradient suite over every primitive and a full model step.

The suite runs in float64. Compositions that include the kernel use
``tau = -1`` so the forward map is smooth: inside the truncated region the
backward pass is straight-through by design and deliberately differs from the
(zero) finite-difference slope.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import torch
from torch.func import functional_call
from torch.nn.utils import parameters_to_vector

from . import tensorcore as tc
from .attention import AttentionParams, GateParams, input_attention, inter_cell_attention, output_attention
from .geometry import KernelConfig, embed_position, kernel_batch
from .recurrent import GRUParams, S2RM, S2RMConfig, gru_step
from .trainer import bce_loss

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4


@dataclass
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _rand(gen, *shape, scale=1.0):
    return torch.randn(*shape, generator=gen, dtype=torch.float64) * scale


def _unit(gen, *shape):
    x = _rand(gen, *shape)
    return x / x.norm(dim=-1, keepdim=True)


def primitive_checks(seed: int = 0):
    """``(name, f, x)`` triples; each ``f`` maps a float64 tensor to a scalar."""
    g = torch.Generator().manual_seed(seed)
    a, b = _rand(g, 3, 4), _rand(g, 4, 2)
    w = torch.softmax(_rand(g, 5), 0)
    v, bias = _rand(g, 4, 3), _rand(g, 3)
    cfg = KernelConfig(1.0, -1.0)
    p = _unit(g, 4)
    return [
        ("contract", lambda x: tc.contract("ij,jk->ik", x, b).pow(2).sum(), a),
        ("exp", lambda x: tc.elementwise("exp", x).sum(), _rand(g, 6)),
        ("tanh", lambda x: tc.elementwise("tanh", x).sum(), _rand(g, 6)),
        ("sigmoid", lambda x: tc.elementwise("sigmoid", x).sum(), _rand(g, 6)),
        ("add", lambda x: tc.elementwise("add", x, a).pow(2).sum(), _rand(g, 4)),
        ("mul", lambda x: tc.elementwise("mul", x, a).sum(), _rand(g, 3, 4)),
        ("sub", lambda x: tc.elementwise("sub", a, x).pow(3).sum(), _rand(g, 4)),
        ("scale", lambda x: tc.elementwise("scale", x, factor=-2.5).pow(2).sum(), _rand(g, 5)),
        ("softmax", lambda x: (tc.softmax(x, axis=-1) * w).sum(), _rand(g, 5)),
        ("reduce_sum", lambda x: tc.reduce_sum(x, axis=0).pow(2).sum(), _rand(g, 3, 4)),
        ("concat", lambda x: (tc.concat([x, a[0]], axis=0) ** 2).sum(), _rand(g, 4)),
        ("affine", lambda x: tc.affine(x, v, bias).tanh().sum(), _rand(g, 2, 4)),
        ("l2_normalize", lambda x: (tc.l2_normalize(x) * a[0]).sum(), _rand(g, 4)),
        ("kernel", lambda x: kernel_batch(p[None], tc.l2_normalize(x)[None], cfg).sum(), _rand(g, 4)),
        ("embed_position", lambda x: (embed_position(x, 8) * _unit(torch.Generator().manual_seed(1), 8)).sum(),
         torch.tensor([3.0, 7.5], dtype=torch.float64)),
    ]


class _Bundle(torch.nn.Module):
    """Runs ``fn`` with the parameters of ``modules`` taken from a flat vector.

    ``transforms`` maps parameter-name suffixes to maps applied to the slice
    before use.
    """

    def __init__(self, fn, *modules, transforms=None):
        super().__init__()
        self.parts = torch.nn.ModuleList(modules)
        self.fn = fn
        self.transforms = transforms or {}
        self.names = [n for n, _ in self.named_parameters()]
        self.shapes = [p.shape for p in self.parameters()]

    def forward(self):
        return self.fn()

    def as_function(self):
        def f(x):
            chunks = torch.split(x, [s.numel() for s in self.shapes])
            params = {n: c.reshape(s) for n, c, s in zip(self.names, chunks, self.shapes)}
            for n in params:
                for suffix, fn in self.transforms.items():
                    if n.endswith(suffix):
                        params[n] = fn(params[n])
            return functional_call(self, params, ())
        return f

    def vector(self):
        return parameters_to_vector(self.parameters()).detach()


def _attention_modules(E=3, H=4):
    attn_in = AttentionParams(E, H, E, E, heads=2, key_size=3, value_size=2, seed=1)
    gate_in = GateParams(E, hidden=5, seed=2)
    attn_ic = AttentionParams(H, H, H, H, heads=2, key_size=3, value_size=2, seed=3)
    gate_ic = GateParams(H, hidden=5, seed=4)
    return attn_in, gate_in, attn_ic, gate_ic


def composite_checks(seed: int = 0):
    """Gradient checks of the attention/GRU compositions and one full model step."""
    g = torch.Generator().manual_seed(seed)
    checks = []
    with tc.float64_mode():
        E, H, M, A = 3, 4, 2, 3
        attn_in, gate_in, attn_ic, gate_ic = _attention_modules(E, H)
        e, h = _rand(g, A, E), _rand(g, M, H)
        local_in = torch.rand(M, A, generator=g, dtype=torch.float64)
        local_ic = torch.rand(M, M, generator=g, dtype=torch.float64)
        local_ic.fill_diagonal_(1.0)

        def attention_pair(x):
            hh = x.reshape(M, H)
            u = input_attention(e, hh, local_in, attn_in, gate_in)
            hb = inter_cell_attention(hh, local_ic, attn_ic, gate_ic)
            return (u.sin().sum() + hb.pow(2).sum())

        checks.append(("input+inter_cell attention (wrt h)", attention_pair, h.reshape(-1)))

        def attention_params():
            u = input_attention(e, h, local_in, attn_in, gate_in)
            hb = inter_cell_attention(h, local_ic, attn_ic, gate_ic)
            return u.sin().sum() + hb.pow(2).sum()

        bundle = _Bundle(attention_params, attn_in, gate_in, attn_ic, gate_ic)
        checks.append(("input+inter_cell attention (wrt params)", bundle.as_function(), bundle.vector()))

        P, sq = _unit(g, M, 8), _unit(g, 2, 8)
        cfg = KernelConfig(1.0, -1.0)
        checks.append(("output_attention", lambda x: output_attention(x.reshape(M, H), sq, P, cfg).sin().sum(),
                       h.reshape(-1)))

        W, U, bb, u0 = _rand(g, M, E, 3 * H, scale=0.5), _rand(g, M, H, 3 * H, scale=0.5), _rand(g, M, 3 * H), _rand(g, M, E)
        n_w, n_u = W.numel(), U.numel()

        def gru(x):
            Wx = x[:n_w].reshape(W.shape)
            Ux = x[n_w:n_w + n_u].reshape(U.shape)
            bx = x[n_w + n_u:].reshape(bb.shape)
            return gru_step(u0, h, GRUParams(Wx, Ux, bx)).pow(2).sum()

        checks.append(("gru_step", gru, torch.cat((W.reshape(-1), U.reshape(-1), bb.reshape(-1)))))

        model, inputs = tiny_model(seed)
        # module embeddings live on the unit sphere; off it the self-kernel
        # P_i . P_i crosses the clamp at 1 and finite differences turn one-sided
        bundle = _Bundle(_model_loss(model, *inputs), model, transforms={"embeddings.P": tc.l2_normalize})
        checks.append(("s2rm_step+s2rm_query+bce (all params)", bundle.as_function(), bundle.vector()))
    return checks


def tiny_model(seed: int = 0):
    """Reduced-width S2GRU (M=2, H=4, A=3) in float64 with smooth kernel and a random batch."""
    with tc.float64_mode():
        cfg = S2RMConfig(n_modules=2, hidden=4, embed_dim=4, epsilon=1.0, tau=-1.0,
                         input_heads=2, input_key=2, input_value=2, ic_heads=2, ic_key=2, ic_value=2,
                         enc_width=3, codec_hidden=4, gate_hidden=3, seed=seed)
        model = S2RM(cfg)
    g = torch.Generator().manual_seed(seed + 11)
    centers = torch.randint(5, 43, (2, 2, 3, 2), generator=g).to(torch.float64)
    crops = (torch.rand(2, 2, 3, 11, 11, generator=g, dtype=torch.float64) < 0.3).to(torch.float64)
    return model, (centers, crops)


def _model_loss(model, centers, crops):
    def f():
        state = model.init_state(centers.shape[0])
        state = model.step(state, centers[:, 0], crops[:, 0])
        state = model.step(state, centers[:, 0], crops[:, 0])
        logits = model.query(state, centers[:, 1])
        return bce_loss(logits, crops[:, 1].flatten(-2))
    return f


def gradient_suite(seed: int = 0, step: float = 1e-5):
    """Run every check; returns a list of :class:`GradResult`."""
    results = []
    for name, f, x in primitive_checks(seed):
        results.append(GradResult(name, tc.grad_check(f, x, step), PRIMITIVE_TOL))
    for name, f, x in composite_checks(seed):
        results.append(GradResult(name, tc.grad_check(f, x, step), COMPOSITE_TOL))
    return results


def run(seed: int = 0, echo=print) -> bool:
    start = time.perf_counter()
    ok = True
    for r in gradient_suite(seed):
        ok &= r.passed
        echo(f"{'PASS' if r.passed else 'FAIL'}  {r.name:45s} rel.err {r.error:.3e} (tol {r.tol:g})")
    echo(f"gradient suite {'passed' if ok else 'FAILED'} in {time.perf_counter() - start:.1f}s")
    return ok
