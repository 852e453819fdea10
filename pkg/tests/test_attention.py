import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from s2rm.attention import (AttentionParams, GateParams, gate, input_attention, inter_cell_attention,
                            output_attention)
from s2rm.errors import DimensionError
from s2rm.geometry import KernelConfig, embed_position, kernel_batch
from s2rm.tensorcore import float64_mode


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def modules(E=3, H=4, seed=0, heads=2, key=3, value=2):
    with float64_mode():
        attn = AttentionParams(E, H, E, E, heads, key, value, seed=seed)
        g = GateParams(E, hidden=5, seed=seed + 1)
    return attn, g


def dense_reference(e, h, attn, gate_params):
    """Unmasked multi-head attention written with numpy loops (all-ones local weights)."""
    e, h = e.numpy(), h.numpy()
    Wq, Wk, Wv, Wo = (p.detach().numpy() for p in (attn.query, attn.key, attn.value, attn.out))
    A, M, heads = e.shape[0], h.shape[0], Wq.shape[1]
    mixed = np.zeros((M, heads, Wv.shape[2]))
    for k in range(heads):
        Q = e @ Wq[:, k]
        K = h @ Wk[:, k]
        V = e @ Wv[:, k]
        for m in range(M):
            s = np.array([Q[a] @ K[m] for a in range(A)])
            w = np.exp(s - s.max())
            w /= w.sum()
            mixed[m, k] = w @ V
    cand = mixed.reshape(M, -1) @ Wo
    bypass = np.repeat(e.sum(0, keepdims=True), M, 0)
    g = gate_params(t64(cand), t64(bypass)).detach().numpy()
    return g * bypass + (1 - g) * cand


def test_hand_example():
    with float64_mode():
        attn = AttentionParams(1, 1, 1, 1, heads=1, key_size=1, value_size=1)
        g = GateParams(1, hidden=2, zero=True)
    with torch.no_grad():
        attn.query.fill_(1.0)
        attn.key.fill_(1.0)
        attn.value.fill_(2.0)
        attn.out.fill_(1.0)
    u = input_attention(t64([[1.0]]), t64([[0.3]]), t64([[1.0]]), attn, g)
    assert u.item() == pytest.approx(1.5, abs=1e-15)


def test_dense_equivalence_with_trivial_kernel():
    gen = torch.Generator().manual_seed(5)
    attn, g = modules(seed=2)
    e = torch.randn(6, 3, generator=gen, dtype=torch.float64)
    h = torch.randn(4, 4, generator=gen, dtype=torch.float64)
    P = embed_position(torch.rand(4, 2, generator=gen, dtype=torch.float64) * 48, 16)
    S = embed_position(torch.rand(6, 2, generator=gen, dtype=torch.float64) * 48, 16)
    W = kernel_batch(P, S, KernelConfig(0.0, -1.0))
    assert torch.all(W == 1)
    u = input_attention(e, h, W, attn, g).detach().numpy()
    assert np.abs(u - dense_reference(e, h, attn, g)).max() < 1e-10


def test_zero_kernel_observation_has_no_value_mass():
    gen = torch.Generator().manual_seed(1)
    attn, g = modules()
    e = torch.randn(5, 3, generator=gen, dtype=torch.float64)
    h = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    W = torch.rand(2, 5, generator=gen, dtype=torch.float64)
    W[0, 3] = 0.0
    u, _, w = input_attention(e, h, W, attn, g, return_weights=True)
    assert torch.all(w[0, 3] == 0)
    # changing the masked observation does not move module 0
    e2 = e.clone()
    e2[3] = 100.0 * torch.randn(3, generator=gen, dtype=torch.float64)
    u_base = input_attention(e, h, W, attn, g)
    u_moved = input_attention(e2, h, W, attn, g)
    assert not torch.allclose(u_base[0], u_moved[0])  # softmax normalisation still sees it
    _, _, w2 = input_attention(e2, h, W, attn, g, return_weights=True)
    assert torch.all(w2[0, 3] == 0)


def test_masked_softmax_variant_isolates_module():
    gen = torch.Generator().manual_seed(1)
    attn, g = modules()
    e = torch.randn(5, 3, generator=gen, dtype=torch.float64)
    h = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    W = torch.rand(2, 5, generator=gen, dtype=torch.float64)
    W[0, 3] = 0.0
    e2 = e.clone()
    e2[3] += 10.0
    a = input_attention(e, h, W, attn, g, mask_before_softmax=True)
    b = input_attention(e2, h, W, attn, g, mask_before_softmax=True)
    assert torch.allclose(a[0], b[0], atol=1e-12)


def test_empty_observation_set():
    attn, g = modules()
    u = input_attention(torch.zeros(0, 3, dtype=torch.float64), torch.ones(2, 4, dtype=torch.float64),
                        torch.zeros(2, 0, dtype=torch.float64), attn, g)
    assert u.shape == (2, 3)
    assert torch.all(u == 0)


def test_shape_errors():
    attn, g = modules()
    with pytest.raises(DimensionError):
        input_attention(torch.zeros(5, 3), torch.zeros(2, 4), torch.zeros(2, 4), attn, g)
    with pytest.raises(DimensionError):
        input_attention(torch.zeros(5, 7), torch.zeros(2, 4), torch.zeros(2, 5), attn, g)
    with pytest.raises(DimensionError):
        inter_cell_attention(torch.zeros(3, 4), torch.zeros(2, 2), attn, g)


def test_gate_examples():
    g = GateParams(2, hidden=3, zero=True).double()
    cand, byp = t64([1.0, 3.0]), t64([3.0, 5.0])
    value, combined = gate(cand, byp, g)
    assert value.item() == 0.5
    assert torch.allclose(combined, t64([2.0, 4.0]))
    g2 = GateParams(2, hidden=3, seed=4).double()
    assert torch.allclose(gate(cand, cand, g2)[1], cand)
    with torch.no_grad():
        g2.output.bias.fill_(60.0)
        g2.output.weight.zero_()
    assert torch.allclose(gate(cand, byp, g2)[1], byp)


def test_inter_cell_single_module():
    with float64_mode():
        attn = AttentionParams(2, 2, 2, 2, heads=1, key_size=2, value_size=2, seed=3)
        g = GateParams(2, hidden=2)
    with torch.no_grad():
        attn.out.copy_(torch.eye(2))
        g.output.weight.zero_()
        g.output.bias.fill_(-60.0)  # G -> 0: pure attention path
    h = t64([[0.7, -1.1]])
    h_bar = inter_cell_attention(h, t64([[1.0]]), attn, g)
    assert torch.allclose(h_bar, h @ attn.value[:, 0], atol=1e-12)


def test_inter_cell_zero_pair_contributes_nothing():
    gen = torch.Generator().manual_seed(0)
    with float64_mode():
        attn = AttentionParams(4, 4, 4, 4, heads=2, key_size=3, value_size=2, seed=1)
        g = GateParams(4, hidden=3)
    h = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    W = t64([[1.0, 0.0, 0.4], [0.0, 1.0, 0.7], [0.4, 0.7, 1.0]])
    _, _, w = inter_cell_attention(h, W, attn, g, return_weights=True)
    assert torch.all(w[0, 1] == 0) and torch.all(w[1, 0] == 0)
    P = embed_position(torch.rand(3, 2, generator=gen, dtype=torch.float64) * 48, 16)
    assert torch.allclose(torch.diagonal(kernel_batch(P, P, KernelConfig())), torch.ones(3, dtype=torch.float64))


def test_output_attention_examples():
    cfg = KernelConfig(1.0, 0.6)
    p = embed_position(t64([10.0, 10.0]), 16)
    h = t64([[2.0, -1.0]])
    assert torch.allclose(output_attention(h, p, p[None], cfg), h[0])
    far = embed_position(t64([40.0, 40.0]), 16)
    assert (p @ far).item() < 0.6
    assert torch.all(output_attention(h, far, p[None], cfg) == 0)
    # hand example with given kernel values 1 and 0.5
    Z = t64([[1.0, 0.5]])
    assert (Z @ t64([[2.0], [4.0]])).item() == 4.0


def test_output_attention_is_kernel_weighted_sum():
    gen = torch.Generator().manual_seed(2)
    cfg = KernelConfig(1.0, 0.6)
    P = embed_position(torch.rand(3, 2, generator=gen, dtype=torch.float64) * 48, 16)
    S = embed_position(torch.rand(5, 2, generator=gen, dtype=torch.float64) * 48, 16)
    h = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    d = output_attention(h, S, P, cfg)
    for q in range(5):
        expected = sum(kernel_batch(S[q:q + 1], P[m:m + 1], cfg)[0, 0] * h[m] for m in range(3))
        assert torch.allclose(d[q], expected)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_input_attention_permutation_invariant(seed, A):
    gen = torch.Generator().manual_seed(seed)
    attn, g = modules()
    e = torch.randn(A, 3, generator=gen, dtype=torch.float64)
    h = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    W = torch.rand(2, A, generator=gen, dtype=torch.float64)
    perm = torch.randperm(A, generator=gen)
    a = input_attention(e, h, W, attn, g)
    b = input_attention(e[perm], h, W[:, perm], attn, g)
    assert (a - b).abs().max().item() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gate_output_in_open_interval(seed):
    gen = torch.Generator().manual_seed(seed)
    g = GateParams(3, hidden=4, seed=seed).double()
    value = g(torch.randn(5, 3, generator=gen, dtype=torch.float64), torch.randn(5, 3, generator=gen, dtype=torch.float64))
    assert torch.all((value > 0) & (value < 1))
