import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from s2rm.errors import ConfigError, DegenerateInputError
from s2rm.geometry import (KernelConfig, ModuleEmbeddings, embed_position, frequency_scales, kernel, kernel_batch,
                           kernel_from_dots, renormalize_embeddings)


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def reference_embedding(x, d):
    """Plain-python oracle of the sin/cos block layout."""
    n = len(x)
    F = d // (2 * n)
    out = [0.0] * d
    for m in range(n):
        for i in range(F):
            scale = 10000.0 ** (i / F)
            out[2 * (m * F + i)] = math.sin(x[m] / scale)
            out[2 * (m * F + i) + 1] = math.cos(x[m] / scale)
    norm = math.sqrt(sum(v * v for v in out))
    return [v / norm for v in out]


def test_embed_examples():
    assert torch.allclose(embed_position(t64([0.0]), 2), t64([0.0, 1.0]))
    s = embed_position(t64([0.0, 0.0]), 8)
    assert torch.all(s[0::2] == 0)
    assert torch.allclose(s[1::2], t64([0.5] * 4))


def test_embed_periodicity_of_slot_zero():
    scale0 = frequency_scales(1, 4)[0].item()
    a = embed_position(t64([0.0]), 4)
    b = embed_position(t64([2 * math.pi * scale0]), 4)
    assert torch.allclose(a[:2], b[:2], atol=1e-12)


@pytest.mark.parametrize("x", [(3.0, 7.5), (0.0, 47.0), (12.25, 30.0)])
def test_embed_matches_reference(x):
    assert np.allclose(embed_position(t64(x), 16).numpy(), reference_embedding(x, 16), atol=1e-12)


def test_embed_bad_size():
    with pytest.raises(ConfigError):
        embed_position(t64([1.0, 2.0]), 6)


def test_embed_injective_on_pixel_grid():
    grid = torch.stack(torch.meshgrid(torch.arange(48.0), torch.arange(48.0), indexing="ij"), -1).reshape(-1, 2)
    S = embed_position(grid.double(), 16)
    dist = torch.cdist(S, S)
    dist.fill_diagonal_(float("inf"))
    assert dist.min().item() > 0


def test_kernel_examples():
    cfg = KernelConfig(1.0, 0.6)
    p = embed_position(t64([4.0, 9.0]), 16)
    assert kernel(p, p, cfg).item() == pytest.approx(1.0, abs=1e-12)
    assert kernel_from_dots(t64(0.8), cfg).item() == pytest.approx(math.exp(-0.4), abs=1e-12)
    assert round(math.exp(-0.4), 6) == 0.670320
    assert kernel_from_dots(t64(0.5), cfg).item() == 0.0


def test_straight_through_gradient():
    dots = t64(0.5).requires_grad_(True)
    kernel_from_dots(dots, KernelConfig(1.0, 0.6)).backward()
    assert dots.grad.item() == pytest.approx(2 * math.exp(-1), abs=1e-12)
    assert round(2 * math.exp(-1), 6) == 0.735759


def test_no_truncation_at_minus_one():
    assert kernel_from_dots(t64(-1.0), KernelConfig(1.0, -1.0)).item() == pytest.approx(math.exp(-4))


def test_kernel_config_validation():
    with pytest.raises(ConfigError):
        KernelConfig(-1.0, 0.5)
    with pytest.raises(ConfigError):
        KernelConfig(1.0, 1.0)
    assert KernelConfig(0.0, -1.0).epsilon == 0.0


def test_kernel_batch_shapes():
    cfg = KernelConfig()
    p = embed_position(t64([[1.0, 2.0]]), 16)
    assert torch.allclose(kernel_batch(p, p, cfg), t64([[1.0]]))
    P = embed_position(torch.rand(4, 2, dtype=torch.float64) * 48, 16)
    S = embed_position(torch.rand(3, 7, 2, dtype=torch.float64) * 48, 16)
    W = kernel_batch(P, S, cfg)
    assert W.shape == (3, 4, 7)
    assert torch.allclose(W[1, 2, 5], kernel(P[2], S[1, 5], cfg))


def test_renormalize():
    P = t64([[3.0, 4.0, 0.0], [0.0, 1.0, 0.0]])
    renormalize_embeddings(P)
    assert torch.allclose(P, t64([[0.6, 0.8, 0.0], [0.0, 1.0, 0.0]]))
    with pytest.raises(DegenerateInputError):
        renormalize_embeddings(torch.zeros(1, 3))


@pytest.mark.parametrize("init", ["positions", "sphere"])
def test_module_embeddings_unit_rows(init):
    bank = ModuleEmbeddings(5, 16, seed=3, init=init)
    assert torch.allclose(bank.P.norm(dim=1), torch.ones(5), atol=1e-6)
    again = ModuleEmbeddings(5, 16, seed=3, init=init)
    assert torch.equal(bank.P, again.P)


def test_position_init_covers_frame():
    grid = torch.stack(torch.meshgrid(torch.arange(48.0), torch.arange(48.0), indexing="ij"), -1).reshape(-1, 2)
    S = embed_position(grid, 16)
    P = ModuleEmbeddings(4, 16, seed=0, init="positions").P.detach()
    Z = kernel_batch(P, S, KernelConfig())
    assert torch.all((Z > 0).any(dim=1))
    with pytest.raises(ConfigError):
        ModuleEmbeddings(2, 16, init="grid")


unit_pairs = st.tuples(st.floats(0, 48), st.floats(0, 48), st.floats(0, 48), st.floats(0, 48))


@settings(max_examples=60, deadline=None)
@given(unit_pairs)
def test_kernel_range_and_symmetry(c):
    p, s = embed_position(t64(c[:2]), 16), embed_position(t64(c[2:]), 16)
    cfg = KernelConfig()
    z = kernel(p, s, cfg).item()
    assert 0.0 <= z <= 1.0 + 1e-12
    assert z == kernel(s, p, cfg).item()
    assert abs(embed_position(t64(c[:2]), 16).norm().item() - 1) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(0.01, 5))
def test_kernel_monotone_in_similarity(dot, eps):
    cfg = KernelConfig(eps, -1.0)
    lo = kernel_from_dots(t64(dot), cfg).item()
    hi = kernel_from_dots(t64(min(1.0, dot + 0.05)), cfg).item()
    assert hi >= lo
