import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

import nfldm.renderer  # noqa: F401  registers renderer gradcheck cases
from nfldm.layers import CondGroupNorm
from nfldm.tensor_core import (GRADCHECK_CASES, Adam, AdamState, adam_step, attention, conv2d, forward_backward,
                               gradient_relative_error, group_norm, timestep_embedding)


def test_square_gradient():
    x = torch.tensor(3.0, requires_grad=True)
    (g,) = forward_backward(x * x, [x])
    assert g.item() == 6.0


def test_softplus_gradient_at_zero():
    x = torch.tensor(0.0, requires_grad=True)
    (g,) = forward_backward(F.softplus(x), [x])
    assert g.item() == pytest.approx(0.5)


def test_unused_leaf_gets_zero_grad():
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    y = torch.tensor([5.0], requires_grad=True)
    gx, gy = forward_backward((x ** 2).sum(), [x, y])
    assert torch.equal(gy, torch.zeros(1))
    assert torch.equal(gx, 2 * x.detach())


def test_non_scalar_root_rejected():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ValueError):
        forward_backward(x * 2, [x])


def test_linearity_of_gradients():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(5, generator=gen, dtype=torch.float64, requires_grad=True)
    f = lambda t: (t ** 3).sum()
    g = lambda t: torch.sin(t).sum()
    (gf,) = forward_backward(f(x), [x])
    (gg,) = forward_backward(g(x), [x])
    (gsum,) = forward_backward(2.5 * f(x) - 0.5 * g(x), [x])
    assert torch.allclose(gsum, 2.5 * gf - 0.5 * gg, atol=1e-12)


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
def test_registered_op_gradients(name):
    for seed in range(10):
        fn, x = GRADCHECK_CASES[name](torch.Generator().manual_seed(seed))
        assert gradient_relative_error(fn, x, h=1e-3) < 1e-4, (name, seed)


# --- Adam ---------------------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    p = torch.randn(4, 3)
    before = p.clone()
    state = AdamState(lr=1e-2, beta1=0.9, beta2=0.99)
    for _ in range(3):
        adam_step([p], [torch.zeros_like(p)], state)
    assert torch.equal(p, before)
    assert state.step_count == 3


def test_adam_first_step_beta1_zero_is_sign_step():
    p = torch.zeros(5)
    g = torch.tensor([3.0, -0.5, 1e-3, -20.0, 0.7])
    state = AdamState(lr=2e-4, beta1=0.0, beta2=0.99, eps=1e-12)
    adam_step([p], [g], state)
    assert torch.allclose(p, -2e-4 * torch.sign(g), rtol=1e-5)


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adam_matches_torch_reference(wd):
    gen = torch.Generator().manual_seed(1)
    a = torch.randn(6, 2, generator=gen)
    b = a.clone().requires_grad_(True)
    ref_cls = torch.optim.AdamW if wd else torch.optim.Adam
    ref = ref_cls([b], lr=1e-2, betas=(0.9, 0.99), eps=1e-8, weight_decay=wd)
    state = AdamState(lr=1e-2, beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=wd)
    for _ in range(5):
        g = torch.randn(6, 2, generator=gen)
        adam_step([a], [g], state)
        b.grad = g.clone()
        ref.step()
    assert torch.allclose(a, b.detach(), atol=1e-6)


def test_adam_shape_mismatch_and_lr():
    with pytest.raises(ValueError):
        adam_step([torch.zeros(3)], [torch.zeros(4)], AdamState())
    with pytest.raises(ValueError):
        adam_step([torch.zeros(3)], [torch.zeros(3)], AdamState(lr=0.0))


def test_adam_wrapper_skips_frozen_params():
    p = torch.nn.Parameter(torch.ones(2))
    q = torch.nn.Parameter(torch.ones(2), requires_grad=False)
    opt = Adam([p, q], lr=0.1)
    (p * 3).sum().backward()
    opt.step()
    assert torch.all(p < 1) and torch.equal(q.detach(), torch.ones(2))


# --- conv / embedding / norm / attention --------------------------------------------------


def test_conv_identity_kernel():
    x = torch.randn(1, 1, 5, 6)
    assert torch.equal(conv2d(x, torch.ones(1, 1, 1, 1)), x)


def test_conv_box_filter_interior():
    x = torch.full((1, 1, 6, 6), 2.5)
    y = conv2d(x, torch.ones(1, 1, 3, 3) / 9, padding=1)
    assert torch.allclose(y[..., 1:-1, 1:-1], torch.full((4, 4), 2.5))
    assert y[0, 0, 0, 0].item() == pytest.approx(2.5 * 4 / 9)


def test_conv_output_extent_and_errors():
    y = conv2d(torch.zeros(1, 2, 7, 9), torch.zeros(4, 2, 3, 3), stride=2, padding=1)
    assert y.shape == (1, 4, 4, 5)
    with pytest.raises(ValueError):
        conv2d(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 5, 5))
    with pytest.raises(ValueError):
        conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(1, 2, 3, 3))
    with pytest.raises(ValueError):
        conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 3, 3), stride=0)


def test_timestep_embedding_values():
    e0 = timestep_embedding(0, 8)
    assert torch.equal(e0[0::2], torch.zeros(4)) and torch.equal(e0[1::2], torch.ones(4))
    e1 = timestep_embedding(1, 8)
    assert e1[0].item() == pytest.approx(math.sin(1.0), abs=1e-6)
    assert e1[0].item() == pytest.approx(0.84147, abs=1e-5)
    assert torch.equal(timestep_embedding(17, 32), timestep_embedding(17, 32))
    batch = timestep_embedding(torch.tensor([0, 1]), 8)
    assert batch.shape == (2, 8) and torch.equal(batch[1], e1)
    with pytest.raises(ValueError):
        timestep_embedding(3, 7)


def test_group_norm_constant_input_gives_shift():
    x = torch.full((2, 4, 3, 3), 7.0)
    shift = torch.arange(4.0)
    y = group_norm(x, 2, torch.full((4,), 3.0), shift)
    assert torch.allclose(y, shift.reshape(1, 4, 1, 1).expand_as(y))


def test_group_norm_instance_mode_matches_direct_statistics():
    gen = torch.Generator().manual_seed(3)
    x = torch.randn(2, 3, 4, 5, generator=gen, dtype=torch.float64)
    y = group_norm(x, 3)
    mean = x.mean((2, 3), keepdim=True)
    var = x.var((2, 3), unbiased=False, keepdim=True)
    assert torch.allclose(y, (x - mean) / torch.sqrt(var + 1e-5), atol=1e-10)


def test_group_norm_indivisible():
    with pytest.raises(ValueError):
        group_norm(torch.zeros(1, 5, 2, 2), 2)


def test_conditional_group_norm_starts_as_plain_norm():
    layer = CondGroupNorm(8, cond_dim=6)
    x = torch.randn(3, 8, 4, 4)
    cond = torch.randn(3, 6)
    assert torch.allclose(layer(x, cond), group_norm(x, layer.n_groups), atol=1e-6)
    assert torch.allclose(layer(x, torch.zeros(3, 6)), layer(x), atol=1e-6)


def test_attention_matches_manual_softmax():
    gen = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(2, 3, 4, generator=gen) for _ in range(3))
    manual = torch.zeros(2, 3, 4)
    for b in range(2):
        for i in range(3):
            s = torch.stack([q[b, i] @ k[b, j] for j in range(3)]) / 2.0
            manual[b, i] = (torch.softmax(s, 0)[:, None] * v[b]).sum(0)
    assert torch.allclose(attention(q, k, v), manual, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_ops_finite_on_finite_inputs(vals):
    x = torch.tensor(vals).reshape(1, 1, 1, -1)
    assert torch.isfinite(group_norm(x.expand(1, 2, 1, -1).contiguous(), 1)).all()
    assert torch.isfinite(attention(x[0], x[0], x[0])).all()
