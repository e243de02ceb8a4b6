import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import check_module_gradients

from pars_ssl.nn.checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_module_state,
    module_tensors,
    optimizer_tensors,
    restore_optimizer,
    save_checkpoint,
)
from pars_ssl.nn.layers import (
    EncoderConfig,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    PatchEncoder,
    TransformerBlock,
    count_parameters,
    encoder_forward,
    expected_parameter_count,
    layer_norm,
    linear_forward,
    sinusoidal_pe,
)
from pars_ssl.nn.optim import NonFiniteGradientError, lr_schedule, make_optimizer, optimizer_step

torch.manual_seed(0)


def randn(*shape):
    return torch.randn(*shape, dtype=torch.float64)


# -- linear ---------------------------------------------------------------


def test_linear_identity_and_hand_example():
    x = torch.tensor([[1.0, 2.0]])
    assert torch.equal(linear_forward(x, torch.eye(2), torch.zeros(2)), x)
    out = linear_forward(torch.tensor([1.0, 2.0]), torch.tensor([[1.0, 0.0], [0.0, 2.0]]), torch.tensor([1.0, 1.0]))
    assert torch.equal(out, torch.tensor([2.0, 5.0]))


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        linear_forward(torch.ones(3), torch.ones(2, 2))


def test_linear_gradient():
    lin = Linear(3, 4)
    x = randn(2, 3)
    assert check_module_gradients(lin, lambda: lin(x).sum(), [x], h=1e-3) < 1e-4


# -- layer norm -----------------------------------------------------------


def test_layer_norm_two_elements():
    out = layer_norm(torch.tensor([2.0, 4.0]), torch.ones(2), torch.zeros(2))
    assert torch.allclose(out, torch.tensor([-1.0, 1.0]), atol=1e-4)


def test_layer_norm_constant_gives_shift():
    shift = torch.tensor([0.5, -1.0, 2.0])
    out = layer_norm(torch.full((3,), 7.0), torch.ones(3), shift)
    assert torch.allclose(out, shift)


def test_layer_norm_gradient():
    ln = LayerNorm(5)
    with torch.no_grad():
        ln.weight.copy_(torch.linspace(0.5, 1.5, 5))
        ln.bias.copy_(torch.linspace(-0.2, 0.2, 5))
    x = randn(3, 5)
    w = randn(3, 5)
    assert check_module_gradients(ln, lambda: (ln(x) * w).sum(), [x], h=1e-3) < 1e-4


# -- attention ------------------------------------------------------------


def test_single_visible_key_returns_its_value_projection():
    attn = MultiHeadAttention(4, 2).double()
    q, k, v = randn(2, 4), randn(3, 4), randn(3, 4)
    mask = torch.tensor([True, False, True])
    out, w = attn(q, k, v, mask, return_weights=True)
    expected = attn.out_proj(attn.v_proj(v[1:2])).expand(2, 4)
    assert torch.allclose(out, expected, atol=1e-12)
    assert torch.all(w[..., 1] == 1.0)


def test_attention_rows_sum_to_one():
    attn = MultiHeadAttention(8, 2).double()
    _, w = attn(randn(5, 8), randn(4, 8), randn(4, 8), return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_attention_all_masked_rejected():
    attn = MultiHeadAttention(4, 2)
    with pytest.raises(ValueError):
        attn(torch.ones(1, 4), torch.ones(2, 4), torch.ones(2, 4), torch.tensor([True, True]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
def test_kv_mask_equals_removed_keys(seed, lk):
    g = torch.Generator().manual_seed(seed)
    attn = MultiHeadAttention(4, 2).double()
    q = torch.randn(3, 4, generator=g, dtype=torch.float64)
    k = torch.randn(lk, 4, generator=g, dtype=torch.float64)
    v = torch.randn(lk, 4, generator=g, dtype=torch.float64)
    mask = torch.rand(lk, generator=g) < 0.5
    mask[0] = False
    keep = ~mask
    assert torch.allclose(attn(q, k, v, mask), attn(q, k[keep], v[keep]), atol=1e-12)


def test_attention_gradient():
    attn = MultiHeadAttention(4, 2)
    q, k, v = randn(3, 4), randn(3, 4), randn(3, 4)
    w = randn(3, 4)
    assert check_module_gradients(attn, lambda: (attn(q, k, v) * w).sum(), [q, k, v]) < 1e-3


def test_attention_dim_must_divide_heads():
    with pytest.raises(ValueError):
        MultiHeadAttention(6, 4)


# -- transformer block / encoder -----------------------------------------


def test_block_with_zero_output_weights_is_identity():
    block = TransformerBlock(8, 2, 8).double()
    with torch.no_grad():
        for lin in (block.attn.out_proj, block.ff.fc2):
            lin.weight.zero_()
            lin.bias.zero_()
    x = randn(5, 8)
    assert torch.equal(block(x), x)


@pytest.mark.parametrize("length", [1, 3, 7])
def test_block_preserves_shape(length):
    block = TransformerBlock(8, 2, 16)
    assert block(torch.randn(2, length, 8)).shape == (2, length, 8)


def test_block_gradient():
    block = TransformerBlock(8, 2, 8)
    x = randn(4, 8)
    w = randn(4, 8)
    assert check_module_gradients(block, lambda: (block(x) * w).sum(), [x]) < 1e-3


def test_default_parameter_count():
    cfg = EncoderConfig()
    enc = PatchEncoder(cfg)
    n = count_parameters(enc)
    assert n == expected_parameter_count(cfg)
    assert abs(n - 12.7e6) / 12.7e6 <= 0.02


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(model_dim=10, n_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(n_blocks=0)


def test_encoder_permutation_equivariant_and_deterministic():
    cfg = EncoderConfig(n_blocks=2, model_dim=16, n_heads=2, ff_hidden=16, patch_len=10)
    enc = PatchEncoder(cfg).double()
    x = randn(6, 16)
    perm = torch.randperm(6)
    out = encoder_forward(x, cfg, enc)
    assert torch.allclose(enc(x[perm]), out[perm], atol=1e-12)
    assert torch.equal(enc(x), enc(x))


def test_encoder_output_finite_at_default_size():
    enc = PatchEncoder(EncoderConfig())
    with torch.no_grad():
        out = enc(enc.embed(torch.randn(2, 30, 200), torch.arange(30.0)))
    assert torch.isfinite(out).all() and float(out.norm()) < 1e6


def test_encoder_forward_rejects_other_config():
    cfg = EncoderConfig(n_blocks=1, model_dim=8, n_heads=2, ff_hidden=8, patch_len=4)
    with pytest.raises(ValueError):
        encoder_forward(torch.zeros(2, 8), EncoderConfig(n_blocks=2, model_dim=8, n_heads=2, ff_hidden=8,
                                                         patch_len=4), PatchEncoder(cfg))


# -- positional embedding -------------------------------------------------


def test_pe_at_zero():
    assert torch.equal(sinusoidal_pe(0.0, 8), torch.tensor([0.0, 1.0] * 4, dtype=torch.float64))


def test_pe_formula():
    pe = sinusoidal_pe(3.5, 8)
    for i in range(4):
        angle = 3.5 / 10000 ** (2 * i / 8)
        assert abs(float(pe[2 * i]) - math.sin(angle)) < 1e-9
        assert abs(float(pe[2 * i + 1]) - math.cos(angle)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4), st.sampled_from([2, 8, 64]))
def test_pe_bounded(position, dim):
    pe = sinusoidal_pe(position, dim)
    assert pe.shape == (dim,) and torch.all(pe.abs() <= 1)


def test_pe_requires_even_dim():
    with pytest.raises(ValueError):
        sinusoidal_pe(1.0, 7)


def test_masked_positional_uses_shared_token():
    enc = PatchEncoder(EncoderConfig(n_blocks=1, model_dim=8, n_heads=2, ff_hidden=8, patch_len=4))
    pe = enc.positional(torch.tensor([0.0, 1.0, 2.0]), torch.tensor([True, False, True]))
    assert torch.equal(pe[0], enc.pe_mask_token) and torch.equal(pe[2], enc.pe_mask_token)
    assert torch.allclose(pe[1], sinusoidal_pe(1.0, 8).float())


# -- optimizer ------------------------------------------------------------


def test_zero_gradient_no_decay_is_noop():
    w = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = make_optimizer([w], lr=0.1, weight_decay=0.0)
    w.grad = torch.zeros(2)
    optimizer_step(opt)
    assert torch.equal(w.detach(), torch.tensor([1.0, -2.0]))


def test_descent_on_quadratic():
    w = torch.nn.Parameter(torch.tensor(1.0))
    opt = make_optimizer([w], lr=0.1, weight_decay=0.0)
    (0.5 * w**2).backward()
    optimizer_step(opt)
    assert float(w.detach()) < 1.0


def test_adamw_matches_hand_recursion():
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
    w = torch.nn.Parameter(torch.tensor(1.5, dtype=torch.float64))
    opt = make_optimizer([w], lr=lr, weight_decay=wd)
    ref, m, v = 1.5, 0.0, 0.0
    for t in range(1, 4):
        w.grad = None
        (w**3 / 3).backward()
        optimizer_step(opt)
        g = ref**2
        ref -= lr * wd * ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(float(w.detach()) - ref) < 1e-10


def test_nonfinite_gradient_rejected():
    w = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
    opt = make_optimizer([w], lr=0.1)
    w.grad = torch.tensor([float("nan"), 0.0])
    with pytest.raises(NonFiniteGradientError):
        optimizer_step(opt)
    assert torch.equal(w.detach(), torch.tensor([1.0, 2.0])) and w.grad is None


# -- schedule -------------------------------------------------------------


def test_schedule_endpoints():
    assert lr_schedule(0, 1000, 100, 1e-4) == pytest.approx(1e-5)
    assert lr_schedule(100, 1000, 100, 1e-4) == pytest.approx(1e-4)
    last = lr_schedule(999, 1000, 100, 1e-4)
    assert 0 <= last <= 1e-4 * math.pi / 900


def test_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        lr_schedule(10, 10, 1, 1e-3)
    with pytest.raises(ValueError):
        lr_schedule(-1, 10, 1, 1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 300), st.integers(0, 100))
def test_schedule_continuity(max_epochs, warmup):
    warmup = min(warmup, max_epochs - 1)
    base = 1.0
    bound = base * max(1 / warmup if warmup else 0, math.pi / (max_epochs - warmup)) + 1e-12
    lrs = [lr_schedule(e, max_epochs, warmup, base) for e in range(max_epochs)]
    assert all(abs(b - a) <= bound for a, b in zip(lrs, lrs[1:]))
    assert all(0 <= x <= base for x in lrs)


# -- checkpoints ----------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    tensors = {"a": np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32),
               "b.c": np.arange(5, dtype=np.float32), "scalar": np.float32(2.5)}
    save_checkpoint(tmp_path / "ck", tensors, {"epoch": 3})
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.meta == {"epoch": 3}
    for k, v in tensors.items():
        assert ck.tensors[k].tobytes() == np.asarray(v, dtype="<f4").tobytes()
        assert ck.tensors[k].shape == np.shape(v)


def test_checkpoint_manifest_layout(tmp_path):
    import json
    save_checkpoint(tmp_path / "ck", {"x": np.ones((2, 2), np.float32), "y": np.zeros(3, np.float32)})
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    entries = {e["name"]: e for e in manifest["tensors"]}
    assert entries["x"] == {"name": "x", "shape": [2, 2], "dtype": "float32", "offset": 0, "nbytes": 16}
    assert entries["y"]["offset"] == 16 and entries["y"]["nbytes"] == 12
    assert (tmp_path / "ck" / "tensors.bin").stat().st_size == 28


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    save_checkpoint(tmp_path / "ck", {"x": np.ones(4, np.float32)})
    (tmp_path / "ck" / "tensors.bin").write_bytes(b"\x00" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_load_module_state_reports_diff():
    small = PatchEncoder(EncoderConfig(n_blocks=1, model_dim=8, n_heads=2, ff_hidden=8, patch_len=4))
    big = PatchEncoder(EncoderConfig(n_blocks=2, model_dim=8, n_heads=2, ff_hidden=8, patch_len=4))
    tensors = {k: v.numpy() for k, v in module_tensors(big).items()}
    with pytest.raises(CheckpointError, match="unexpected: blocks.1"):
        load_module_state(small, tensors, "encoder")


def test_optimizer_state_round_trip(tmp_path):
    lin = Linear(3, 2)
    names = [n for n, _ in lin.named_parameters()]
    opt = make_optimizer(lin.parameters(), lr=0.01)
    for _ in range(2):
        opt.zero_grad()
        lin(torch.ones(1, 3)).pow(2).sum().backward()
        optimizer_step(opt)
    tensors, steps = optimizer_tensors(opt, names)
    save_checkpoint(tmp_path / "ck", {**module_tensors(lin), **tensors}, {"steps": steps})
    ck = load_checkpoint(tmp_path / "ck")
    lin2 = Linear(3, 2)
    load_module_state(lin2, {k: v for k, v in ck.tensors.items() if not k.startswith("optim.")})
    opt2 = make_optimizer(lin2.parameters(), lr=0.01)
    restore_optimizer(opt2, names, ck, ck.meta["steps"])
    for o, m in ((opt, lin), (opt2, lin2)):
        o.zero_grad()
        m(torch.ones(1, 3)).pow(2).sum().backward()
        optimizer_step(o)
    assert torch.equal(lin.weight, lin2.weight) and torch.equal(lin.bias, lin2.bias)
