import numpy as np
import pytest
import torch
from oracles import check_module_gradients

from pars_ssl.data import gen_chirp_corpus
from pars_ssl.nn.layers import EncoderConfig, PatchEncoder, sinusoidal_pe
from pars_ssl.nn.optim import make_optimizer
from pars_ssl.pars import (
    CrossAttentionDecoder,
    ParsBatch,
    ParsConfig,
    ParsModel,
    PairwiseMLPDecoder,
    batch_loss,
    build_pair_embeddings,
    cross_attention_decode,
    draw_pars_batch,
    pairwise_mlp_decode,
    pars_loss,
    pars_training_step,
    tokenize_and_embed_positions,
)
from pars_ssl.signal import PatchSet, Sequence, sample_patches_random
from pars_ssl.targets import compute_shift_targets, pair_index_list

SMALL = EncoderConfig(n_blocks=1, model_dim=8, n_heads=2, ff_hidden=8, patch_len=10)


def small_patch_set(rng, n=5, gamma=1.0, t=200):
    return sample_patches_random(Sequence(rng.normal(size=t), 100.0), n, 10, gamma, rng)


# -- config ---------------------------------------------------------------


def test_config_defaults_and_count():
    cfg = ParsConfig()
    assert (cfg.n_patches, cfg.patch_len, cfg.gamma_pos) == (40, 200, 0.8)
    assert cfg.n_masked == 32


@pytest.mark.parametrize("kwargs", [dict(gamma_pos=0.02), dict(decoder="rnn"), dict(sampling="grid"),
                                    dict(gamma_pos=1.5), dict(patch_len=7000)])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        ParsConfig(**kwargs)


# -- tokenization ---------------------------------------------------------


def test_all_masked_tokens_share_mask_token(rng):
    enc = PatchEncoder(SMALL)
    ps = small_patch_set(rng)
    tokens = tokenize_and_embed_positions(ps, enc)
    expected = enc.tokenize(torch.as_tensor(ps.patches, dtype=torch.float32)) + enc.pe_mask_token
    assert torch.allclose(tokens, expected)


def test_identical_masked_patches_give_identical_tokens():
    enc = PatchEncoder(SMALL)
    ps = PatchSet(np.ones((3, 10)), np.array([0, 50, 120]), np.array([True, True, False]), 200)
    tokens = tokenize_and_embed_positions(ps, enc)
    assert torch.equal(tokens[0], tokens[1])
    assert not torch.equal(tokens[0], tokens[2])


def test_unmasked_tokens_get_pe_at_fractional_index():
    enc = PatchEncoder(SMALL)
    ps = PatchSet(np.zeros((2, 10)), np.array([35, 0]), np.array([False, True]), 200)
    tokens = tokenize_and_embed_positions(ps, enc)
    lin = enc.tokenize(torch.zeros(1, 10))[0]
    assert torch.allclose(tokens[0], lin + sinusoidal_pe(3.5, 8).float())


def test_default_config_masks_32_tokens(rng):
    ps = sample_patches_random(Sequence(rng.normal(size=6000), 200.0), 40, 200, 0.8, rng)
    assert int(ps.pe_masked.sum()) == 32


def test_patch_length_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        tokenize_and_embed_positions(sample_patches_random(Sequence(rng.normal(size=200)), 4, 20, 1.0, rng),
                                     PatchEncoder(SMALL))


# -- pair embeddings -------------------------------------------------------


def test_pair_embeddings_layout():
    y = torch.arange(12.0).reshape(3, 4)
    pairs = build_pair_embeddings(y, [2, 0])
    assert pairs.y_pairs.shape == (4, 8)
    assert torch.equal(pairs.y_pairs[0], torch.cat([y[2], y[2]]))
    assert torch.equal(pairs.y_pairs[1], torch.cat([y[2], y[0]]))
    assert torch.equal(pairs.y_pairs[2], torch.cat([y[0], y[2]]))


def test_pair_embeddings_match_target_order():
    ps = PatchSet(np.zeros((3, 1)), np.array([0, 5, 9]), np.array([True, False, True]), 20)
    tg = compute_shift_targets(ps)
    pairs = build_pair_embeddings(torch.zeros(3, 2), ps.masked_indices)
    assert pairs.pair_index == pair_index_list(tg)


def test_pair_embeddings_default_size():
    pairs = build_pair_embeddings(torch.zeros(40, 512), np.arange(32))
    assert pairs.y_pairs.shape == (1024, 1024)


def test_pair_embeddings_reject_bad_index():
    with pytest.raises(ValueError):
        build_pair_embeddings(torch.zeros(3, 2), [0, 3])


# -- decoders -------------------------------------------------------------


def test_cross_attention_shape_and_kv_length():
    dec = CrossAttentionDecoder(8, 2).double()
    y = torch.randn(5, 8, dtype=torch.float64)
    pairs = build_pair_embeddings(y, [0, 3, 4])
    out = cross_attention_decode(y, pairs, dec)
    assert out.shape == (9,)
    # Changing an unmasked-PE embedding (index 1) must change the output: K/V cover all N tokens.
    y2 = y.clone()
    y2[1] += 1.0
    assert not torch.allclose(cross_attention_decode(y2, pairs, dec), out)


def test_cross_attention_gradient_end_to_end():
    torch.manual_seed(0)
    cfg = ParsConfig(n_patches=4, patch_len=10, gamma_pos=0.75, window_len=100)
    model = ParsModel(SMALL, cfg)
    patches = torch.randn(4, 10, dtype=torch.float64)
    positions = torch.tensor([0.0, 2.5, 5.0, 9.0])
    pe_masked = torch.tensor([True, False, True, True])
    masked_idx = np.array([0, 2, 3])
    theta = torch.randn(3, 3, dtype=torch.float64)

    def loss():
        return pars_loss(model(patches, positions, pe_masked, masked_idx), theta)

    assert check_module_gradients(model, loss, [patches]) < 1e-3


def test_mlp_decoder_is_per_row():
    dec = PairwiseMLPDecoder(8).double()
    pairs = build_pair_embeddings(torch.randn(4, 8, dtype=torch.float64), [0, 1, 2])
    out = pairwise_mlp_decode(pairs, dec)
    assert out.shape == (9,)
    pairs.y_pairs = pairs.y_pairs.clone()
    pairs.y_pairs[1:] = 0
    assert out[0] == pairwise_mlp_decode(pairs, dec)[0]


def test_mlp_decoder_gradient():
    dec = PairwiseMLPDecoder(8, hidden=16)
    x = torch.randn(5, 16, dtype=torch.float64)
    w = torch.randn(5, dtype=torch.float64)
    assert check_module_gradients(dec, lambda: (dec(None, x) * w).sum(), [x]) < 1e-4


# -- loss -----------------------------------------------------------------


def test_loss_hand_example():
    ps = PatchSet(np.zeros((3, 1)), np.array([0, 2000, 4000]), np.ones(3, bool), 6000)
    tg = compute_shift_targets(ps, 6000)
    # Four entries are +-1/3 and two are +-2/3: (4/9 + 8/9) / 9 = 12/81.
    squares = [((a - b) / 6000) ** 2 for a in (0, 2000, 4000) for b in (0, 2000, 4000)]
    assert sum(squares) / 9 == pytest.approx(12 / 81, abs=1e-15)
    assert float(pars_loss(torch.zeros(3, 3, dtype=torch.float64), tg)) == pytest.approx(12 / 81, abs=1e-15)
    assert float(pars_loss(torch.as_tensor(tg.theta), tg)) == 0.0


def test_loss_permutation_invariant(rng):
    theta = rng.normal(size=(4, 4))
    theta_hat = torch.as_tensor(rng.normal(size=(4, 4)))
    perm = rng.permutation(4)
    a = pars_loss(theta_hat, theta)
    b = pars_loss(theta_hat[perm][:, perm], theta[np.ix_(perm, perm)])
    assert float(a) == pytest.approx(float(b), abs=1e-15)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        pars_loss(torch.zeros(2, 2), np.zeros((3, 3)))


# -- training step ---------------------------------------------------------


def _permute_batch(batch: ParsBatch, perm) -> ParsBatch:
    inv = np.argsort(perm)
    masked = np.stack([np.sort(inv[m]) for m in batch.masked_idx])
    starts = batch.starts[:, perm]
    theta = np.stack([(s[m][:, None] - s[m][None, :]) / 400 for s, m in zip(starts, masked)])
    return ParsBatch(batch.patches[:, perm], starts, batch.pe_masked[:, perm], masked, theta)


def test_token_shuffle_leaves_loss_unchanged(toy_encoder, toy_pars, rng):
    torch.manual_seed(0)
    model = ParsModel(toy_encoder, toy_pars).double()
    batch = draw_pars_batch(gen_chirp_corpus(4, 400, 100.0, seed=1).data, toy_pars, rng)
    perm = rng.permutation(toy_pars.n_patches)
    with torch.no_grad():
        a = float(batch_loss(model, batch))
        b = float(batch_loss(model, _permute_batch(batch, perm)))
    # Equal up to float summation order inside attention and the mean.
    assert abs(a - b) <= 1e-12 * max(a, 1.0)


def test_first_batch_loss_near_target_energy(toy_encoder, toy_pars, rng):
    torch.manual_seed(0)
    model = ParsModel(toy_encoder, toy_pars)
    batch = draw_pars_batch(gen_chirp_corpus(16, 400, 100.0, seed=2).data, toy_pars, rng)
    with torch.no_grad():
        loss = float(batch_loss(model, batch))
    energy = float(np.mean(batch.theta**2))
    assert loss < 1.0
    assert abs(loss - energy) < 0.5 * energy + 0.05


def test_training_is_deterministic(toy_encoder, toy_pars):
    windows = gen_chirp_corpus(8, 400, 100.0, seed=3).data

    def run():
        torch.manual_seed(5)
        model = ParsModel(toy_encoder, toy_pars)
        opt = make_optimizer(model.parameters(), lr=1e-3)
        rng = np.random.default_rng(5)
        return [pars_training_step(windows, toy_pars, model, opt, rng) for _ in range(5)]

    assert run() == run()


def test_training_step_rejects_other_config(toy_encoder, toy_pars, rng):
    model = ParsModel(toy_encoder, toy_pars)
    opt = make_optimizer(model.parameters(), lr=1e-3)
    other = ParsConfig(n_patches=6, patch_len=50, gamma_pos=0.8, window_len=400)
    with pytest.raises(ValueError):
        pars_training_step(np.zeros((2, 1, 400)), other, model, opt, rng)


def test_frozen_batch_loss_descends_and_is_antisymmetric(toy_encoder, toy_pars):
    torch.manual_seed(0)
    model = ParsModel(toy_encoder, toy_pars)
    opt = make_optimizer(model.parameters(), lr=1e-3, weight_decay=1e-4)
    windows = gen_chirp_corpus(8, 400, 100.0, seed=7).data
    losses = [pars_training_step(windows, toy_pars, model, opt, np.random.default_rng(99)) for _ in range(200)]
    ma = np.convolve(losses, np.ones(5) / 5, mode="valid")
    # Non-increasing up to float noise once the loss has collapsed towards zero.
    assert np.all(np.diff(ma) <= 1e-4)
    batch = draw_pars_batch(windows, toy_pars, np.random.default_rng(99))
    model.eval()
    with torch.no_grad():
        theta_hat = model(torch.as_tensor(batch.patches, dtype=torch.float32),
                          torch.as_tensor(batch.starts / toy_pars.patch_len),
                          torch.as_tensor(batch.pe_masked), batch.masked_idx)
    assert float((theta_hat + theta_hat.transpose(-1, -2)).abs().mean()) < 0.1


def test_no_positional_leak_on_constant_signals(toy_encoder):
    cfg = ParsConfig(n_patches=8, patch_len=50, gamma_pos=1.0, window_len=400)
    torch.manual_seed(0)
    model = ParsModel(toy_encoder, cfg)
    opt = make_optimizer(model.parameters(), lr=1e-3)
    windows = np.ones((8, 1, 400))
    rng = np.random.default_rng(0)
    for _ in range(30):
        pars_training_step(windows, cfg, model, opt, rng)
    batch = draw_pars_batch(windows, cfg, rng)
    with torch.no_grad():
        loss = float(batch_loss(model, batch))
    assert loss >= float(np.mean(batch.theta**2)) - 1e-6
