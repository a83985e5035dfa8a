import numpy as np
import pytest
import torch

from latentloop.model import (DecoderParams, KvCache, ModelConfig,
                              forward_prefix, init_latent_head, latent_coeffs,
                              lm_logits, load_checkpoint, save_checkpoint)
from latentloop.numerics import Rng
from latentloop.pca import fit_components


@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64,
                      vocab_size=40, latent_k=8, max_seq_len=64)
    return DecoderParams(cfg)


def _slots(n, vocab_size, seed=0):
    return [int(t) for t in Rng(seed).integers(0, vocab_size, n)]


def test_init_is_seeded(small):
    other = DecoderParams(small.config)
    for (_, a), (_, b) in zip(small.param_groups(), other.param_groups()):
        assert torch.equal(a, b)


def test_incremental_decode_matches_full_forward(small):
    slots = _slots(12, small.config.vocab_size)
    with torch.no_grad():
        _, full, _ = forward_prefix(small, slots, KvCache(small.config))
        cache = KvCache(small.config)
        rows = []
        for s in slots:
            _, hb, _ = forward_prefix(small, [s], cache)
            rows.append(hb[0])
    inc = torch.stack(rows)
    assert float((full - inc).abs().max()) < 1e-13


def test_causality_is_bitwise(small):
    slots = _slots(10, small.config.vocab_size, seed=1)
    with torch.no_grad():
        _, a, _ = forward_prefix(small, slots, KvCache(small.config))
        changed = list(slots)
        changed[-1] = (changed[-1] + 1) % small.config.vocab_size
        _, b, _ = forward_prefix(small, changed, KvCache(small.config))
    assert torch.equal(a[:-1], b[:-1])
    assert not torch.equal(a[-1], b[-1])


def test_continuous_slots_are_injected(small):
    d = small.config.d_model
    v = Rng(2).gaussian(d)
    slots = [3, v, 5]
    with torch.no_grad():
        _, hb, _ = forward_prefix(small, slots, KvCache(small.config))
    assert hb.shape == (3, d)
    assert bool(torch.isfinite(hb).all())


def test_latent_head_init_reproduces_transpose(small):
    samples = Rng(3).gaussian((200, small.config.d_model)) * np.linspace(
        2.0, 0.1, small.config.d_model)
    basis = fit_components(samples, small.config.latent_k)
    init_latent_head(small, basis, perturb_scale=0.0)
    h = torch.tensor(Rng(4).gaussian(small.config.d_model))
    with torch.no_grad():
        c = latent_coeffs(small, h).numpy()
    expected = basis.components.T @ h.numpy()
    assert np.max(np.abs(c - expected)) < 1e-14


def test_lm_logits_shape(small):
    h = torch.tensor(Rng(5).gaussian(small.config.d_model))
    with torch.no_grad():
        logits = lm_logits(small, h)
    assert logits.shape == (small.config.vocab_size,)


def test_checkpoint_roundtrip_is_bitwise(small, tmp_path):
    path = tmp_path / "ckpt.bin"
    save_checkpoint(small, path)
    loaded = load_checkpoint(path)
    assert loaded.config == small.config
    for (na, a), (nb, b) in zip(small.param_groups(), loaded.param_groups()):
        assert na == nb
        assert torch.equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
