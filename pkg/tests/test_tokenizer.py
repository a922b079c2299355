import numpy as np
import pytest
import torch

from pyegopose.features import synthesis
from pyegopose.modules import models
from pyegopose.modules.exceptions import ConfigError, DomainError, ShapeError
from pyegopose.networks import tokenizer

WINDOW = 8


def tiny_tokenizer(feature_dim: int = 15) -> tokenizer.MotionTokenizer:
    config = models.TokenizerConfig(window=WINDOW, codebook_size=6, code_dim=4, hidden=8, depth=1)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        return tokenizer.MotionTokenizer(config, feature_dim)


def test_vq_quantize_matches_brute_force():
    generator = torch.Generator().manual_seed(0)
    z = torch.randn(3, 7, 4, generator=generator)
    codebook = torch.randn(9, 4, generator=generator)
    indices, quantized = tokenizer.vq_quantize(z, codebook)
    distance = ((z[..., None, :] - codebook) ** 2).sum(-1)
    torch.testing.assert_close(indices, distance.argmin(-1))
    torch.testing.assert_close(quantized, codebook[indices])


def test_vq_quantize_ties_resolve_to_lowest_index():
    codebook = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    indices, _ = tokenizer.vq_quantize(torch.tensor([[0.0, 0.0], [1.0, 0.0]]), codebook)
    assert indices.tolist() == [0, 0]


def test_vq_quantize_straight_through():
    codebook = torch.tensor([[0.0, 0.0], [2.0, 2.0]])
    z = torch.tensor([[0.4, 0.1]], requires_grad=True)
    _, quantized = tokenizer.vq_quantize(z, codebook)
    quantized.sum().backward()
    torch.testing.assert_close(z.grad, torch.ones_like(z))


def test_vq_quantize_rejects_bad_codebooks():
    with pytest.raises(ConfigError):
        tokenizer.vq_quantize(torch.zeros(2, 3), torch.zeros(0, 3))
    with pytest.raises(ShapeError):
        tokenizer.vq_quantize(torch.zeros(2, 3), torch.zeros(4, 2))


def test_wing_loss_is_continuous_at_width():
    width, curvature = 5.0, 4.0
    below = tokenizer.wing_loss(torch.tensor([width - 1e-6]), torch.zeros(1), width, curvature)
    above = tokenizer.wing_loss(torch.tensor([width + 1e-6]), torch.zeros(1), width, curvature)
    assert float(below) == pytest.approx(float(above), abs=1e-4)


def test_vqvae_loss_components():
    config = models.TokenizerConfig(lambda_vq=0.5)
    x = torch.randn(2, 6, 3)
    z = torch.randn(2, 6, 4)
    total, components = tokenizer.vqvae_loss(x, x.clone(), z, z.clone(), config)
    assert float(total) == pytest.approx(0.0, abs=1e-12)
    assert set(components) == {"reconstruction", "codebook", "commitment", "velocity", "acceleration"}


def test_lookup_rejects_out_of_range_tokens():
    model = tiny_tokenizer()
    with pytest.raises(DomainError):
        model.lookup(torch.tensor([6]))


def test_encode_decode_keep_window_length():
    model = tiny_tokenizer()
    latents = model.encode(torch.randn(2, WINDOW, 15))
    assert latents.shape == (2, WINDOW, 4)
    assert model.decode(latents).shape == (2, WINDOW, 15)


def test_dead_codes_are_reinitialized():
    model = tiny_tokenizer()
    model.config = model.config.model_copy(update={"dead_code_steps": 1})
    z = torch.randn(10, 4)
    model.update_codebook(z, torch.zeros(10, dtype=torch.long), torch.Generator().manual_seed(0))
    rows = [any(torch.equal(model.codebook[code], row) for row in z) for code in range(1, 6)]
    assert all(rows)


def test_checkpoint_round_trip(tmp_path, motion):
    feature_dim = 3 + 6 * motion.skeleton.joint_count
    model = tiny_tokenizer(feature_dim)
    model.history = [0.5]
    tokenizer.save_tokenizer(model, tmp_path)
    loaded = tokenizer.load_tokenizer(tmp_path)
    window = motion.window(0, WINDOW)
    torch.testing.assert_close(tokenizer.vq_encode(model, window), tokenizer.vq_encode(loaded, window))
    assert loaded.history == [0.5]


def test_reconstruct_sequence_covers_every_frame(motion):
    model = tiny_tokenizer(3 + 6 * motion.skeleton.joint_count)
    signal = synthesis.derive_tracking_signal(motion)
    reconstructed = tokenizer.reconstruct_sequence(model, motion, signal.head, stride=3)
    assert len(reconstructed) == len(motion)
    assert np.all(np.isfinite(reconstructed.rotations))


def test_vq_encode_checks_window(motion):
    model = tiny_tokenizer(3 + 6 * motion.skeleton.joint_count)
    with pytest.raises(ShapeError):
        tokenizer.vq_encode(model, motion.window(0, WINDOW - 1))


def test_vq_decode_accepts_indices_or_latents(skeleton):
    model = tiny_tokenizer(3 + 6 * skeleton.joint_count).eval()
    tokens = torch.tensor([0, 1, 2, 3, 4, 5, 0, 1])
    with torch.no_grad():
        decoded = tokenizer.vq_decode(model, tokens, skeleton, fps=20.0)
        from_latents = tokenizer.vq_decode(model, model.lookup(tokens), skeleton, fps=20.0)
    assert len(decoded) == WINDOW
    assert decoded.fps == 20.0
    assert np.all(np.isfinite(decoded.rotations))
    np.testing.assert_allclose(decoded.root, from_latents.root)
    np.testing.assert_allclose(decoded.rotations, from_latents.rotations)
    with pytest.raises(DomainError):
        tokenizer.vq_decode(model, torch.tensor([6] * WINDOW), skeleton)
