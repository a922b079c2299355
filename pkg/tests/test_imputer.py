import numpy as np
import pytest
import torch

from pyegopose.modules import enums, models
from pyegopose.modules.exceptions import DomainError, ShapeError
from pyegopose.networks import imputer

WINDOW = 6


def tiny_config(**kwargs) -> models.ImputerConfig:
    settings = dict(window=WINDOW, d_model=16, heads=2, encoder_layers=1, decoder_layers=1, ff_mult=2, members=3)
    return models.ImputerConfig(**{**settings, **kwargs})


def window_inputs(batch: int = 2, hand_dim: int = 9, seed: int = 0):
    generator = torch.Generator().manual_seed(seed)
    head = torch.randn(batch, WINDOW, models.HEAD_DIM, generator=generator)
    hands = torch.randn(batch, WINDOW, 2, hand_dim, generator=generator)
    mask = torch.rand(batch, WINDOW, 2, generator=generator) > 0.5
    return head, hands, mask


def test_beta_zero_is_gaussian_nll():
    mu, target = torch.randn(50, dtype=torch.float64), torch.randn(50, dtype=torch.float64)
    variance = torch.rand(50, dtype=torch.float64) + 0.1
    expected = torch.nn.functional.gaussian_nll_loss(mu, target, variance, full=False, reduction="mean")
    torch.testing.assert_close(imputer.beta_nll_loss(mu, variance, target, 0.0), expected)


def test_beta_nll_gradients_are_reweighted():
    mu = torch.randn(20, dtype=torch.float64, requires_grad=True)
    variance = (torch.rand(20, dtype=torch.float64) + 0.1).requires_grad_()
    target = torch.randn(20, dtype=torch.float64)
    imputer.beta_nll_loss(mu, variance, target, 1.0, reduction="sum").backward()
    torch.testing.assert_close(mu.grad, (mu - target).detach())
    torch.testing.assert_close(variance.grad, (0.5 - (mu - target) ** 2 / (2 * variance)).detach())


def test_beta_nll_gradcheck():
    mu = torch.randn(8, dtype=torch.float64, requires_grad=True)
    variance = (torch.rand(8, dtype=torch.float64) + 0.5).requires_grad_()
    target = torch.randn(8, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda m: imputer.beta_nll_loss(m, variance.detach(), target, 0.5), (mu,))


def test_beta_nll_domain():
    values = torch.ones(3)
    with pytest.raises(DomainError):
        imputer.beta_nll_loss(values, torch.zeros(3), values, 0.5)
    with pytest.raises(DomainError):
        imputer.beta_nll_loss(values, values, values, 1.5)


def test_ensemble_moments_identities():
    generator = torch.Generator().manual_seed(1)
    mus = torch.randn(4, 5, 3, generator=generator, dtype=torch.float64)
    variances = torch.rand(4, 5, 3, generator=generator, dtype=torch.float64)
    mean, uncertainty = imputer.ensemble_moments(mus, variances)
    torch.testing.assert_close(mean, mus.mean(0))
    torch.testing.assert_close(uncertainty[enums.UncertaintyKind.aleatoric], variances.mean(0))
    torch.testing.assert_close(
        uncertainty[enums.UncertaintyKind.epistemic], ((mus - mus.mean(0)) ** 2).mean(0)
    )
    torch.testing.assert_close(
        uncertainty[enums.UncertaintyKind.total],
        uncertainty[enums.UncertaintyKind.aleatoric] + uncertainty[enums.UncertaintyKind.epistemic],
    )


def test_single_member_has_zero_epistemic():
    mus, variances = torch.randn(1, 4, 3), torch.rand(1, 4, 3) + 0.1
    _, uncertainty = imputer.ensemble_moments(mus, variances)
    assert torch.all(uncertainty[enums.UncertaintyKind.epistemic] == 0)


def test_member_outputs_are_positive_and_shaped():
    member = imputer.MaskedAutoencoder(tiny_config(), 9)
    mu, variance = member(*window_inputs())
    assert mu.shape == variance.shape == (2, WINDOW, 2, 9)
    assert torch.all(variance > 0)


def test_member_ignores_hidden_detections():
    member = imputer.MaskedAutoencoder(tiny_config(), 9).eval()
    head, hands, mask = window_inputs()
    altered = torch.where(mask[..., None], hands, hands + 100.0)
    with torch.no_grad():
        first, second = member(head, hands, mask), member(head, altered, mask)
    torch.testing.assert_close(first[0], second[0])
    torch.testing.assert_close(first[1], second[1])


def test_tokenize_inputs_checks_window():
    layout = imputer.TokenLayout(WINDOW, 16, 3)
    head, hands, mask = window_inputs(hand_dim=3)
    tokens, attention = imputer.tokenize_inputs(layout, head, hands, mask)
    assert tokens.shape == (2, 3 * WINDOW, 16)
    assert attention[:, :WINDOW].all()
    with pytest.raises(ShapeError):
        imputer.tokenize_inputs(layout, head[:, :-1], hands, mask)


def test_members_differ_by_seed():
    ensemble = imputer.ImputerEnsemble(tiny_config(), 9)
    first, second = ensemble.members[0], ensemble.members[1]
    assert not torch.equal(first.mean_head.weight, second.mean_head.weight)
    again = imputer.ImputerEnsemble(tiny_config(), 9)
    torch.testing.assert_close(first.mean_head.weight, again.members[0].mean_head.weight)


def test_impute_windows_trusts_detections():
    ensemble = imputer.ImputerEnsemble(tiny_config(), 9, noise_sigma=0.05)
    head, hands, mask = (value.double().numpy() for value in window_inputs())
    mask = mask.astype(bool)
    mean, uncertainty = imputer.impute_windows(ensemble, head, hands, mask)
    np.testing.assert_allclose(mean[mask], hands[mask], atol=1e-6)
    for kind in enums.UncertaintyKind:
        assert np.all(uncertainty[kind] >= 0)
        np.testing.assert_allclose(uncertainty[kind][mask][:, 0], 0.05**2, rtol=1e-5)


def test_interpolate_baseline():
    hands = np.zeros((5, 2, 3))
    hands[0, 0], hands[4, 0] = 1.0, 5.0
    mask = np.zeros((5, 2), dtype=bool)
    mask[[0, 4], 0] = True
    dense = imputer.interpolate_baseline(hands, mask)
    np.testing.assert_allclose(dense[:, 0, 0], [1.0, 2.0, 3.0, 4.0, 5.0])
    np.testing.assert_array_equal(dense[:, 1], 0.0)


def test_ensemble_checkpoint_round_trip(tmp_path):
    ensemble = imputer.ImputerEnsemble(tiny_config(), 9, noise_sigma=0.02)
    ensemble.history = [[1.0], [2.0], [3.0]]
    imputer.save_imputer(ensemble, tmp_path, {"seed": 0})
    loaded = imputer.load_imputer(tmp_path)
    head, hands, mask = (value.double().numpy() for value in window_inputs(seed=4))
    first = imputer.impute_windows(ensemble, head, hands, mask)
    second = imputer.impute_windows(loaded, head, hands, mask)
    np.testing.assert_allclose(first[0], second[0], atol=1e-6)


def test_mae_forward_runs_embedded_tokens():
    member = imputer.MaskedAutoencoder(tiny_config(), 9).eval()
    head, hands, mask = window_inputs()
    with torch.no_grad():
        mu, variance = imputer.mae_forward(member, *imputer.tokenize_inputs(member.layout, head, hands, mask))
        expected = member(head, hands, mask)
    torch.testing.assert_close(mu, expected[0])
    torch.testing.assert_close(variance, expected[1])


def test_estimate_uncertainty_selects_the_kind():
    ensemble = imputer.ImputerEnsemble(tiny_config(), 9).eval()
    head, hands, mask = window_inputs()
    with torch.no_grad():
        mean, total = imputer.estimate_uncertainty(ensemble, head, hands, mask, enums.UncertaintyKind.total)
        _, aleatoric = imputer.estimate_uncertainty(ensemble, head, hands, mask, enums.UncertaintyKind.aleatoric)
        _, epistemic = imputer.estimate_uncertainty(ensemble, head, hands, mask, enums.UncertaintyKind.epistemic)
    assert mean.shape == total.shape == (2, WINDOW, 2, 9)
    assert torch.all(epistemic >= 0)
    torch.testing.assert_close(total, aleatoric + epistemic)


def test_estimate_uncertainty_single_member():
    ensemble = imputer.ImputerEnsemble(tiny_config(members=1), 9).eval()
    with torch.no_grad():
        _, epistemic = imputer.estimate_uncertainty(ensemble, *window_inputs(), enums.UncertaintyKind.epistemic)
    assert torch.all(epistemic == 0)


def test_impute_trajectory_keeps_visibility():
    ensemble = imputer.ImputerEnsemble(tiny_config(), 9, noise_sigma=0.05)
    head, hands, mask = (value[0].double().numpy() for value in window_inputs())
    mask = mask.astype(bool)
    trajectory = imputer.impute_trajectory(ensemble, head, hands, mask, enums.UncertaintyKind.epistemic)
    assert trajectory.kind == enums.UncertaintyKind.epistemic
    assert trajectory.mean.shape == trajectory.uncertainty.shape == (WINDOW, 2, 9)
    np.testing.assert_array_equal(trajectory.visibility, mask)
    np.testing.assert_allclose(trajectory.mean[mask], hands[mask], atol=1e-6)
    np.testing.assert_allclose(trajectory.uncertainty[mask][:, 0], 0.05**2, rtol=1e-5)
