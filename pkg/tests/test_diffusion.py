import numpy as np
import pytest
import torch

from pyegopose.modules import models
from pyegopose.modules.exceptions import DomainError, InconsistentPair, ScheduleError
from pyegopose.networks import diffusion


def linear_schedule(steps: int, size: int) -> diffusion.TransitionSchedule:
    return diffusion.build_transition_schedule(steps, size, models.ScheduleConfig())


@pytest.mark.parametrize("size", [2, 5, 10])
def test_matrices_are_column_stochastic(size):
    schedule = linear_schedule(50, size)
    for t in range(1, schedule.steps + 1):
        for matrix in (diffusion.transition_matrix(schedule, t), diffusion.cumulative_matrix(schedule, t)):
            assert np.all(matrix >= 0)
            np.testing.assert_allclose(matrix.sum(axis=0), 1.0, atol=1e-12)


@pytest.mark.parametrize("size", [2, 5, 10])
def test_cumulative_matches_matrix_products(size):
    schedule = linear_schedule(50, size)
    product = np.eye(size + 1)
    for t in range(1, schedule.steps + 1):
        product = diffusion.transition_matrix(schedule, t) @ product
        np.testing.assert_allclose(product, diffusion.cumulative_matrix(schedule, t), atol=1e-10)


def test_explicit_schedule_matches_products():
    betas, gammas = [0.01, 0.05, 0.1], [0.1, 0.2, 0.3]
    schedule = diffusion.schedule_from_steps(betas, gammas, 4)
    product = np.eye(5)
    for t in range(1, 4):
        product = diffusion.transition_matrix(schedule, t) @ product
    np.testing.assert_allclose(product, diffusion.cumulative_matrix(schedule, 3), atol=1e-12)
    assert schedule.manifest()["betas"] == pytest.approx(betas)


def test_mask_is_absorbing():
    schedule = linear_schedule(10, 5)
    for t in range(1, 11):
        column = diffusion.transition_matrix(schedule, t)[:, 5]
        np.testing.assert_array_equal(column, np.eye(6)[5])


def test_composed_step_matches_products():
    schedule = linear_schedule(20, 3)
    composed = diffusion._matrix(3, *schedule.step(12, 4))
    product = np.eye(4)
    for t in range(5, 13):
        product = diffusion.transition_matrix(schedule, t) @ product
    np.testing.assert_allclose(composed, product, atol=1e-10)


def test_explicit_schedule_rejects_non_positive_keep():
    with pytest.raises(ScheduleError):
        diffusion.schedule_from_steps([0.3], [0.2], 3)


def test_explicit_config_needs_every_step():
    config = models.ScheduleConfig(kind="explicit", betas=[0.01], gammas=[0.1])
    with pytest.raises(ScheduleError):
        diffusion.build_transition_schedule(2, 4, config)


def test_step_outside_range():
    schedule = linear_schedule(5, 3)
    with pytest.raises(DomainError):
        schedule.step(6)
    with pytest.raises(DomainError):
        schedule.cumulative(-1)


def test_forward_corrupt_at_zero_is_identity():
    schedule = linear_schedule(10, 6)
    z0 = torch.randint(0, 6, (4, 12), generator=torch.Generator().manual_seed(0))
    torch.testing.assert_close(diffusion.forward_corrupt(z0, 0, schedule), z0)


def test_forward_corrupt_at_last_step_masks_everything():
    schedule = linear_schedule(10, 6)
    z0 = torch.randint(0, 6, (4, 64), generator=torch.Generator().manual_seed(0))
    zt = diffusion.forward_corrupt(z0, 10, schedule, torch.Generator().manual_seed(1))
    assert torch.all(zt == 6)


def test_forward_corrupt_frequencies():
    size, t = 4, 3
    schedule = diffusion.schedule_from_steps([0.02] * 5, [0.1] * 5, size)
    z0 = torch.zeros(200_000, dtype=torch.long)
    zt = diffusion.forward_corrupt(z0, t, schedule, torch.Generator().manual_seed(2))
    expected = diffusion.cumulative_matrix(schedule, t)[:, 0]
    observed = torch.bincount(zt, minlength=size + 1).double().numpy() / z0.numel()
    np.testing.assert_allclose(observed, expected, atol=5e-3)


def test_forward_corrupt_rejects_bad_tokens():
    schedule = linear_schedule(4, 3)
    with pytest.raises(DomainError):
        diffusion.forward_corrupt(torch.tensor([[0, 3]]), 1, schedule)
    with pytest.raises(DomainError):
        diffusion.forward_corrupt(torch.tensor([[0, 1]]), 5, schedule)


def test_posterior_is_normalized_and_matches_bayes():
    size = 4
    schedule = linear_schedule(10, size)
    noisy, clean = np.meshgrid(np.arange(size + 1), np.arange(size), indexing="ij")
    noisy, clean = noisy.reshape(-1), clean.reshape(-1)
    for t in range(1, schedule.steps + 1):
        step = diffusion.transition_matrix(schedule, t)
        prior = diffusion.cumulative_matrix(schedule, t - 1)
        reachable = diffusion.cumulative_matrix(schedule, t)[noisy, clean] > 0
        posterior = diffusion.posterior_distribution(
            torch.as_tensor(noisy[reachable]), torch.as_tensor(clean[reachable]), t, schedule
        ).numpy()
        np.testing.assert_allclose(posterior.sum(-1), 1.0, atol=1e-10)
        for row, (target, source) in enumerate(zip(noisy[reachable], clean[reachable])):
            bayes = step[target, :] * prior[:, source]
            np.testing.assert_allclose(posterior[row], bayes / bayes.sum(), atol=1e-10)
        for target, source in zip(noisy[~reachable], clean[~reachable]):
            with pytest.raises(InconsistentPair):
                diffusion.posterior_distribution(torch.tensor([target]), torch.tensor([source]), t, schedule)


def test_posterior_at_first_step_is_the_clean_token():
    schedule = linear_schedule(10, 4)
    z0 = torch.tensor([0, 1, 2, 3])
    zt = diffusion.forward_corrupt(z0, 1, schedule, torch.Generator().manual_seed(0))
    posterior = diffusion.posterior_distribution(zt, z0, 1, schedule)
    np.testing.assert_allclose(posterior.numpy(), np.eye(5)[z0.numpy()], atol=1e-8)


def test_posterior_rejects_unreachable_pair():
    schedule = diffusion.schedule_from_steps([0.0, 0.0], [0.0, 0.0], 3)
    with pytest.raises(InconsistentPair):
        diffusion.posterior_distribution(torch.tensor([1]), torch.tensor([0]), 2, schedule)


def test_chapman_kolmogorov_marginal():
    size = 3
    schedule = linear_schedule(12, size)
    for t in (3, 8, 12):
        prior = diffusion.cumulative_matrix(schedule, t - 1)
        marginal = diffusion.transition_matrix(schedule, t) @ prior
        np.testing.assert_allclose(marginal, diffusion.cumulative_matrix(schedule, t), atol=1e-10)


def test_reverse_with_point_mass_equals_posterior():
    size = 3
    schedule = linear_schedule(20, size)
    zt = torch.tensor([0, 1, 2, 3])
    for clean in range(size):
        point = torch.nn.functional.one_hot(torch.full((4,), clean), size).double()
        reverse = diffusion.reverse_distribution(point, zt, 10, schedule)
        posterior = diffusion.posterior_distribution(zt, torch.full((4,), clean), 10, schedule)
        np.testing.assert_allclose(reverse.numpy(), posterior.numpy(), atol=1e-10)


def test_reverse_with_uniform_prediction():
    size, t = 3, 6
    schedule = linear_schedule(20, size)
    zt = torch.tensor([0, 3])
    uniform = torch.full((2, size), 1 / size, dtype=torch.float64)
    reverse = diffusion.reverse_distribution(uniform, zt, t, schedule)
    step = diffusion.transition_matrix(schedule, t)
    prior = diffusion.cumulative_matrix(schedule, t - 1)
    evidence = diffusion.cumulative_matrix(schedule, t)
    for row, noisy in enumerate(zt.tolist()):
        expected = sum(
            step[noisy, :] * prior[:, clean] / evidence[noisy, clean] / size for clean in range(size)
        )
        np.testing.assert_allclose(reverse[row].numpy(), expected / expected.sum(), atol=1e-10)


def test_reverse_to_step_zero_never_masks():
    schedule = linear_schedule(10, 4)
    probabilities = torch.softmax(torch.randn(6, 4, generator=torch.Generator().manual_seed(4)), -1)
    zt = torch.tensor([4, 4, 0, 1, 2, 3])
    reverse = diffusion.reverse_distribution(probabilities, zt, 3, schedule, s=0)
    np.testing.assert_allclose(reverse[:, 4].numpy(), 0.0, atol=1e-12)
    np.testing.assert_allclose(reverse.sum(-1).numpy(), 1.0, atol=1e-10)


def test_categorical_sample_is_reproducible():
    probabilities = torch.softmax(torch.randn(3, 5, 7, generator=torch.Generator().manual_seed(0)), -1)
    first = diffusion.categorical_sample(probabilities, torch.Generator().manual_seed(9))
    second = diffusion.categorical_sample(probabilities, torch.Generator().manual_seed(9))
    torch.testing.assert_close(first, second)


def test_categorical_sample_respects_zero_mass():
    probabilities = torch.tensor([[0.0, 1.0, 0.0]] * 50)
    assert torch.all(diffusion.categorical_sample(probabilities, torch.Generator().manual_seed(1)) == 1)


def test_step_grid():
    assert diffusion.step_grid(100, 20) == list(range(100, 0, -5))
    assert diffusion.step_grid(10, None) == list(range(10, 0, -1))
    with pytest.warns(diffusion.StepGridWarning):
        assert diffusion.step_grid(10, 3) == list(range(10, 0, -1))


class UniformModel(torch.nn.Module):
    """Predicts a fixed clean-token distribution for every position."""

    def __init__(self, size: int):
        super().__init__()
        self.logits = torch.nn.Parameter(torch.zeros(size))

    def forward(self, zt: torch.Tensor, t: torch.Tensor, **_) -> torch.Tensor:
        return torch.log_softmax(self.logits, -1).expand(zt.shape + (self.logits.shape[0],))


def test_sample_tokens_returns_codebook_tokens():
    schedule = linear_schedule(8, 5)
    tokens = diffusion.sample_tokens(UniformModel(5), {}, schedule, (3, 6), 4, torch.Generator().manual_seed(0))
    assert tokens.shape == (3, 6)
    assert tokens.min() >= 0 and tokens.max() < 5


def test_sample_tokens_per_group_generators_are_independent():
    schedule = linear_schedule(8, 5)
    model = UniformModel(5)
    alone = diffusion.sample_tokens(model, {}, schedule, (2, 6), None, [torch.Generator().manual_seed(5)])
    paired = diffusion.sample_tokens(
        model, {}, schedule, (4, 6), None, [torch.Generator().manual_seed(5), torch.Generator().manual_seed(6)]
    )
    torch.testing.assert_close(paired[:2], alone)


def test_leftover_masks_are_sampled_from_the_prediction(monkeypatch):
    monkeypatch.setattr(diffusion, "reverse_step", lambda zt, *args, **kwargs: zt)
    schedule = linear_schedule(4, 5)
    model = UniformModel(5)
    first = diffusion.sample_tokens(model, {}, schedule, (2, 64), None, torch.Generator().manual_seed(1))
    again = diffusion.sample_tokens(model, {}, schedule, (2, 64), None, torch.Generator().manual_seed(1))
    torch.testing.assert_close(first, again)
    assert first.max() < 5
    assert len(torch.unique(first)) == 5


def test_vlb_loss_is_finite_and_non_negative():
    size = 4
    schedule = linear_schedule(10, size)
    generator = torch.Generator().manual_seed(0)
    z0 = torch.randint(0, size, (3, 5), generator=generator)
    t = torch.tensor([1, 5, 10])
    zt = torch.stack([diffusion.forward_corrupt(z0[i], int(t[i]), schedule, generator) for i in range(3)])
    log_probabilities = torch.log_softmax(torch.randn(3, 5, size, generator=generator), -1)
    loss, parts = diffusion.vlb_loss(log_probabilities, zt, z0, t, schedule, 1e-3)
    assert torch.isfinite(loss)
    assert parts["vlb"] >= -1e-9
    assert parts["denoise"] > 0
