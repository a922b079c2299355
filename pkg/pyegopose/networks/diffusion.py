import logging
import warnings
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, model_validator

from pyegopose.modules import enums
from pyegopose.modules.exceptions import DomainError, InconsistentPair, ScheduleError
from pyegopose.modules.models import ScheduleConfig

LOGGER = logging.getLogger("pyegopose")
PROBABILITY_TOLERANCE = 1e-12
LOG_FLOOR = 1e-30


class StepGridWarning(Warning):
    """Warning raised when the inference step count is replaced to fit the step grid.

    >>> StepGridWarning

    """


class TransitionSchedule(BaseModel):
    """Per-step and cumulative mask-and-replace probabilities, indexed by step with index 0 as identity.

    >>> TransitionSchedule

    See Also:
        - A token keeps its value with probability ``alpha + beta``.
        - It moves to each other codebook token with probability ``beta``.
        - It becomes the MASK token, index ``K``, with probability ``gamma``; MASK is absorbing.
    """

    steps: int
    codebook_size: int
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    gamma_bar: np.ndarray

    @model_validator(mode="after")
    def probabilities(self) -> "TransitionSchedule":
        """Validates the probability constraints of every step."""
        for name in ("alpha", "beta", "gamma", "alpha_bar", "beta_bar", "gamma_bar"):
            if getattr(self, name).shape != (self.steps + 1,):
                raise ScheduleError(f"{name} must hold {self.steps + 1} entries")
        if np.any(self.alpha[1:] <= 0) or np.any(self.alpha > 1 + PROBABILITY_TOLERANCE):
            raise ScheduleError("alpha_t must lie in (0, 1]")
        if np.any(self.beta < 0) or np.any(self.gamma < 0) or np.any(self.gamma[1:] >= 1):
            raise ScheduleError("beta_t and gamma_t must be non-negative with gamma_t < 1")
        return self

    def step(self, t: int, s: int | None = None) -> Tuple[float, float, float]:
        """(alpha, beta, gamma) of the composed transition from step ``s`` to step ``t``, ``s = t - 1`` by default."""
        s = t - 1 if s is None else s
        if not 0 <= s < t <= self.steps:
            raise DomainError(f"step pair ({t}, {s}) outside [0, {self.steps}]")
        if s == t - 1:
            return float(self.alpha[t]), float(self.beta[t]), float(self.gamma[t])
        alpha = self.alpha_bar[t] / self.alpha_bar[s]
        gamma = 1 - (1 - self.gamma_bar[t]) / (1 - self.gamma_bar[s])
        return float(alpha), float((1 - alpha - gamma) / self.codebook_size), float(gamma)

    def cumulative(self, t: int) -> Tuple[float, float, float]:
        """(alpha_bar, beta_bar, gamma_bar) at step ``t``."""
        if not 0 <= t <= self.steps:
            raise DomainError(f"step {t} outside [0, {self.steps}]")
        return float(self.alpha_bar[t]), float(self.beta_bar[t]), float(self.gamma_bar[t])

    def manifest(self) -> Dict[str, Any]:
        """JSON form stored with the denoiser checkpoint."""
        return {
            "steps": self.steps,
            "codebook_size": self.codebook_size,
            "betas": self.beta[1:].tolist(),
            "gammas": self.gamma[1:].tolist(),
        }

    class Config:
        """Configuration for transition schedule."""

        arbitrary_types_allowed = True


def schedule_from_steps(betas: Sequence[float], gammas: Sequence[float], codebook_size: int) -> TransitionSchedule:
    """Builds the cumulative quantities from per-step replace and mask probabilities.

    Raises:
        ScheduleError:
        If any step leaves a non-positive keep probability.
    """
    beta = np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)])
    gamma = np.concatenate([[0.0], np.asarray(gammas, dtype=np.float64)])
    if beta.shape != gamma.shape:
        raise ScheduleError(f"{len(betas)} betas against {len(gammas)} gammas")
    alpha = 1 - codebook_size * beta - gamma
    if np.any(alpha <= 0):
        raise ScheduleError(f"alpha_t <= 0 at steps {np.flatnonzero(alpha <= 0).tolist()}")
    alpha_bar = np.cumprod(alpha)
    gamma_bar = 1 - np.cumprod(1 - gamma)
    beta_bar = (1 - alpha_bar - gamma_bar) / codebook_size
    return TransitionSchedule(
        steps=len(betas),
        codebook_size=codebook_size,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        alpha_bar=alpha_bar,
        beta_bar=beta_bar,
        gamma_bar=gamma_bar,
    )


def build_transition_schedule(steps: int, codebook_size: int, config: ScheduleConfig) -> TransitionSchedule:
    """Transition schedule of ``steps`` steps over a codebook of ``codebook_size`` tokens.

    Args:
        steps: Number of diffusion steps.
        codebook_size: Number of codebook tokens, excluding MASK.
        config: Linear cumulative ramps, or explicit per-step probabilities.

    Returns:
        TransitionSchedule:
        Validated schedule.

    Raises:
        ScheduleError:
        If the ramps or explicit values violate the probability constraints.
    """
    if steps < 1 or codebook_size < 2:
        raise ScheduleError(f"need steps >= 1 and codebook size >= 2, received {steps} and {codebook_size}")
    if config.kind == enums.ScheduleKind.explicit:
        if len(config.betas) != steps or len(config.gammas) != steps:
            raise ScheduleError(f"explicit schedule needs {steps} betas and gammas")
        return schedule_from_steps(config.betas, config.gammas, codebook_size)
    alpha_bar = np.concatenate([[1.0], np.linspace(config.alpha_bar_start, config.alpha_bar_end, steps)])
    gamma_bar = np.concatenate([[0.0], np.linspace(config.gamma_bar_start, config.gamma_bar_end, steps)])
    alpha = alpha_bar[1:] / alpha_bar[:-1]
    gamma = 1 - (1 - gamma_bar[1:]) / (1 - gamma_bar[:-1])
    beta = (1 - alpha - gamma) / codebook_size
    if np.any(beta < -PROBABILITY_TOLERANCE):
        raise ScheduleError("cumulative ramps imply a negative replacement probability")
    if np.any(alpha <= 0):
        raise ScheduleError("cumulative ramps imply a non-positive keep probability")
    return TransitionSchedule(
        steps=steps,
        codebook_size=codebook_size,
        alpha=np.concatenate([[1.0], alpha]),
        beta=np.concatenate([[0.0], np.clip(beta, 0, None)]),
        gamma=np.concatenate([[0.0], gamma]),
        alpha_bar=alpha_bar,
        beta_bar=np.clip((1 - alpha_bar - gamma_bar) / codebook_size, 0, None),
        gamma_bar=gamma_bar,
    )


def _matrix(codebook_size: int, alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Column-stochastic (K + 1) x (K + 1) matrix; entry [i, j] is the probability of moving to i from j."""
    matrix = np.full((codebook_size + 1, codebook_size + 1), beta)
    matrix[np.arange(codebook_size), np.arange(codebook_size)] = alpha + beta
    matrix[codebook_size, :] = gamma
    matrix[:, codebook_size] = 0.0
    matrix[codebook_size, codebook_size] = 1.0
    return matrix


def transition_matrix(schedule: TransitionSchedule, t: int) -> np.ndarray:
    """One-step matrix from step ``t - 1`` to ``t``."""
    return _matrix(schedule.codebook_size, *schedule.step(t))


def cumulative_matrix(schedule: TransitionSchedule, t: int) -> np.ndarray:
    """Cumulative matrix from step 0 to ``t``."""
    return _matrix(schedule.codebook_size, *schedule.cumulative(t))


def _validate_step(schedule: TransitionSchedule, t: torch.Tensor) -> None:
    """Steps must lie in [0, T]."""
    if torch.any(t < 0) or torch.any(t > schedule.steps):
        raise DomainError(f"diffusion step outside [0, {schedule.steps}]")


def forward_corrupt(
    z0: torch.Tensor,
    t: int | torch.Tensor,
    schedule: TransitionSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Samples ``z_t`` from ``q(z_t | z_0)`` token by token.

    Args:
        z0: Clean tokens in [0, K), shape (B, T) or (T,).
        t: Step per sequence, scalar or shape (B,); step 0 returns ``z0``.
        schedule: Transition schedule.
        generator: Random source.

    Returns:
        torch.Tensor:
        Corrupted tokens; MASK is ``K``.

    Raises:
        DomainError:
        If a step lies outside [0, T] or a token outside [0, K).
    """
    size = schedule.codebook_size
    if z0.numel() and (z0.min() < 0 or z0.max() >= size):
        raise DomainError(f"clean tokens must lie in [0, {size})")
    t = torch.as_tensor(t, dtype=torch.long).cpu()
    _validate_step(schedule, t)
    t = t.expand(z0.shape[:1]) if t.ndim == 0 and z0.ndim > 1 else t
    shape = (-1,) + (1,) * (z0.ndim - 1) if t.ndim else ()
    alpha_bar = torch.from_numpy(schedule.alpha_bar)[t].reshape(shape)
    gamma_bar = torch.from_numpy(schedule.gamma_bar)[t].reshape(shape)
    beta_bar = torch.from_numpy(schedule.beta_bar)[t].reshape(shape)
    clean = z0.cpu()
    draw = torch.rand(clean.shape, generator=generator, dtype=torch.float64)
    replacement = torch.randint(0, size, clean.shape, generator=generator)
    masked = draw < gamma_bar
    replaced = ~masked & (draw < gamma_bar + size * beta_bar)
    zt = torch.where(replaced, replacement, clean)
    return torch.where(masked, torch.full_like(clean, size), zt).to(z0.device)


def _forward_likelihood(
    zt: torch.Tensor, alpha: float, beta: float, gamma: float, size: int
) -> torch.Tensor:
    """q(z_t | z_s = k) for every source k in [0, K], shape (..., K + 1)."""
    codes = torch.arange(size + 1, device=zt.device)
    is_mask = (zt == size)[..., None]
    source_mask = codes == size
    same = (codes == zt[..., None]).double()
    unmasked = torch.where(source_mask, torch.zeros((), dtype=torch.float64), alpha * same + beta)
    masked = torch.where(source_mask, torch.ones((), dtype=torch.float64), torch.full((), gamma, dtype=torch.float64))
    return torch.where(is_mask, masked, unmasked)


def _cumulative_prior(probabilities: torch.Tensor, alpha_bar: float, beta_bar: float, gamma_bar: float) -> torch.Tensor:
    """Distribution over [0, K] of ``z_s`` given a distribution over clean tokens (..., K)."""
    codes = alpha_bar * probabilities + beta_bar * probabilities.sum(-1, keepdim=True)
    return torch.cat([codes, gamma_bar * probabilities.sum(-1, keepdim=True)], dim=-1)


def posterior_distribution(
    zt: torch.Tensor, z0: torch.Tensor, t: int, schedule: TransitionSchedule, s: int | None = None
) -> torch.Tensor:
    """Closed-form ``q(z_s | z_t, z_0)`` over K + 1 outcomes, ``s = t - 1`` by default.

    Args:
        zt: Noisy tokens in [0, K].
        z0: Clean tokens in [0, K), same shape.
        t: Step of ``zt``, at least 1.
        schedule: Transition schedule.
        s: Earlier step, defaults to ``t - 1``.

    Returns:
        torch.Tensor:
        Float64 probabilities of shape ``zt.shape + (K + 1,)``.

    Raises:
        InconsistentPair:
        If ``q(z_t | z_0)`` is zero for some token.
    """
    size = schedule.codebook_size
    s = t - 1 if s is None else s
    step = schedule.step(t, s)
    alpha_bar_t, beta_bar_t, gamma_bar_t = schedule.cumulative(t)
    if z0.numel() and (z0.min() < 0 or z0.max() >= size):
        raise DomainError(f"clean tokens must lie in [0, {size})")
    evidence = torch.where(
        zt == size,
        torch.full(zt.shape, gamma_bar_t, dtype=torch.float64, device=zt.device),
        alpha_bar_t * (zt == z0).double() + beta_bar_t,
    )
    if torch.any(evidence <= 0):
        raise InconsistentPair(f"z_t unreachable from z_0 at step {t}")
    onehot = torch.nn.functional.one_hot(z0, size).double()
    numerator = _forward_likelihood(zt, *step, size) * _cumulative_prior(onehot, *schedule.cumulative(s))
    return numerator / evidence[..., None]


def reverse_distribution(
    probabilities: torch.Tensor, zt: torch.Tensor, t: int, schedule: TransitionSchedule, s: int | None = None
) -> torch.Tensor:
    """Model reverse distribution, the posterior marginalized over the predicted clean tokens.

    Args:
        probabilities: Predicted clean-token distribution (..., K).
        zt: Noisy tokens in [0, K].
        t: Step of ``zt``.
        schedule: Transition schedule.
        s: Earlier step, defaults to ``t - 1``.

    Returns:
        torch.Tensor:
        Float64 probabilities over K + 1 outcomes; at ``s = 0`` MASK has zero mass.
    """
    size = schedule.codebook_size
    s = t - 1 if s is None else s
    alpha_bar_t, beta_bar_t, gamma_bar_t = schedule.cumulative(t)
    probabilities = probabilities.double()
    codes = torch.arange(size, device=zt.device)
    evidence = torch.where(
        (zt == size)[..., None],
        torch.full((), gamma_bar_t, dtype=torch.float64, device=zt.device),
        alpha_bar_t * (codes == zt[..., None]).double() + beta_bar_t,
    )
    weights = probabilities / evidence.clamp_min(LOG_FLOOR)
    weights = torch.where(evidence > 0, weights, torch.zeros_like(weights))
    mixture = _forward_likelihood(zt, *schedule.step(t, s), size) * _cumulative_prior(
        weights, *schedule.cumulative(s)
    )
    return mixture / mixture.sum(-1, keepdim=True).clamp_min(LOG_FLOOR)


def categorical_sample(
    probabilities: torch.Tensor, generators: torch.Generator | List[torch.Generator] | None = None
) -> torch.Tensor:
    """Gumbel-max draw from probabilities (B, ..., C); a list of generators splits the batch into equal groups."""
    if isinstance(generators, list):
        rows = probabilities.shape[0] // len(generators)
        noise = torch.cat(
            [
                torch.rand((rows,) + probabilities.shape[1:], generator=generator, dtype=torch.float64)
                for generator in generators
            ]
        )
    else:
        noise = torch.rand(probabilities.shape, generator=generators, dtype=torch.float64)
    gumbel = -torch.log(-torch.log(noise.clamp(LOG_FLOOR, 1 - 1e-16)))
    logits = torch.log(probabilities.double().clamp_min(0)).to(noise.device) + gumbel
    return logits.argmax(dim=-1).to(probabilities.device)


def reverse_step(
    zt: torch.Tensor,
    t: int,
    condition: Dict[str, torch.Tensor],
    model: torch.nn.Module,
    schedule: TransitionSchedule,
    generators: torch.Generator | List[torch.Generator] | None = None,
    s: int | None = None,
) -> torch.Tensor:
    """Samples ``z_s`` from the model reverse distribution given ``z_t``."""
    steps = torch.full(zt.shape[:1], t, dtype=torch.long, device=zt.device)
    log_probabilities = model(zt, steps, **condition)
    return categorical_sample(reverse_distribution(log_probabilities.exp(), zt, t, schedule, s), generators)


def step_grid(steps: int, inference_steps: int | None) -> List[int]:
    """Descending evenly strided steps ending at the first step."""
    inference_steps = inference_steps or steps
    if inference_steps > steps or steps % inference_steps:
        warnings.warn(
            f"{inference_steps} inference steps do not divide {steps}; using the full chain",
            StepGridWarning,
        )
        inference_steps = steps
    stride = steps // inference_steps
    return list(range(steps, 0, -stride))


@torch.no_grad()
def sample_tokens(
    model: torch.nn.Module,
    condition: Dict[str, torch.Tensor],
    schedule: TransitionSchedule,
    shape: Tuple[int, int],
    inference_steps: int | None = None,
    generators: torch.Generator | List[torch.Generator] | None = None,
) -> torch.Tensor:
    """Runs the reverse chain from an all-MASK sequence.

    Args:
        model: Denoiser returning clean-token log-probabilities.
        condition: Keyword tensors forwarded to the model.
        schedule: Transition schedule.
        shape: (batch, window).
        inference_steps: Number of strided reverse steps; must divide the schedule steps.
        generators: Random source, or one per equal batch group.

    Returns:
        torch.Tensor:
        Tokens in [0, K) of the given shape.
    """
    model.eval()
    device = next(model.parameters()).device
    size = schedule.codebook_size
    zt = torch.full(shape, size, dtype=torch.long, device=device)
    grid = step_grid(schedule.steps, inference_steps)
    stride = grid[0] - grid[1] if len(grid) > 1 else schedule.steps
    for t in grid:
        zt = reverse_step(zt, t, condition, model, schedule, generators, s=t - stride)
    if torch.any(zt == size):
        steps = torch.ones(shape[0], dtype=torch.long, device=device)
        fallback = categorical_sample(model(zt, steps, **condition).exp(), generators)
        zt = torch.where(zt == size, fallback, zt)
    return zt


def vlb_loss(
    log_probabilities: torch.Tensor,
    zt: torch.Tensor,
    z0: torch.Tensor,
    t: torch.Tensor,
    schedule: TransitionSchedule,
    denoise_weight: float,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Variational bound plus the weighted clean-token likelihood of a batch.

    Args:
        log_probabilities: Predicted clean-token log-probabilities (B, T, K).
        zt: Noisy tokens (B, T).
        z0: Clean tokens (B, T).
        t: Step of each sequence (B,), in [1, T].
        schedule: Transition schedule.
        denoise_weight: Weight of the clean-token negative log-likelihood.

    Returns:
        Tuple[torch.Tensor, Dict[str, float]]:
        Scalar loss and the unweighted components.
    """
    nll = -log_probabilities.gather(-1, z0[..., None])[..., 0].double()
    bound = []
    for index, step in enumerate(t.tolist()):
        if step == 1:
            bound.append(nll[index].mean())
            continue
        target = posterior_distribution(zt[index], z0[index], step, schedule)
        predicted = reverse_distribution(log_probabilities[index].exp(), zt[index], step, schedule)
        kl = torch.xlogy(target, target) - target * torch.log(predicted.clamp_min(LOG_FLOOR))
        bound.append(kl.sum(-1).mean())
    bound = torch.stack(bound).mean()
    denoise = nll.mean()
    return (bound + denoise_weight * denoise).float(), {"vlb": bound.item(), "denoise": denoise.item()}
