import logging
import pathlib
from typing import Any, Dict, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from pyegopose.executors import container
from pyegopose.features import guidance
from pyegopose.modules import enums
from pyegopose.modules.exceptions import ConfigError, raise_shape_error
from pyegopose.modules.models import HEAD_DIM, DiffusionConfig, ScheduleConfig
from pyegopose.modules.structures import DatasetSplit
from pyegopose.networks import diffusion, imputer, tokenizer
from pyegopose.networks.layers import (
    AdaLNBlock,
    FeatureNormalizer,
    RelativePositionBias,
    TimestepEmbedder,
    modulate,
)

LOGGER = logging.getLogger("pyegopose")


class ConditionEmbedder(nn.Module):
    """Per-frame embedding of the head signal, the guided hands and optionally their uncertainty.

    >>> ConditionEmbedder

    """

    def __init__(self, d_model: int, hand_dim: int, distribution: bool, head_dim: int = HEAD_DIM):
        """Instantiates the embeddings.

        Args:
            d_model: Token dimension; each embedding is half of it wide.
            hand_dim: Per-hand state dimension.
            distribution: Adds the uncertainty embedding used by the distribution strategy.
            head_dim: Head feature dimension.
        """
        super().__init__()
        self.half = d_model // 2
        self.head = nn.Linear(head_dim, self.half)
        self.hands = nn.Linear(2 * hand_dim, self.half)
        self.uncertainty = nn.Linear(2 * hand_dim, self.half) if distribution else None

    @property
    def width(self) -> int:
        """Output feature width."""
        return self.half * (3 if self.uncertainty is not None else 2)

    def forward(
        self, head: torch.Tensor, hands: torch.Tensor, uncertainty: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Features (B, T, width) of normalized inputs."""
        features = [self.head(head), self.hands(hands.flatten(-2))]
        if self.uncertainty is not None:
            if uncertainty is None:
                uncertainty = torch.zeros_like(hands)
            features.append(self.uncertainty(uncertainty.flatten(-2)))
        return torch.cat(features, dim=-1)


class MotionDenoiser(nn.Module):
    """Transformer predicting clean tokens from noisy tokens, the diffusion step and the condition.

    >>> MotionDenoiser

    """

    def __init__(
        self, config: DiffusionConfig, codebook_size: int, window: int, hand_dim: int, distribution: bool = False
    ):
        """Instantiates the denoiser.

        Args:
            config: Architecture settings.
            codebook_size: Number of codebook tokens; the embedding has an extra MASK row.
            window: Tokens per window.
            hand_dim: Per-hand state dimension.
            distribution: Whether the condition carries the hand uncertainty.
        """
        super().__init__()
        d_model = config.d_model
        self.config = config
        self.codebook_size = codebook_size
        self.window = window
        self.hand_dim = hand_dim
        self.distribution = distribution
        self.token_embed = nn.Embedding(codebook_size + 1, d_model)
        self.condition = ConditionEmbedder(d_model, hand_dim, distribution)
        self.input_proj = nn.Linear(d_model + self.condition.width, d_model)
        self.step_embed = TimestepEmbedder(d_model)
        self.relative_bias = RelativePositionBias(config.heads, window)
        self.blocks = nn.ModuleList(AdaLNBlock(d_model, config.heads, config.ff_mult) for _ in range(config.layers))
        self.final_norm = nn.LayerNorm(d_model, elementwise_affine=False)
        self.final_adaln = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 2 * d_model))
        self.output = nn.Linear(d_model, codebook_size)
        self.head_norm = FeatureNormalizer(HEAD_DIM)
        self.hand_norm = FeatureNormalizer(hand_dim)
        self.history: List[float] = []

    def forward(
        self,
        zt: torch.Tensor,
        t: torch.Tensor,
        head: torch.Tensor,
        hands: torch.Tensor,
        uncertainty: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Clean-token log-probabilities (B, T, K).

        Args:
            zt: Noisy tokens (B, T) in [0, K].
            t: Diffusion step of each sequence (B,).
            head: Normalized head features (B, T, D_head).
            hands: Normalized guided hands (B, T, 2, D_hand).
            uncertainty: Normalized hand uncertainty, used by the distribution strategy.

        Raises:
            ShapeError:
            If the token and condition lengths differ.
        """
        if head.shape[:2] != zt.shape or hands.shape[:2] != zt.shape:
            raise_shape_error("condition", tuple(zt.shape), (tuple(head.shape[:2]), tuple(hands.shape[:2])))
        x = torch.cat([self.token_embed(zt), self.condition(head, hands, uncertainty)], dim=-1)
        x = self.input_proj(x)
        step = self.step_embed(t)
        bias = self.relative_bias(zt.shape[1])
        for block in self.blocks:
            x = block(x, step, bias)
        shift, scale = self.final_adaln(step).chunk(2, dim=-1)
        return F.log_softmax(self.output(modulate(self.final_norm(x), shift, scale)), dim=-1)

    def condition_tensors(
        self, head: np.ndarray, hands: np.ndarray | None, uncertainty: np.ndarray | None = None
    ) -> Dict[str, torch.Tensor]:
        """Normalized condition tensors of canonical windows; absent hands become zeros."""
        device = self.token_embed.weight.device
        head = self.head_norm.normalize(torch.as_tensor(head, dtype=torch.float32, device=device))
        if hands is None:
            normalized = torch.zeros(head.shape[:2] + (2, self.hand_dim), device=device)
        else:
            normalized = self.hand_norm.normalize(torch.as_tensor(hands, dtype=torch.float32, device=device))
        condition = {"head": head, "hands": normalized}
        if self.distribution:
            condition["uncertainty"] = (
                torch.zeros_like(normalized)
                if uncertainty is None or hands is None
                else self.hand_norm.unscale_variance(torch.as_tensor(uncertainty, dtype=torch.float32, device=device))
            )
        return condition


def denoiser_predict_z0(
    model: MotionDenoiser, zt: torch.Tensor, t: torch.Tensor, condition: Dict[str, torch.Tensor]
) -> torch.Tensor:
    """Clean-token log-probabilities of noisy tokens under a condition."""
    return model(zt, t, **condition)


def build_denoiser_windows(
    dataset: DatasetSplit,
    motion_tokenizer: tokenizer.MotionTokenizer,
    ensemble: imputer.ImputerEnsemble,
    config: DiffusionConfig,
    window: int,
) -> Dict[str, np.ndarray]:
    """Clean tokens and imputed conditions of every training window.

    Returns:
        Dict[str, np.ndarray]:
        ``tokens`` (N, T), ``head`` (N, T, D_head), ``mean`` and ``uncertainty`` (N, T, 2, D_hand).
    """
    motion = tokenizer.build_motion_windows(dataset, window, config.window_stride)
    tokens = tokenizer.tokenize_windows(motion_tokenizer, motion)
    arrays = imputer.build_imputer_windows(dataset, window, config.window_stride)
    means, uncertainties = [], []
    for start in range(0, len(tokens), config.batch_size):
        batch = slice(start, start + config.batch_size)
        mean, uncertainty = imputer.impute_windows(
            ensemble, arrays["head"][batch], arrays["hands"][batch], arrays["mask"][batch]
        )
        means.append(mean)
        uncertainties.append(uncertainty[config.train_uncertainty])
    return {
        "tokens": tokens,
        "head": arrays["head"],
        "mean": np.concatenate(means),
        "uncertainty": np.concatenate(uncertainties),
    }


def train_denoiser(
    windows: Dict[str, np.ndarray],
    schedule: diffusion.TransitionSchedule,
    config: DiffusionConfig,
    codebook_size: int,
    progress: bool = True,
    device: str = "cpu",
) -> MotionDenoiser:
    """Trains the denoiser with the variational bound and the weighted clean-token likelihood.

    Args:
        windows: Output of ``build_denoiser_windows``.
        schedule: Transition schedule.
        config: Architecture and training settings.
        codebook_size: Codebook size of the tokenizer that produced the tokens.
        progress: Shows a progress bar.
        device: Torch device.

    Returns:
        MotionDenoiser:
        Trained denoiser with per-epoch losses in ``history``.

    Raises:
        ConfigError:
        If the schedule and the codebook disagree on the number of tokens or no window is given.
    """
    if schedule.codebook_size != codebook_size:
        raise ConfigError(f"schedule built for {schedule.codebook_size} tokens, codebook has {codebook_size}")
    if not len(windows["tokens"]):
        raise ConfigError("cannot train the denoiser without windows")
    count, window = windows["tokens"].shape
    distribution = config.train_strategy == enums.Strategy.dist_embed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = MotionDenoiser(config, codebook_size, window, windows["mean"].shape[-1], distribution)
    model.head_norm.fit(torch.from_numpy(windows["head"]))
    model.hand_norm.fit(torch.from_numpy(windows["mean"]))
    model.to(torch.device(device))
    generator = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    loader = DataLoader(
        TensorDataset(torch.arange(count)), batch_size=config.batch_size, shuffle=True, generator=generator
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    LOGGER.info("training denoiser on %d windows with %s conditions", count, config.train_strategy)
    model.train()
    for epoch in tqdm(range(config.epochs), desc="denoiser", disable=not progress):
        total, seen = 0.0, 0
        for (rows,) in loader:
            rows = rows.numpy()
            mean, uncertainty = windows["mean"][rows], windows["uncertainty"][rows]
            hands = guidance.guide_hands(mean, uncertainty, config.train_strategy, rng)
            dropped = rng.random(len(rows)) < config.hand_dropout
            condition = model.condition_tensors(windows["head"][rows], hands, uncertainty)
            condition["hands"][torch.from_numpy(dropped)] = 0.0
            if distribution:
                condition["uncertainty"][torch.from_numpy(dropped)] = 0.0
            z0 = torch.from_numpy(windows["tokens"][rows]).long()
            t = torch.randint(1, schedule.steps + 1, (len(rows),), generator=generator)
            zt = diffusion.forward_corrupt(z0, t, schedule, generator).to(model.token_embed.weight.device)
            log_probabilities = denoiser_predict_z0(model, zt, t.to(zt.device), condition)
            loss, _ = diffusion.vlb_loss(log_probabilities, zt, z0.to(zt.device), t, schedule, config.denoise_weight)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(rows)
            seen += len(rows)
        model.history.append(total / seen)
        LOGGER.info("denoiser epoch %d loss %.5f", epoch + 1, model.history[-1])
    return model.eval()


def save_denoiser(
    model: MotionDenoiser,
    schedule: diffusion.TransitionSchedule,
    directory: pathlib.Path,
    metadata: Dict[str, Any] | None = None,
) -> str:
    """Writes the denoiser checkpoint with its schedule and returns its digest."""
    return container.write_checkpoint(
        directory,
        {"denoiser": model},
        {
            **(metadata or {}),
            "model": "denoiser",
            "config": model.config.model_dump(mode="json"),
            "codebook_size": model.codebook_size,
            "window": model.window,
            "hand_dim": model.hand_dim,
            "distribution": model.distribution,
            "schedule": schedule.manifest(),
            "history": model.history,
        },
    )


def load_denoiser(directory: pathlib.Path, device: str = "cpu") -> Tuple[MotionDenoiser, diffusion.TransitionSchedule]:
    """Rebuilds a denoiser and its schedule from the checkpoint."""
    metadata, states = container.read_checkpoint(directory)
    if metadata.get("model") != "denoiser":
        raise ConfigError(f"{directory} is not a denoiser checkpoint")
    config = DiffusionConfig(**metadata["config"])
    model = MotionDenoiser(
        config, metadata["codebook_size"], metadata["window"], metadata["hand_dim"], metadata["distribution"]
    )
    model.load_state_dict(states["denoiser"])
    model.history = metadata.get("history", [])
    schedule = diffusion.build_transition_schedule(
        config.steps, metadata["codebook_size"], ScheduleConfig(**metadata["config"]["schedule"])
    )
    return model.to(torch.device(device)).eval(), schedule
