import logging
import pathlib
from typing import Any, Dict, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from pyegopose.executors import container
from pyegopose.features import windows
from pyegopose.modules import enums
from pyegopose.modules.exceptions import ConfigError, DomainError, raise_shape_error
from pyegopose.modules.models import HEAD_DIM, ImputerConfig
from pyegopose.modules.structures import DatasetSplit, ImputedTrajectory
from pyegopose.networks.layers import FeatureNormalizer, TransformerBlock, sinusoidal_table

LOGGER = logging.getLogger("pyegopose")
VARIANCE_FLOOR = 1e-6


class TokenLayout(nn.Module):
    """Token slots of one window: every head frame, then every left hand frame, then every right hand frame.

    >>> TokenLayout

    """

    def __init__(self, window: int, d_model: int, hand_dim: int, head_dim: int = HEAD_DIM):
        """Instantiates the per-modality embeddings and the positional table.

        Args:
            window: Frames per window.
            d_model: Token dimension.
            hand_dim: Per-hand state dimension.
            head_dim: Head feature dimension.
        """
        super().__init__()
        self.window = window
        self.hand_dim = hand_dim
        self.head_embed = nn.Linear(head_dim, d_model)
        self.hand_embed = nn.Linear(hand_dim, d_model)
        self.register_buffer("positional", sinusoidal_table(3 * window, d_model), persistent=False)

    @property
    def slots(self) -> int:
        """Number of token slots."""
        return 3 * self.window


def tokenize_inputs(
    layout: TokenLayout, head: torch.Tensor, hands: torch.Tensor, mask: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Embeds head features and hand detections into tokens with an attention mask.

    Args:
        layout: Token layout holding the embeddings.
        head: Normalized head features (B, T, D_head).
        hands: Normalized hand states (B, T, 2, D_hand); invisible entries are ignored.
        mask: Hand availability (B, T, 2).

    Returns:
        Tuple[torch.Tensor, torch.Tensor]:
        Tokens (B, 3 T, D_M) and the boolean key mask (B, 3 T).

    Raises:
        ShapeError:
        If any input length differs from the layout window.
    """
    batch = head.shape[0]
    if head.shape[1] != layout.window:
        raise_shape_error("head", layout.window, head.shape[1])
    if hands.shape[:3] != (batch, layout.window, 2) or hands.shape[3] != layout.hand_dim:
        raise_shape_error("hands", (batch, layout.window, 2, layout.hand_dim), tuple(hands.shape))
    if mask.shape != (batch, layout.window, 2):
        raise_shape_error("mask", (batch, layout.window, 2), tuple(mask.shape))
    hands = hands * mask[..., None].to(hands.dtype)
    hand_tokens = rearrange(layout.hand_embed(hands), "b t s d -> b (s t) d")
    tokens = torch.cat([layout.head_embed(head), hand_tokens], dim=1) + layout.positional
    head_keys = torch.ones(batch, layout.window, dtype=torch.bool, device=mask.device)
    attention = torch.cat([head_keys, rearrange(mask, "b t s -> b (s t)")], dim=1)
    return tokens, attention


class MaskedAutoencoder(nn.Module):
    """One ensemble member: masked encoder, mask-token decoder and Gaussian output heads.

    >>> MaskedAutoencoder

    """

    def __init__(self, config: ImputerConfig, hand_dim: int):
        """Instantiates the member.

        Args:
            config: Architecture settings.
            hand_dim: Per-hand state dimension.
        """
        super().__init__()
        d_model = config.d_model
        self.layout = TokenLayout(config.window, d_model, hand_dim)
        self.encoder = nn.ModuleList(
            TransformerBlock(d_model, config.heads, config.ff_mult) for _ in range(config.encoder_layers)
        )
        self.encoder_norm = nn.LayerNorm(d_model)
        self.decoder_embed = nn.Linear(d_model, d_model)
        self.mask_token = nn.Parameter(torch.randn(1, 1, d_model) * 0.02)
        self.decoder = nn.ModuleList(
            TransformerBlock(d_model, config.heads, config.ff_mult) for _ in range(config.decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(d_model)
        self.mean_head = nn.Linear(d_model, hand_dim)
        self.variance_head = nn.Linear(d_model, hand_dim)

    def forward_tokens(self, tokens: torch.Tensor, attention: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Runs the encoder, decoder and heads on embedded tokens."""
        x = tokens
        for block in self.encoder:
            x = block(x, key_mask=attention)
        x = self.decoder_embed(self.encoder_norm(x))
        x = torch.where(attention[..., None], x, self.mask_token.to(x.dtype)) + self.layout.positional
        for block in self.decoder:
            x = block(x)
        hands = rearrange(self.decoder_norm(x)[:, self.layout.window :], "b (s t) d -> b t s d", s=2)
        return self.mean_head(hands), F.softplus(self.variance_head(hands)) + VARIANCE_FLOOR

    def forward(
        self, head: torch.Tensor, hands: torch.Tensor, mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Mean and variance (B, T, 2, D_hand) in normalized units."""
        return mae_forward(self, *tokenize_inputs(self.layout, head, hands, mask))


def mae_forward(
    member: MaskedAutoencoder, tokens: torch.Tensor, attention: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean and strictly positive variance of every hand slot of every frame."""
    return member.forward_tokens(tokens, attention)


def beta_nll_loss(
    mu: torch.Tensor, variance: torch.Tensor, target: torch.Tensor, beta: float, reduction: str = "mean"
) -> torch.Tensor:
    """Gaussian negative log-likelihood reweighted by the detached variance raised to ``beta``.

    Args:
        mu: Predicted means.
        variance: Predicted variances.
        target: Targets.
        beta: Weighting exponent in [0, 1]; 0 gives the plain Gaussian NLL without the constant.
        reduction: ``mean``, ``sum`` or ``none``.

    Returns:
        torch.Tensor:
        Reduced loss.

    Raises:
        DomainError:
        If any variance is not strictly positive or ``beta`` is outside [0, 1].
    """
    if not 0 <= beta <= 1:
        raise DomainError(f"beta must lie in [0, 1], received {beta}")
    if torch.any(variance <= 0):
        raise DomainError("variance must be strictly positive")
    loss = 0.5 * torch.log(variance) + (mu - target) ** 2 / (2 * variance)
    if beta > 0:
        loss = loss * variance.detach() ** beta
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def ensemble_moments(
    mus: torch.Tensor, variances: torch.Tensor
) -> Tuple[torch.Tensor, Dict[enums.UncertaintyKind, torch.Tensor]]:
    """Ensemble mean and every uncertainty kind from stacked member outputs (M, ...).

    Returns:
        Tuple[torch.Tensor, Dict[enums.UncertaintyKind, torch.Tensor]]:
        Mean over members and the aleatoric, epistemic and total uncertainty.
    """
    aleatoric = variances.mean(dim=0)
    epistemic = mus.var(dim=0, correction=0)
    return mus.mean(dim=0), {
        enums.UncertaintyKind.aleatoric: aleatoric,
        enums.UncertaintyKind.epistemic: epistemic,
        enums.UncertaintyKind.total: aleatoric + epistemic,
    }


class ImputerEnsemble(nn.Module):
    """Members sharing one architecture, plus the feature statistics of the training split.

    >>> ImputerEnsemble

    """

    def __init__(self, config: ImputerConfig, hand_dim: int, noise_sigma: float = 0.0):
        """Instantiates every member from its own seed.

        Args:
            config: Architecture and training settings.
            hand_dim: Per-hand state dimension.
            noise_sigma: Detector noise, used as the uncertainty floor of detected positions.
        """
        super().__init__()
        self.config = config
        self.hand_dim = hand_dim
        self.noise_sigma = noise_sigma
        members = []
        for index in range(config.members):
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(config.seed + index)
                members.append(MaskedAutoencoder(config, hand_dim))
        self.members = nn.ModuleList(members)
        self.head_norm = FeatureNormalizer(HEAD_DIM)
        self.hand_norm = FeatureNormalizer(hand_dim)
        floor = torch.full((hand_dim,), config.variance_floor)
        floor[windows.HAND_POSITION] = max(noise_sigma**2, config.variance_floor)
        self.register_buffer("visible_floor", floor)
        self.history: List[List[float]] = []

    def member_outputs(
        self, head: torch.Tensor, hands: torch.Tensor, mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Stacked member means and variances (M, B, T, 2, D_hand) in physical units."""
        head = self.head_norm.normalize(head)
        hands = self.hand_norm.normalize(hands)
        mus, variances = zip(*(member(head, hands, mask) for member in self.members))
        return (
            self.hand_norm.denormalize(torch.stack(mus)),
            self.hand_norm.scale_variance(torch.stack(variances)),
        )


def estimate_uncertainty(
    ensemble: ImputerEnsemble,
    head: torch.Tensor,
    hands: torch.Tensor,
    mask: torch.Tensor,
    kind: enums.UncertaintyKind,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Ensemble mean and the requested uncertainty kind; epistemic is zero for a single member."""
    mean, uncertainty = ensemble_moments(*ensemble.member_outputs(head, hands, mask))
    return mean, uncertainty[kind]


@torch.no_grad()
def impute_windows(
    ensemble: ImputerEnsemble, head: np.ndarray, hands: np.ndarray, mask: np.ndarray
) -> Tuple[np.ndarray, Dict[enums.UncertaintyKind, np.ndarray]]:
    """Imputes canonical windows, trusting detections where they are available.

    Args:
        ensemble: Trained ensemble.
        head: Canonical head features (B, T, D_head).
        hands: Canonical detections (B, T, 2, D_hand), ignored where ``mask`` is False.
        mask: Hand availability (B, T, 2).

    Returns:
        Tuple[np.ndarray, Dict[enums.UncertaintyKind, np.ndarray]]:
        Mean (B, T, 2, D_hand) and every uncertainty kind.
    """
    ensemble.eval()
    device = ensemble.visible_floor.device
    available = torch.as_tensor(mask, dtype=torch.bool, device=device)
    detections = torch.as_tensor(hands, dtype=torch.float32, device=device)
    head = torch.as_tensor(head, dtype=torch.float32, device=device)
    mean, uncertainty = ensemble_moments(*ensemble.member_outputs(head, detections, available))
    available = available[..., None]
    mean = torch.where(available, detections, mean)
    floor = ensemble.visible_floor.expand_as(mean)
    return mean.cpu().double().numpy(), {
        kind: torch.where(available, floor, value).cpu().double().numpy() for kind, value in uncertainty.items()
    }


def impute_trajectory(
    ensemble: ImputerEnsemble,
    head: np.ndarray,
    hands: np.ndarray,
    mask: np.ndarray,
    kind: enums.UncertaintyKind,
) -> ImputedTrajectory:
    """Dense trajectory of one canonical window with the selected uncertainty kind."""
    mean, uncertainty = impute_windows(ensemble, head[None], hands[None], mask[None])
    return ImputedTrajectory(mean=mean[0], uncertainty=uncertainty[kind][0], kind=kind, visibility=mask.astype(bool))


def interpolate_baseline(hands: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Linear interpolation of detections between visible frames, per hand and dimension.

    Args:
        hands: Detections (T, 2, D_hand), ignored where ``mask`` is False.
        mask: Hand availability (T, 2).

    Returns:
        np.ndarray:
        Dense trajectory (T, 2, D_hand); held constant outside the visible range and zero for a hand never seen.
    """
    frames = np.arange(hands.shape[0])
    dense = np.zeros(hands.shape, dtype=np.float64)
    for side in range(2):
        visible = np.flatnonzero(mask[:, side])
        if not visible.size:
            continue
        for dim in range(hands.shape[2]):
            dense[:, side, dim] = np.interp(frames, visible, hands[visible, side, dim])
    return dense


def build_imputer_windows(dataset: DatasetSplit, window: int, stride: int) -> Dict[str, np.ndarray]:
    """Canonical training windows of head features, detections, availability and targets."""
    heads, detections, masks, targets = [], [], [], []
    for index, start in windows.split_windows(dataset, window, stride):
        frames = slice(start, start + window)
        head = dataset.signals[index].head[frames].astype(np.float64)
        offset = windows.canonical_offset(head)
        values, available = dataset.detections[index].dense()
        heads.append(windows.canonicalize_head(head, offset))
        detected = windows.canonicalize_hands(values[frames].astype(np.float64), offset)
        detections.append(detected * available[frames, :, None])
        masks.append(available[frames])
        targets.append(windows.canonicalize_hands(dataset.signals[index].hands[frames].astype(np.float64), offset))
    if not heads:
        raise ConfigError("no training windows: the dataset is empty")
    return {
        "head": np.stack(heads),
        "hands": np.stack(detections),
        "mask": np.stack(masks),
        "target": np.stack(targets),
    }


def _train_member(
    ensemble: ImputerEnsemble,
    index: int,
    tensors: TensorDataset,
    progress: bool,
    device: torch.device,
) -> List[float]:
    """Optimizes one member with beta-NLL over every hand slot of every frame."""
    config = ensemble.config
    member = ensemble.members[index]
    generator = torch.Generator().manual_seed(config.seed + index)
    loader = DataLoader(tensors, batch_size=config.batch_size, shuffle=True, generator=generator)
    optimizer = torch.optim.AdamW(member.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    history = []
    member.train()
    for epoch in tqdm(range(config.epochs), desc=f"member {index}", disable=not progress, leave=False):
        total, count = 0.0, 0
        for head, hands, mask, target in loader:
            head, hands, mask, target = head.to(device), hands.to(device), mask.to(device), target.to(device)
            mu, variance = member(
                ensemble.head_norm.normalize(head), ensemble.hand_norm.normalize(hands), mask
            )
            loss = beta_nll_loss(mu, variance, ensemble.hand_norm.normalize(target), config.beta)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * head.shape[0]
            count += head.shape[0]
        history.append(total / count)
        LOGGER.info("imputer member %d epoch %d loss %.5f", index, epoch + 1, history[-1])
    member.eval()
    return history


def train_imputer_ensemble(
    dataset: DatasetSplit,
    config: ImputerConfig,
    noise_sigma: float = 0.0,
    progress: bool = True,
    device: str = "cpu",
) -> ImputerEnsemble:
    """Trains every ensemble member on the windows of a split.

    Args:
        dataset: Training split with detections and ground-truth hand states.
        config: Architecture and training settings.
        noise_sigma: Detector noise recorded as the visible-frame uncertainty floor.
        progress: Shows progress bars.
        device: Torch device.

    Returns:
        ImputerEnsemble:
        Trained ensemble whose ``history`` holds the per-epoch losses of every member.

    Raises:
        ConfigError:
        If the dataset holds no window.
    """
    if not len(dataset):
        raise ConfigError("cannot train the imputer on an empty dataset")
    arrays = build_imputer_windows(dataset, config.window, config.window_stride)
    ensemble = ImputerEnsemble(config, dataset.signals[0].hand_dim, noise_sigma)
    ensemble.head_norm.fit(torch.from_numpy(arrays["head"]))
    ensemble.hand_norm.fit(torch.from_numpy(arrays["target"]))
    target_device = torch.device(device)
    ensemble.to(target_device)
    tensors = TensorDataset(
        torch.from_numpy(arrays["head"]).float(),
        torch.from_numpy(arrays["hands"]).float(),
        torch.from_numpy(arrays["mask"]),
        torch.from_numpy(arrays["target"]).float(),
    )
    LOGGER.info("training %d imputer members on %d windows", config.members, len(tensors))
    ensemble.history = [
        _train_member(ensemble, index, tensors, progress, target_device) for index in range(config.members)
    ]
    return ensemble


def save_imputer(ensemble: ImputerEnsemble, directory: pathlib.Path, metadata: Dict[str, Any] | None = None) -> str:
    """Writes the ensemble checkpoint and returns its digest."""
    return container.write_checkpoint(
        directory,
        {"ensemble": ensemble},
        {
            **(metadata or {}),
            "model": "imputer",
            "config": ensemble.config.model_dump(mode="json"),
            "hand_dim": ensemble.hand_dim,
            "noise_sigma": ensemble.noise_sigma,
            "history": ensemble.history,
        },
    )


def load_imputer(directory: pathlib.Path, device: str = "cpu") -> ImputerEnsemble:
    """Rebuilds an ensemble from its checkpoint."""
    metadata, states = container.read_checkpoint(directory)
    if metadata.get("model") != "imputer":
        raise ConfigError(f"{directory} is not an imputer checkpoint")
    ensemble = ImputerEnsemble(ImputerConfig(**metadata["config"]), metadata["hand_dim"], metadata["noise_sigma"])
    ensemble.load_state_dict(states["ensemble"])
    ensemble.history = metadata.get("history", [])
    return ensemble.to(torch.device(device)).eval()
