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
from pyegopose.features import kinematics, windows
from pyegopose.modules import enums
from pyegopose.modules.exceptions import ConfigError, DomainError, raise_shape_error
from pyegopose.modules.models import TokenizerConfig
from pyegopose.modules.structures import HEAD_JOINT, DatasetSplit, MotionSequence, Skeleton
from pyegopose.networks.layers import FeatureNormalizer

LOGGER = logging.getLogger("pyegopose")
DISTANCE_BUDGET = 1 << 22
EMA_EPSILON = 1e-5


class ResidualConv(nn.Module):
    """Dilated residual convolution that keeps the temporal length.

    >>> ResidualConv

    """

    def __init__(self, channels: int, dilation: int):
        """Instantiates the block."""
        super().__init__()
        self.block = nn.Sequential(
            nn.ReLU(),
            nn.Conv1d(channels, channels, 3, padding=dilation, dilation=dilation),
            nn.ReLU(),
            nn.Conv1d(channels, channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Applies the block on (B, C, T)."""
        return x + self.block(x)


def conv_stack(in_channels: int, hidden: int, out_channels: int, depth: int) -> nn.Sequential:
    """Stride-1 temporal convolutions mapping ``in_channels`` to ``out_channels``."""
    return nn.Sequential(
        nn.Conv1d(in_channels, hidden, 3, padding=1),
        *(ResidualConv(hidden, 3**level) for level in range(depth)),
        nn.ReLU(),
        nn.Conv1d(hidden, out_channels, 3, padding=1),
    )


def nearest_codes(z: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the closest prototype for every row of ``z`` (N, D); ties resolve to the lowest index."""
    chunk = max(1, DISTANCE_BUDGET // max(1, codebook.numel()))
    indices = [
        ((rows[:, None, :] - codebook[None]) ** 2).sum(dim=-1).argmin(dim=-1) for rows in z.split(chunk)
    ]
    return torch.cat(indices) if indices else torch.zeros(0, dtype=torch.long, device=z.device)


def vq_quantize(z: torch.Tensor, codebook: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Nearest-prototype quantization of latents (..., D).

    Args:
        z: Latent vectors.
        codebook: Prototypes (K, D).

    Returns:
        Tuple[torch.Tensor, torch.Tensor]:
        Indices (...) and quantized latents (..., D); when ``z`` requires gradients the quantized
        latents pass them straight through to ``z``.

    Raises:
        ConfigError:
        If the codebook is empty.
    """
    if not codebook.shape[0]:
        raise ConfigError("codebook is empty")
    if z.shape[-1] != codebook.shape[1]:
        raise_shape_error("z", codebook.shape[1], z.shape[-1])
    indices = nearest_codes(z.detach().reshape(-1, z.shape[-1]), codebook).reshape(z.shape[:-1])
    quantized = codebook[indices]
    if z.requires_grad:
        quantized = z + (quantized - z).detach()
    return indices, quantized


def wing_loss(prediction: torch.Tensor, target: torch.Tensor, width: float, curvature: float) -> torch.Tensor:
    """Mean wing loss: logarithmic inside ``width``, linear outside."""
    error = (prediction - target).abs()
    constant = width - width * np.log1p(width / curvature)
    return torch.where(error < width, width * torch.log1p(error / curvature), error - constant).mean()


def reconstruction_loss(prediction: torch.Tensor, target: torch.Tensor, config: TokenizerConfig) -> torch.Tensor:
    """Configured reconstruction loss."""
    if config.recon_loss == enums.ReconLoss.wing:
        return wing_loss(prediction, target, config.wing_width, config.wing_curvature)
    return F.mse_loss(prediction, target)


def vqvae_loss(
    x: torch.Tensor, x_hat: torch.Tensor, z: torch.Tensor, z_q: torch.Tensor, config: TokenizerConfig
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Reconstruction, codebook, commitment, velocity and acceleration losses of a window batch.

    Args:
        x: Target features (B, T, F).
        x_hat: Reconstructed features (B, T, F).
        z: Encoder latents (B, T, D).
        z_q: Selected prototypes (B, T, D), without straight-through.
        config: Loss weights and reconstruction loss kind.

    Returns:
        Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        Total loss and its weighted components.
    """
    if x.shape != x_hat.shape:
        raise_shape_error("x_hat", tuple(x.shape), tuple(x_hat.shape))
    if z.shape != z_q.shape:
        raise_shape_error("z_q", tuple(z.shape), tuple(z_q.shape))
    components = {
        "reconstruction": reconstruction_loss(x_hat, x, config),
        "codebook": F.mse_loss(z_q, z.detach()),
        "commitment": config.lambda_vq * F.mse_loss(z_q.detach(), z),
        "velocity": config.velocity_weight
        * reconstruction_loss(torch.diff(x_hat, dim=1), torch.diff(x, dim=1), config),
        "acceleration": config.acceleration_weight
        * reconstruction_loss(torch.diff(x_hat, n=2, dim=1), torch.diff(x, n=2, dim=1), config),
    }
    return sum(components.values()), components


class MotionTokenizer(nn.Module):
    """Convolutional encoder, EMA codebook and convolutional decoder over motion windows.

    >>> MotionTokenizer

    """

    def __init__(self, config: TokenizerConfig, feature_dim: int):
        """Instantiates the tokenizer.

        Args:
            config: Architecture and training settings.
            feature_dim: Per-frame motion feature dimension.
        """
        super().__init__()
        self.config = config
        self.feature_dim = feature_dim
        self.encoder = conv_stack(feature_dim, config.hidden, config.code_dim, config.depth)
        self.decoder = conv_stack(config.code_dim, config.hidden, feature_dim, config.depth)
        self.feature_norm = FeatureNormalizer(feature_dim)
        size, dim = config.codebook_size, config.code_dim
        self.register_buffer("codebook", torch.randn(size, dim))
        self.register_buffer("cluster_size", torch.ones(size))
        self.register_buffer("embed_sum", self.codebook.clone())
        self.register_buffer("idle", torch.zeros(size, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))
        self.history: List[float] = []
        self.statistics: Dict[str, float] = {}

    @property
    def codebook_size(self) -> int:
        """Number of prototypes."""
        return self.codebook.shape[0]

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        """Latents (B, T, D) of normalized features (B, T, F)."""
        return rearrange(self.encoder(rearrange(features, "b t f -> b f t")), "b d t -> b t d")

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        """Normalized features (B, T, F) of quantized latents (B, T, D)."""
        return rearrange(self.decoder(rearrange(latents, "b t d -> b d t")), "b f t -> b t f")

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        """Prototypes of token indices.

        Raises:
            DomainError:
            If an index lies outside [0, K).
        """
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.codebook_size):
            raise DomainError(f"token index outside [0, {self.codebook_size})")
        return self.codebook[indices]

    @torch.no_grad()
    def update_codebook(self, z: torch.Tensor, indices: torch.Tensor, generator: torch.Generator) -> None:
        """Exponential moving average step with reinitialization of long unused prototypes.

        Args:
            z: Detached latents (N, D) of the batch.
            indices: Selected prototype of each latent.
            generator: Random source for the replacement latents.
        """
        config = self.config
        size = self.codebook_size
        onehot = F.one_hot(indices, size).to(z.dtype)
        counts = onehot.sum(dim=0)
        self.cluster_size.mul_(config.ema_decay).add_(counts, alpha=1 - config.ema_decay)
        self.embed_sum.mul_(config.ema_decay).add_(onehot.T @ z, alpha=1 - config.ema_decay)
        total = self.cluster_size.sum()
        smoothed = (self.cluster_size + EMA_EPSILON) / (total + size * EMA_EPSILON) * total
        self.codebook.copy_(self.embed_sum / smoothed[:, None])
        self.idle.add_(1)
        self.idle[counts > 0] = 0
        dead = self.idle >= config.dead_code_steps
        if dead.any():
            rows = torch.randint(0, z.shape[0], (int(dead.sum()),), generator=generator).to(z.device)
            self.codebook[dead] = z[rows]
            self.embed_sum[dead] = z[rows]
            self.cluster_size[dead] = 1.0
            self.idle[dead] = 0

    @torch.no_grad()
    def initialize_codebook(self, z: torch.Tensor, generator: torch.Generator) -> None:
        """Seeds the prototypes with latents of the first batch."""
        rows = torch.randint(0, z.shape[0], (self.codebook_size,), generator=generator).to(z.device)
        self.codebook.copy_(z[rows])
        self.embed_sum.copy_(z[rows])
        self.cluster_size.fill_(1.0)
        self.initialized.fill_(True)


def sequence_offset(sequence: MotionSequence) -> np.ndarray:
    """Ground-plane head position at the first frame."""
    head = sequence.skeleton.index(HEAD_JOINT)
    positions, _ = kinematics.sequence_kinematics(sequence.skeleton, sequence.root[:1], sequence.rotations[:1])
    return positions[0, head] * windows.GROUND_PLANE


def vq_encode(tokenizer: MotionTokenizer, sequence: MotionSequence) -> torch.Tensor:
    """Latents (T, D) of one window, canonicalized on its first head position.

    Raises:
        ShapeError:
        If the sequence length differs from the configured window.
    """
    if len(sequence) != tokenizer.config.window:
        raise_shape_error("window", tokenizer.config.window, len(sequence))
    features = windows.motion_features(sequence.root, sequence.rotations, sequence_offset(sequence))
    device = tokenizer.codebook.device
    features = torch.as_tensor(features, dtype=torch.float32, device=device)[None]
    return tokenizer.encode(tokenizer.feature_norm.normalize(features))[0]


def vq_decode(
    tokenizer: MotionTokenizer,
    tokens: torch.Tensor,
    skeleton: Skeleton,
    fps: float = 30.0,
    offset: np.ndarray | None = None,
) -> MotionSequence:
    """Motion window of token indices (T,) or quantized latents (T, D).

    Args:
        tokenizer: Trained tokenizer.
        tokens: Indices or quantized latents.
        skeleton: Skeleton of the decoded motion.
        fps: Frame rate.
        offset: Ground-plane offset added back to the root, zeros when omitted.

    Raises:
        DomainError:
        If an index lies outside the codebook.
    """
    latents = tokenizer.lookup(tokens) if tokens.dtype in (torch.int32, torch.int64) else tokens
    features = tokenizer.feature_norm.denormalize(tokenizer.decode(latents[None]))[0]
    root, rotations = windows.split_motion_features(
        features.detach().cpu().double().numpy(),
        skeleton.joint_count,
        np.zeros(3) if offset is None else np.asarray(offset, dtype=np.float64),
    )
    return MotionSequence(skeleton=skeleton, fps=fps, root=root, rotations=rotations)


@torch.no_grad()
def tokenize_windows(tokenizer: MotionTokenizer, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Token indices (N, T) of canonical feature windows (N, T, F)."""
    tokenizer.eval()
    device = tokenizer.codebook.device
    tokens = []
    for start in range(0, features.shape[0], batch_size):
        batch = torch.as_tensor(features[start : start + batch_size], dtype=torch.float32, device=device)
        indices, _ = vq_quantize(tokenizer.encode(tokenizer.feature_norm.normalize(batch)), tokenizer.codebook)
        tokens.append(indices.cpu().numpy())
    return np.concatenate(tokens)


@torch.no_grad()
def detokenize_windows(tokenizer: MotionTokenizer, tokens: torch.Tensor) -> np.ndarray:
    """Canonical features (N, T, F) of token windows (N, T)."""
    tokenizer.eval()
    latents = tokenizer.lookup(tokens.to(tokenizer.codebook.device))
    return tokenizer.feature_norm.denormalize(tokenizer.decode(latents)).cpu().double().numpy()


def build_motion_windows(dataset: DatasetSplit, window: int, stride: int) -> np.ndarray:
    """Canonical motion features (N, T, F) of every window of a split."""
    features = []
    for index, start in windows.split_windows(dataset, window, stride):
        frames = slice(start, start + window)
        sequence = dataset.sequences[index]
        offset = windows.canonical_offset(dataset.signals[index].head[frames].astype(np.float64))
        features.append(
            windows.motion_features(
                sequence.root[frames].astype(np.float64), sequence.rotations[frames].astype(np.float64), offset
            )
        )
    if not features:
        raise ConfigError("no training windows: the dataset is empty")
    return np.stack(features)


def reconstruct_sequence(
    tokenizer: MotionTokenizer, sequence: MotionSequence, head: np.ndarray, stride: int
) -> MotionSequence:
    """Encodes, quantizes and decodes a whole sequence window by window.

    Args:
        tokenizer: Trained tokenizer.
        sequence: Ground-truth sequence.
        head: Head features (T, D_head) providing the window offsets.
        stride: Window stride used for stitching.

    Returns:
        MotionSequence:
        Reconstructed sequence.
    """
    window = tokenizer.config.window
    starts = windows.window_starts(len(sequence), window, stride)
    head = head.astype(np.float64)
    offsets = np.stack([windows.canonical_offset(head[start : start + window]) for start in starts])
    features = np.stack(
        [
            windows.motion_features(
                sequence.root[start : start + window].astype(np.float64),
                sequence.rotations[start : start + window].astype(np.float64),
                offset,
            )
            for start, offset in zip(starts, offsets)
        ]
    )
    tokens = torch.from_numpy(tokenize_windows(tokenizer, features))
    root, rotations = windows.split_motion_features(
        detokenize_windows(tokenizer, tokens), sequence.skeleton.joint_count, offsets
    )
    return MotionSequence(
        skeleton=sequence.skeleton,
        fps=sequence.fps,
        root=windows.stitch(root, starts, len(sequence), stride),
        rotations=windows.stitch_rotations(rotations, starts, len(sequence), stride),
    )


def reconstruction_mpjpe(tokenizer: MotionTokenizer, dataset: DatasetSplit, stride: int) -> float:
    """Mean joint position error in cm of the tokenizer round trip over a split."""
    errors = [
        kinematics.compute_metrics(reconstruct_sequence(tokenizer, sequence, signal.head, stride), sequence).mpjpe
        for sequence, signal in zip(dataset.sequences, dataset.signals)
    ]
    return float(np.mean(errors))


def train_tokenizer(
    dataset: DatasetSplit,
    config: TokenizerConfig,
    validation: DatasetSplit | None = None,
    progress: bool = True,
    device: str = "cpu",
) -> MotionTokenizer:
    """Trains the tokenizer on the windows of a split.

    Args:
        dataset: Training split.
        config: Architecture and training settings.
        validation: Held-out split for the reconstruction error, skipped when ``None``.
        progress: Shows a progress bar.
        device: Torch device.

    Returns:
        MotionTokenizer:
        Trained tokenizer with per-epoch losses in ``history`` and dead-code fraction and held-out
        reconstruction error in ``statistics``.

    Raises:
        ConfigError:
        If the dataset is empty.
    """
    if not len(dataset):
        raise ConfigError("cannot train the tokenizer on an empty dataset")
    features = build_motion_windows(dataset, config.window, config.window_stride)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        tokenizer = MotionTokenizer(config, features.shape[-1])
    tokenizer.feature_norm.fit(torch.from_numpy(features))
    target_device = torch.device(device)
    tokenizer.to(target_device)
    generator = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(
        TensorDataset(torch.from_numpy(features).float()),
        batch_size=config.batch_size,
        shuffle=True,
        generator=generator,
    )
    optimizer = torch.optim.Adam(
        list(tokenizer.encoder.parameters()) + list(tokenizer.decoder.parameters()), lr=config.learning_rate
    )
    LOGGER.info("training tokenizer on %d windows", len(features))
    usage = torch.zeros(config.codebook_size, dtype=torch.long)
    tokenizer.train()
    for epoch in tqdm(range(config.epochs), desc="tokenizer", disable=not progress):
        total, count = 0.0, 0
        usage.zero_()
        for (batch,) in loader:
            x = tokenizer.feature_norm.normalize(batch.to(target_device))
            z = tokenizer.encode(x)
            flat = z.detach().reshape(-1, z.shape[-1])
            if not tokenizer.initialized:
                tokenizer.initialize_codebook(flat, generator)
            indices = nearest_codes(flat, tokenizer.codebook)
            z_q = tokenizer.codebook[indices].reshape(z.shape)
            x_hat = tokenizer.decode(z + (z_q - z).detach())
            loss, _ = vqvae_loss(x, x_hat, z, z_q, config)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            tokenizer.update_codebook(flat, indices, generator)
            usage += torch.bincount(indices.cpu(), minlength=config.codebook_size)
            total += loss.item() * batch.shape[0]
            count += batch.shape[0]
        tokenizer.history.append(total / count)
        LOGGER.info("tokenizer epoch %d loss %.5f", epoch + 1, tokenizer.history[-1])
    tokenizer.eval()
    tokenizer.statistics["dead_code_fraction"] = float((usage == 0).float().mean())
    LOGGER.info("dead codes in the final epoch: %.1f%%", 100 * tokenizer.statistics["dead_code_fraction"])
    if validation is not None and len(validation):
        tokenizer.statistics["reconstruction_mpjpe"] = reconstruction_mpjpe(tokenizer, validation, config.window)
        LOGGER.info("held-out reconstruction MPJPE %.3f cm", tokenizer.statistics["reconstruction_mpjpe"])
    return tokenizer


def save_tokenizer(tokenizer: MotionTokenizer, directory: pathlib.Path, metadata: Dict[str, Any] | None = None) -> str:
    """Writes the tokenizer checkpoint and returns its digest."""
    return container.write_checkpoint(
        directory,
        {"tokenizer": tokenizer},
        {
            **(metadata or {}),
            "model": "tokenizer",
            "config": tokenizer.config.model_dump(mode="json"),
            "feature_dim": tokenizer.feature_dim,
            "history": tokenizer.history,
            "statistics": tokenizer.statistics,
        },
    )


def load_tokenizer(directory: pathlib.Path, device: str = "cpu") -> MotionTokenizer:
    """Rebuilds a tokenizer from its checkpoint."""
    metadata, states = container.read_checkpoint(directory)
    if metadata.get("model") != "tokenizer":
        raise ConfigError(f"{directory} is not a tokenizer checkpoint")
    tokenizer = MotionTokenizer(TokenizerConfig(**metadata["config"]), metadata["feature_dim"])
    tokenizer.load_state_dict(states["tokenizer"])
    tokenizer.history = metadata.get("history", [])
    tokenizer.statistics = metadata.get("statistics", {})
    return tokenizer.to(torch.device(device)).eval()
