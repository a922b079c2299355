import math

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal encodings of shape (length, dim)."""
    position = torch.arange(length, dtype=torch.float64)[:, None]
    frequency = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * frequency)
    table[:, 1::2] = torch.cos(position * frequency[: dim // 2])
    return table.float()


class FeatureNormalizer(nn.Module):
    """Per-feature standardization with statistics stored as buffers.

    >>> FeatureNormalizer

    """

    def __init__(self, dim: int):
        """Instantiates an identity normalizer over ``dim`` features."""
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("std", torch.ones(dim))

    @torch.no_grad()
    def fit(self, samples: torch.Tensor, floor: float = 1e-4) -> "FeatureNormalizer":
        """Fits the statistics on samples whose last axis is the feature axis."""
        flat = samples.reshape(-1, samples.shape[-1]).double()
        self.mean.copy_(flat.mean(0).float())
        self.std.copy_(flat.std(0, correction=0).clamp_min(floor).float())
        return self

    def normalize(self, values: torch.Tensor) -> torch.Tensor:
        """Maps physical values to standardized units."""
        return (values - self.mean) / self.std

    def denormalize(self, values: torch.Tensor) -> torch.Tensor:
        """Maps standardized values back to physical units."""
        return values * self.std + self.mean

    def scale_variance(self, variance: torch.Tensor) -> torch.Tensor:
        """Converts a variance in standardized units to physical units."""
        return variance * self.std**2

    def unscale_variance(self, variance: torch.Tensor) -> torch.Tensor:
        """Converts a physical variance to standardized units."""
        return variance / self.std**2


class MultiHeadAttention(nn.Module):
    """Self-attention with an optional key mask and an additive per-head bias.

    >>> MultiHeadAttention

    """

    def __init__(self, d_model: int, heads: int):
        """Instantiates the projections."""
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(
        self, x: torch.Tensor, key_mask: torch.Tensor | None = None, bias: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Attends over the sequence axis.

        Args:
            x: Tokens of shape (B, L, D).
            key_mask: Boolean (B, L); keys marked False receive zero attention weight.
            bias: Additive attention bias of shape (H, L, L).

        Returns:
            torch.Tensor:
            Attended tokens of shape (B, L, D).
        """
        query, key, value = rearrange(self.qkv(x), "b l (three h d) -> three b h l d", three=3, h=self.heads)
        attn_mask = None
        if bias is not None:
            attn_mask = bias[None].to(x.dtype)
        if key_mask is not None:
            blocked = torch.zeros(key_mask.shape, dtype=x.dtype, device=x.device)
            blocked = blocked.masked_fill(~key_mask, float("-inf"))[:, None, None, :]
            attn_mask = blocked if attn_mask is None else attn_mask + blocked
        attended = F.scaled_dot_product_attention(query, key, value, attn_mask=attn_mask)
        return self.out(rearrange(attended, "b h l d -> b l (h d)"))


def feed_forward(d_model: int, ff_mult: int) -> nn.Sequential:
    """Position-wise two layer perceptron."""
    return nn.Sequential(
        nn.Linear(d_model, ff_mult * d_model), nn.GELU(), nn.Linear(ff_mult * d_model, d_model)
    )


class TransformerBlock(nn.Module):
    """Pre-norm transformer block.

    >>> TransformerBlock

    """

    def __init__(self, d_model: int, heads: int, ff_mult: int = 4):
        """Instantiates attention and feed-forward sublayers."""
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = feed_forward(d_model, ff_mult)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Applies the block."""
        x = x + self.attn(self.norm1(x), key_mask=key_mask)
        return x + self.mlp(self.norm2(x))


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Per-sample affine modulation of normalized tokens."""
    return x * (1 + rearrange(scale, "b d -> b 1 d")) + rearrange(shift, "b d -> b 1 d")


class AdaLNBlock(nn.Module):
    """Transformer block whose normalization shift, scale and residual gate come from the step embedding.

    >>> AdaLNBlock

    """

    def __init__(self, d_model: int, heads: int, ff_mult: int = 4):
        """Instantiates the block and its modulation projection."""
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model, elementwise_affine=False)
        self.attn = MultiHeadAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model, elementwise_affine=False)
        self.mlp = feed_forward(d_model, ff_mult)
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 6 * d_model))

    def forward(self, x: torch.Tensor, step: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        """Applies the block conditioned on a step embedding of shape (B, D)."""
        shift1, scale1, gate1, shift2, scale2, gate2 = rearrange(
            self.adaln(step), "b (six d) -> six b d", six=6
        )
        x = x + rearrange(gate1, "b d -> b 1 d") * self.attn(modulate(self.norm1(x), shift1, scale1), bias=bias)
        return x + rearrange(gate2, "b d -> b 1 d") * self.mlp(modulate(self.norm2(x), shift2, scale2))


class TimestepEmbedder(nn.Module):
    """Sinusoidal diffusion step features followed by a two layer perceptron.

    >>> TimestepEmbedder

    """

    def __init__(self, d_model: int, frequency_dim: int = 256):
        """Instantiates the perceptron."""
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(nn.Linear(frequency_dim, d_model), nn.SiLU(), nn.Linear(d_model, d_model))

    def forward(self, step: torch.Tensor) -> torch.Tensor:
        """Embeds integer steps of shape (B,)."""
        half = self.frequency_dim // 2
        frequency = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=step.device) / half
        )
        angles = step.float()[:, None] * frequency[None]
        return self.mlp(torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1))


class RelativePositionBias(nn.Module):
    """Learned per-head bias indexed by the signed distance between positions.

    >>> RelativePositionBias

    """

    def __init__(self, heads: int, max_length: int):
        """Instantiates a table with ``2 * max_length - 1`` distances per head."""
        super().__init__()
        self.max_length = max_length
        self.table = nn.Embedding(2 * max_length - 1, heads)

    def forward(self, length: int) -> torch.Tensor:
        """Bias of shape (H, L, L)."""
        position = torch.arange(length, device=self.table.weight.device)
        distance = (position[None, :] - position[:, None]).clamp(-self.max_length + 1, self.max_length - 1)
        return rearrange(self.table(distance + self.max_length - 1), "q k h -> h q k")
