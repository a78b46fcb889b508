"""Noise-prediction network: convolutional encoder/decoder around a
transformer bottleneck, with the diffusion step injected through adaptive
group normalization in every residual block.

At the reference size the stage shapes are

    input                (T=64, P=72, 5)
    stem                 (64, 72, 64)
    down 1..3            (32, 36, 128) (16, 18, 256) (8, 9, 256)
    transformer (x2)     (8, 9, 256), 4 heads, relative position bias
    up 1..3              (16, 18, 128) (32, 36, 64) (64, 72, 64)
    head                 (64, 72, 5)

Down-blocks are max-pool + residual convolutions; up-blocks are
nearest-neighbor interpolation + skip concatenation + residual
convolutions. Every forward pass asserts this ladder stage by stage.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


class NetConfigError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    time_dim: int = 64
    pitch_dim: int = 72
    in_channels: int = 5
    out_channels: int = 5
    stem_width: int = 64
    encoder_widths: tuple[int, ...] = (128, 256, 256)
    decoder_widths: tuple[int, ...] = (128, 64, 64)
    transformer_layers: int = 2
    transformer_heads: int = 4
    time_embed_dim: int = 16
    groups: int = 8

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.decoder_widths = tuple(self.decoder_widths)
        depth = len(self.encoder_widths)
        if len(self.decoder_widths) != depth:
            raise NetConfigError("encoder and decoder must have the same depth")
        scale = 1 << depth
        if self.time_dim % scale or self.pitch_dim % scale:
            raise NetConfigError(
                f"dims {(self.time_dim, self.pitch_dim)} not divisible by 2^{depth}"
            )
        if self.time_embed_dim % 2 or self.time_embed_dim < 4:
            raise NetConfigError("time_embed_dim must be even and >= 4")
        for width in (self.stem_width, *self.encoder_widths, *self.decoder_widths):
            if width % self.groups:
                raise NetConfigError(
                    f"width {width} not divisible by {self.groups} norm groups"
                )
        hidden = self.encoder_widths[-1]
        if hidden % self.transformer_heads:
            raise NetConfigError(
                f"bottleneck width {hidden} not divisible by {self.transformer_heads} heads"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        return cls(**data)


def time_embedding(t, dim: int = 16, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal step embedding: [sin(t/w_k)..., cos(t/w_k)...] with
    geometric frequencies w_k from 1 to 1e4. Scalar t gives a (dim,) vector,
    a batch of steps gives (B, dim)."""
    scalar = not torch.is_tensor(t) or t.ndim == 0
    steps = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    omega = torch.pow(
        torch.tensor(10_000.0, dtype=torch.float64),
        torch.arange(half, dtype=torch.float64) / (half - 1),
    )
    angles = steps[:, None] / omega[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1).to(dtype)
    return emb[0] if scalar else emb


class AdaptiveGroupNorm(nn.Module):
    """Group normalization whose scale and shift come from the step embedding:
    out = norm(x) * (1 + gain(emb)) + bias(emb)."""

    def __init__(self, channels: int, time_embed_dim: int, groups: int):
        super().__init__()
        if channels % groups:
            raise NetConfigError(f"{channels} channels not divisible into {groups} groups")
        self.norm = nn.GroupNorm(groups, channels, affine=False)
        self.affine = nn.Linear(time_embed_dim, 2 * channels)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        gain, bias = self.affine(emb).chunk(2, dim=-1)
        gain = gain.reshape(*gain.shape, 1, 1)
        bias = bias.reshape(*bias.shape, 1, 1)
        return self.norm(x) * (1.0 + gain) + bias


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions, each preceded by adaptive group norm and SiLU,
    with an identity (or 1x1-projected) skip."""

    def __init__(self, in_channels: int, out_channels: int, time_embed_dim: int, groups: int):
        super().__init__()
        self.norm1 = AdaptiveGroupNorm(in_channels, time_embed_dim, groups)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm2 = AdaptiveGroupNorm(out_channels, time_embed_dim, groups)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x, emb)))
        h = self.conv2(F.silu(self.norm2(h, emb)))
        return h + self.skip(x)


class DownBlock(nn.Module):
    def __init__(self, in_channels, out_channels, time_embed_dim, groups):
        super().__init__()
        self.block = ResidualBlock(in_channels, out_channels, time_embed_dim, groups)

    def forward(self, x, emb):
        return self.block(F.max_pool2d(x, 2), emb)


class UpBlock(nn.Module):
    def __init__(self, in_channels, skip_channels, out_channels, time_embed_dim, groups):
        super().__init__()
        self.block = ResidualBlock(
            in_channels + skip_channels, out_channels, time_embed_dim, groups
        )

    def forward(self, x, skip, emb):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.block(torch.cat([x, skip], dim=1), emb)


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention over a fixed token count with a learned
    relative-position bias added to the logits. The most recent attention
    probabilities are kept on `last_attention` for inspection."""

    def __init__(self, channels: int, heads: int, tokens: int):
        super().__init__()
        self.heads = heads
        self.head_dim = channels // heads
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.relative_bias = nn.Parameter(torch.zeros(2 * tokens - 1, heads))
        index = torch.arange(tokens)
        self.register_buffer(
            "bias_index", index[:, None] - index[None, :] + tokens - 1, persistent=False
        )
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        logits = logits + self.relative_bias[self.bias_index].permute(2, 0, 1)
        attention = torch.softmax(logits, dim=-1)
        self.last_attention = attention.detach()
        out = (attention @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class TransformerLayer(nn.Module):
    def __init__(self, channels: int, heads: int, tokens: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(channels)
        self.attention = RelativeSelfAttention(channels, heads, tokens)
        self.ln2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels),
            nn.GELU(),
            nn.Linear(mlp_ratio * channels, channels),
        )

    def forward(self, x):
        x = x + self.attention(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class StageShapeError(AssertionError):
    pass


class TransUnetDenoiser(nn.Module):
    """Predicts the noise added to a masked pianoroll at step t.

    Input and output are (B, C, T, P); no output nonlinearity.
    """

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        cfg = self.config
        self.out_channels = cfg.out_channels
        self.trained = False

        self.stem = nn.Conv2d(cfg.in_channels, cfg.stem_width, 3, padding=1)
        widths = [cfg.stem_width, *cfg.encoder_widths]
        self.downs = nn.ModuleList(
            DownBlock(widths[i], widths[i + 1], cfg.time_embed_dim, cfg.groups)
            for i in range(len(cfg.encoder_widths))
        )
        depth = len(cfg.encoder_widths)
        self.bottleneck_hw = (cfg.time_dim >> depth, cfg.pitch_dim >> depth)
        tokens = self.bottleneck_hw[0] * self.bottleneck_hw[1]
        hidden = cfg.encoder_widths[-1]
        self.transformer = nn.ModuleList(
            TransformerLayer(hidden, cfg.transformer_heads, tokens)
            for _ in range(cfg.transformer_layers)
        )
        skip_widths = widths[:-1][::-1]  # deepest skip first
        up_in = [hidden, *cfg.decoder_widths[:-1]]
        self.ups = nn.ModuleList(
            UpBlock(up_in[i], skip_widths[i], cfg.decoder_widths[i], cfg.time_embed_dim, cfg.groups)
            for i in range(depth)
        )
        self.head = nn.Conv2d(cfg.decoder_widths[-1], cfg.out_channels, 3, padding=1)
        # Zero head: a fresh model predicts zero noise, so its loss sits at
        # the masked-noise baseline and early training is stable.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

        self._ladder = self._expected_shapes()

    def _expected_shapes(self):
        cfg = self.config
        t, p = cfg.time_dim, cfg.pitch_dim
        ladder = [("stem", cfg.stem_width, t, p)]
        for i, width in enumerate(cfg.encoder_widths):
            t, p = t // 2, p // 2
            ladder.append((f"down{i + 1}", width, t, p))
        ladder.append(("transformer", cfg.encoder_widths[-1], t, p))
        for i, width in enumerate(cfg.decoder_widths):
            t, p = t * 2, p * 2
            ladder.append((f"up{i + 1}", width, t, p))
        ladder.append(("head", cfg.out_channels, t, p))
        return ladder

    def _check(self, stage: str, x: torch.Tensor) -> None:
        expected = next(s[1:] for s in self._ladder if s[0] == stage)
        if tuple(x.shape[1:]) != expected:
            raise StageShapeError(
                f"{stage}: expected {expected}, got {tuple(x.shape[1:])}"
            )

    def _embed(self, t, batch: int, dtype) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.full((batch,), int(t), dtype=torch.long)
        emb = time_embedding(t, self.config.time_embed_dim, dtype=dtype)
        if emb.shape[0] == 1 and batch > 1:
            emb = emb.expand(batch, -1)
        return emb

    def forward(self, y: torch.Tensor, t) -> torch.Tensor:
        emb = self._embed(t, y.shape[0], y.dtype)
        h = self.stem(y)
        self._check("stem", h)
        skips = [h]
        for i, down in enumerate(self.downs):
            h = down(h, emb)
            self._check(f"down{i + 1}", h)
            skips.append(h)
        b, c, hh, ww = h.shape
        tokens = h.flatten(2).transpose(1, 2)
        for layer in self.transformer:
            tokens = layer(tokens)
        h = tokens.transpose(1, 2).reshape(b, c, hh, ww)
        self._check("transformer", h)
        skips.pop()  # bottleneck state is not a skip
        for i, up in enumerate(self.ups):
            h = up(h, skips.pop(), emb)
            self._check(f"up{i + 1}", h)
        h = self.head(h)
        self._check("head", h)
        return h


class FinalDecoder(nn.Module):
    """Maps the masked t=1 state to per-cell note probabilities.

    A reduced reuse of the denoiser blocks: stem, two residual blocks at a
    fixed t=1 conditioning, and a sigmoid head.
    """

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        cfg = self.config
        self.out_channels = cfg.out_channels
        self.trained = False
        self.stem = nn.Conv2d(cfg.in_channels, cfg.stem_width, 3, padding=1)
        self.blocks = nn.ModuleList(
            ResidualBlock(cfg.stem_width, cfg.stem_width, cfg.time_embed_dim, cfg.groups)
            for _ in range(2)
        )
        self.head = nn.Conv2d(cfg.stem_width, cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, y1: torch.Tensor) -> torch.Tensor:
        emb = time_embedding(1, self.config.time_embed_dim, dtype=y1.dtype)
        emb = emb.expand(y1.shape[0], -1)
        h = self.stem(y1)
        for block in self.blocks:
            h = block(h, emb)
        return torch.sigmoid(self.head(h))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
