"""Symmetric dual-arm U-Net with adaptive group-norm conditioning.

Both arms share one architecture: a 2D U-Net over slice stacks whose
residual blocks are modulated through adaptive group normalization. The
modulation chain per block is

    out = c_s * (f_s * (t_s * GroupNorm(h) + t_b))

where (t_s, t_b) come from the timestep MLP, c_s from the clinical MLP, and
f_s = 1 + proj(feature) is a learned 1x1 projection of the matching-scale
feature map from the other arm. The clinical and feature projections are
zero-initialized, so conditioning starts as the identity and the two arms
can exchange roles without any dedicated parameters.

An arm run without an incoming feature pyramid acts as a conditioner: it
maps its input stack to the task prediction and emits its own residual-block
outputs as the multi-scale feature pyramid for the other arm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractViolation


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 64
    depth: int = 4
    channel_multipliers: tuple[int, ...] = (1, 2, 3, 4)
    attention_resolutions: tuple[int, ...] = (16, 8, 4)
    attention_heads: int = 4
    in_slices: int = 15
    image_size: tuple[int, int] = (96, 112)
    group_norm_groups: int = 32
    res_blocks: int = 4
    dropout: float = 0.0
    clinical_dim: int = 13
    time_embed_mult: int = 8
    fusion: str = "adagn"  # "adagn" (multiplicative) or "concat"
    condition_placement: str = "both"  # where clinical data enters: both/denoiser/conditioner

    def __post_init__(self):
        if len(self.channel_multipliers) != self.depth:
            raise ConfigurationError(
                f"need one channel multiplier per level: depth={self.depth}, "
                f"multipliers={self.channel_multipliers}"
            )
        if self.in_slices < 1 or self.in_slices % 2 == 0:
            raise ConfigurationError(f"in_slices must be odd, got {self.in_slices}")
        factor = 2 ** (self.depth - 1)
        h, w = self.image_size
        if h % factor or w % factor:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by 2^(depth-1)={factor}"
            )
        for mult in self.channel_multipliers:
            if (self.base_channels * mult) % self.attention_heads:
                raise ConfigurationError(
                    f"channels {self.base_channels * mult} not divisible by "
                    f"{self.attention_heads} attention heads"
                )
        if self.fusion not in ("adagn", "concat"):
            raise ConfigurationError(f"unknown fusion mode {self.fusion!r}")
        if self.condition_placement not in ("both", "denoiser", "conditioner"):
            raise ConfigurationError(
                f"unknown condition placement {self.condition_placement!r}"
            )

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def time_embed_dim(self) -> int:
        return self.base_channels * self.time_embed_mult


def clinical_for_role(config: NetConfig, role: str, c: torch.Tensor | None):
    """Gate the clinical vector by the arm's current role and the placement config."""
    if c is None or config.clinical_dim == 0:
        return None
    allowed = {
        "both": ("conditioner", "denoiser"),
        "denoiser": ("denoiser",),
        "conditioner": ("conditioner",),
    }[config.condition_placement]
    return c if role in allowed else None


_FREQ_CACHE: dict[tuple[int, float], torch.Tensor] = {}


def sinusoidal_encode(t, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Interleaved sin/cos positional encoding at geometric frequencies.

    Channel 2i is sin(t / base^(2i/dim)) and channel 2i+1 the matching cos,
    so t = 0 encodes to alternating zeros and ones.
    """
    if dim % 2:
        raise ConfigurationError(f"encoding dim must be even, got {dim}")
    if not isinstance(t, torch.Tensor):
        t = torch.tensor([float(t)])
    t = t.float()
    key = (dim, base)
    freqs = _FREQ_CACHE.get(key)
    if freqs is None:
        half = dim // 2
        freqs = base ** (-torch.arange(half, dtype=torch.float64) * 2.0 / dim)
        _FREQ_CACHE[key] = freqs
    angles = t[..., None].double() * freqs
    out = torch.empty(*t.shape, dim, dtype=torch.float64)
    out[..., 0::2] = torch.sin(angles)
    out[..., 1::2] = torch.cos(angles)
    return out.to(t.dtype if t.is_floating_point() else torch.float32)


def norm_groups(channels: int, requested: int) -> int:
    """Largest divisor of ``channels`` not exceeding the requested group count."""
    g = min(requested, channels)
    while channels % g:
        g -= 1
    return g


def _channelwise(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape a per-channel vector to broadcast over spatial dims of ``like``."""
    if v.ndim == like.ndim:
        return v
    if v.ndim == 1:
        v = v.expand(like.shape[0], -1)
    return v.reshape(*v.shape, *([1] * (like.ndim - v.ndim)))


def adagn(
    h: torch.Tensor,
    t_scale: torch.Tensor,
    t_shift: torch.Tensor,
    c_scale: torch.Tensor | None = None,
    feature_scale: torch.Tensor | None = None,
    groups: int = 32,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Adaptive group normalization: c_s * (f_s * (t_s * GN(h) + t_b)).

    Identity modulation (t_scale = 1, t_shift = 0, scales absent or 1)
    reduces to plain group normalization.
    """
    if t_scale.shape[-1] != h.shape[1]:
        raise ContractViolation(
            f"modulation length {t_scale.shape[-1]} != {h.shape[1]} channels"
        )
    out = F.group_norm(h, norm_groups(h.shape[1], groups), eps=eps)
    out = _channelwise(t_scale, h) * out + _channelwise(t_shift, h)
    if feature_scale is not None:
        if feature_scale.shape[-2:] != h.shape[-2:] or feature_scale.shape[1] != h.shape[1]:
            raise ContractViolation(
                f"feature modulation shape {tuple(feature_scale.shape)} does not "
                f"match features {tuple(h.shape)}"
            )
        out = out * feature_scale
    if c_scale is not None:
        out = out * _channelwise(c_scale, h)
    return out


def zero_init(module: nn.Module) -> nn.Module:
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


class ResBlock(nn.Module):
    """Pre-activation residual block with the adaptive-norm conditioning site."""

    def __init__(self, in_ch: int, out_ch: int, config: NetConfig):
        super().__init__()
        self.out_ch = out_ch
        self.groups = norm_groups(out_ch, config.group_norm_groups)
        self.fusion = config.fusion
        self.norm1 = nn.GroupNorm(norm_groups(in_ch, config.group_norm_groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(config.time_embed_dim, 2 * out_ch)
        self.clin_proj = (
            zero_init(nn.Linear(config.time_embed_dim, out_ch))
            if config.clinical_dim > 0
            else None
        )
        if config.fusion == "adagn":
            self.feat_proj = zero_init(nn.Conv2d(out_ch, out_ch, 1))
        else:
            self.feat_proj = zero_init(nn.Conv2d(2 * out_ch, out_ch, 1))
        self.dropout = nn.Dropout(config.dropout)
        self.conv2 = zero_init(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb, cemb=None, feature=None):
        # temb/cemb arrive pre-activated (shared SiLU hoisted to the arm).
        h = self.conv1(F.silu(self.norm1(x)))
        t_raw = self.time_proj(temb)
        t_scale_raw, t_shift = t_raw.chunk(2, dim=-1)
        c_scale = None
        if cemb is not None and self.clin_proj is not None:
            c_scale = 1.0 + self.clin_proj(cemb)
        if self.fusion == "adagn":
            feature_scale = None
            if feature is not None:
                feature_scale = 1.0 + self.feat_proj(feature)
            h = adagn(h, 1.0 + t_scale_raw, t_shift, c_scale, feature_scale, self.groups)
        else:
            h = adagn(h, 1.0 + t_scale_raw, t_shift, c_scale, None, self.groups)
            if feature is not None:
                h = h + self.feat_proj(torch.cat([h, feature], dim=1))
        h = self.conv2(self.dropout(F.silu(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Multi-head self-attention over spatial positions with residual output."""

    def __init__(self, channels: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(norm_groups(channels, groups), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = zero_init(nn.Conv2d(channels, channels, 1))

    def forward(self, x):
        b, c, h, w = x.shape
        head_dim = c // self.heads
        q, k, v = (
            self.qkv(self.norm(x)).reshape(b, 3, self.heads, head_dim, h * w).unbind(1)
        )
        weights = torch.softmax(
            torch.einsum("bhdi,bhdj->bhij", q, k) / math.sqrt(head_dim), dim=-1
        )
        out = torch.einsum("bhij,bhdj->bhdi", weights, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def block_trace(config: NetConfig) -> list[tuple[int, tuple[int, int]]]:
    """(channels, spatial size) of every residual block output, forward order.

    Matching positions across the two arms share this trace, which also
    defines the feature-pyramid layout.
    """
    chans = config.level_channels
    h, w = config.image_size
    trace: list[tuple[int, tuple[int, int]]] = []
    for level in range(config.depth):
        for _ in range(config.res_blocks):
            trace.append((chans[level], (h, w)))
        if level != config.depth - 1:
            h, w = h // 2, w // 2
    trace.append((chans[-1], (h, w)))
    trace.append((chans[-1], (h, w)))
    for level in reversed(range(config.depth)):
        for _ in range(config.res_blocks + 1):
            trace.append((chans[level], (h, w)))
        if level != 0:
            h, w = h * 2, w * 2
    return trace


class UNetArm(nn.Module):
    """One arm of the dual-arm network.

    ``forward(x, t, c, pyramid)`` returns the output stack and the arm's own
    feature pyramid. Passing ``pyramid=None`` runs the arm as a conditioner;
    passing the other arm's pyramid runs it as a denoiser whose every
    residual block is modulated by the matching-scale feature map.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        chans = config.level_channels
        temb = config.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_channels, temb), nn.SiLU(), nn.Linear(temb, temb)
        )
        self.clin_mlp = (
            nn.Sequential(
                nn.Linear(config.clinical_dim, temb), nn.SiLU(), nn.Linear(temb, temb)
            )
            if config.clinical_dim > 0
            else None
        )
        self.stem = nn.Conv2d(config.in_slices, chans[0], 3, padding=1)

        def attend(size: tuple[int, int]) -> bool:
            return min(size) in config.attention_resolutions

        encoder: list[nn.Module] = []
        self._encoder_ops: list[str] = []
        skip_chans = [chans[0]]
        size = tuple(config.image_size)
        ch = chans[0]
        for level in range(config.depth):
            for _ in range(config.res_blocks):
                encoder.append(ResBlock(ch, chans[level], config))
                self._encoder_ops.append("res")
                ch = chans[level]
                if attend(size):
                    encoder.append(
                        AttentionBlock(ch, config.attention_heads, config.group_norm_groups)
                    )
                    self._encoder_ops.append("attn")
                skip_chans.append(ch)
            if level != config.depth - 1:
                encoder.append(Downsample(ch))
                self._encoder_ops.append("down")
                skip_chans.append(ch)
                size = (size[0] // 2, size[1] // 2)
        self.encoder = nn.ModuleList(encoder)

        self.middle = nn.ModuleList(
            [
                ResBlock(ch, ch, config),
                AttentionBlock(ch, config.attention_heads, config.group_norm_groups),
                ResBlock(ch, ch, config),
            ]
        )

        decoder: list[nn.Module] = []
        self._decoder_ops: list[str] = []
        for level in reversed(range(config.depth)):
            for _ in range(config.res_blocks + 1):
                decoder.append(ResBlock(ch + skip_chans.pop(), chans[level], config))
                self._decoder_ops.append("res")
                ch = chans[level]
                if attend(size):
                    decoder.append(
                        AttentionBlock(ch, config.attention_heads, config.group_norm_groups)
                    )
                    self._decoder_ops.append("attn")
            if level != 0:
                decoder.append(Upsample(ch))
                self._decoder_ops.append("up")
                size = (size[0] * 2, size[1] * 2)
        self.decoder = nn.ModuleList(decoder)

        self.out_norm = nn.GroupNorm(norm_groups(ch, config.group_norm_groups), ch)
        self.out_conv = zero_init(nn.Conv2d(ch, config.in_slices, 3, padding=1))
        self.n_res_blocks = len(block_trace(config))

    def forward(
        self,
        x: torch.Tensor,
        t,
        c: torch.Tensor | None = None,
        pyramid: list[torch.Tensor] | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.ndim != 4 or x.shape[1] != self.config.in_slices:
            raise ContractViolation(
                f"expected (B, {self.config.in_slices}, H, W) input, got {tuple(x.shape)}"
            )
        if tuple(x.shape[-2:]) != tuple(self.config.image_size):
            raise ContractViolation(
                f"input spatial size {tuple(x.shape[-2:])} != configured "
                f"{tuple(self.config.image_size)}"
            )
        if pyramid is not None and len(pyramid) != self.n_res_blocks:
            raise ContractViolation(
                f"pyramid has {len(pyramid)} maps, arm has {self.n_res_blocks} residual blocks"
            )

        if not isinstance(t, torch.Tensor):
            t = torch.full((x.shape[0],), float(t), dtype=x.dtype)
        elif t.ndim == 0:
            t = t.reshape(1).to(x.dtype).expand(x.shape[0])
        temb = F.silu(
            self.time_mlp(sinusoidal_encode(t, self.config.base_channels).to(x.dtype))
        )
        cemb = None
        if c is not None:
            if self.clin_mlp is None:
                raise ContractViolation("arm was built without a clinical pathway")
            cemb = F.silu(self.clin_mlp(c.to(x.dtype)))

        own: list[torch.Tensor] = []
        incoming = iter(pyramid) if pyramid is not None else None

        def run_res(block: ResBlock, h: torch.Tensor) -> torch.Tensor:
            feature = next(incoming) if incoming is not None else None
            if feature is not None and feature.shape[1:] != (
                block.out_ch,
                *h.shape[-2:],
            ):
                raise ContractViolation(
                    f"pyramid level shape {tuple(feature.shape[1:])} does not match "
                    f"block ({block.out_ch}, {h.shape[-2]}, {h.shape[-1]})"
                )
            out = block(h, temb, cemb, feature)
            own.append(out)
            return out

        h = self.stem(x)
        skips = [h]
        idx = 0
        for op in self._encoder_ops:
            module = self.encoder[idx]
            idx += 1
            if op == "res":
                h = run_res(module, h)
                skips.append(h)
            elif op == "attn":
                h = module(h)
                skips[-1] = h
            else:
                h = module(h)
                skips.append(h)

        h = run_res(self.middle[0], h)
        h = self.middle[1](h)
        h = run_res(self.middle[2], h)

        idx = 0
        for op in self._decoder_ops:
            module = self.decoder[idx]
            idx += 1
            if op == "res":
                h = run_res(module, torch.cat([h, skips.pop()], dim=1))
            else:
                h = module(h)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out, own


def build_dual_arm(config: NetConfig) -> tuple[UNetArm, UNetArm]:
    """Construct the conditioner and denoiser arms (identical architecture)."""
    return UNetArm(config), UNetArm(config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
