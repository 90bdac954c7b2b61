"""Watermark encoder/decoder networks with CBAM attention."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    """Shape or parameter mismatch between inputs and a network's configuration."""


@dataclass(frozen=True)
class CodecConfig:
    payload_bits: int = 50
    image_size: int = 112
    n_stages: int = 4  # stride-2 stages; seed map side = image_size / 2**n_stages
    carrier_blocks: int = 4
    carrier_channels: int = 16
    payload_channels: int = 16
    decoder_channels: int = 64
    cbam_reduction: int = 4

    @property
    def seed_size(self) -> int:
        return self.image_size // 2**self.n_stages

    def __post_init__(self):
        if self.image_size % 2**self.n_stages:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by 2**{self.n_stages}"
            )
        if min(self.payload_bits, self.carrier_blocks, self.carrier_channels, self.payload_channels) < 1:
            raise ConfigurationError("codec sizes must be positive")


class CBAM(nn.Module):
    """Channel then spatial attention; returns a map of the input's shape."""

    def __init__(self, channels: int, reduction: int = 4, spatial_kernel: int = 7):
        super().__init__()
        if channels < 2:
            raise ConfigurationError("CBAM needs at least 2 channels")
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(),
            nn.Linear(hidden, channels),
        )
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2)

    def gates(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Channel gate [N, C, 1, 1] and spatial gate [N, 1, H, W], both in (0, 1)."""
        n, c = f.shape[:2]
        avg = self.mlp(f.mean(dim=(2, 3)))
        mx = self.mlp(f.amax(dim=(2, 3)))
        channel_gate = torch.sigmoid(avg + mx).view(n, c, 1, 1)
        refined = f * channel_gate
        pooled = torch.cat([refined.mean(dim=1, keepdim=True), refined.amax(dim=1, keepdim=True)], dim=1)
        spatial_gate = torch.sigmoid(self.spatial(pooled))
        return channel_gate, spatial_gate

    def forward(self, f):
        channel_gate, spatial_gate = self.gates(f)
        return f * channel_gate * spatial_gate


def init_relu_net(module: nn.Module) -> None:
    """He-normal weights and zero biases for every conv / linear layer.

    The framework default shrinks activations by about 1/sqrt(3) per layer, which
    after the four upsampling stages leaves the residual nearly payload independent.
    """
    for m in module.modules():
        if isinstance(m, nn.ConvTranspose2d):
            # each output pixel sees (k / stride)**2 taps per input channel
            taps = m.in_channels * (m.kernel_size[0] // m.stride[0]) * (m.kernel_size[1] // m.stride[1])
            nn.init.normal_(m.weight, std=math.sqrt(2.0 / taps))
        elif isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
        else:
            continue
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def _conv_relu(c_in, c_out, stride=1):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), nn.ReLU())


def _conv_bn_relu(c_in, c_out, stride=1):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), nn.BatchNorm2d(c_out), nn.ReLU())


class PayloadExpander(nn.Module):
    """Project an L-bit payload to a seed map and upsample it to image size."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.payload_channels
        self.project = nn.Linear(cfg.payload_bits, c * cfg.seed_size**2)
        self.upsample = nn.Sequential(
            *[m for _ in range(cfg.n_stages) for m in (nn.ConvTranspose2d(c, c, 4, stride=2, padding=1), nn.ReLU())]
        )
        self.attention = CBAM(c, cfg.cbam_reduction)
        init_relu_net(self)
        with torch.no_grad():
            # same projection at every seed cell: the code starts translation invariant,
            # which a decoder ending in global pooling can read
            seed_w = self.project.weight.view(c, cfg.seed_size**2, cfg.payload_bits)
            seed_w.copy_(seed_w[:, :1].expand_as(seed_w))

    def forward(self, w):
        if w.ndim != 2 or w.shape[1] != self.cfg.payload_bits:
            raise ConfigurationError(
                f"payload must be [N, {self.cfg.payload_bits}], got {tuple(w.shape)}"
            )
        s = self.cfg.seed_size
        seed = self.project(w).view(-1, self.cfg.payload_channels, s, s)
        return self.attention(self.upsample(seed))


class WatermarkEncoder(nn.Module):
    """x_hat = clamp(x + R(x, w), 0, 1).

    R runs a Conv-ReLU carrier branch with CBAM, concatenates the expanded
    payload, fuses with a 1x1 conv and projects back to RGB.
    """

    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.carrier_channels
        blocks = [_conv_relu(3, c)] + [_conv_relu(c, c) for _ in range(cfg.carrier_blocks - 1)]
        self.carrier = nn.Sequential(*blocks)
        self.carrier_attention = CBAM(c, cfg.cbam_reduction)
        self.payload = PayloadExpander(cfg)
        self.fuse = nn.Sequential(nn.Conv2d(c + cfg.payload_channels, c, 1), nn.ReLU())
        self.to_rgb = nn.Conv2d(c, 3, 3, padding=1)
        for part in (self.carrier, self.carrier_attention, self.fuse, self.to_rgb):
            init_relu_net(part)  # the payload expander initialises itself
        with torch.no_grad():
            self.to_rgb.weight.mul_(0.1)  # start close to the identity map

    def residual(self, x, w):
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ConfigurationError(f"carrier must be [N, 3, {s}, {s}], got {tuple(x.shape)}")
        if w.shape[0] != x.shape[0]:
            raise ConfigurationError("carrier and payload batch sizes differ")
        feats = self.carrier_attention(self.carrier(x))
        fused = self.fuse(torch.cat([feats, self.payload(w)], dim=1))
        return self.to_rgb(fused)

    def forward(self, x, w):
        return torch.clamp(x + self.residual(x, w), 0.0, 1.0)


class WatermarkDecoder(nn.Module):
    """Strided Conv-BN-ReLU stack, global average pool, linear head to L logits.

    Width doubles per stage up to ``decoder_channels``; the last stage is at
    least L wide so the pooled descriptor can carry every bit.
    """

    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__()
        self.cfg = cfg
        widths = [min(cfg.decoder_channels, 16 * 2**k) for k in range(cfg.n_stages)]
        widths[-1] = max(widths[-1], cfg.payload_bits)
        layers, c_in = [], 3
        for c_out in widths:
            layers.append(_conv_bn_relu(c_in, c_out, stride=2))
            c_in = c_out
        layers.append(_conv_bn_relu(c_in, c_in))
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, cfg.payload_bits)
        init_relu_net(self)

    def forward(self, x):
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ConfigurationError(f"decoder input must be [N, 3, {s}, {s}], got {tuple(x.shape)}")
        return self.head(self.features(x).mean(dim=(2, 3)))


def hard_bits(logits: torch.Tensor) -> torch.Tensor:
    return (torch.sigmoid(logits) > 0.5).to(logits.dtype)


def parameters_of(module: nn.Module) -> dict[str, torch.Tensor]:
    """Named parameters as a plain dict, suitable for :func:`encode_with`."""
    return dict(module.named_parameters())


def encode_with(encoder: WatermarkEncoder, params: dict[str, torch.Tensor], x, w):
    """Run ``encoder`` under an override parameter set; the module is not mutated."""
    return functional_call(encoder, params, (x, w))


def params_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints


def save_codec(path, encoder: WatermarkEncoder, decoder: WatermarkDecoder, extra: dict | None = None) -> None:
    if encoder.cfg != decoder.cfg:
        raise ConfigurationError("encoder and decoder configs differ")
    blob = {
        "format_version": FORMAT_VERSION,
        "manifest": asdict(encoder.cfg),
        "encoder": encoder.state_dict(),
        "decoder": decoder.state_dict(),
        "extra": extra or {},
    }
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(blob, tmp)
    os.replace(tmp, path)


def load_codec(path) -> tuple[WatermarkEncoder, WatermarkDecoder, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint format {version}")
    cfg = CodecConfig(**blob["manifest"])
    encoder, decoder = WatermarkEncoder(cfg), WatermarkDecoder(cfg)
    encoder.load_state_dict(blob["encoder"])
    decoder.load_state_dict(blob["decoder"])
    encoder.eval()
    decoder.eval()
    return encoder, decoder, blob["extra"]
