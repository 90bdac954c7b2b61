"""Training-time differentiable distortions and evaluation-time image processing."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .imaging_io import to_uint8

log = logging.getLogger(__name__)

# ITU-T T.81 Annex K tables
_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)
_CHROMA_TABLE = np.full((8, 8), 99.0)
_CHROMA_TABLE[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]

_RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)


def quality_table(base: np.ndarray, qf: int) -> np.ndarray:
    """IJG quality scaling of a base quantisation table."""
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf  # integer, as libjpeg
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1, 255)


def _dct_matrix() -> np.ndarray:
    m = np.zeros((8, 8))
    for k in range(8):
        alpha = math.sqrt(1 / 8) if k == 0 else math.sqrt(2 / 8)
        for n in range(8):
            m[k, n] = alpha * math.cos(math.pi * (2 * n + 1) * k / 16)
    return m


_DCT = _dct_matrix()


def smooth_round(v: torch.Tensor) -> torch.Tensor:
    """round(v) + (v - round(v))**3; passes a nonzero gradient off the integers."""
    r = torch.round(v)
    return r + (v - r) ** 3


def _blocks(ch: torch.Tensor) -> torch.Tensor:
    n, h, w = ch.shape
    return ch.reshape(n, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)


def _unblocks(b: torch.Tensor) -> torch.Tensor:
    n, hb, wb = b.shape[:3]
    return b.permute(0, 1, 3, 2, 4).reshape(n, hb * 8, wb * 8)


def _pad8(t: torch.Tensor) -> torch.Tensor:
    h, w = t.shape[-2:]
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        t = F.pad(t[:, None], (0, pw, 0, ph), mode=mode)[:, 0]
    return t


def _jpeg_channel(ch: torch.Tensor, table: np.ndarray, rounding) -> torch.Tensor:
    h, w = ch.shape[-2:]
    padded = _pad8(ch)
    dct = torch.as_tensor(_DCT, dtype=ch.dtype)
    q = torch.as_tensor(table, dtype=ch.dtype)
    blocks = _blocks(padded - 128.0)
    coeffs = dct @ blocks @ dct.T
    coeffs = rounding(coeffs / q) * q
    out = _unblocks(dct.T @ coeffs @ dct) + 128.0
    return out[:, :h, :w]


def diff_jpeg(x: torch.Tensor, qf: int = 50, rounding=smooth_round) -> torch.Tensor:
    """Differentiable JPEG round trip with 4:2:0 chroma subsampling.

    Sizes that are not multiples of 8 (or 16 for chroma) are reflect-padded
    per channel and cropped back.
    """
    if not 1 <= qf <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {qf}")
    n, c, h, w = x.shape
    if c != 3:
        raise ValueError("diff_jpeg expects RGB input")
    to_ycc = torch.as_tensor(_RGB_TO_YCBCR, dtype=x.dtype)
    to_rgb = torch.as_tensor(_YCBCR_TO_RGB, dtype=x.dtype)
    ycc = torch.einsum("ij,njhw->nihw", to_ycc, x * 255.0)
    ycc = ycc + torch.tensor([0.0, 128.0, 128.0], dtype=x.dtype).view(1, 3, 1, 1)

    luma = _jpeg_channel(ycc[:, 0], quality_table(_LUMA_TABLE, qf), rounding)
    chroma_table = quality_table(_CHROMA_TABLE, qf)
    chroma = []
    for k in (1, 2):
        sub = F.avg_pool2d(ycc[:, k : k + 1], 2, ceil_mode=True)[:, 0]
        rec = _jpeg_channel(sub, chroma_table, rounding)
        up = F.interpolate(rec[:, None], scale_factor=2, mode="bilinear", align_corners=False)
        chroma.append(up[:, 0, :h, :w])
    ycc = torch.stack([luma] + chroma, dim=1)
    ycc = ycc - torch.tensor([0.0, 128.0, 128.0], dtype=x.dtype).view(1, 3, 1, 1)
    rgb = torch.einsum("ij,njhw->nihw", to_rgb, ycc) / 255.0
    return rgb.clamp(0.0, 1.0)


def real_jpeg(x: torch.Tensor, qf: int) -> torch.Tensor:
    """Baseline JPEG encode/decode of every image through libjpeg (Pillow)."""
    if not 1 <= qf <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {qf}")
    out = []
    for img in x:
        buf = io.BytesIO()
        Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=int(qf))
        buf.seek(0)
        with Image.open(buf) as dec:
            arr = np.asarray(dec.convert("RGB"), dtype=np.float32) / 255.0
        out.append(torch.from_numpy(arr).permute(2, 0, 1))
    return torch.stack(out).to(x.dtype)


def add_gaussian_noise(x: torch.Tensor, var: float, seed: int) -> torch.Tensor:
    """x + N(0, var), clamped. The noise is a constant w.r.t. autograd."""
    if var < 0:
        raise ValueError(f"noise variance must be >= 0, got {var}")
    if var == 0:
        return x
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype) * math.sqrt(var)
    return (x + noise).clamp(0.0, 1.0)


# ---------------------------------------------------------------- noise pool

POOL_OPS = ("identity", "jpeg", "gaussian")


@dataclass
class NoisePoolConfig:
    jpeg_qf: int = 50
    gaussian_var: float = 0.003
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # identity, jpeg, gaussian

    def __post_init__(self):
        self.weights = tuple(float(v) for v in self.weights)
        if not 1 <= self.jpeg_qf <= 100:
            raise ValueError(f"jpeg_qf must be in [1, 100], got {self.jpeg_qf}")
        if self.gaussian_var < 0:
            raise ValueError("gaussian_var must be >= 0")
        if len(self.weights) != 3 or min(self.weights) < 0 or sum(self.weights) <= 0:
            raise ValueError(f"invalid selection weights {self.weights}")


def draw_op(cfg: NoisePoolConfig, rng: np.random.Generator) -> str:
    p = np.asarray(cfg.weights) / sum(cfg.weights)
    return POOL_OPS[rng.choice(3, p=p)]


def apply_pool_op(x, op: str, cfg: NoisePoolConfig, seed: int = 0):
    if op == "identity":
        return x
    if op == "jpeg":
        return diff_jpeg(x, cfg.jpeg_qf)
    if op == "gaussian":
        return add_gaussian_noise(x, cfg.gaussian_var, seed)
    raise ValueError(f"unknown noise-pool op {op!r}")


def sample_and_apply(x, cfg: NoisePoolConfig, rng: np.random.Generator, trace: list | None = None):
    """Draw one op for the whole batch and apply it.

    The draw (and the noise seed) come from ``rng``; ``trace`` collects the
    op names if given.
    """
    op = draw_op(cfg, rng)
    seed = int(rng.integers(2**31))
    log.debug("noise pool draw: %s (seed %d)", op, seed)
    if trace is not None:
        trace.append(op)
    return apply_pool_op(x, op, cfg, seed)


# ---------------------------------------------------------------- evaluation

EVAL_OPS = ("identity", "gaussian_noise", "jpeg", "resize", "gaussian_blur")


@dataclass(frozen=True)
class EvalProcessingSpec:
    op: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.op not in EVAL_OPS:
            raise ValueError(f"unsupported processing op {self.op!r}")
        p = self.params
        if self.op == "gaussian_noise" and not p.get("var", -1) >= 0:
            raise ValueError("gaussian_noise needs var >= 0")
        if self.op == "jpeg" and not 1 <= p.get("qf", 0) <= 100:
            raise ValueError("jpeg needs 1 <= qf <= 100")
        if self.op == "resize" and not 0 < p.get("scale", 0) <= 1:
            raise ValueError("resize needs 0 < scale <= 1")
        if self.op == "gaussian_blur" and not (p.get("kernel", 0) % 2 == 1 and p.get("sigma", 0) > 0):
            raise ValueError("gaussian_blur needs an odd kernel and sigma > 0")

    def __str__(self):
        keys = {"gaussian_noise": ("var",), "jpeg": ("qf",), "resize": ("scale",), "gaussian_blur": ("kernel", "sigma")}
        return ":".join([self.op] + [f"{self.params[k]:g}" for k in keys.get(self.op, ())])

    @classmethod
    def parse(cls, text: str) -> "EvalProcessingSpec":
        """Parse ``op[:arg...]``, e.g. ``jpeg:30``, ``gaussian_blur:3:30``, ``resize:0.5``."""
        name, *args = text.strip().split(":")
        aliases = {"noise": "gaussian_noise", "blur": "gaussian_blur", "none": "identity"}
        name = aliases.get(name, name)
        try:
            if name == "identity" and not args:
                return cls("identity")
            if name == "gaussian_noise" and len(args) == 1:
                return cls(name, {"var": float(args[0])})
            if name == "jpeg" and len(args) == 1:
                return cls(name, {"qf": int(args[0])})
            if name == "resize" and len(args) == 1:
                return cls(name, {"scale": float(args[0])})
            if name == "gaussian_blur" and len(args) == 2:
                return cls(name, {"kernel": int(args[0]), "sigma": float(args[1])})
        except ValueError as exc:
            raise ValueError(f"bad processing spec {text!r}: {exc}") from exc
        raise ValueError(f"bad processing spec {text!r}")


# Table 3 robustness settings
DEFAULT_EVAL_SPECS = (
    EvalProcessingSpec("gaussian_noise", {"var": 0.003}),
    EvalProcessingSpec("jpeg", {"qf": 30}),
    EvalProcessingSpec("resize", {"scale": 0.5}),
    EvalProcessingSpec("gaussian_blur", {"kernel": 3, "sigma": 30.0}),
)


def gaussian_kernel(size: int, sigma: float) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    k = torch.outer(g, g)
    return k / k.sum()


def gaussian_blur(x: torch.Tensor, kernel: int, sigma: float) -> torch.Tensor:
    k = gaussian_kernel(kernel, sigma).to(x.dtype)
    weight = k.expand(x.shape[1], 1, kernel, kernel)
    pad = kernel // 2
    return F.conv2d(F.pad(x, (pad,) * 4, mode="reflect"), weight, groups=x.shape[1])


def resize_roundtrip(x: torch.Tensor, scale: float) -> torch.Tensor:
    h, w = x.shape[-2:]
    small = F.interpolate(x, size=(max(1, round(h * scale)), max(1, round(w * scale))), mode="bilinear", align_corners=False)
    return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)


@torch.no_grad()
def eval_process(x: torch.Tensor, spec: EvalProcessingSpec, seed: int = 0) -> torch.Tensor:
    p = spec.params
    if spec.op == "identity":
        return x
    if spec.op == "gaussian_noise":
        y = add_gaussian_noise(x, p["var"], seed)
    elif spec.op == "jpeg":
        y = real_jpeg(x, p["qf"])
    elif spec.op == "resize":
        y = resize_roundtrip(x, p["scale"])
    elif spec.op == "gaussian_blur":
        y = gaussian_blur(x, p["kernel"], p["sigma"])
    else:  # pragma: no cover - rejected in EvalProcessingSpec
        raise ValueError(f"unsupported processing op {spec.op!r}")
    return y.clamp(0.0, 1.0)
