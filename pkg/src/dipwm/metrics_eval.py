"""Metrics, transfer/robustness evaluation, PGD/FGSM baselines and the meta ablation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .fr_surrogates import EmbedderModel, SurrogatePool, cosine, embed_all
from .imaging_io import IdentityCorpus
from .meta_trainer import Trainer, TrainConfig, assign_targets, target_images_for
from .noise_pool import DEFAULT_EVAL_SPECS, EvalProcessingSpec, eval_process
from .watermark_codec import WatermarkDecoder, WatermarkEncoder, hard_bits

log = logging.getLogger(__name__)

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


class CalibrationError(ValueError):
    pass


# ---------------------------------------------------------------- scalar metrics


def bit_accuracy(w, w_hat) -> float:
    """1 - mean |w - w_hat| over every bit given."""
    w = torch.as_tensor(np.asarray(w, dtype=np.float64) if not isinstance(w, torch.Tensor) else w, dtype=torch.float64)
    w_hat = torch.as_tensor(
        np.asarray(w_hat, dtype=np.float64) if not isinstance(w_hat, torch.Tensor) else w_hat, dtype=torch.float64
    )
    if w.shape != w_hat.shape:
        raise ValueError(f"payload shapes differ: {tuple(w.shape)} vs {tuple(w_hat.shape)}")
    return float(1.0 - (w - w_hat).abs().mean())


def asr_from_cosines(cosines, tau: float) -> float:
    c = np.asarray(cosines, dtype=np.float64)
    return float(np.mean(c > tau)) if c.size else 0.0


@torch.no_grad()
def pair_cosines(model: EmbedderModel, x_a: torch.Tensor, x_b: torch.Tensor) -> np.ndarray:
    return cosine(embed_all(model, x_a), embed_all(model, x_b)).numpy()


def attack_success_rate(model: EmbedderModel, x_hat: torch.Tensor, x_t: torch.Tensor, tau: float | None = None) -> float:
    """Fraction of index-aligned pairs with cos(F(x_t), F(x_hat)) > tau."""
    tau = model.tau if tau is None else tau
    if tau is None:
        raise CalibrationError(f"model {model.name!r} has no calibrated threshold")
    if len(x_hat) != len(x_t):
        raise ValueError("watermarked and target batches must align")
    return asr_from_cosines(pair_cosines(model, x_t, x_hat), tau)


def _gauss_window(dtype) -> torch.Tensor:
    ax = torch.arange(SSIM_WINDOW, dtype=torch.float64) - SSIM_WINDOW // 2
    g = torch.exp(-(ax**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Per-window SSIM over valid 11x11 Gaussian windows, shape [N, C, H-10, W-10]."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 3:
        x, y = x[None], y[None]
    c = x.shape[1]
    win = _gauss_window(x.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    filt = lambda t: F.conv2d(t, win, groups=c)  # noqa: E731
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0, per_image: bool = False):
    """Mean SSIM (Gaussian 11x11, sigma 1.5, K1=0.01, K2=0.03) over channels and windows."""
    m = ssim_map(x.double(), y.double(), data_range)
    if per_image:
        return m.mean(dim=(1, 2, 3))
    return float(m.mean())


def psnr(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0, per_image: bool = False):
    mse = ((x.double() - y.double()) ** 2).flatten(1).mean(1)
    val = 10 * torch.log10(data_range**2 / mse.clamp_min(1e-20))
    return val if per_image else float(val.mean())


# ---------------------------------------------------------------- PGD / FGSM


@dataclass
class AttackSpec:
    method: str = "pgd"
    epsilon: float = 8 / 255
    iterations: int = 10
    step_size: float | None = None  # default 2.5 * epsilon / iterations
    ssim_target: float = 0.9
    ssim_tol: float = 0.03
    tune_epsilon: bool = True
    max_rounds: int = 8

    def __post_init__(self):
        if self.method not in ("pgd", "fgsm"):
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.method == "fgsm":
            self.iterations = 1
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def _ensemble_cosine(x, target_embeddings, models):
    return sum(cosine(m(x), target_embeddings[i]).mean() for i, m in enumerate(models)) / len(models)


def sign_gradient_attack(x_s, x_t, models, epsilon, iterations, step_size=None, trace=None):
    """Iterative sign-gradient ascent on mean ensemble cosine, L-inf projected and clamped."""
    if iterations == 0:
        return x_s.clone()
    step = epsilon if iterations == 1 else (step_size or 2.5 * epsilon / iterations)
    with torch.no_grad():
        target_embeddings = [m(x_t) for m in models]
    x = x_s.clone()
    for _ in range(iterations):
        x.requires_grad_(True)
        score = _ensemble_cosine(x, target_embeddings, models)
        (grad,) = torch.autograd.grad(score, x)
        if trace is not None:
            trace.append(float(score.detach()))
        with torch.no_grad():
            x = x + step * grad.sign()
            x = torch.min(torch.max(x, x_s - epsilon), x_s + epsilon).clamp(0.0, 1.0)
    if trace is not None:
        with torch.no_grad():
            trace.append(float(_ensemble_cosine(x, target_embeddings, models)))
    return x.detach()


def pgd_attack(x_s, x_t, models, spec: AttackSpec = AttackSpec()):
    """Returns (adversarial images, info). With ``tune_epsilon`` the budget is
    bisected until mean SSIM lands in ``ssim_target +- ssim_tol``."""
    run = lambda eps: sign_gradient_attack(x_s, x_t, models, eps, spec.iterations, spec.step_size)  # noqa: E731
    eps = spec.epsilon
    x_adv = run(eps)
    achieved = ssim(x_s, x_adv) if spec.iterations else 1.0
    if spec.tune_epsilon and spec.iterations:
        lo, hi = 0.0, None
        for _ in range(spec.max_rounds):
            if abs(achieved - spec.ssim_target) <= spec.ssim_tol:
                break
            if achieved > spec.ssim_target:  # too faint: grow epsilon
                lo = eps
                eps = eps * 2 if hi is None else (lo + hi) / 2
            else:
                hi = eps
                eps = (lo + hi) / 2
            x_adv = run(eps)
            achieved = ssim(x_s, x_adv)
    ok = abs(achieved - spec.ssim_target) <= spec.ssim_tol
    if spec.tune_epsilon and not ok:
        log.warning("SSIM budget %.2f +- %.2f not reached: achieved %.4f", spec.ssim_target, spec.ssim_tol, achieved)
    return x_adv, {"epsilon": eps, "ssim": achieved, "budget_met": ok}


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    fingerprint: str = ""

    COLUMNS = ("model", "role", "condition", "asr", "baseline_asr", "acc", "ssim_mean", "ssim_min", "psnr", "tau")

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"fingerprint": self.fingerprint, **r}, sort_keys=True) + "\n" for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, directory, stem: str) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jl, cs = directory / f"{stem}.jsonl", directory / f"{stem}.csv"
        jl.write_text(self.to_jsonl(), encoding="utf-8")
        cs.write_text(self.to_csv(), encoding="utf-8")
        return jl, cs

    def row(self, model: str, condition: str = "clean") -> dict:
        for r in self.rows:
            if r["model"] == model and r["condition"] == condition:
                return r
        raise KeyError((model, condition))

    def extend(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.rows + other.rows, self.fingerprint)


def _role(model, pool: SurrogatePool) -> str:
    if any(model is m for m in pool.meta_train):
        return "white_box_meta_train"
    if any(model is m for m in pool.meta_test):
        return "white_box_meta_test"
    return "black_box"


@dataclass
class WatermarkedSet:
    carriers: torch.Tensor
    watermarked: torch.Tensor
    targets: torch.Tensor
    payloads: torch.Tensor


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Round to the 8-bit grid, as a saved PNG would."""
    return torch.floor(x.clamp(0, 1) * 255 + 0.5) / 255


@torch.no_grad()
def watermark_test_set(encoder, corpus: IdentityCorpus, payloads=None, target_map=None, seed: int = 0, batch_size: int = 32):
    """Embed payloads into every test-split carrier; the output is 8-bit quantised."""
    encoder.eval()
    idx = corpus.indices("test")
    if len(idx) == 0:
        raise ValueError("corpus has no test split")
    if payloads is None:
        rng = np.random.default_rng([seed, 7])
        payloads = rng.integers(0, 2, (len(idx), encoder.cfg.payload_bits))
    w = torch.as_tensor(np.asarray(payloads), dtype=torch.float32)
    if w.shape != (len(idx), encoder.cfg.payload_bits):
        raise ValueError(f"payloads must be [{len(idx)}, {encoder.cfg.payload_bits}], got {tuple(w.shape)}")
    target_map = target_map or assign_targets(corpus, seed)
    x_s = corpus.images[idx]
    x_t = corpus.images[target_images_for(corpus, idx, target_map)]
    x_hat = torch.cat([encoder(x_s[i : i + batch_size], w[i : i + batch_size]) for i in range(0, len(idx), batch_size)])
    return WatermarkedSet(x_s, quantize(x_hat), x_t, w)


@torch.no_grad()
def decode_bits(decoder: WatermarkDecoder, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    decoder.eval()
    return torch.cat([hard_bits(decoder(x[i : i + batch_size])) for i in range(0, len(x), batch_size)])


def _fingerprint(encoder, decoder, pool, seed) -> str:
    h = hashlib.sha256()
    for module in (encoder, decoder, *pool.all_models):
        for name, p in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().contiguous().numpy().tobytes())
    h.update(str(seed).encode())
    return h.hexdigest()[:16]


def _rows_for_condition(ws: WatermarkedSet, processed, decoder, pool, condition, ssim_vals, psnr_val):
    acc = bit_accuracy(ws.payloads, decode_bits(decoder, processed))
    rows = []
    for model in pool.all_models:
        if model.tau is None:
            raise CalibrationError(f"model {model.name!r} has no calibrated threshold")
        rows.append({
            "model": model.name,
            "role": _role(model, pool),
            "condition": condition,
            "asr": attack_success_rate(model, processed, ws.targets),
            "baseline_asr": attack_success_rate(model, ws.carriers, ws.targets),
            "acc": acc,
            "ssim_mean": float(ssim_vals.mean()),
            "ssim_min": float(ssim_vals.min()),
            "psnr": psnr_val,
            "tau": float(model.tau),
        })
    return rows


def evaluate_transfer(encoder, decoder, pool: SurrogatePool, corpus: IdentityCorpus, payloads=None, target_map=None, seed: int = 0):
    """Clean-condition ASR per surrogate (white/black-box tagged), Acc, SSIM and PSNR."""
    ws = watermark_test_set(encoder, corpus, payloads, target_map, seed)
    ssim_vals = ssim(ws.carriers, ws.watermarked, per_image=True)
    rows = _rows_for_condition(ws, ws.watermarked, decoder, pool, "clean", ssim_vals, psnr(ws.carriers, ws.watermarked))
    return EvalReport(rows, _fingerprint(encoder, decoder, pool, seed))


def evaluate_robustness(
    encoder, decoder, pool: SurrogatePool, corpus: IdentityCorpus, specs=DEFAULT_EVAL_SPECS,
    payloads=None, target_map=None, seed: int = 0,
):
    """ASR and Acc after each processing spec, applied to the saved (8-bit) watermarked images.

    SSIM/PSNR columns describe the watermarked images before processing.
    """
    ws = watermark_test_set(encoder, corpus, payloads, target_map, seed)
    ssim_vals = ssim(ws.carriers, ws.watermarked, per_image=True)
    psnr_val = psnr(ws.carriers, ws.watermarked)
    rows = []
    for k, spec in enumerate(specs):
        processed = eval_process(ws.watermarked, spec, seed=seed * 1000 + k)
        rows += _rows_for_condition(ws, processed, decoder, pool, str(spec), ssim_vals, psnr_val)
    return EvalReport(rows, _fingerprint(encoder, decoder, pool, seed))


def evaluate_pgd_baseline(pool: SurrogatePool, corpus: IdentityCorpus, spec: AttackSpec = AttackSpec(), target_map=None, seed: int = 0):
    """Ensemble PGD/FGSM against the white-box surrogates, scored like the watermark."""
    idx = corpus.indices("test")
    target_map = target_map or assign_targets(corpus, seed)
    x_s = corpus.images[idx]
    x_t = corpus.images[target_images_for(corpus, idx, target_map)]
    x_adv, info = pgd_attack(x_s, x_t, pool.white_box, spec)
    x_adv = quantize(x_adv)
    ssim_vals = ssim(x_s, x_adv, per_image=True)
    rows = []
    for model in pool.all_models:
        rows.append({
            "model": model.name,
            "role": _role(model, pool),
            "condition": spec.method,
            "asr": attack_success_rate(model, x_adv, x_t),
            "baseline_asr": attack_success_rate(model, x_s, x_t),
            "acc": float("nan"),
            "ssim_mean": float(ssim_vals.mean()),
            "ssim_min": float(ssim_vals.min()),
            "psnr": psnr(x_s, x_adv),
            "tau": float(model.tau),
            "epsilon": info["epsilon"],
        })
    return EvalReport(rows, f"{spec.method}-{seed}")


# ---------------------------------------------------------------- ablation


def ablation_without_meta(
    corpus, pool, cfg: TrainConfig, noise_cfg=None, weights=None, codec_cfg=None,
    meta_trainer: Trainer | None = None, nometa_trainer: Trainer | None = None, seed: int = 0,
):
    """Train (or reuse) the meta and direct-ensemble arms and evaluate both identically.

    Returns ``(meta_report, nometa_report, meta_trainer, nometa_trainer)``.
    """
    meta_cfg = replace(cfg, meta=True)
    plain_cfg = replace(cfg, meta=False)
    for trainer, want in ((meta_trainer, meta_cfg), (nometa_trainer, plain_cfg)):
        if trainer is not None and trainer.cfg != want:
            raise ValueError(f"ablation arm config mismatch: {trainer.cfg} vs {want}")
    if meta_trainer is None:
        meta_trainer = Trainer(corpus, pool, meta_cfg, noise_cfg, weights, codec_cfg)
        meta_trainer.train()
    if nometa_trainer is None:
        nometa_trainer = Trainer(corpus, pool, plain_cfg, noise_cfg, weights, codec_cfg)
        nometa_trainer.train()
    reports = []
    for trainer in (meta_trainer, nometa_trainer):
        st = trainer.state
        reports.append(evaluate_transfer(st.encoder, st.decoder, pool, corpus, target_map=st.target_map, seed=seed))
    return reports[0], reports[1], meta_trainer, nometa_trainer


def black_box_asr(report: EvalReport, condition: str = "clean") -> float:
    vals = [r["asr"] for r in report.rows if r["role"] == "black_box" and r["condition"] == condition]
    return float(np.mean(vals)) if vals else math.nan


def white_box_asr(report: EvalReport, condition: str = "clean") -> float:
    vals = [r["asr"] for r in report.rows if r["role"].startswith("white_box") and r["condition"] == condition]
    return float(np.mean(vals)) if vals else math.nan
