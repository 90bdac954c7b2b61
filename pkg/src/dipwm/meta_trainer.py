"""Multi-task meta-optimisation of the watermark encoder and decoder.

One outer step:

1. encode the carriers with the current encoder parameters ``phi``;
2. for every meta-train surrogate, take its adversarial loss, one inner SGD
   step gives temporary parameters ``theta_p``, re-encode under ``theta_p``
   and score the result on every meta-test surrogate;
3. decode both the ``phi`` and the last ``theta`` images after the noise pool;
4. a single Adam step on encoder and decoder against the weighted sum.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .fr_surrogates import SurrogatePool, embed
from .imaging_io import IdentityCorpus
from .noise_pool import NoisePoolConfig, sample_and_apply
from .watermark_codec import (
    CodecConfig,
    WatermarkDecoder,
    WatermarkEncoder,
    encode_with,
    load_codec,
    parameters_of,
    save_codec,
)

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class TrainingDivergenceError(RuntimeError):
    def __init__(self, component: str, step: int | None = None):
        self.component = component
        super().__init__(f"non-finite loss component {component!r}" + (f" at step {step}" if step is not None else ""))


@dataclass
class LossWeights:
    adv: float = 100.0
    inv: float = 0.05
    wm: float = 0.05

    def __post_init__(self):
        if min(self.adv, self.inv, self.wm) <= 0:
            raise ValueError(f"loss weights must be positive, got {self}")


@dataclass
class TrainConfig:
    epochs: int = 2500
    batch_size: int = 32
    outer_lr: float = 5e-5
    inner_lr: float = 1e-3
    P: int = 2
    Q: int = 1
    second_order: bool = False
    meta: bool = True
    seed: int = 0
    ckpt_every: int = 25
    val_every: int = 5
    pixel_range: float = 1.0  # invisibility loss is taken on images scaled to [0, pixel_range]

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.outer_lr <= 0 or self.inner_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.P < 1 or self.Q < 1:
            raise ValueError("P and Q must be >= 1")
        if self.pixel_range <= 0:
            raise ValueError("pixel_range must be positive")


@dataclass
class LossBreakdown:
    l_inv_phi: object = 0.0
    l_adv_tra: object = 0.0
    l_adv_tes: object = 0.0
    l_inv_tes: object = 0.0
    l_wm_phi: object = 0.0
    l_wm_tes: object = 0.0
    l_inv_total: object = 0.0
    l_adv_total: object = 0.0
    l_wm_total: object = 0.0
    l_dip: object = 0.0

    def as_floats(self) -> dict[str, float]:
        return {f.name: _scalar(getattr(self, f.name)) for f in fields(self)}


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


# ---------------------------------------------------------------- losses


def invisibility_loss(x_s: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x_s.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x_s.shape)} vs {tuple(x_hat.shape)}")
    return F.mse_loss(x_hat, x_s)


def adversarial_loss(e_hat: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
    """Batch mean of 1 - cos(e_hat, e_t)."""
    if e_hat.shape != e_t.shape:
        raise ValueError(f"shape mismatch {tuple(e_hat.shape)} vs {tuple(e_t.shape)}")
    n_hat, n_t = e_hat.norm(dim=-1), e_t.norm(dim=-1)
    if bool((n_hat == 0).any()) or bool((n_t == 0).any()):
        raise FloatingPointError("zero-norm embedding in adversarial loss")
    cos = (e_hat * e_t).sum(-1) / (n_hat * n_t)
    return (1.0 - cos).mean()


def bce_loss(w: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """BCE on sigmoid probabilities clipped to [1e-7, 1 - 1e-7]."""
    p = torch.sigmoid(logits).clamp(BCE_EPS, 1 - BCE_EPS)
    return -(w * torch.log(p) + (1 - w) * torch.log(1 - p)).mean()


def total_losses(parts: LossBreakdown, weights: LossWeights):
    """Fill the three totals and ``l_dip`` on ``parts``; returns ``l_dip``."""
    for name in ("l_inv_phi", "l_inv_tes", "l_adv_tra", "l_adv_tes", "l_wm_phi", "l_wm_tes"):
        if not math.isfinite(_scalar(getattr(parts, name))):
            raise TrainingDivergenceError(name)
    parts.l_inv_total = (parts.l_inv_phi + parts.l_inv_tes) / 2
    parts.l_adv_total = parts.l_adv_tra + parts.l_adv_tes
    parts.l_wm_total = parts.l_wm_phi + parts.l_wm_tes
    parts.l_dip = weights.adv * parts.l_adv_total + weights.inv * parts.l_inv_total + weights.wm * parts.l_wm_total
    return parts.l_dip


# ---------------------------------------------------------------- meta step


def meta_train_adv_loss(encoder, phi, x_hat, target_embeddings, models, create_graph=False):
    """Sum of per-model adversarial losses on ``x_hat`` plus each model's gradient w.r.t. ``phi``.

    ``target_embeddings`` maps ``id(model)`` to that model's embedding of x_t.
    """
    if not models:
        raise ValueError("meta-train pool is empty")
    names = list(phi)
    total, per_model, grads = 0.0, [], []
    for model in models:
        loss = adversarial_loss(embed(model, x_hat), target_embeddings[id(model)])
        g = torch.autograd.grad(loss, [phi[n] for n in names], retain_graph=True, create_graph=create_graph, allow_unused=True)
        grads.append({n: torch.zeros_like(phi[n]) if gi is None else gi for n, gi in zip(names, g)})
        per_model.append(loss)
        total = total + loss
    return total, per_model, grads


def inner_adapt(phi: dict[str, torch.Tensor], grad: dict[str, torch.Tensor], eta: float, first_order: bool = True):
    """theta = phi - eta * grad, element-wise; ``phi`` is left untouched.

    First order treats the gradient as a constant, so d theta / d phi = I.
    """
    if set(phi) != set(grad):
        raise ValueError("gradient keys do not match the parameters")
    theta = {}
    for name, p in phi.items():
        g = grad[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        theta[name] = p - eta * (g.detach() if first_order else g)
    return theta


def meta_test_losses(encoder, theta, x_s, w, target_embeddings, models, pixel_range: float = 1.0):
    """Re-encode under ``theta``; summed adversarial loss over meta-test models and
    the matching sum of invisibility terms (one per meta-test model)."""
    if not models:
        raise ValueError("meta-test pool is empty")
    x_tes = encode_with(encoder, theta, x_s, w)
    adv, inv = 0.0, 0.0
    for model in models:
        adv = adv + adversarial_loss(embed(model, x_tes), target_embeddings[id(model)])
        inv = inv + invisibility_loss(pixel_range * x_s, pixel_range * x_tes)
    return adv, inv, x_tes


def watermark_losses(decoder, w, x_hat, x_tes, noise_cfg: NoisePoolConfig, rng, trace=None):
    """BCE of the decoded noise-pool outputs for the ``phi`` and last-``theta`` images.

    One pool draw covers both images, so they see the same distortion type.
    """
    n = len(x_hat)
    noised = sample_and_apply(torch.cat([x_hat, x_tes]), noise_cfg, rng, trace)
    logits = decoder(noised)
    l_phi = bce_loss(w, logits[:n])
    l_tes = bce_loss(w, logits[n:])
    return l_phi, l_tes, l_phi + l_tes


def compute_losses(encoder, decoder, x_s, w, x_t, pool: SurrogatePool, cfg: TrainConfig, noise_cfg, weights, rng, trace=None):
    """Every loss term of one outer step, as a :class:`LossBreakdown` of tensors."""
    phi = parameters_of(encoder)
    with torch.no_grad():
        models = pool.white_box
        target_embeddings = {id(m): embed(m, x_t) for m in models}
    parts = LossBreakdown()
    x_hat = encoder(x_s, w)
    scale = cfg.pixel_range
    parts.l_inv_phi = invisibility_loss(scale * x_s, scale * x_hat)

    if not cfg.meta:
        # plain ensemble: every white-box surrogate scored on x_hat, no temporary parameters
        parts.l_adv_tra = sum(adversarial_loss(embed(m, x_hat), target_embeddings[id(m)]) for m in models)
        parts.l_adv_tes = torch.zeros(())
        parts.l_inv_tes = parts.l_inv_phi
        noised = sample_and_apply(x_hat, noise_cfg, rng, trace)
        parts.l_wm_phi = bce_loss(w, decoder(noised))
        parts.l_wm_tes = torch.zeros(())
        total_losses(parts, weights)
        return parts

    second = cfg.second_order
    l_tra, _, grads = meta_train_adv_loss(encoder, phi, x_hat, target_embeddings, pool.meta_train, create_graph=second)
    parts.l_adv_tra = l_tra
    adv_tes, inv_tes = 0.0, 0.0
    x_tes = None
    for g in grads:
        theta = inner_adapt(phi, g, cfg.inner_lr, first_order=not second)
        a, i, x_tes = meta_test_losses(encoder, theta, x_s, w, target_embeddings, pool.meta_test, scale)
        adv_tes, inv_tes = adv_tes + a, inv_tes + i
    parts.l_adv_tes = adv_tes
    parts.l_inv_tes = inv_tes / (len(pool.meta_train) * len(pool.meta_test))
    parts.l_wm_phi, parts.l_wm_tes, _ = watermark_losses(decoder, w, x_hat, x_tes, noise_cfg, rng, trace)
    total_losses(parts, weights)
    return parts


# ---------------------------------------------------------------- training


@dataclass
class TrainerState:
    encoder: WatermarkEncoder
    decoder: WatermarkDecoder
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    best_val: float = math.inf
    rng: np.random.Generator | None = None
    target_map: dict | None = None


def assign_targets(corpus: IdentityCorpus, seed: int) -> dict[int, int]:
    """Fixed source-identity -> target-identity map, balanced over the target split."""
    sources = corpus.identities("train", "test")
    targets = corpus.identities("target")
    if len(targets) == 0:
        raise ValueError("corpus has no target split")
    rng = np.random.default_rng([seed, 1])
    reps = -(-len(sources) // len(targets))
    pick = np.concatenate([rng.permutation(targets) for _ in range(reps)])[: len(sources)]
    return {int(s): int(t) for s, t in zip(sources, pick)}


def target_images_for(corpus: IdentityCorpus, carrier_idx, target_map, rng=None) -> np.ndarray:
    """Index of one target-identity image per carrier; random with ``rng``, else cycled by position."""
    tgt_idx = corpus.indices("target")
    by_identity = {t: tgt_idx[corpus.labels[tgt_idx] == t] for t in set(target_map.values())}
    out = []
    for k, i in enumerate(carrier_idx):
        pool = by_identity[target_map[int(corpus.labels[i])]]
        out.append(pool[rng.integers(len(pool))] if rng is not None else pool[k % len(pool)])
    return np.asarray(out)


def _history_record(epoch, sums, n, data_hash, ops):
    rec = {"epoch": epoch}
    rec.update({k: v / n for k, v in sums.items()})
    rec["data_hash"] = data_hash
    rec["noise_ops"] = ops
    return rec


class Trainer:
    """Runs the outer loop; holds the RNG streams so runs are reproducible and resumable."""

    def __init__(
        self,
        corpus: IdentityCorpus,
        pool: SurrogatePool,
        cfg: TrainConfig,
        noise_cfg: NoisePoolConfig | None = None,
        weights: LossWeights | None = None,
        codec_cfg: CodecConfig | None = None,
        ckpt_dir: str | os.PathLike | None = None,
    ):
        self.corpus = corpus
        self.pool = pool
        self.cfg = cfg
        self.noise_cfg = noise_cfg or NoisePoolConfig()
        self.weights = weights or LossWeights()
        self.codec_cfg = codec_cfg or CodecConfig()
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        if len(pool.meta_train) != cfg.P or len(pool.meta_test) != cfg.Q:
            raise ValueError("pool partition does not match P/Q in the config")

        torch.manual_seed(cfg.seed)
        encoder = WatermarkEncoder(self.codec_cfg)
        decoder = WatermarkDecoder(self.codec_cfg)
        opt = torch.optim.Adam(list(encoder.parameters()) + list(decoder.parameters()), lr=cfg.outer_lr)
        self.state = TrainerState(encoder, decoder, opt, target_map=assign_targets(corpus, cfg.seed))
        # separate streams: data order must not depend on the noise draws (ablation arms share it)
        self.data_rng = np.random.default_rng([cfg.seed, 2])
        self.noise_rng = np.random.default_rng([cfg.seed, 3])
        self.train_idx = corpus.indices("train")
        if len(self.train_idx) == 0:
            raise ValueError("corpus has no train split")
        self._val_batch = self._make_val_batch()

    def _make_val_batch(self):
        rng = np.random.default_rng([self.cfg.seed, 4])
        idx = self.corpus.indices("test")
        if len(idx) == 0:
            idx = self.train_idx
        idx = idx[: self.cfg.batch_size]
        w = torch.from_numpy(rng.integers(0, 2, (len(idx), self.codec_cfg.payload_bits)).astype(np.float32))
        x_t = self.corpus.images[target_images_for(self.corpus, idx, self.state.target_map)]
        return self.corpus.images[idx], w, x_t

    def batches(self):
        order = self.data_rng.permutation(self.train_idx)
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            tgt = target_images_for(self.corpus, idx, self.state.target_map, self.data_rng)
            w = self.data_rng.integers(0, 2, (len(idx), self.codec_cfg.payload_bits))
            yield idx, tgt, w.astype(np.float32)

    def validate(self) -> float:
        x_s, w, x_t = self._val_batch
        rng = np.random.default_rng([self.cfg.seed, 5])
        parts = compute_losses(
            self.state.encoder, self.state.decoder, x_s, w, x_t, self.pool, self.cfg, self.noise_cfg, self.weights, rng
        )
        return float(parts.l_dip.detach())

    def train_epoch(self) -> dict:
        st = self.state
        st.encoder.train()
        st.decoder.train()
        sums: dict[str, float] = {}
        n = 0
        h = hashlib.sha256()
        ops: list[str] = []
        for idx, tgt, w in self.batches():
            h.update(idx.tobytes())
            h.update(tgt.tobytes())
            h.update(w.tobytes())
            x_s = self.corpus.images[idx]
            x_t = self.corpus.images[tgt]
            parts = compute_losses(
                st.encoder, st.decoder, x_s, torch.from_numpy(w), x_t,
                self.pool, self.cfg, self.noise_cfg, self.weights, self.noise_rng, ops,
            )
            st.optimizer.zero_grad()
            parts.l_dip.backward()
            st.optimizer.step()
            st.step += 1
            for k, v in parts.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        st.epoch += 1
        rec = _history_record(st.epoch, sums, n, h.hexdigest()[:16], ops)
        st.history.append(rec)
        return rec

    def train(self, log_path: str | os.PathLike | None = None, progress=None) -> TrainerState:
        st = self.state
        log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while st.epoch < self.cfg.epochs:
                good = (copy.deepcopy(st.encoder.state_dict()), copy.deepcopy(st.decoder.state_dict()))
                t0 = time.perf_counter()
                try:
                    rec = self.train_epoch()
                except TrainingDivergenceError as exc:
                    st.encoder.load_state_dict(good[0])
                    st.decoder.load_state_dict(good[1])
                    if self.ckpt_dir:
                        self.save_checkpoint(self.ckpt_dir / "last_good")
                    log.error("training diverged at epoch %d: %s", st.epoch + 1, exc)
                    raise
                seconds = round(time.perf_counter() - t0, 3)
                if self.cfg.val_every and (st.epoch % self.cfg.val_every == 0 or st.epoch == self.cfg.epochs):
                    rec["val_l_dip"] = self.validate()
                    if rec["val_l_dip"] < st.best_val:
                        st.best_val = rec["val_l_dip"]
                        if self.ckpt_dir:
                            self.save_checkpoint(self.ckpt_dir / "best")
                if self.ckpt_dir and self.cfg.ckpt_every and st.epoch % self.cfg.ckpt_every == 0:
                    self.save_checkpoint(self.ckpt_dir / f"ckpt_{st.epoch}")
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                if progress:
                    progress(dict(rec, seconds=seconds))  # timing stays out of the history
        finally:
            if log_fh:
                log_fh.close()
        if self.ckpt_dir:
            self.save_checkpoint(self.ckpt_dir / "final")
        return st

    # ------------------------------------------------------------ checkpoints

    def save_checkpoint(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        st = self.state
        save_codec(directory / "codec.pt", st.encoder, st.decoder, extra={"epoch": st.epoch})
        blob = {
            "optimizer": st.optimizer.state_dict(),
            "epoch": st.epoch,
            "step": st.step,
            "history": st.history,
            "best_val": st.best_val,
            "data_rng": self.data_rng.bit_generator.state,
            "noise_rng": self.noise_rng.bit_generator.state,
            "target_map": st.target_map,
            "train_config": asdict(self.cfg),
        }
        torch.save(blob, directory / "state.tmp")
        os.replace(directory / "state.tmp", directory / "state.pt")
        return directory

    def resume(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        encoder, decoder, _ = load_codec(directory / "codec.pt")
        st = self.state
        st.encoder.load_state_dict(encoder.state_dict())
        st.decoder.load_state_dict(decoder.state_dict())
        blob = torch.load(directory / "state.pt", map_location="cpu", weights_only=False)
        st.optimizer.load_state_dict(blob["optimizer"])
        st.epoch, st.step = blob["epoch"], blob["step"]
        st.history, st.best_val = blob["history"], blob["best_val"]
        st.target_map = {int(k): int(v) for k, v in blob["target_map"].items()}
        self.data_rng.bit_generator.state = blob["data_rng"]
        self.noise_rng.bit_generator.state = blob["noise_rng"]


def latest_checkpoint(ckpt_dir: str | os.PathLike) -> Path | None:
    found = []
    for p in Path(ckpt_dir).glob("ckpt_*"):
        try:
            found.append((int(p.name.split("_", 1)[1]), p))
        except ValueError:
            continue
    return max(found)[1] if found else None


def train(corpus, pool, cfg, noise_cfg=None, weights=None, codec_cfg=None, ckpt_dir=None, log_path=None, resume=False, progress=None):
    """Build a :class:`Trainer`, optionally resume from the newest ``ckpt_<epoch>``, and run it."""
    trainer = Trainer(corpus, pool, cfg, noise_cfg, weights, codec_cfg, ckpt_dir)
    if resume and ckpt_dir:
        latest = latest_checkpoint(ckpt_dir)
        if latest is not None:
            log.info("resuming from %s", latest)
            trainer.resume(latest)
    trainer.train(log_path, progress)
    return trainer
