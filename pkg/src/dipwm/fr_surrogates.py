"""Small face-embedding surrogates, cosine verification and FAR thresholds."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging_io import IdentityCorpus
from .watermark_codec import ConfigurationError

ARCH_IDS = ("cnn4", "cnn4_wide", "depthwise", "mini_residual")
FORMAT_VERSION = 1


class DataError(ValueError):
    pass


def _cbr(c_in, c_out, k=3, s=1):
    return [nn.Conv2d(c_in, c_out, k, stride=s, padding=k // 2), nn.ReLU()]


def _separable(c_in, c_out, s):
    return [
        nn.Conv2d(c_in, c_in, 3, stride=s, padding=1, groups=c_in),
        nn.Conv2d(c_in, c_out, 1),
        nn.ReLU(),
    ]


class _Residual(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def forward(self, x):
        return F.relu(self.skip(x) + self.conv2(F.relu(self.conv1(x))))


def _backbone(arch_id: str) -> tuple[nn.Module, int]:
    if arch_id == "cnn4":
        layers = _cbr(3, 16, 5, 2) + _cbr(16, 32, 3, 2) + _cbr(32, 48, 3, 2) + _cbr(48, 64, 3, 2)
        return nn.Sequential(*layers), 64
    if arch_id == "cnn4_wide":
        layers = _cbr(3, 32, 3, 2) + _cbr(32, 64, 3, 2) + _cbr(64, 96, 3, 2) + _cbr(96, 96, 3, 2)
        return nn.Sequential(*layers), 96
    if arch_id == "depthwise":
        layers = _cbr(3, 24, 3, 2) + _separable(24, 48, 2) + _separable(48, 64, 2) + _separable(64, 96, 2) + _separable(96, 96, 1)
        return nn.Sequential(*layers), 96
    if arch_id == "mini_residual":
        return nn.Sequential(*_cbr(3, 16, 3, 2), _Residual(16, 32, 2), _Residual(32, 48, 2), _Residual(48, 64, 2)), 64
    raise ConfigurationError(f"unknown arch_id {arch_id!r}; choose from {ARCH_IDS}")


class EmbedderModel(nn.Module):
    """Backbone -> 4x4 pooled features -> linear -> unit-norm embedding.

    ``classifier`` is a cosine-softmax head used only while training.
    """

    def __init__(self, arch_id: str, n_classes: int, embed_dim: int = 128, name: str | None = None):
        super().__init__()
        self.arch_id = arch_id
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.name = name or arch_id
        self.tau: float | None = None
        self.trained = False
        self.backbone, width = _backbone(arch_id)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.project = nn.Linear(width * 16, embed_dim)
        self.classifier = nn.Parameter(torch.randn(n_classes, embed_dim) * 0.1)
        self.scale = 16.0

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ConfigurationError(f"embedder input must be [N, 3, H, W], got {tuple(x.shape)}")
        h = self.pool(self.backbone((x - 0.5) / 0.5)).flatten(1)
        return F.normalize(self.project(h), dim=1, eps=1e-12)

    def logits(self, x):
        return self.scale * self(x) @ F.normalize(self.classifier, dim=1).T

    def __repr__(self):
        return f"EmbedderModel(name={self.name!r}, arch_id={self.arch_id!r}, tau={self.tau})"


def embed(model: EmbedderModel, x: torch.Tensor, allow_untrained: bool = False) -> torch.Tensor:
    """Unit-norm embeddings [N, embed_dim]; differentiable in ``x``."""
    if not (model.trained or allow_untrained):
        raise ConfigurationError(f"surrogate {model.name!r} is untrained; pass allow_untrained=True to use it")
    return model(x)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a, b, dim=-1, eps=1e-12)


def train_surrogate(
    corpus: IdentityCorpus,
    arch_id: str,
    seed: int,
    epochs: int = 40,
    batch_size: int = 16,
    lr: float = 2e-3,
    embed_dim: int = 128,
    splits: tuple[str, ...] = ("train", "target"),
    name: str | None = None,
) -> EmbedderModel:
    """Softmax identity classification over ``splits``; deterministic in ``seed``."""
    idx = corpus.indices(*splits)
    classes = np.unique(corpus.labels[idx])
    if len(classes) < 4:
        raise ValueError(f"need at least 4 identities to train a surrogate, got {len(classes)}")
    remap = {c: i for i, c in enumerate(classes)}
    x_all = corpus.images[idx]
    y_all = torch.tensor([remap[c] for c in corpus.labels[idx]])

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = EmbedderModel(arch_id, len(classes), embed_dim, name=name)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(idx))
        for start in range(0, len(order), batch_size):
            b = torch.from_numpy(order[start : start + batch_size])
            x = x_all[b]
            # light photometric jitter so the embedder is not brittle to tiny shifts
            gain = torch.from_numpy(rng.uniform(0.9, 1.1, (len(b), 1, 1, 1)).astype(np.float32))
            noise = torch.from_numpy(rng.normal(0, 0.02, x.shape).astype(np.float32))
            x = (x * gain + noise).clamp(0, 1)
            loss = F.cross_entropy(model.logits(x), y_all[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    model.trained = True
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def embed_all(model: EmbedderModel, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    return torch.cat([model(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def _pairs(labels: np.ndarray, same: bool) -> np.ndarray:
    i, j = np.triu_indices(len(labels), k=1)
    mask = (labels[i] == labels[j]) if same else (labels[i] != labels[j])
    return np.stack([i[mask], j[mask]], axis=1)


def verification_accuracy(model: EmbedderModel, corpus: IdentityCorpus, split: str = "test", seed: int = 0) -> float:
    """Best-threshold accuracy on balanced genuine/impostor pairs from ``split``."""
    sub = corpus.subset(split)
    e = embed_all(model, sub.images)
    genuine = _pairs(sub.labels, True)
    impostor = _pairs(sub.labels, False)
    rng = np.random.default_rng(seed)
    n = min(len(genuine), len(impostor))
    genuine = genuine[rng.permutation(len(genuine))[:n]]
    impostor = impostor[rng.permutation(len(impostor))[:n]]
    sims = torch.cat([cosine(e[genuine[:, 0]], e[genuine[:, 1]]), cosine(e[impostor[:, 0]], e[impostor[:, 1]])]).numpy()
    truth = np.r_[np.ones(n, bool), np.zeros(n, bool)]
    best = 0.0
    for t in np.unique(sims):
        best = max(best, float(np.mean((sims >= t) == truth)))
    return best


def threshold_at_far(impostor_cosines, far: float) -> float:
    """Smallest observed cosine t such that the fraction of cosines > t is <= far."""
    if not 0 < far < 1:
        raise ValueError(f"far must lie in (0, 1), got {far}")
    c = np.sort(np.asarray(impostor_cosines, dtype=np.float64))
    n = len(c)
    # number strictly above c[k] is n - (index past the last copy of c[k])
    above = n - np.searchsorted(c, c, side="right")
    ok = above <= far * n
    return float(c[np.argmax(ok)])


def calibrate_threshold(
    model: EmbedderModel,
    corpus: IdentityCorpus,
    far: float = 0.01,
    splits: tuple[str, ...] = ("test", "target"),
    max_pairs: int = 10_000,
    seed: int = 0,
) -> float:
    """tau at the given FAR over cross-identity pairs of ``splits``; also stored on ``model``."""
    sub = corpus.subset(*splits)
    pairs = _pairs(sub.labels, False)
    if len(pairs) < 100:
        raise DataError(f"need >= 100 impostor pairs for calibration, have {len(pairs)}")
    if len(pairs) > max_pairs:
        pairs = pairs[np.sort(np.random.default_rng(seed).choice(len(pairs), max_pairs, replace=False))]
    e = embed_all(model, sub.images)
    tau = threshold_at_far(cosine(e[pairs[:, 0]], e[pairs[:, 1]]).numpy(), far)
    model.tau = tau
    return tau


@dataclass
class SurrogatePool:
    meta_train: list[EmbedderModel]
    meta_test: list[EmbedderModel]
    held_out: list[EmbedderModel]

    def __post_init__(self):
        if not self.meta_train or not self.meta_test:
            raise ConfigurationError("pool needs at least one meta-train and one meta-test model")
        ids = [id(m) for m in self.all_models]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("pool groups must be disjoint")

    @property
    def white_box(self) -> list[EmbedderModel]:
        return self.meta_train + self.meta_test

    @property
    def all_models(self) -> list[EmbedderModel]:
        return self.meta_train + self.meta_test + self.held_out


def partition_pool(models: list[EmbedderModel], P: int, Q: int) -> SurrogatePool:
    """First P models meta-train, next Q meta-test, the rest are held out."""
    if P < 1 or Q < 1:
        raise ConfigurationError(f"P and Q must be >= 1, got P={P}, Q={Q}")
    if len(models) < P + Q + 1:
        raise ConfigurationError(f"need at least P+Q+1={P + Q + 1} models, got {len(models)}")
    return SurrogatePool(list(models[:P]), list(models[P : P + Q]), list(models[P + Q :]))


def save_embedder(model: EmbedderModel, path) -> None:
    blob = {
        "format_version": FORMAT_VERSION,
        "manifest": {
            "arch_id": model.arch_id,
            "n_classes": model.n_classes,
            "embed_dim": model.embed_dim,
            "name": model.name,
            "tau": model.tau,
            "trained": model.trained,
        },
        "state": model.state_dict(),
    }
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(blob, tmp)
    os.replace(tmp, path)


def load_embedder(path) -> EmbedderModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported surrogate checkpoint format")
    m = blob["manifest"]
    model = EmbedderModel(m["arch_id"], m["n_classes"], m["embed_dim"], name=m["name"])
    model.load_state_dict(blob["state"])
    model.tau = m["tau"]
    model.trained = m["trained"]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
