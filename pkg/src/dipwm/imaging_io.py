"""Image I/O, the synthetic identity corpus and the payload registry."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SIZE = 112
SPLITS = ("train", "test", "target")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class EmptyInputError(ValueError):
    pass


@dataclass
class IdentityCorpus:
    """Images with identity labels and a train/test/target partition.

    ``split`` holds one entry of :data:`SPLITS` per image.  Target identities
    never appear in the train or test splits.
    """

    images: torch.Tensor
    labels: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"expected [N, 3, H, W] images, got {tuple(self.images.shape)}")
        if not (len(self.images) == len(self.labels) == len(self.split)):
            raise ValueError("images, labels and split must have equal length")

    def __len__(self):
        return len(self.labels)

    def indices(self, *splits: str) -> np.ndarray:
        return np.flatnonzero(np.isin(self.split, splits))

    def identities(self, *splits: str) -> np.ndarray:
        return np.unique(self.labels[self.indices(*splits)])

    def subset(self, *splits: str) -> "IdentityCorpus":
        idx = self.indices(*splits)
        return IdentityCorpus(self.images[idx], self.labels[idx], self.split[idx])


def _soft_ellipse(yy, xx, cy, cx, ry, rx, softness=1.2):
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    edge = (1.0 - r) * min(ry, rx) / softness
    return 1.0 / (1.0 + np.exp(-np.clip(edge, -30, 30)))


def _identity_recipe(rng: np.random.Generator) -> dict:
    return {
        "background": rng.uniform(0.05, 0.95, 3),
        "skin": rng.uniform(0.25, 0.95, 3),
        "hair": rng.uniform(0.0, 0.8, 3),
        "eye": rng.uniform(0.0, 0.6, 3),
        "mouth": rng.uniform(0.2, 0.9, 3),
        "face_ry": rng.uniform(36, 48),
        "face_rx": rng.uniform(26, 38),
        "hair_depth": rng.uniform(0.15, 0.55),
        "eye_gap": rng.uniform(9, 17),
        "eye_r": rng.uniform(3.0, 6.5),
        "eye_y": rng.uniform(-14, -4),
        "mouth_w": rng.uniform(7, 17),
        "mouth_h": rng.uniform(1.5, 5.0),
        "mouth_y": rng.uniform(12, 22),
        "stripe_freq": rng.uniform(0.05, 0.35),
        "stripe_angle": rng.uniform(0, np.pi),
    }


def _render_face(recipe: dict, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-3, 3)
    cx = size / 2 + rng.uniform(-3, 3)
    scale = rng.uniform(0.95, 1.05)

    stripes = 0.5 + 0.5 * np.sin(
        recipe["stripe_freq"] * (xx * np.cos(recipe["stripe_angle"]) + yy * np.sin(recipe["stripe_angle"]))
    )
    img = recipe["background"][:, None, None] * (0.8 + 0.2 * stripes)[None]

    ry, rx = recipe["face_ry"] * scale, recipe["face_rx"] * scale
    face = _soft_ellipse(yy, xx, cy, cx, ry, rx)
    img = img * (1 - face) + recipe["skin"][:, None, None] * face

    # hair: upper cap of the face ellipse
    cap_line = cy - ry * (1 - 2 * recipe["hair_depth"])
    hair = _soft_ellipse(yy, xx, cy - 2, cx, ry + 3, rx + 3) / (1.0 + np.exp(-(cap_line - yy)))
    img = img * (1 - hair) + recipe["hair"][:, None, None] * hair

    for side in (-1, 1):
        eye = _soft_ellipse(
            yy, xx, cy + recipe["eye_y"] * scale, cx + side * recipe["eye_gap"] * scale,
            recipe["eye_r"] * scale, recipe["eye_r"] * 1.4 * scale, softness=0.8,
        )
        img = img * (1 - eye) + recipe["eye"][:, None, None] * eye

    mouth = _soft_ellipse(
        yy, xx, cy + recipe["mouth_y"] * scale, cx, recipe["mouth_h"] * scale, recipe["mouth_w"] * scale, softness=0.8
    )
    img = img * (1 - mouth) + recipe["mouth"][:, None, None] * mouth

    img = img * rng.uniform(0.9, 1.1) + rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_corpus(
    n_identities: int,
    images_per_identity: int,
    seed: int,
    train_fraction: float = 0.5,
) -> IdentityCorpus:
    """Render a procedural face-like corpus, deterministic in ``seed``.

    A quarter of the identities (at least one) form the target split.  The
    images of every other identity are divided between train and test.
    """
    if n_identities < 4:
        raise ValueError(f"n_identities must be >= 4, got {n_identities}")
    if images_per_identity < 2:
        raise ValueError(f"images_per_identity must be >= 2, got {images_per_identity}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")

    rng = np.random.default_rng(seed)
    recipes = [_identity_recipe(rng) for _ in range(n_identities)]
    n_target = max(1, n_identities // 4)
    target_ids = set(rng.permutation(n_identities)[:n_target].tolist())
    n_train = min(images_per_identity - 1, max(1, round(images_per_identity * train_fraction)))

    images, labels, split = [], [], []
    for ident, recipe in enumerate(recipes):
        for k in range(images_per_identity):
            images.append(_render_face(recipe, rng))
            labels.append(ident)
            if ident in target_ids:
                split.append("target")
            else:
                split.append("train" if k < n_train else "test")
    data = torch.from_numpy(np.stack(images).astype(np.float32))
    return IdentityCorpus(data, np.asarray(labels, dtype=np.int64), np.asarray(split))


def _to_tensor(img: Image.Image, size: int = IMAGE_SIZE) -> torch.Tensor:
    img = img.convert("RGB")
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_image(path: str | os.PathLike) -> torch.Tensor:
    """Decode one image file into a [1, 3, 112, 112] tensor in [0, 1]."""
    try:
        with Image.open(path) as img:
            return _to_tensor(img)[None]
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def list_images(path: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_dir(path: str | os.PathLike) -> torch.Tensor:
    files = list_images(path)
    if not files:
        raise EmptyInputError(f"no PNG/JPEG images in {path}")
    return torch.cat([load_image(f) for f in files])


def load_corpus_dir(root: str | os.PathLike) -> IdentityCorpus:
    """Read ``<root>/<split>/<identity>/<image>`` for each split in :data:`SPLITS`.

    Identity folder names are mapped to integer labels in sorted order.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    entries = []
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            continue
        for ident in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            entries += [(split, ident.name, f) for f in list_images(ident)]
    if not entries:
        raise EmptyInputError(f"no images under {root}/<split>/<identity>/")
    names = sorted({name for _, name, _ in entries})
    label_of = {name: i for i, name in enumerate(names)}
    images = torch.cat([load_image(f) for _, _, f in entries])
    labels = np.array([label_of[name] for _, name, _ in entries], dtype=np.int64)
    split = np.array([s for s, _, _ in entries])
    corpus = IdentityCorpus(images, labels, split)
    if np.intersect1d(corpus.identities("target"), corpus.identities("train", "test")).size:
        raise ValueError(f"{root}: target identities also appear in train/test")
    return corpus


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """[3, H, W] float tensor -> [H, W, 3] uint8 array (round half up)."""
    arr = x.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_image(x: torch.Tensor, path: str | os.PathLike, quality: int | None = None) -> None:
    """Write a single [3, H, W] (or [1, 3, H, W]) image.

    PNG is lossless; ``quality`` is only honoured for JPEG targets.
    """
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("save_image writes exactly one image")
        x = x[0]
    img = Image.fromarray(to_uint8(x))
    suffix = Path(path).suffix.lower()
    if suffix in (".jpg", ".jpeg"):
        img.save(path, quality=quality or 75)
    else:
        img.save(path)


# ---------------------------------------------------------------- payloads


def payload_from_hex(hex_str: str, length: int) -> np.ndarray:
    """First ``length`` bits of the big-endian expansion of ``hex_str``."""
    hex_str = hex_str.strip()
    if hex_str.lower().startswith("0x"):
        hex_str = hex_str[2:]
    if not hex_str or any(c not in "0123456789abcdefABCDEF" for c in hex_str):
        raise ValueError(f"not a hex string: {hex_str!r}")
    value = int(hex_str, 16)
    n_bits = 4 * len(hex_str)
    if n_bits < length:
        raise ValueError(f"hex string carries {n_bits} bits, need {length}")
    bits = [(value >> (n_bits - 1 - i)) & 1 for i in range(length)]
    return np.asarray(bits, dtype=np.uint8)


def payload_to_hex(bits) -> str:
    """Pack bits MSB-first into hex, zero-padding the final nibble."""
    bits = [int(b) for b in np.asarray(bits).reshape(-1)]
    if any(b not in (0, 1) for b in bits):
        raise ValueError("payload bits must be 0 or 1")
    pad = (-len(bits)) % 4
    bits = bits + [0] * pad
    digits = []
    for i in range(0, len(bits), 4):
        nibble = bits[i] << 3 | bits[i + 1] << 2 | bits[i + 2] << 1 | bits[i + 3]
        digits.append("0123456789ABCDEF"[nibble])
    return "".join(digits)


class PayloadRegistry:
    """user id -> unique L-bit payload, persisted as ``<user_id>\\t<hex>`` lines."""

    def __init__(self, length: int = 50):
        self.length = length
        self.entries: dict[str, np.ndarray] = {}

    def __contains__(self, user_id: str) -> bool:
        return user_id in self.entries

    def __getitem__(self, user_id: str) -> np.ndarray:
        return self.entries[user_id]

    def __len__(self):
        return len(self.entries)

    def add(self, user_id: str, bits) -> None:
        bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
        if len(bits) != self.length:
            raise ValueError(f"payload for {user_id!r} has {len(bits)} bits, expected {self.length}")
        if "\t" in user_id or "\n" in user_id or not user_id:
            raise ValueError(f"invalid user id {user_id!r}")
        for other, existing in self.entries.items():
            if other != user_id and np.array_equal(existing, bits):
                raise ValueError(f"payload for {user_id!r} duplicates the payload of {other!r}")
        self.entries[user_id] = bits

    def register(self, user_id: str, rng: np.random.Generator) -> np.ndarray:
        """Draw a fresh random payload for ``user_id`` that no other user holds."""
        while True:
            bits = rng.integers(0, 2, self.length, dtype=np.uint8)
            try:
                self.add(user_id, bits)
                return bits
            except ValueError:
                continue

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        lines = [f"{uid}\t{payload_to_hex(self.entries[uid])}\n" for uid in sorted(self.entries)]
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.writelines(lines)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike, length: int = 50) -> "PayloadRegistry":
        reg = cls(length)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    uid, hex_payload = line.split("\t")
                    reg.add(uid, payload_from_hex(hex_payload, length))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
        return reg
