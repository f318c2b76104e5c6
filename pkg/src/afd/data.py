"""Dataset ingestion, synthetic data and training-time augmentation.

Images are kept as ``N x H x W x 3`` uint8 arrays; ``to_tensor`` converts a
batch to normalised ``N x 3 x H x W`` floats.
"""
from __future__ import annotations

import enum
import hashlib
import logging
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, IngestionError

log = logging.getLogger(__name__)

DATA_DIR_ENV = "AFD_DATA_DIR"

_CIFAR100_MD5 = {
    "train": "16019d7e3df5f24257cddd939b257f8d",
    "test": "f0ef6b0ae62326f3e7ffdfab6717acfc",
}

_STATS = {
    "CIFAR100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "TINYIMAGENET": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "SYNTHETIC": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
}


class Dataset(str, enum.Enum):
    CIFAR100 = "CIFAR100"
    TINYIMAGENET = "TINYIMAGENET"
    SYNTHETIC = "SYNTHETIC"


@dataclass
class Split:
    images: np.ndarray   # N x H x W x 3, uint8
    labels: np.ndarray   # N, int64
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Split":
        return Split(self.images[idx], self.labels[idx], self.num_classes)


def resolve_data_dir(data_dir=None) -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(data_dir or "data")


def load_dataset(dataset, data_dir=None, **synthetic):
    """Return ``(train, val)`` splits.

    ``AFD_DATA_DIR`` overrides ``data_dir``. Keyword arguments are forwarded to
    :func:`make_synthetic` for the ``SYNTHETIC`` dataset.
    """
    dataset = Dataset(dataset)
    if dataset is Dataset.SYNTHETIC:
        return make_synthetic(**synthetic)
    root = resolve_data_dir(data_dir)
    if dataset is Dataset.CIFAR100:
        return _load_cifar100(root / "cifar-100-python")
    return _load_tinyimagenet(root / "tiny-imagenet-200")


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_cifar100(root: Path):
    splits = []
    for name in ("train", "test"):
        path = root / name
        if not path.is_file():
            raise IngestionError(f"missing CIFAR-100 file: {path}")
        if _md5(path) != _CIFAR100_MD5[name]:
            log.warning("checksum mismatch for %s", path)
        try:
            with open(path, "rb") as fh:
                entry = pickle.load(fh, encoding="latin1")
            data = np.asarray(entry["data"], dtype=np.uint8)
            labels = np.asarray(entry["fine_labels"], dtype=np.int64)
        except Exception as exc:
            raise IngestionError(f"corrupt CIFAR-100 file: {path} ({exc})") from exc
        images = data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()
        splits.append(Split(images, labels, 100))
    return tuple(splits)


def _read_rgb(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise IngestionError(f"unreadable image: {path} ({exc})") from exc


def _load_tinyimagenet(root: Path):
    wnids_file = root / "wnids.txt"
    if not wnids_file.is_file():
        raise IngestionError(f"missing tinyImageNet file: {wnids_file}")
    wnids = wnids_file.read_text().split()
    index = {w: i for i, w in enumerate(wnids)}

    train_imgs, train_labels = [], []
    for w in wnids:
        folder = root / "train" / w / "images"
        if not folder.is_dir():
            raise IngestionError(f"missing tinyImageNet folder: {folder}")
        for f in sorted(folder.iterdir()):
            train_imgs.append(_read_rgb(f))
            train_labels.append(index[w])

    ann = root / "val" / "val_annotations.txt"
    if not ann.is_file():
        raise IngestionError(f"missing tinyImageNet file: {ann}")
    val_imgs, val_labels = [], []
    for line in ann.read_text().splitlines():
        parts = line.split("\t")
        if len(parts) < 2:
            continue
        val_imgs.append(_read_rgb(root / "val" / "images" / parts[0]))
        val_labels.append(index[parts[1]])
    n = len(wnids)
    return (Split(np.stack(train_imgs), np.array(train_labels, dtype=np.int64), n),
            Split(np.stack(val_imgs), np.array(val_labels, dtype=np.int64), n))


def make_synthetic(n_train=64, n_val=64, num_classes=10, resolution=16, seed=0,
                   noise=25.0, distractors=3):
    """Seeded toy task where the label lives in one small region of the image.

    Each image holds ``distractors + 1`` smooth colour blobs at random places.
    One of them, the cue, is modulated by a pixel checkerboard, and the label
    is the cue's colour index in a fixed palette. Distractors draw their
    colours from the same palette, so a classifier has to find the textured
    blob before it can read the colour.
    """
    if n_train < 0 or n_val < 0 or num_classes < 1 or resolution < 4 or distractors < 0:
        raise ConfigError("invalid synthetic dataset parameters")
    palette = np.random.default_rng([seed, 7919]).uniform(0.0, 1.0, size=(num_classes, 3))
    sigma, margin = resolution / 10.0, resolution / 8.0
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    checker = ((yy + xx) % 2) * 2 - 1

    def draw(n, rng):
        labels = rng.integers(0, num_classes, size=n)
        images = np.empty((n, resolution, resolution, 3), dtype=np.uint8)
        for i, c in enumerate(labels):
            img = np.zeros((resolution, resolution, 3))
            centres = rng.uniform(margin, resolution - margin, size=(distractors + 1, 2))
            for j, (cy, cx) in enumerate(centres):
                g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
                if j == 0:
                    colour, g = palette[c], g * (1 + 0.6 * checker)
                else:
                    colour = palette[rng.integers(num_classes)]
                img += g[..., None] * colour
            img = img * 180.0 + 30.0 + rng.normal(0.0, noise, size=img.shape)
            images[i] = np.clip(img, 0, 255).astype(np.uint8)
        return Split(images, labels.astype(np.int64), num_classes)

    return (draw(n_train, np.random.default_rng([seed, 1])),
            draw(n_val, np.random.default_rng([seed, 2])))


def hflip(images: np.ndarray) -> np.ndarray:
    return images[:, :, ::-1]


def augment(images: np.ndarray, dataset, rng: np.random.Generator, train: bool = True):
    """Zero-pad by 4, random crop back to the input size, random horizontal flip.

    For 64px tinyImageNet images this is the pad-to-72 / crop-64 recipe. In
    eval mode the batch is returned untouched.
    """
    if not train:
        return images
    Dataset(dataset)
    pad = 4
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ys = rng.integers(0, 2 * pad + 1, size=n)
    xs = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, ys[i]:ys[i] + h, xs[i]:xs[i] + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def to_tensor(images: np.ndarray, dataset, dtype=torch.float32) -> torch.Tensor:
    mean, std = _STATS[Dataset(dataset).value]
    x = torch.from_numpy(np.ascontiguousarray(images)).to(dtype).div_(255.0)
    x = (x - torch.tensor(mean, dtype=dtype)) / torch.tensor(std, dtype=dtype)
    return x.permute(0, 3, 1, 2).contiguous()


def batch_order(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    """Index batches for one epoch; a pure function of ``(seed, epoch)``."""
    rng = np.random.default_rng([seed, epoch])
    idx = rng.permutation(n) if shuffle else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)], rng
