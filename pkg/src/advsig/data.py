"""Image containers and the two dataset sources used by the lab.

``ImageSet`` is the in-memory handle every trainer and attack consumes: a
float32 ``(N, C, H, W)`` tensor in the unit interval, integer labels and a
unique integer id per image.

Two sources produce it:

* :func:`load_cifar10` reads the standard python-pickle CIFAR-10 batches from
  a local directory (``$CIFAR10_DIR`` by default).
* :func:`photo_crops` builds a 10-class desk dataset of 32x32 crops taken from
  natural photographs that ship with scikit-image / scikit-learn, so the full
  pipeline can run without any download.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class ImageRecord:
    """One image in ``[0, 1]``, channels first, with its class and id."""

    image: torch.Tensor
    label: int
    id: int


@dataclass
class ImageSet:
    images: torch.Tensor
    labels: torch.Tensor
    ids: torch.Tensor

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValueError("labels and ids must be 1-d with one entry per image")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> ImageRecord:
        return ImageRecord(self.images[i], int(self.labels[i]), int(self.ids[i]))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "ImageSet":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageSet(self.images[index], self.labels[index], self.ids[index])

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            sl = slice(start, start + batch_size)
            yield self.images[sl], self.labels[sl]


def balanced_subset(data: ImageSet, per_class: int, seed: int = 0) -> ImageSet:
    """First ``per_class`` images of every class after a seeded shuffle."""
    g = np.random.default_rng(seed)
    labels = data.labels.numpy()
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        g.shuffle(idx)
        keep.append(idx[:per_class])
    keep = np.sort(np.concatenate(keep))
    return data.subset(keep)


# --------------------------------------------------------------------------
# CIFAR-10

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")


def cifar10_dir(path: str | os.PathLike | None = None) -> Path | None:
    """Resolve the directory holding ``data_batch_1`` .. ``test_batch``."""
    candidates = [path, os.environ.get("CIFAR10_DIR")]
    for cand in candidates:
        if not cand:
            continue
        p = Path(cand)
        for d in (p, p / "cifar-10-batches-py"):
            if (d / "data_batch_1").exists() and (d / "test_batch").exists():
                return d
    return None


def load_cifar10(split: str = "train", path=None, limit: int | None = None) -> ImageSet:
    d = cifar10_dir(path)
    if d is None:
        raise FileNotFoundError(
            "CIFAR-10 python batches not found; set CIFAR10_DIR to the "
            "directory containing data_batch_1..5 and test_batch"
        )
    files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    xs, ys = [], []
    for name in files:
        with open(d / name, "rb") as fh:
            batch = pickle.load(fh, encoding="latin1")
        xs.append(np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch["labels"], dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    offset = 0 if split == "train" else 50_000
    return ImageSet(
        torch.from_numpy(x.astype(np.float32) / 255.0),
        torch.from_numpy(y),
        torch.arange(offset, offset + len(y), dtype=torch.long),
    )


# --------------------------------------------------------------------------
# Desk dataset: crops of bundled photographs, one class per photograph.

PHOTO_SOURCES = ("astronaut", "chelsea", "coffee", "rocket", "hubble_deep_field",
                 "immunohistochemistry", "retina", "china", "flower", "gravel")

_STRIPE = 80  # crops never straddle a stripe; stripe % 4 == 3 is held out


def _photo(name: str) -> np.ndarray:
    if name in ("china", "flower"):
        from sklearn.datasets import load_sample_image
        img = load_sample_image(f"{name}.jpg")
    else:
        import skimage.data
        img = getattr(skimage.data, name)()
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., :3].astype(np.float32) / 255.0


def photo_crops(n_per_class: int, split: str = "train", size: int = 32,
                seed: int = 0, id_offset: int | None = None) -> ImageSet:
    """Random crops of ten photographs, labelled by source photograph.

    Each photo is cut into vertical stripes of 80 px; every fourth stripe is
    reserved for ``"test"``/``"val"`` crops so no pixel is shared with
    ``"train"``. Crop sides are drawn from [size, 2*size] and area-resized to
    ``size``; crops that are almost black (retina background) are redrawn.
    """
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    salt = {"train": 0, "val": 1, "test": 2}[split]
    rng = np.random.default_rng([seed, salt])
    held_out = split != "train"
    images, labels = [], []
    for label, name in enumerate(PHOTO_SOURCES):
        img = _photo(name)
        h, w, _ = img.shape
        stripes = [s for s in range(w // _STRIPE) if (s % 4 == 3) == held_out]
        if split == "val":
            stripes = stripes[::2]
        elif split == "test" and len(stripes) > 1:
            stripes = stripes[1::2]
        count = 0
        while count < n_per_class:
            side = int(rng.integers(size, min(2 * size, _STRIPE) + 1))
            s = stripes[int(rng.integers(len(stripes)))]
            x0 = s * _STRIPE + int(rng.integers(0, _STRIPE - side + 1))
            y0 = int(rng.integers(0, h - side + 1))
            crop = img[y0:y0 + side, x0:x0 + side]
            if crop.mean() < 0.08:
                continue
            if rng.random() < 0.5:
                crop = crop[:, ::-1]
            t = torch.from_numpy(np.ascontiguousarray(crop)).permute(2, 0, 1)[None]
            t = F.interpolate(t, size=(size, size), mode="area")[0]
            images.append(t.clamp(0, 1))
            labels.append(label)
            count += 1
    if id_offset is None:
        id_offset = salt * 1_000_000
    x = torch.stack(images).contiguous()
    y = torch.tensor(labels, dtype=torch.long)
    order = torch.from_numpy(rng.permutation(len(y)))
    return ImageSet(x[order], y[order], torch.arange(id_offset, id_offset + len(y)))


def load_dataset(tag: str, split: str, n: int | None = None, seed: int = 0) -> ImageSet:
    """Dispatch on a dataset tag: ``"photo-crops"`` or ``"cifar10"``."""
    if tag == "photo-crops":
        per_class = max(1, (n or 5000) // len(PHOTO_SOURCES))
        return photo_crops(per_class, split=split, seed=seed)
    if tag == "cifar10":
        src = "train" if split == "train" else "test"
        data = load_cifar10(src)
        if split == "val":
            data = data.subset(range(0, 5000))
        elif split == "test":
            data = data.subset(range(5000, 10000))
        if n is not None:
            data = balanced_subset(data, max(1, n // 10), seed=seed)
        return data
    raise ValueError(f"unknown dataset tag {tag!r}")
