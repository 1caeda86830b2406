"""Dataset layout, image file I/O, and triplet loading.

A dataset is a directory with ``input/`` (shadow images), ``mask/`` (binary
shadow masks), and optionally ``gt/`` (shadow-free images), with matching
filenames across the folders.  An optional plain-text manifest (one id per
line) restricts a scan to a split.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .colorspace import RgbImage
from .errors import ValidationError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class TripletPaths:
    """File locations for one dataset entry; ``gt`` may be absent."""

    id: str
    shadow: Path
    mask: Path
    gt: Path | None


@dataclass(frozen=True)
class Triplet:
    """Loaded dataset entry.

    ``mask`` is an HxW float plane in [0, 1]; binary after loading from
    8-bit files, but kept as floats so softened masks pass through
    augmentation unchanged.
    """

    id: str
    shadow: RgbImage
    mask: np.ndarray
    gt: RgbImage | None

    def __post_init__(self):
        if self.mask.shape != self.shadow.data.shape[:2]:
            raise ValidationError(
                f"triplet {self.id!r}: mask shape {self.mask.shape} does not "
                f"match shadow image {self.shadow.data.shape[:2]}"
            )
        if self.gt is not None and self.gt.data.shape != self.shadow.data.shape:
            raise ValidationError(
                f"triplet {self.id!r}: gt shape {self.gt.data.shape} does not "
                f"match shadow image {self.shadow.data.shape}"
            )


def _index_folder(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    out: dict[str, Path] = {}
    for p in folder.iterdir():
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            out[p.stem] = p
    return out


def read_manifest(path: Path) -> list[str]:
    """One id per line; blank lines and '#' comments ignored."""
    ids = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            ids.append(line)
    return ids


def scan_dataset(root: str | Path, manifest: str | Path | None = None) -> list[TripletPaths]:
    """Enumerate triplets under ``root`` in deterministic filename order.

    Ordering is plain codepoint-wise comparison of the id strings, so it is
    identical on every platform.  Every input must have a same-named mask;
    ground truth is optional per entry.  All pairing problems are collected
    and reported together in one :class:`ValidationError`.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    inputs = _index_folder(root / "input")
    masks = _index_folder(root / "mask")
    gts = _index_folder(root / "gt")

    wanted = sorted(inputs)
    if manifest is not None:
        listed = read_manifest(Path(manifest))
        missing = [i for i in listed if i not in inputs]
        if missing:
            raise ValidationError(
                f"manifest lists {len(missing)} id(s) with no input image",
                problems=[f"{i}: no input image" for i in missing],
            )
        wanted = sorted(listed)

    problems = [f"{i}: input {inputs[i].name} has no mask" for i in wanted if i not in masks]
    if problems:
        raise ValidationError(
            f"{len(problems)} input image(s) lack masks", problems=problems
        )
    return [
        TripletPaths(id=i, shadow=inputs[i], mask=masks[i], gt=gts.get(i))
        for i in wanted
    ]


def load_image(path: str | Path) -> RgbImage:
    """Load an 8-bit image as RGB floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return RgbImage(arr / 255.0)


def load_mask(path: str | Path) -> np.ndarray:
    """Load a mask as a binary HxW float plane (threshold: >127 -> 1)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.float64)


def load_triplet(paths: TripletPaths) -> Triplet:
    return Triplet(
        id=paths.id,
        shadow=load_image(paths.shadow),
        mask=load_mask(paths.mask),
        gt=None if paths.gt is None else load_image(paths.gt),
    )


def save_image(path: str | Path, img: RgbImage | np.ndarray) -> None:
    """Write an image as 8-bit PNG (values rounded from [0, 1])."""
    arr = img.data if isinstance(img, RgbImage) else np.asarray(img)
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    save_image(path, np.asarray(mask, dtype=np.float64))
