"""Image files, paired benchmark layouts and run-directory persistence."""

from __future__ import annotations

import csv
import io
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from PIL import Image

from .core import DatasetError, LoadError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

# I-Haze / O-Haze ship files like "01_indoor_hazy.jpg" / "01_indoor_GT.jpg".
_CONVENTIONS = {
    "ihaze": re.compile(r"^(?P<stem>\d+)_indoor_(?P<role>hazy|GT)$", re.IGNORECASE),
    "ohaze": re.compile(r"^(?P<stem>\d+)_outdoor_(?P<role>hazy|GT)$", re.IGNORECASE),
    "generic_suffix": re.compile(r"^(?P<stem>.+)_(?P<role>hazy|gt)$"),
}


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit with round-half-up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_image(path: str | os.PathLike, resize_max_side: int | None = None) -> np.ndarray:
    """Decode a PNG/JPEG into an (H, W, 3) float64 array in [0, 1].

    If the longest side exceeds ``resize_max_side`` the image is shrunk with
    area averaging, keeping the aspect ratio.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if resize_max_side is not None and max(im.size) > resize_max_side:
                w, h = im.size
                scale = resize_max_side / max(w, h)
                size = (max(1, round(w * scale)), max(1, round(h * scale)))
                im = im.resize(size, Image.Resampling.BOX)
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def save_image(path: str | os.PathLike, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(to_uint8(arr)).save(path)
    return path


@dataclass
class PairedDataset:
    root: Path
    pairs: list[tuple[Path, Path]]
    resize_max_side: int | None = None
    unpaired: list[Path] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def load(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        hazy, gt = self.pairs[i]
        return load_image(hazy, self.resize_max_side), load_image(gt, self.resize_max_side)


def _image_files(root: Path) -> list[Path]:
    files = [p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    # byte-wise order on the relative posix path is platform independent
    return sorted(files, key=lambda p: p.relative_to(root).as_posix().encode())


def scan_paired(root: str | os.PathLike, convention: Literal["ihaze", "ohaze", "generic_suffix"] = "generic_suffix",
                resize_max_side: int | None = None) -> PairedDataset:
    """Pair degraded and ground-truth files under ``root`` by shared stem and role token."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    if convention not in _CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}; choose from {sorted(_CONVENTIONS)}")
    pattern = _CONVENTIONS[convention]
    groups: dict[str, dict[str, Path]] = {}
    unpaired = []
    for p in _image_files(root):
        m = pattern.match(p.stem)
        if not m:
            continue
        rel_dir = p.parent.relative_to(root).as_posix()
        role = "hazy" if m["role"].lower() == "hazy" else "gt"
        # I-Haze/O-Haze keep roles in sibling folders, so the stem alone is the key there
        key = m["stem"] if convention != "generic_suffix" else f"{rel_dir}/{m['stem']}"
        slot = groups.setdefault(key, {})
        if role in slot:
            unpaired.append(p)
        else:
            slot[role] = p
    pairs = []
    for key in sorted(groups, key=lambda k: k.encode()):
        slot = groups[key]
        if "hazy" in slot and "gt" in slot:
            pairs.append((slot["hazy"], slot["gt"]))
        else:
            unpaired.extend(slot.values())
    if not pairs:
        raise DatasetError(f"no {convention} pairs found under {root}")
    return PairedDataset(root, pairs, resize_max_side, sorted(unpaired, key=lambda p: p.as_posix().encode()))


def match_by_stem(outputs: str | os.PathLike, references: str | os.PathLike) -> tuple[list[tuple[Path, Path]], list[Path]]:
    """Pair files in two directories with identical stems; returns (pairs, unmatched)."""
    outs = {p.stem: p for p in _image_files(Path(outputs))}
    refs = {p.stem: p for p in _image_files(Path(references))}
    pairs = [(outs[k], refs[k]) for k in sorted(outs.keys() & refs.keys(), key=str.encode)]
    unmatched = sorted([outs[k] for k in outs.keys() - refs.keys()] + [refs[k] for k in refs.keys() - outs.keys()])
    return pairs, unmatched


# ---------------------------------------------------------------- run directories


def atomic_write_text(path: str | os.PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path: str | os.PathLike, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return o.as_posix()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path: str | os.PathLike):
    return json.loads(Path(path).read_text())


def write_rows(path: str | os.PathLike, rows: Sequence[dict], fieldnames: Iterable[str] | None = None) -> Path:
    """Write dict rows as CSV (atomically); columns default to the union of keys in first-seen order."""
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            fieldnames.extend(k for k in r if k not in fieldnames)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(v) for k, v in r.items()})
    return atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_rows(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
