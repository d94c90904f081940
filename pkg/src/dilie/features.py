"""Frozen VGG19 feature extractor.

Weights live in a safetensors blob with a JSON sidecar (``<blob>.json``)::

    {
      "architecture": "vgg19",
      "pretrained": true,
      "source": "...",
      "sha256": "<hex digest of the blob>",
      "mean": [0.485, 0.456, 0.406],
      "std": [0.229, 0.224, 0.225],
      "layers": {"conv1_1": {"weight": "features.0.weight", "bias": "features.0.bias"}, ...}
    }

Taps are the convolution outputs (before the rectifier) of the named layer.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .core import IntegrityError, LoadError, check_image

# (name, in_channels, out_channels); a 2x max-pool follows every block's last conv.
VGG19_LAYERS: tuple[tuple[str, int, int], ...] = (
    ("conv1_1", 3, 64), ("conv1_2", 64, 64),
    ("conv2_1", 64, 128), ("conv2_2", 128, 128),
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256), ("conv3_4", 256, 256),
    ("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512), ("conv4_4", 512, 512),
    ("conv5_1", 512, 512), ("conv5_2", 512, 512), ("conv5_3", 512, 512), ("conv5_4", 512, 512),
)
LAYER_NAMES = tuple(name for name, _, _ in VGG19_LAYERS)
_POOL_AFTER = {"conv1_2", "conv2_2", "conv3_4", "conv4_4", "conv5_4"}
# torchvision's vgg19().features indices of the conv layers
_TORCHVISION_INDEX = (0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34)

CONTENT_TAPS = ("conv4_2",)
STYLE_TAPS = ("conv1_2", "conv2_2", "conv3_2")
PERCEPTUAL_TAPS = ("conv1_2", "conv2_2", "conv3_2", "conv4_2")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def sidecar_path(weights_path: str | os.PathLike) -> Path:
    return Path(str(weights_path) + ".json")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_weights(path: str | os.PathLike, tensors: dict[str, torch.Tensor], *, pretrained: bool, source: str,
                  mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> Path:
    """Write conv weights keyed by layer name into the blob + sidecar container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob, layers = {}, {}
    for (name, cin, cout), idx in zip(VGG19_LAYERS, _TORCHVISION_INDEX):
        w, b = tensors[f"{name}.weight"], tensors[f"{name}.bias"]
        if tuple(w.shape) != (cout, cin, 3, 3) or tuple(b.shape) != (cout,):
            raise IntegrityError(f"{name}: unexpected shapes {tuple(w.shape)}, {tuple(b.shape)}")
        wk, bk = f"features.{idx}.weight", f"features.{idx}.bias"
        blob[wk] = w.detach().to(torch.float32).contiguous()
        blob[bk] = b.detach().to(torch.float32).contiguous()
        layers[name] = {"weight": wk, "bias": bk}
    save_file(blob, str(path))
    meta = {
        "architecture": "vgg19",
        "pretrained": pretrained,
        "source": source,
        "sha256": _sha256(path),
        "mean": list(mean),
        "std": list(std),
        "layers": layers,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return path


def init_random_weights(path: str | os.PathLike, seed: int = 0) -> Path:
    """Create a seeded He-normal VGG19 weight file for offline use.

    These weights are not trained; the sidecar records ``pretrained: false`` so
    reports can say so.
    """
    gen = torch.Generator().manual_seed(seed)
    tensors = {}
    for name, cin, cout in VGG19_LAYERS:
        std = (2.0 / (cin * 9)) ** 0.5
        tensors[f"{name}.weight"] = torch.randn(cout, cin, 3, 3, generator=gen) * std
        # small nonzero biases keep pre-activation features away from the zero vector
        tensors[f"{name}.bias"] = torch.randn(cout, generator=gen) * 0.01
    return write_weights(path, tensors, pretrained=False, source=f"random he-normal, seed={seed}")


def convert_torchvision(state_dict_path: str | os.PathLike, out_path: str | os.PathLike) -> Path:
    """Convert a torchvision ``vgg19`` state dict (e.g. vgg19-dcbb9e9d.pth) to the container."""
    sd = torch.load(state_dict_path, map_location="cpu", weights_only=True)
    tensors = {}
    for (name, _, _), idx in zip(VGG19_LAYERS, _TORCHVISION_INDEX):
        tensors[f"{name}.weight"] = sd[f"features.{idx}.weight"]
        tensors[f"{name}.bias"] = sd[f"features.{idx}.bias"]
    return write_weights(out_path, tensors, pretrained=True, source=f"torchvision: {Path(state_dict_path).name}")


def default_weights_path() -> Path | None:
    env = os.environ.get("DILIE_WEIGHTS")
    if env:
        return Path(env)
    return None


class FeatureExtractor:
    """VGG19 convolution stack with frozen weights.

    Call with a (N, 3, H, W) tensor in [0, 1]; returns a dict of the requested
    taps.  Weights are cast to the input dtype on demand, so the same
    extractor serves float32 pipelines and float64 gradient checks.
    """

    def __init__(self, weights: dict[str, tuple[torch.Tensor, torch.Tensor]], mean, std,
                 weights_source: str, pretrained: bool):
        self.weights_source = weights_source
        self.pretrained = pretrained
        self.layer_names = LAYER_NAMES
        self.preprocessing = (tuple(mean), tuple(std))
        self._params = {torch.float32: weights}
        for w, b in weights.values():
            w.requires_grad_(False)
            b.requires_grad_(False)

    def _weights(self, dtype: torch.dtype):
        if dtype not in self._params:
            self._params[dtype] = {k: (w.to(dtype), b.to(dtype)) for k, (w, b) in self._params[torch.float32].items()}
        return self._params[dtype]

    def check_taps(self, taps: Iterable[str]) -> tuple[str, ...]:
        taps = tuple(taps)
        if not taps:
            raise ValueError("at least one tap is required")
        unknown = [t for t in taps if t not in self.layer_names]
        if unknown:
            raise ValueError(f"unknown taps {unknown}; valid names: {', '.join(self.layer_names)}")
        return taps

    def __call__(self, x: torch.Tensor, taps: Iterable[str]) -> dict[str, torch.Tensor]:
        taps = self.check_taps(taps)
        params = self._weights(x.dtype)
        mean, std = (torch.tensor(v, dtype=x.dtype).view(1, 3, 1, 1) for v in self.preprocessing)
        h = (x - mean) / std
        last = max(self.layer_names.index(t) for t in taps)
        out = {}
        for name in self.layer_names[: last + 1]:
            w, b = params[name]
            h = F.conv2d(h, w, b, padding=1)
            if name in taps:
                out[name] = h
            h = F.relu(h)
            if name in _POOL_AFTER:
                h = F.max_pool2d(h, 2)
        return out


@dataclass
class FeatureStack:
    maps: dict[str, torch.Tensor]  # name -> (C, H_l, W_l)
    source_shape: tuple[int, int]


def _probe_image(size: int = 64) -> torch.Tensor:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.stack([xx, yy, 0.5 + 0.5 * np.sin(6 * np.pi * xx * yy)], axis=0)
    return torch.from_numpy(img[None].astype(np.float32))


def load_extractor(weights_path: str | os.PathLike | None = None) -> FeatureExtractor:
    """Load and self-test a VGG19 extractor.

    Falls back to ``$DILIE_WEIGHTS`` when no path is given.
    """
    if weights_path is None:
        weights_path = default_weights_path()
        if weights_path is None:
            raise LoadError("no weights path given and DILIE_WEIGHTS is unset; create one with `dilie weights init`")
    path = Path(weights_path)
    meta_path = sidecar_path(path)
    if not path.is_file():
        raise LoadError(f"weights file not found: {path}")
    if not meta_path.is_file():
        raise LoadError(f"weights sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("architecture") != "vgg19":
        raise IntegrityError(f"{path}: sidecar does not describe a vgg19 network")
    digest = _sha256(path)
    if digest != meta.get("sha256"):
        raise IntegrityError(f"{path}: checksum mismatch (file {digest[:12]}, sidecar {str(meta.get('sha256'))[:12]})")
    try:
        blob = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise IntegrityError(f"{path}: unreadable tensor container ({exc})") from exc
    weights = {}
    for name, cin, cout in VGG19_LAYERS:
        keys = meta["layers"].get(name)
        if keys is None or keys["weight"] not in blob or keys["bias"] not in blob:
            raise IntegrityError(f"{path}: layer {name} missing")
        w, b = blob[keys["weight"]].to(torch.float32), blob[keys["bias"]].to(torch.float32)
        if tuple(w.shape) != (cout, cin, 3, 3) or tuple(b.shape) != (cout,):
            raise IntegrityError(f"{path}: layer {name} has shapes {tuple(w.shape)}/{tuple(b.shape)}")
        weights[name] = (w, b)
    ext = FeatureExtractor(weights, meta["mean"], meta["std"], str(path), bool(meta.get("pretrained", False)))
    with torch.no_grad():
        probe = ext(_probe_image(), ("conv5_4",))["conv5_4"]
    if not torch.isfinite(probe).all():
        raise IntegrityError(f"{path}: self-test produced non-finite activations")
    return ext


def image_to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) array -> (1, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))).to(dtype)[None]


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) tensor -> (H, W, C) float64 array."""
    return t.detach().to(torch.float64).cpu().numpy()[0].transpose(1, 2, 0)


def extract(ext: FeatureExtractor, img, taps: Sequence[str] = CONTENT_TAPS) -> FeatureStack:
    """Activations of ``img`` at ``taps``.

    ``img`` may be an (H, W, 3) array or a (1, 3, H, W) tensor; gradients flow
    back to a tensor input.
    """
    taps = ext.check_taps(taps)
    if isinstance(img, torch.Tensor):
        x = img if img.dim() == 4 else img.permute(2, 0, 1)[None]
    else:
        x = image_to_tensor(check_image(img))
    maps = ext(x, taps)
    return FeatureStack({k: v[0] for k, v in maps.items()}, tuple(x.shape[-2:]))
