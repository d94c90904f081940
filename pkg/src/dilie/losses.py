"""Differentiable objectives.

Images inside the objectives are torch tensors of shape (1, C, H, W); the
transmission map has C = 1.  Feature maps are (C, H, W) or (1, C, H, W)
tensors, or already-flattened (N, D) sets of feature vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F

from .core import DimensionError
from .features import CONTENT_TAPS, STYLE_TAPS, FeatureExtractor


@dataclass
class LossWeights:
    mu: float = 1.0
    kappa: float = 1e3
    lambda_cl: float = 1.0
    cx_bandwidth: float = 0.5
    cx_epsilon: float = 1e-5
    remd_sites: int = 2048

    def __post_init__(self):
        for name in ("mu", "kappa", "lambda_cl"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not 0 < self.cx_bandwidth <= 1:
            raise ValueError(f"cx_bandwidth must lie in (0, 1], got {self.cx_bandwidth}")
        if not self.cx_epsilon > 0:
            raise ValueError("cx_epsilon must be > 0")
        if self.remd_sites < 1:
            raise ValueError("remd_sites must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


PHOTO_DEFAULTS = LossWeights(mu=1.0, kappa=1e3)
ARTISTIC_DEFAULTS = LossWeights(mu=1.0, kappa=1.0)


def _check_same(*named):
    ref_name, ref = named[0]
    for name, t in named[1:]:
        if t.shape[-2:] != ref.shape[-2:]:
            raise DimensionError(f"{name} has spatial shape {tuple(t.shape[-2:])}, {ref_name} has {tuple(ref.shape[-2:])}")


def compose(out_c: torch.Tensor, out_d: torch.Tensor, out_m: torch.Tensor) -> torch.Tensor:
    return out_m * out_c + (1 - out_m) * out_d


def loss_id(I: torch.Tensor, out_c: torch.Tensor, out_d: torch.Tensor, out_m: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the layer composition and the observed image."""
    _check_same(("I", I), ("out_c", out_c), ("out_d", out_d), ("out_m", out_m))
    return torch.mean((compose(out_c, out_d, out_m) - I) ** 2)


def loss_ir(I: torch.Tensor, out_r: torch.Tensor, transform: Callable[[torch.Tensor], torch.Tensor] | None = None):
    """Mean squared error between the generator output and ``transform(I)``."""
    target = I if transform is None else transform(I)
    if target.shape != out_r.shape:
        raise DimensionError(f"transformed target has shape {tuple(target.shape)}, output has {tuple(out_r.shape)}")
    return torch.mean((out_r - target) ** 2)


def downsample(k: int) -> Callable[[torch.Tensor], torch.Tensor]:
    """Area-averaging downsampling by an integer factor, for use as a loss_ir transform."""
    def _t(x):
        return F.avg_pool2d(x, k)
    _t.__name__ = f"downsample_x{k}"
    return _t


# ---------------------------------------------------------------- contextual


def _rows(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise DimensionError("feature maps must have batch size 1")
        x = x[0]
    if x.dim() == 3:
        return x.reshape(x.shape[0], -1).t()
    if x.dim() == 2:
        return x
    raise DimensionError(f"cannot interpret feature tensor of shape {tuple(x.shape)}")


def cx_affinity(F_: torch.Tensor, G: torch.Tensor, h: float = 0.5, eps: float = 1e-5) -> torch.Tensor:
    """Row-stochastic contextual affinity ``A[i, j]`` between features of F (rows) and G (columns)."""
    f, g = _rows(F_), _rows(G)
    if f.numel() == 0 or g.numel() == 0:
        raise ValueError("empty feature map")
    if f.shape[1] != g.shape[1]:
        raise DimensionError(f"feature dimensions differ: {f.shape[1]} vs {g.shape[1]}")
    mu = g.mean(dim=0, keepdim=True)
    fn = F.normalize(f - mu, dim=1, eps=1e-12)
    gn = F.normalize(g - mu, dim=1, eps=1e-12)
    d = (1 - fn @ gn.t()).clamp_min(0)
    d_rel = d / (d.min(dim=1, keepdim=True).values + eps)
    # softmax over j of (1 - d_rel)/h == exp((1 - d_rel)/h) / sum_k exp((1 - d_ik_rel)/h)
    return torch.softmax((1 - d_rel) / h, dim=1)


def cx_similarity(F_: torch.Tensor, G: torch.Tensor, h: float = 0.5, eps: float = 1e-5) -> torch.Tensor:
    """Contextual similarity: for every feature of G, its best affinity from any feature of F, averaged.

    Taking the max over F (not over G, the axis the affinity is normalized
    along) means every target feature has to be claimed by some generated
    feature; otherwise a collapsed F that matches a single target scores 1.
    """
    return cx_affinity(F_, G, h, eps).max(dim=0).values.mean()


def loss_cl(I: torch.Tensor, out_c: torch.Tensor, ext: FeatureExtractor, w: LossWeights,
            taps: Sequence[str] = CONTENT_TAPS, target: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
    """Contextual content loss ``-log CX(phi(out_c), phi(I))`` averaged over taps.

    ``target`` can carry precomputed ``phi(I)`` activations.
    """
    _check_same(("I", I), ("out_c", out_c))
    if target is None:
        with torch.no_grad():
            target = ext(I, taps)
    feats = ext(out_c, taps)
    terms = [-torch.log(cx_similarity(feats[t], target[t], w.cx_bandwidth, w.cx_epsilon)) for t in taps]
    return torch.stack(terms).mean()


# ---------------------------------------------------------------- content / style


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """``F F^T / (C H W)`` for a (C, H, W) or (1, C, H, W) activation."""
    if feat.dim() == 4:
        feat = feat[0]
    if feat.dim() != 3 or feat.numel() == 0:
        raise DimensionError(f"expected a non-empty (C, H, W) activation, got {tuple(feat.shape)}")
    c, hh, ww = feat.shape
    flat = feat.reshape(c, hh * ww)
    return flat @ flat.t() / (c * hh * ww)


def content_distance(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor], taps: Sequence[str]):
    return torch.stack([torch.mean((a[t] - b[t]) ** 2) for t in taps]).mean()


def style_distance(grams: Mapping[str, torch.Tensor], feats: Mapping[str, torch.Tensor], taps: Sequence[str]):
    return torch.stack([torch.mean((gram_matrix(feats[t]) - grams[t]) ** 2) for t in taps]).mean()


def loss_content(Icfe: torch.Tensor, Istar: torch.Tensor, ext: FeatureExtractor,
                 taps: Sequence[str] = CONTENT_TAPS) -> torch.Tensor:
    """Mean-squared difference of content activations, tap-averaged."""
    _check_same(("Icfe", Icfe), ("Istar", Istar))
    return content_distance(ext(Icfe, taps), ext(Istar, taps), taps)


def loss_style(S: torch.Tensor, Istar: torch.Tensor, ext: FeatureExtractor,
               taps: Sequence[str] = STYLE_TAPS) -> torch.Tensor:
    """Mean-squared difference of Gram matrices over the style taps, tap-averaged."""
    fs = ext(S, taps)
    return style_distance({t: gram_matrix(fs[t]) for t in taps}, ext(Istar, taps), taps)


# ---------------------------------------------------------------- matting laplacian


@dataclass
class MattingLaplacian:
    matrix: sp.csr_matrix
    window_radius: int
    epsilon_reg: float
    shape: tuple[int, int]

    def __post_init__(self):
        self._torch = {}

    def as_torch(self, dtype: torch.dtype) -> torch.Tensor:
        if dtype not in self._torch:
            coo = self.matrix.tocoo()
            idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
            self._torch[dtype] = torch.sparse_coo_tensor(
                idx, torch.from_numpy(coo.data).to(dtype), coo.shape, check_invariants=False).coalesce()
        return self._torch[dtype]


def matting_laplacian(img: np.ndarray, window_radius: int = 1, eps_reg: float = 1e-7) -> MattingLaplacian:
    """Matting Laplacian of an (H, W, 3) image under the local affine color model.

    Every (2r+1)^2 window contributes
    ``delta_ij - (1 + (I_i - mu)^T (Sigma + eps/n I)^-1 (I_j - mu)) / n``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) image, got {img.shape}")
    if eps_reg <= 0:
        raise ValueError("eps_reg must be > 0")
    h, w, _ = img.shape
    r = window_radius
    k = 2 * r + 1
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} smaller than the {k}x{k} window")
    n = k * k
    idx = np.arange(h * w).reshape(h, w)
    win = np.lib.stride_tricks.sliding_window_view(idx, (k, k)).reshape(-1, n)  # (nwin, n)
    colors = img.reshape(-1, 3)[win]  # (nwin, n, 3)
    mu = colors.mean(axis=1, keepdims=True)
    centered = colors - mu
    cov = np.einsum("wni,wnj->wij", centered, centered) / n
    inv = np.linalg.inv(cov + (eps_reg / n) * np.eye(3))
    vals = np.eye(n)[None] - (1.0 + np.einsum("wni,wij,wmj->wnm", centered, inv, centered)) / n
    rows = np.repeat(win, n, axis=1).ravel()
    cols = np.tile(win, (1, n)).ravel()
    L = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(h * w, h * w)).tocsr()
    L.sum_duplicates()
    L = (L + L.T) * 0.5
    return MattingLaplacian(L.tocsr(), r, eps_reg, (h, w))


def loss_affine(L: MattingLaplacian, Istar: torch.Tensor) -> torch.Tensor:
    """``sum_c V_c^T L V_c`` with ``V_c`` the flattened channel c of Istar."""
    if tuple(Istar.shape[-2:]) != tuple(L.shape):
        raise DimensionError(f"Istar has spatial shape {tuple(Istar.shape[-2:])}, Laplacian built for {L.shape}")
    v = Istar[0].reshape(Istar.shape[1], -1).t()  # (HW, C), row-major pixel order
    lv = torch.sparse.mm(L.as_torch(v.dtype), v)
    return (v * lv).sum()


# ---------------------------------------------------------------- relaxed EMD


def remd_loss(F_: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    """Relaxed earth mover distance under cosine cost between feature sets (N, D) and (M, D)."""
    f, g = _rows(F_), _rows(G)
    if f.shape[0] < 1 or g.shape[0] < 1:
        raise ValueError("feature sets must be non-empty")
    if f.shape[1] != g.shape[1]:
        raise DimensionError(f"feature dimensions differ: {f.shape[1]} vs {g.shape[1]}")
    fnorm, gnorm = f.norm(dim=1), g.norm(dim=1)
    if bool((fnorm == 0).any()) or bool((gnorm == 0).any()):
        raise ValueError("zero-norm feature vector; cosine cost undefined")
    fn, gn = f / fnorm[:, None], g / gnorm[:, None]
    if _precedes(gn, fn):
        # one fixed operand order makes remd(F, G) and remd(G, F) bit-identical
        fn, gn = gn, fn
    cost = 1 - fn @ gn.t()
    return torch.maximum(cost.min(dim=1).values.mean(), cost.min(dim=0).values.mean())


def _precedes(a: torch.Tensor, b: torch.Tensor) -> bool:
    """Total order on feature sets: by size, then lexicographically on the values."""
    if a.shape != b.shape:
        return a.shape[0] < b.shape[0]
    diff = (a - b).detach().flatten()
    nz = torch.nonzero(diff)
    return bool(nz.numel()) and bool(diff[nz[0, 0]] < 0)


def sample_sites(shape: tuple[int, int], max_sites: int, seed: int) -> torch.Tensor:
    """Up to ``max_sites`` distinct (y, x) pixel sites, uniformly at random; all sites if fewer."""
    h, w = shape
    total = h * w
    if total <= max_sites:
        flat = torch.arange(total)
    else:
        gen = torch.Generator().manual_seed(seed)
        flat = torch.randperm(total, generator=gen)[:max_sites].sort().values
    return torch.stack([flat // w, flat % w], dim=1)


def hypercolumns(feats: Mapping[str, torch.Tensor], taps: Sequence[str], sites: torch.Tensor,
                 image_shape: tuple[int, int]) -> torch.Tensor:
    """Concatenated per-site activations, each tap bilinearly upsampled to the image grid.

    Equivalent to upsampling every tap to ``image_shape`` and indexing
    ``sites``, but only evaluates the sampled locations.
    """
    h, w = image_shape
    cols = []
    for t in taps:
        fmap = feats[t] if feats[t].dim() == 4 else feats[t][None]
        hl, wl = fmap.shape[-2:]
        # align_corners=False upsampling maps output pixel p to source coordinate (p + 0.5) * s - 0.5
        ys = (sites[:, 0].to(fmap.dtype) + 0.5) * (hl / h) - 0.5
        xs = (sites[:, 1].to(fmap.dtype) + 0.5) * (wl / w) - 0.5
        grid = torch.stack([(xs + 0.5) / wl * 2 - 1, (ys + 0.5) / hl * 2 - 1], dim=1).view(1, 1, -1, 2)
        sampled = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="border", align_corners=False)
        cols.append(sampled[0, :, 0, :].t())
    return torch.cat(cols, dim=1)


# ---------------------------------------------------------------- combined objectives


def sfe_targets(Icfe: torch.Tensor, S: torch.Tensor, ext: FeatureExtractor,
                content_taps: Sequence[str] = CONTENT_TAPS, style_taps: Sequence[str] = STYLE_TAPS) -> dict:
    """Activations of the fixed content and style images, computed once per run."""
    with torch.no_grad():
        return {"content": ext(Icfe, content_taps), "style": ext(S, style_taps)}


def _union(*taps: Sequence[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(t for group in taps for t in group))


def loss_pe(Istar: torch.Tensor, Icfe: torch.Tensor, S: torch.Tensor, ext: FeatureExtractor,
            L: MattingLaplacian, w: LossWeights, content_taps: Sequence[str] = CONTENT_TAPS,
            style_taps: Sequence[str] = STYLE_TAPS, parts: dict | None = None,
            targets: dict | None = None) -> torch.Tensor:
    """Photo-realistic objective: affine term + mu * content + kappa * Gram style.

    ``targets`` can carry :func:`sfe_targets` so the fixed images are not re-encoded.
    """
    _check_same(("Icfe", Icfe), ("Istar", Istar))
    targets = targets or sfe_targets(Icfe, S, ext, content_taps, style_taps)
    feats = ext(Istar, _union(content_taps, style_taps))
    lm = loss_affine(L, Istar)
    lc = content_distance(targets["content"], feats, content_taps)
    ls = style_distance({t: gram_matrix(targets["style"][t]) for t in style_taps}, feats, style_taps)
    if parts is not None:
        parts.update(affine=lm.item(), content=lc.item(), style=ls.item())
    return lm + w.mu * lc + w.kappa * ls


def remd_style(S: torch.Tensor, Istar: torch.Tensor, ext: FeatureExtractor, taps: Sequence[str] = STYLE_TAPS,
               max_sites: int = 2048, seed: int = 0, fs: Mapping[str, torch.Tensor] | None = None,
               fi: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
    """REMD between hypercolumn sets of S and Istar.

    Both images draw their sites from generators seeded identically, so equal
    sizes give equal site sets.  ``fs`` / ``fi`` can carry precomputed activations.
    """
    fs = fs if fs is not None else ext(S, taps)
    fi = fi if fi is not None else ext(Istar, taps)
    s_shape, i_shape = tuple(S.shape[-2:]), tuple(Istar.shape[-2:])
    hs = hypercolumns(fs, taps, sample_sites(s_shape, max_sites, seed), s_shape)
    hi = hypercolumns(fi, taps, sample_sites(i_shape, max_sites, seed), i_shape)
    return remd_loss(hi, hs)


def loss_ae(Istar: torch.Tensor, Icfe: torch.Tensor, S: torch.Tensor, ext: FeatureExtractor, w: LossWeights,
            content_taps: Sequence[str] = CONTENT_TAPS, style_taps: Sequence[str] = STYLE_TAPS,
            seed: int = 0, parts: dict | None = None, targets: dict | None = None) -> torch.Tensor:
    """Artistic objective: mu * content + kappa * REMD style over hypercolumns."""
    _check_same(("Icfe", Icfe), ("Istar", Istar))
    targets = targets or sfe_targets(Icfe, S, ext, content_taps, style_taps)
    feats = ext(Istar, _union(content_taps, style_taps))
    lc = content_distance(targets["content"], feats, content_taps)
    ls = remd_style(S, Istar, ext, style_taps, w.remd_sites, seed, fs=targets["style"], fi=feats)
    if parts is not None:
        parts.update(content=lc.item(), style=ls.item())
    return w.mu * lc + w.kappa * ls
