"""Scripted studies: the contextual-loss ablation and the haze-corruption comparison."""

from __future__ import annotations

import json
import os
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image

from . import losses as L
from . import metrics as M
from . import pipelines as P
from .core import compose_haze
from .data_io import PairedDataset, save_image, write_json, write_rows
from .features import FeatureExtractor
from .plotting import image_grid

STANDARD_IMAGES = ("astronaut", "coffee", "chelsea")


@dataclass
class SyntheticPair:
    name: str
    degraded: np.ndarray
    clean: np.ndarray
    mask: np.ndarray | None = None  # ground-truth transmission when known


def center_square(img: np.ndarray, side: int) -> np.ndarray:
    """Largest centred square crop, area-downscaled to ``side``."""
    arr = np.asarray(img)
    h, w = arr.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = arr[top:top + s, left:left + s]
    if crop.dtype != np.uint8:
        crop = np.floor(np.clip(crop, 0, 1) * 255 + 0.5).astype(np.uint8)
    im = Image.fromarray(crop).resize((side, side), Image.Resampling.BOX) if s != side else Image.fromarray(crop)
    return np.asarray(im).astype(np.float64) / 255.0


def standard_image(name: str, side: int = 128) -> np.ndarray:
    """A bundled scikit-image test picture, centre-cropped and downscaled."""
    try:
        import skimage.data
    except ImportError as exc:  # optional dependency
        raise ImportError("standard test images need scikit-image (pip install 'dilie[study]')") from exc
    return center_square(getattr(skimage.data, name)(), side)


def synthetic_haze_pairs(names: Sequence[str] = STANDARD_IMAGES, side: int = 128, airlight: float = 0.85,
                         transmission: float = 0.6) -> list[SyntheticPair]:
    pairs = []
    for n in names:
        clean = standard_image(n, side)
        pairs.append(SyntheticPair(n, compose_haze(clean, airlight, transmission), clean,
                                   np.full(clean.shape[:2] + (1,), transmission)))
    return pairs


def dataset_pairs(ds: PairedDataset) -> list[SyntheticPair]:
    out = []
    for i, (hazy, _gt) in enumerate(ds.pairs):
        degraded, clean = ds.load(i)
        out.append(SyntheticPair(Path(hazy).stem, degraded, clean))
    return out


def _decomposition_row(res: P.DecompositionResult, pair: SyntheticPair) -> dict:
    row = {"ssim": M.ssim(res.clean, pair.clean), "psnr": M.psnr(res.clean, pair.clean),
           "final_id": res.final_losses["id"]}
    if pair.mask is not None:
        row["mask_error"] = float(np.mean(np.abs(res.mask - pair.mask)))
    return row


def run_ablation_contextual(pairs: Sequence[SyntheticPair] | PairedDataset, ext: FeatureExtractor,
                            seeds: Sequence[int], out_root: str | os.PathLike,
                            opt: P.OptimizerConfig | None = None, options: P.DecomposeOptions | None = None,
                            weights: L.LossWeights | None = None, settings: Sequence[float] = (0.0, 1.0)) -> dict:
    """Decompose every pair with and without the contextual term under the same seed.

    Writes one run directory per (pair, setting), ``summary.csv`` (one row per
    pair plus a mean row) and ``grid.png`` under ``out_root``.  A failing run
    is recorded in the summary and the sweep continues.
    """
    if isinstance(pairs, PairedDataset):
        pairs = dataset_pairs(pairs)
    if len(pairs) < 3:
        raise ValueError(f"the ablation needs at least 3 pairs, got {len(pairs)}")
    if not seeds:
        raise ValueError("at least one seed is required")
    out_root = Path(out_root)
    opt = opt or P.decompose_defaults()
    options = options or P.DecomposeOptions()
    base = weights or L.LossWeights()
    lo, hi = settings
    rows, grid = [], []
    for k, pair in enumerate(pairs):
        seed = int(seeds[k % len(seeds)])
        run_opt = P.OptimizerConfig(**{**opt.to_dict(), "seed": seed})
        row = {"pair": pair.name, "seed": seed}
        grid_row = [pair.degraded, pair.clean]
        for lam in settings:
            tag = f"lcl{lam:g}"
            w = L.LossWeights(**{**base.to_dict(), "lambda_cl": lam})
            config = {"pair": pair.name, "lambda_cl": lam, "weights": w.to_dict(), "optimizer": run_opt.to_dict(),
                      "options": options.to_dict()}
            try:
                res = P.run_cfe_decompose(pair.degraded, ext if lam > 0 else None, None, w, run_opt, options)
            except Exception as exc:  # keep sweeping; the summary carries the failure
                row[f"error_{tag}"] = f"{type(exc).__name__}: {exc}"
                grid_row.append(None)
                traceback.print_exc()
                continue
            scores = _decomposition_row(res, pair)
            for key, v in scores.items():
                row[f"{key}_{tag}"] = v
            manifest = P.RunManifest(
                f"{pair.name}_{tag}", config,
                [{"stage": "cfe_decompose", "config": res.config, "final_losses": res.final_losses,
                  "airlight": res.airlight, "losses": res.history, "wall_time": res.wall_time}],
                {}, metrics=scores, wall_time=res.wall_time)
            P.persist_run(out_root / f"{pair.name}_{tag}",
                          manifest, {"input": pair.degraded, "cfe": res.clean, "haze": res.haze * (1 - res.mask)},
                          {"mask": res.mask})
            grid_row.append(res.clean)
        if f"ssim_lcl{lo:g}" in row and f"ssim_lcl{hi:g}" in row:
            delta = row[f"ssim_lcl{hi:g}"] - row[f"ssim_lcl{lo:g}"]
            row["delta_ssim"] = delta
            row["win"] = int(delta >= 0)
        row["config"] = json.dumps({"optimizer": run_opt.to_dict(), "options": options.to_dict(),
                                    "weights": base.to_dict(), "settings": list(settings)}, sort_keys=True)
        rows.append(row)
        grid.append(grid_row)

    deltas = [r["delta_ssim"] for r in rows if "delta_ssim" in r]
    summary = {"pair": "mean", "seed": "",
               "delta_ssim": float(np.mean(deltas)) if deltas else float("nan"),
               "win": int(sum(r.get("win", 0) for r in rows))}
    for key in {k for r in rows for k in r if k.startswith(("ssim_", "mask_error_", "psnr_"))}:
        vals = [r[key] for r in rows if key in r]
        summary[key] = float(np.mean(vals))
    write_rows(out_root / "summary.csv", rows + [summary])
    image_grid(out_root / "grid.png", grid, ["hazy", "clean"] + [f"lambda_cl={s:g}" for s in settings],
               [p.name for p in pairs])
    return {"rows": rows, "wins": summary["win"], "pairs": len(rows), "mean_delta_ssim": summary["delta_ssim"],
            "out_dir": str(out_root)}


def run_haze_corruption_study(clean: np.ndarray, hazy: np.ndarray, style: np.ndarray,
                              methods: Mapping[str, Callable[[np.ndarray, np.ndarray], np.ndarray]],
                              backend: M.PerceptualErrorBackend, out_root: str | os.PathLike | None = None) -> dict:
    """Relative haze-corruption score H for each stylization method.

    ``methods`` maps a name to ``st(content, style) -> image``.  Outputs go
    to ``out_root`` as ``summary.csv`` and ``grid.png`` when given.
    """
    rows, grid = [], []
    for name, st in methods.items():
        out_clean, out_hazy = st(clean, style), st(hazy, style)
        e_clean = backend.score(clean, out_clean)
        e_hazy = backend.score(clean, out_hazy)
        rows.append({"method": name, "E_clean": e_clean, "E_hazy": e_hazy, "H": abs(e_clean - e_hazy),
                     "backend": backend.kind})
        grid.append([clean, hazy, style, out_clean, out_hazy])
        if out_root is not None:
            save_image(Path(out_root) / f"{name}_clean.png", out_clean)
            save_image(Path(out_root) / f"{name}_hazy.png", out_hazy)
    if out_root is not None:
        out_root = Path(out_root)
        write_rows(out_root / "summary.csv", rows)
        image_grid(out_root / "grid.png", grid, ["clean", "hazy", "style", "st(clean)", "st(hazy)"],
                   [r["method"] for r in rows])
    return {"rows": rows, "H": {r["method"]: r["H"] for r in rows}}


def dilie_method(ext: FeatureExtractor, beta: P.Beta = "photo", opt_cfe: P.OptimizerConfig | None = None,
                 opt_sfe: P.OptimizerConfig | None = None, options: P.DecomposeOptions | None = None,
                 w_cfe: L.LossWeights | None = None, w_sfe: L.LossWeights | None = None):
    """st(content, style) running decomposition CFE then SFE."""
    def st(content, style):
        out, _ = P.run_dilie(content, style, ext, "decompose", beta, w_cfe, w_sfe, opt_cfe, opt_sfe,
                             decompose_options=options)
        return out
    return st


def sfe_method(ext: FeatureExtractor, beta: P.Beta = "photo", opt_sfe: P.OptimizerConfig | None = None,
               w_sfe: L.LossWeights | None = None):
    """st(content, style) stylizing the raw input, without content enhancement."""
    def st(content, style):
        return P.run_sfe(content, style, ext, beta, w_sfe, opt_sfe).image
    return st


def write_report(out_root: str | os.PathLike, report: dict) -> Path:
    return write_json(Path(out_root) / "report.json", report)
