"""Optimization drivers: CFE by decomposition or reconstruction, SFE, and the full composition."""

from __future__ import annotations

import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import __version__
from . import generators as G
from . import losses as L
from .core import RunError, check_image, compose_haze
from .data_io import save_image, write_json, write_rows
from .features import FeatureExtractor, image_to_tensor, tensor_to_image

Alpha = Literal["decompose", "reconstruct"]
Beta = Literal["photo", "artistic"]

DECOMPOSE_ITERATIONS = 4000
RECONSTRUCT_ITERATIONS = 3000
SFE_ITERATIONS = 1000
GENERATOR_STEP = 0.01
PIXEL_STEP = 0.05
EMA_ALPHA = 0.99
JITTER_SIGMA = 1 / 30


@dataclass
class OptimizerConfig:
    step_size: float = GENERATOR_STEP
    iterations: int = DECOMPOSE_ITERATIONS
    seed: int = 0
    jitter_sigma: float = JITTER_SIGMA
    log_every: int = 25
    # "warmup_cosine": linear warmup over the first tenth of the run, then cosine decay to 0
    lr_schedule: Literal["constant", "warmup_cosine"] = "constant"

    def __post_init__(self):
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError(f"step_size must be finite and > 0, got {self.step_size}")
        if int(self.iterations) < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not (math.isfinite(self.jitter_sigma) and self.jitter_sigma >= 0):
            raise ValueError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        if int(self.log_every) < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")
        if self.lr_schedule not in ("constant", "warmup_cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.iterations, self.log_every, self.seed = int(self.iterations), int(self.log_every), int(self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


def decompose_defaults(**kw) -> OptimizerConfig:
    return OptimizerConfig(**{"iterations": DECOMPOSE_ITERATIONS, **kw})


def reconstruct_defaults(**kw) -> OptimizerConfig:
    return OptimizerConfig(**{"iterations": RECONSTRUCT_ITERATIONS, **kw})


def sfe_defaults(**kw) -> OptimizerConfig:
    return OptimizerConfig(**{"step_size": PIXEL_STEP, "iterations": SFE_ITERATIONS, "lr_schedule": "warmup_cosine",
                              **kw})


def decompose_weights(ext: FeatureExtractor | None) -> L.LossWeights:
    """Default decomposition weights for a feature source.

    The contextual term is on with pretrained features and off with random
    frozen ones, under which it pulls the clean layer back toward the hazy input.
    """
    return L.LossWeights(lambda_cl=1.0 if ext is not None and ext.pretrained else 0.0)


def lr_factor(schedule: str, it: int, iterations: int) -> float:
    """Multiplier on the step size at iteration ``it``."""
    if schedule == "constant":
        return 1.0
    warmup = max(1, iterations // 10)
    return min(1.0, (it + 1) / warmup) * 0.5 * (1 + math.cos(math.pi * it / iterations))


def _scheduler(optim: torch.optim.Optimizer, opt: OptimizerConfig):
    return torch.optim.lr_scheduler.LambdaLR(optim, lambda it: lr_factor(opt.lr_schedule, it, opt.iterations))


@dataclass
class EarlyStopState:
    """Plateau detector on the exponentially smoothed loss.

    The smoothed loss is checked every ``window`` iterations and every new
    minimum is snapshotted.  The run stops once the best smoothed loss has
    improved by less than the relative margin ``min_delta`` over the last
    ``patience`` iterations; the snapshot at the best check is then used.
    """

    window: int = 25
    best_smoothed_loss: float = math.inf
    patience: int = 200
    ema_alpha: float = EMA_ALPHA
    min_delta: float = 1e-2
    smoothed: float | None = None
    best_iteration: int = -1
    fired: bool = False
    _checks: list = field(default_factory=list, repr=False)  # (iteration, best) at each check

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 < self.ema_alpha < 1:
            raise ValueError("ema_alpha must lie in (0, 1)")
        if not 0 <= self.min_delta < 1:
            raise ValueError("min_delta must lie in [0, 1)")

    def update(self, iteration: int, loss: float) -> tuple[bool, bool]:
        """Feed one loss value; returns (is_new_best, should_stop)."""
        a = self.ema_alpha
        self.smoothed = loss if self.smoothed is None else a * self.smoothed + (1 - a) * loss
        if iteration % self.window:
            return False, False
        improved = self.smoothed < self.best_smoothed_loss
        if improved:
            self.best_smoothed_loss = self.smoothed
            self.best_iteration = iteration
        self._checks.append((iteration, self.best_smoothed_loss))
        # best as of `patience` iterations ago (latest check at or before then)
        past = [b for it, b in self._checks if it <= iteration - self.patience]
        if past and self.best_smoothed_loss >= past[-1] * (1 - self.min_delta):
            self.fired = True
        return improved, self.fired


@dataclass
class DecompositionResult:
    clean: np.ndarray
    haze: np.ndarray
    mask: np.ndarray
    recomposed: np.ndarray
    final_losses: dict[str, float]
    history: list[dict] = field(default_factory=list)
    airlight: list[float] | None = None
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class ReconstructionResult:
    image: np.ndarray
    best_iteration: int
    stopped_at: int
    early_stopped: bool
    best_smoothed_loss: float
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class StylizationResult:
    image: np.ndarray
    final_losses: dict[str, float]
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class RunManifest:
    run_id: str
    config: dict
    stages: list[dict]
    images: dict[str, str]
    auxiliary: dict[str, str] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    created: str = ""
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- helpers


def _finite_or_raise(value: torch.Tensor, stage: str, iteration: int, last_finite: int | None):
    if not torch.isfinite(value):
        raise RunError(f"loss became non-finite at iteration {iteration}", stage=stage,
                       last_finite_iteration=last_finite)


def _ema(prev: float | None, x: float) -> float:
    return x if prev is None else EMA_ALPHA * prev + (1 - EMA_ALPHA) * x


def bright_airlight(img: np.ndarray, fraction: float = 0.001) -> np.ndarray:
    """Airlight estimate: per-channel max over the pixels with the brightest dark channel."""
    img = np.asarray(img, dtype=np.float64)
    dark = img.min(axis=2).ravel()
    k = max(1, int(round(dark.size * fraction)))
    idx = np.argsort(dark, kind="stable")[-k:]
    return img.reshape(-1, 3)[idx].max(axis=0)


def dark_channel_transmission(img: np.ndarray, airlight: np.ndarray, patch: int = 15,
                              omega: float = 0.95, floor: float = 0.1) -> np.ndarray:
    """Transmission estimate ``1 - omega * dark(I / A)`` from the patch dark channel, Gaussian-smoothed."""
    img = np.asarray(img, dtype=np.float64)
    a = np.clip(np.asarray(airlight, dtype=np.float64).reshape(1, 1, -1), 1e-3, None)
    dark = ndimage.minimum_filter((img / a).min(axis=2), size=patch, mode="nearest")
    t = np.clip(1 - omega * dark, floor, 1)
    return np.clip(ndimage.gaussian_filter(t, patch / 2, mode="nearest"), floor, 1)[..., None]


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-3, 1 - 1e-3)
    return np.log(p / (1 - p))


@dataclass
class DecomposeOptions:
    """Knobs of the decomposition driver beyond the loss weights and optimizer."""

    haze_head: Literal["uniform", "generator"] = "uniform"
    airlight_init: Literal["bright", "half"] = "bright"
    mask_step_factor: float = 1.0
    # soft pull of the mask toward the dark-channel transmission estimate; 0 disables it
    dark_channel_weight: float = 1.0
    dark_channel_patch: int = 15
    dark_channel_omega: float = 0.95

    def __post_init__(self):
        if self.haze_head not in ("uniform", "generator"):
            raise ValueError(f"unknown haze head {self.haze_head!r}")
        if self.airlight_init not in ("bright", "half"):
            raise ValueError(f"unknown airlight init {self.airlight_init!r}")
        if not (math.isfinite(self.mask_step_factor) and self.mask_step_factor > 0):
            raise ValueError(f"mask_step_factor must be > 0, got {self.mask_step_factor}")
        if not (math.isfinite(self.dark_channel_weight) and self.dark_channel_weight >= 0):
            raise ValueError(f"dark_channel_weight must be >= 0, got {self.dark_channel_weight}")
        if int(self.dark_channel_patch) < 1:
            raise ValueError(f"dark_channel_patch must be >= 1, got {self.dark_channel_patch}")
        if not 0 < self.dark_channel_omega <= 1:
            raise ValueError(f"dark_channel_omega must be in (0, 1], got {self.dark_channel_omega}")

    def to_dict(self) -> dict:
        return asdict(self)


def default_decompose_specs() -> tuple[G.GeneratorSpec, G.GeneratorSpec, G.GeneratorSpec]:
    """(clean, haze, mask) head specs."""
    return G.image_head(), G.image_head(), G.mask_head()


def run_cfe_decompose(I: np.ndarray, ext: FeatureExtractor | None, specs=None, w: L.LossWeights | None = None,
                      opt: OptimizerConfig | None = None, options: DecomposeOptions | None = None,
                      callback: Callable[[int, dict], None] | None = None) -> DecompositionResult:
    """Split ``I`` into a clean layer, a haze layer and a transmission mask.

    Minimizes ``L_ID + lambda_cl * L_CL`` jointly over the three heads, plus
    a soft pull of the mask toward the dark-channel transmission estimate when
    ``options.dark_channel_weight > 0``; without it the mask is not identifiable.
    ``callback(iteration, record)`` is called at every logged iteration with
    the tensors that produced the logged losses.
    """
    I = check_image(I, "input", min_side=G.MIN_SIDE)
    w = w or L.LossWeights()
    opt = opt or decompose_defaults()
    options = options or DecomposeOptions()
    clean_spec, haze_spec, mask_spec = specs or default_decompose_specs()
    if w.lambda_cl > 0 and ext is None:
        raise ValueError("a feature extractor is required when lambda_cl > 0")
    stage = "cfe_decompose"
    h, wd = I.shape[:2]
    It = image_to_tensor(I)

    g_clean = G.build_generator(clean_spec, opt.seed)
    g_mask = G.build_generator(mask_spec, opt.seed + 2)
    z_clean = G.sample_noise_input((h, wd), clean_spec.input_channels, opt.seed + 10, opt.jitter_sigma)
    z_mask = G.sample_noise_input((h, wd), mask_spec.input_channels, opt.seed + 12, opt.jitter_sigma)
    a0 = bright_airlight(I) if options.airlight_init == "bright" else np.full(3, 0.5)
    if options.haze_head == "uniform":
        air_logit = torch.nn.Parameter(torch.tensor(_logit(a0), dtype=torch.float32).view(1, 3, 1, 1))
        haze_params = [air_logit]
        g_haze = z_haze = None

        def haze_out(_jit):
            return torch.sigmoid(air_logit).expand(1, 3, h, wd)
    elif options.haze_head == "generator":
        g_haze = G.build_generator(haze_spec, opt.seed + 1)
        z_haze = G.sample_noise_input((h, wd), haze_spec.input_channels, opt.seed + 11, opt.jitter_sigma)
        haze_params = list(g_haze.parameters())

        def haze_out(jit):
            return g_haze(z_haze.jittered() if jit else z_haze.values)
    else:
        raise ValueError(f"unknown haze head {options.haze_head!r}")

    mask_lr = opt.step_size * options.mask_step_factor
    optim = torch.optim.Adam([
        {"params": list(g_clean.parameters())},
        {"params": haze_params},
        {"params": list(g_mask.parameters()), "lr": mask_lr},
    ], lr=opt.step_size)
    sched = _scheduler(optim, opt)

    target = None
    if w.lambda_cl > 0:
        with torch.no_grad():
            target = ext(It, L.CONTENT_TAPS)
    t_prior = None
    if options.dark_channel_weight > 0:
        t_prior = image_to_tensor(dark_channel_transmission(I, a0, options.dark_channel_patch,
                                                            options.dark_channel_omega))

    def heads(jit: bool):
        c = g_clean(z_clean.jittered() if jit else z_clean.values)
        m = g_mask(z_mask.jittered() if jit else z_mask.values)
        return c, haze_out(jit), m

    history, smoothed, last_finite = [], None, None
    t0 = time.perf_counter()
    for it in range(opt.iterations):
        optim.zero_grad(set_to_none=True)
        c, d, m = heads(True)
        lid = L.loss_id(It, c, d, m)
        total = lid
        lcl = ldc = None
        if w.lambda_cl > 0:
            lcl = L.loss_cl(It, c, ext, w, target=target)
            total = total + w.lambda_cl * lcl
        if t_prior is not None:
            ldc = torch.mean((m - t_prior) ** 2)
            total = total + options.dark_channel_weight * ldc
        _finite_or_raise(total, stage, it, last_finite)
        last_finite = it
        smoothed = _ema(smoothed, total.item())
        if it % opt.log_every == 0 or it == opt.iterations - 1:
            row = {"iteration": it, "total": total.item(), "smoothed": smoothed, "id": lid.item()}
            if lcl is not None:
                row["cl"] = lcl.item()
            if ldc is not None:
                row["dc"] = ldc.item()
            history.append(row)
            if callback is not None:
                callback(it, {"I": It, "clean": c.detach(), "haze": d.detach(), "mask": m.detach(), "row": row})
        total.backward()
        optim.step()
        sched.step()

    with torch.no_grad():
        c, d, m = heads(False)
        final = {"id": float(L.loss_id(It, c, d, m))}
        if w.lambda_cl > 0:
            final["cl"] = float(L.loss_cl(It, c, ext, w, target=target))
        if t_prior is not None:
            final["dc"] = float(torch.mean((m - t_prior) ** 2))
    if not all(math.isfinite(v) for v in final.values()):
        raise RunError("final losses are non-finite", stage=stage, last_finite_iteration=last_finite)
    clean, haze, mask = tensor_to_image(c), tensor_to_image(d), tensor_to_image(m)
    air = [float(v) for v in torch.sigmoid(air_logit).detach().view(-1)] if options.haze_head == "uniform" else None
    config = {"weights": w.to_dict(), "optimizer": opt.to_dict(), "options": options.to_dict(),
              "specs": {"clean": clean_spec.to_dict(), "haze": haze_spec.to_dict(), "mask": mask_spec.to_dict()},
              "airlight_init": [float(v) for v in a0]}
    return DecompositionResult(clean, haze, mask, compose_haze(clean, haze, mask), final, history, air, config,
                               time.perf_counter() - t0)


def run_cfe_reconstruct(I: np.ndarray, spec: G.GeneratorSpec | None = None,
                        transform: Callable[[torch.Tensor], torch.Tensor] | None = None,
                        opt: OptimizerConfig | None = None, stop: EarlyStopState | None = None,
                        callback: Callable[[int, dict], None] | None = None) -> ReconstructionResult:
    """Fit a generator to ``transform(I)`` and return the early-stopping snapshot.

    With ``stop=None`` no early stopping happens and the final iterate is
    returned.
    """
    I = check_image(I, "input", min_side=G.MIN_SIDE)
    spec = spec or G.denoise_head()
    opt = opt or reconstruct_defaults()
    stage = "cfe_reconstruct"
    It = image_to_tensor(I)
    target = It if transform is None else transform(It)
    th, tw = target.shape[-2:]
    g = G.build_generator(spec, opt.seed)
    z = G.sample_noise_input((th, tw), spec.input_channels, opt.seed + 10, opt.jitter_sigma)
    optim = torch.optim.Adam(g.parameters(), lr=opt.step_size)
    sched = _scheduler(optim, opt)

    history, smoothed, last_finite = [], None, None
    snapshot, snap_iter = None, -1
    stopped_at, fired = opt.iterations - 1, False
    t0 = time.perf_counter()
    for it in range(opt.iterations):
        optim.zero_grad(set_to_none=True)
        out = g(z.jittered())
        loss = L.loss_ir(It, out, transform)
        _finite_or_raise(loss, stage, it, last_finite)
        last_finite = it
        value = loss.item()
        smoothed = _ema(smoothed, value)
        if stop is not None:
            is_best, should_stop = stop.update(it, value)
            if is_best:
                snapshot, snap_iter = out.detach().clone(), it
        if it % opt.log_every == 0 or it == opt.iterations - 1:
            row = {"iteration": it, "total": value, "smoothed": smoothed}
            if stop is not None:
                row["stop_smoothed"] = stop.smoothed
            history.append(row)
            if callback is not None:
                callback(it, {"output": out.detach(), "row": row})
        if stop is not None and should_stop:
            stopped_at, fired = it, True
            break
        loss.backward()
        optim.step()
        sched.step()

    if snapshot is None:
        with torch.no_grad():
            snapshot = g(z.values)
        snap_iter = stopped_at
    config = {"optimizer": opt.to_dict(), "spec": spec.to_dict(),
              "transform": getattr(transform, "__name__", "identity") if transform else "identity",
              "early_stopping": None if stop is None else {k: getattr(stop, k) for k in
                                                          ("window", "patience", "ema_alpha", "min_delta")}}
    best = stop.best_smoothed_loss if stop is not None else smoothed
    return ReconstructionResult(tensor_to_image(snapshot), snap_iter, stopped_at, fired, float(best), history,
                                config, time.perf_counter() - t0)


def run_sfe(Icfe: np.ndarray, S: np.ndarray, ext: FeatureExtractor, beta: Beta = "photo",
            w: L.LossWeights | None = None, opt: OptimizerConfig | None = None,
            parameterization: Literal["pixels", "generator"] = "pixels",
            laplacian: L.MattingLaplacian | None = None) -> StylizationResult:
    """Transfer the style of ``S`` onto ``Icfe`` by minimizing the photo or artistic objective.

    The output starts at ``Icfe`` and is kept in [0, 1] by projection after
    every step.  ``Icfe`` is never modified.
    """
    Icfe = check_image(Icfe, "content", min_side=G.MIN_SIDE)
    S = check_image(S, "style", min_side=G.MIN_SIDE)
    if beta not in ("photo", "artistic"):
        raise ValueError(f"beta must be 'photo' or 'artistic', got {beta!r}")
    w = w or (L.PHOTO_DEFAULTS if beta == "photo" else L.ARTISTIC_DEFAULTS)
    opt = opt or sfe_defaults()
    stage = f"sfe_{beta}"
    Ct, St = image_to_tensor(Icfe), image_to_tensor(S)
    if beta == "photo" and laplacian is None:
        laplacian = L.matting_laplacian(Icfe)

    if parameterization == "pixels":
        x = torch.nn.Parameter(Ct.clone())
        params = [x]

        def current(_jit=True):
            return x
    elif parameterization == "generator":
        spec = G.image_head()
        g = G.build_generator(spec, opt.seed)
        z = G.sample_noise_input(Icfe.shape[:2], spec.input_channels, opt.seed + 10, opt.jitter_sigma)
        params = list(g.parameters())

        def current(jit=True):
            return g(z.jittered() if jit else z.values)
    else:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    optim = torch.optim.Adam(params, lr=opt.step_size)
    sched = _scheduler(optim, opt)

    targets = L.sfe_targets(Ct, St, ext)

    def objective(img, it, parts):
        if beta == "photo":
            return L.loss_pe(img, Ct, St, ext, laplacian, w, parts=parts, targets=targets)
        # fresh REMD sites every step, reproducible from the run seed
        return L.loss_ae(img, Ct, St, ext, w, seed=opt.seed + it, parts=parts, targets=targets)

    history, smoothed, last_finite = [], None, None
    t0 = time.perf_counter()
    for it in range(opt.iterations):
        optim.zero_grad(set_to_none=True)
        parts: dict = {}
        loss = objective(current(), it, parts)
        _finite_or_raise(loss, stage, it, last_finite)
        last_finite = it
        smoothed = _ema(smoothed, loss.item())
        if it % opt.log_every == 0 or it == opt.iterations - 1:
            history.append({"iteration": it, "total": loss.item(), "smoothed": smoothed, **parts})
        loss.backward()
        optim.step()
        sched.step()
        if parameterization == "pixels":
            with torch.no_grad():
                x.clamp_(0.0, 1.0)

    with torch.no_grad():
        out = current(False).clamp(0.0, 1.0)
        parts = {}
        total = objective(out, opt.iterations, parts)
    config = {"beta": beta, "weights": w.to_dict(), "optimizer": opt.to_dict(), "parameterization": parameterization}
    return StylizationResult(tensor_to_image(out), {"total": float(total), **parts}, history, config,
                             time.perf_counter() - t0)


# ---------------------------------------------------------------- end to end


def run_dilie(I: np.ndarray, S: np.ndarray, ext: FeatureExtractor, alpha: Alpha = "decompose",
              beta: Beta = "photo", w_cfe: L.LossWeights | None = None, w_sfe: L.LossWeights | None = None,
              opt_cfe: OptimizerConfig | None = None, opt_sfe: OptimizerConfig | None = None,
              out_dir: str | Path | None = None, run_id: str | None = None,
              decompose_options: DecomposeOptions | None = None, stop: EarlyStopState | None = None,
              extra_config: dict | None = None) -> tuple[np.ndarray, RunManifest]:
    """Content feature enhancement followed by style feature enhancement.

    With ``out_dir`` the run directory receives ``input.png``, ``cfe.png``,
    ``haze.png`` (decomposition only), ``output.png``, ``mask.png`` as an
    auxiliary file, ``losses.csv`` and ``manifest.json``.
    """
    I = check_image(I, "input", min_side=G.MIN_SIDE)
    S = check_image(S, "style", min_side=G.MIN_SIDE)
    if alpha not in ("decompose", "reconstruct"):
        raise ValueError(f"alpha must be 'decompose' or 'reconstruct', got {alpha!r}")
    t0 = time.perf_counter()
    stages, arrays, aux = [], {"input": I}, {}
    if alpha == "decompose":
        res = run_cfe_decompose(I, ext, None, w_cfe, opt_cfe or decompose_defaults(), decompose_options)
        cfe = res.clean
        arrays["cfe"] = cfe
        arrays["haze"] = res.haze * (1.0 - res.mask)
        aux["mask"] = res.mask
        stages.append({"stage": "cfe_decompose", "config": res.config, "final_losses": res.final_losses,
                       "airlight": res.airlight, "losses": res.history, "wall_time": res.wall_time})
    else:
        if stop is None:
            stop = EarlyStopState()
        res = run_cfe_reconstruct(I, None, None, opt_cfe or reconstruct_defaults(), stop)
        cfe = res.image
        arrays["cfe"] = cfe
        stages.append({"stage": "cfe_reconstruct", "config": res.config, "best_iteration": res.best_iteration,
                       "stopped_at": res.stopped_at, "early_stopped": res.early_stopped,
                       "losses": res.history, "wall_time": res.wall_time})
    sfe = run_sfe(cfe, S, ext, beta, w_sfe, opt_sfe or sfe_defaults())
    arrays["output"] = sfe.image
    stages.append({"stage": f"sfe_{beta}", "config": sfe.config, "final_losses": sfe.final_losses,
                   "losses": sfe.history, "wall_time": sfe.wall_time})

    config = {"alpha": alpha, "beta": beta, **(extra_config or {})}
    env = {"dilie": __version__, "torch": torch.__version__, "numpy": np.__version__,
           "python": platform.python_version(), "weights": Path(ext.weights_source).name,
           "weights_pretrained": ext.pretrained}
    manifest = RunManifest(run_id or "run", config, stages, {}, {}, {}, env,
                           time.strftime("%Y-%m-%dT%H:%M:%S%z"), time.perf_counter() - t0)
    if out_dir is not None:
        persist_run(Path(out_dir), manifest, arrays, aux)
    return sfe.image, manifest


def persist_run(out_dir: Path, manifest: RunManifest, images: dict[str, np.ndarray],
                auxiliary: dict[str, np.ndarray] | None = None) -> Path:
    """Write images, ``losses.csv`` and ``manifest.json`` (last, atomically) into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for role, img in images.items():
        save_image(out_dir / f"{role}.png", img)
        manifest.images[role] = f"{role}.png"
    for role, img in (auxiliary or {}).items():
        save_image(out_dir / f"{role}.png", img)
        manifest.auxiliary[role] = f"{role}.png"
    rows = stage_rows(manifest.stages)
    if rows:
        write_rows(out_dir / "losses.csv", rows)
    write_json(out_dir / "manifest.json", manifest.to_dict())
    return out_dir / "manifest.json"


def stage_rows(stages: Sequence[dict]) -> list[dict]:
    return [{"stage": st["stage"], **row} for st in stages for row in st.get("losses", [])]
