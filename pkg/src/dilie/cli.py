"""Command-line entry point: ``dilie <command> [options]``.

Exit codes: 0 success, 2 invalid arguments or inputs, 1 runtime failure.
Options may also come from a YAML file given with ``--config``; keys are the
option names with dashes replaced by underscores.  Explicit flags win over
the file, which wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import experiments as X
from . import losses as L
from . import metrics as M
from . import pipelines as P
from .core import CorruptionSpec, DatasetError, DilieError, DimensionError, IntegrityError, LoadError, RunError
from .data_io import load_image, match_by_stem, read_json, save_image, scan_paired, write_json, write_rows
from .features import convert_torchvision, default_weights_path, init_random_weights, load_extractor
from .generators import denoise_head
from .plotting import image_grid, loss_curves

DEFAULT_RESIZE = {"dehaze": 512, "denoise": 512, "enhance": 512, "stylize": 768}
PUBLISHED_SSIM = "published reference values, never asserted here: I-Haze SSIM 0.790, O-Haze SSIM 0.705"


class UsageError(DilieError, ValueError):
    """Invalid command-line configuration (exit code 2)."""


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML file with option defaults")
    p.add_argument("--out", default="runs", help="output root; every run gets its own directory below it")
    p.add_argument("--run-id", help="run directory name; None means <input stem>_s<seed>")
    p.add_argument("--seed", type=int, default=0, help="seed for generators, noise inputs and sampling")
    p.add_argument("--weights", help="VGG19 weights file; overrides $DILIE_WEIGHTS")
    p.add_argument("--threads", type=int, default=0, help="torch intra-op threads (0 keeps the torch default)")


def _add_decompose(p: argparse.ArgumentParser, iterations=True):
    if iterations:
        p.add_argument("--iterations", type=int, default=P.DECOMPOSE_ITERATIONS)
    p.add_argument("--step-size", type=float, default=P.GENERATOR_STEP)
    p.add_argument("--jitter", type=float, default=P.JITTER_SIGMA, help="std of the per-step noise-input jitter")
    p.add_argument("--lambda-cl", type=float, default=None,
                   help="contextual loss weight; None means 1 with pretrained weights and 0 with random ones")
    p.add_argument("--cx-bandwidth", type=float, default=L.LossWeights.cx_bandwidth)
    p.add_argument("--haze-head", choices=["uniform", "generator"], default=P.DecomposeOptions.haze_head)
    p.add_argument("--airlight-init", choices=["bright", "half"], default=P.DecomposeOptions.airlight_init)
    p.add_argument("--dark-channel-weight", type=float, default=P.DecomposeOptions.dark_channel_weight)
    p.add_argument("--log-every", type=int, default=25)


def _add_sfe(p: argparse.ArgumentParser, prefix=""):
    p.add_argument(f"--{prefix}iterations" if prefix else "--iterations", dest=f"{prefix.replace('-', '_')}iterations",
                   type=int, default=P.SFE_ITERATIONS)
    p.add_argument(f"--{prefix}step-size" if prefix else "--step-size", dest=f"{prefix.replace('-', '_')}step_size",
                   type=float, default=P.PIXEL_STEP)
    p.add_argument(f"--{prefix}lr-schedule", dest=f"{prefix.replace('-', '_')}lr_schedule",
                   choices=["constant", "warmup_cosine"], default="warmup_cosine",
                   help="step-size schedule; the peak step is the step size")
    p.add_argument("--mu", type=float, default=None, help="content weight (default 1)")
    p.add_argument("--kappa", type=float, default=None, help="style weight (default 1000 photo, 1 artistic)")
    p.add_argument("--remd-sites", type=int, default=L.LossWeights.remd_sites)
    p.add_argument("--parameterization", choices=["pixels", "generator"], default="pixels")
    if not prefix:
        p.add_argument("--jitter", type=float, default=P.JITTER_SIGMA,
                       help="noise-input jitter (generator parameterization only)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="dilie", description="Per-image content and style feature enhancement.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dehaze", help="split a hazy image into clean, haze and transmission layers", formatter_class=fmt)
    p.add_argument("--input", required=True)
    p.add_argument("--resize-max-side", type=int, default=DEFAULT_RESIZE["dehaze"])
    _add_common(p)
    _add_decompose(p)

    p = sub.add_parser("denoise", help="reconstruct a noisy image with early stopping", formatter_class=fmt)
    p.add_argument("--input", required=True)
    p.add_argument("--resize-max-side", type=int, default=DEFAULT_RESIZE["denoise"])
    p.add_argument("--iterations", type=int, default=P.RECONSTRUCT_ITERATIONS)
    p.add_argument("--step-size", type=float, default=P.GENERATOR_STEP)
    p.add_argument("--jitter", type=float, default=P.JITTER_SIGMA, help="std of the per-step noise-input jitter")
    p.add_argument("--patience", type=int, default=200)
    p.add_argument("--ema-alpha", type=float, default=P.EMA_ALPHA)
    p.add_argument("--window", type=int, default=25, help="iterations between early-stopping checks")
    p.add_argument("--min-delta", type=float, default=P.EarlyStopState.min_delta,
                   help="relative drop of the best smoothed loss over one patience span that counts as progress")
    p.add_argument("--log-every", type=int, default=25)
    _add_common(p)

    p = sub.add_parser("stylize", help="style feature enhancement of an image", formatter_class=fmt)
    p.add_argument("--input", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--beta", choices=["photo", "artistic"], default="photo")
    p.add_argument("--resize-max-side", type=int, default=DEFAULT_RESIZE["stylize"])
    p.add_argument("--log-every", type=int, default=25)
    _add_common(p)
    _add_sfe(p)

    p = sub.add_parser("enhance", help="content enhancement followed by style enhancement", formatter_class=fmt)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input")
    src.add_argument("--dataset", help="paired dataset root; every degraded image is enhanced")
    p.add_argument("--convention", choices=["ihaze", "ohaze", "generic_suffix"], default="generic_suffix")
    p.add_argument("--style")
    p.add_argument("--alpha", choices=["decompose", "reconstruct"], default="decompose")
    p.add_argument("--beta", choices=["photo", "artistic"], default="photo")
    p.add_argument("--resize-max-side", type=int, default=DEFAULT_RESIZE["enhance"])
    p.add_argument("--cfe-iterations", type=int, default=None,
                   help=f"default {P.DECOMPOSE_ITERATIONS} (decompose) or {P.RECONSTRUCT_ITERATIONS} (reconstruct)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs for --dataset")
    _add_common(p)
    _add_decompose(p, iterations=False)
    _add_sfe(p, prefix="sfe-")

    p = sub.add_parser("eval", help="SSIM, PSNR and perceptual error against references", formatter_class=fmt)
    p.add_argument("--outputs", help="directory of output images, matched to --references by file stem")
    p.add_argument("--references")
    p.add_argument("--runs", help="directory of run directories produced by `enhance --dataset`")
    p.add_argument("--dataset", help="paired dataset root used to find references for --runs")
    p.add_argument("--convention", choices=["ihaze", "ohaze", "generic_suffix"], default="generic_suffix")
    p.add_argument("--backend", choices=["feature_distance", "external", "none"], default="feature_distance")
    p.add_argument("--scores", help="CSV of precomputed scores (path_a,path_b,score) for --backend external")
    p.add_argument("--csv", default="eval.csv", help="where to write the per-image table")
    p.add_argument("--figure", help="also render an output/reference grid to this PNG")
    p.add_argument("--weights", help="VGG19 weights file; overrides $DILIE_WEIGHTS")
    p.add_argument("--config", help="YAML file with option defaults")

    p = sub.add_parser("synth", help="write a synthetically corrupted image and its ground-truth sidecar",
                       formatter_class=fmt)
    p.add_argument("kind", choices=["haze", "noise"])
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="corrupted PNG; the sidecar is <output>.json")
    p.add_argument("--airlight", type=float, default=0.85)
    p.add_argument("--transmission", type=float, default=0.6)
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resize-max-side", type=int, default=None)
    p.add_argument("--config", help="YAML file with option defaults")

    p = sub.add_parser("weights", help="create or convert VGG19 weight files", formatter_class=fmt)
    wsub = p.add_subparsers(dest="weights_command", required=True)
    q = wsub.add_parser("init", help="seeded random (untrained) weights for offline use", formatter_class=fmt)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=0)
    q = wsub.add_parser("convert", help="convert a torchvision vgg19 state dict", formatter_class=fmt)
    q.add_argument("--torchvision", required=True, help="path to e.g. vgg19-dcbb9e9d.pth")
    q.add_argument("--out", required=True)

    p = sub.add_parser("study", help="scripted studies on the bundled standard images", formatter_class=fmt)
    p.add_argument("name", choices=["ablation", "haze-corruption"])
    p.add_argument("--out", default="reports")
    p.add_argument("--size", type=int, default=128, help="side of the centre crops")
    p.add_argument("--images", nargs="+", default=list(X.STANDARD_IMAGES))
    p.add_argument("--style-image", default="rocket", help="bundled picture used as style")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--iterations", type=int, default=P.DECOMPOSE_ITERATIONS)
    p.add_argument("--sfe-iterations", type=int, default=P.SFE_ITERATIONS)
    p.add_argument("--beta", choices=["photo", "artistic"], default="photo")
    p.add_argument("--weights", help="VGG19 weights file; overrides $DILIE_WEIGHTS")
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--config", help="YAML file with option defaults")
    _fill_help(parser)
    return parser


def _fill_help(parser: argparse.ArgumentParser):
    # the defaults formatter only annotates options that carry help text
    for action in parser._actions:  # noqa: SLF001
        if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
            for sub in action.choices.values():
                _fill_help(sub)
        elif action.help is None and action.option_strings and action.default is not argparse.SUPPRESS:
            action.help = "(default: %(default)s)"


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # noqa: SLF001
        if command in action.choices:
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"--config: file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise UsageError(f"--config: expected a mapping of option names, got {type(data).__name__}")
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}  # noqa: SLF001
        unknown = sorted(set(data) - known - {"config"})
        if unknown:
            raise UsageError(f"--config: unknown keys {unknown}")
        # file values become defaults, so explicit flags parsed again still win
        sub.set_defaults(**{k: v for k, v in data.items() if k != "config"})
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------- helpers


def _need_file(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return Path(path)


def _weights_path(args) -> Path:
    # an explicit flag wins; the environment overrides config-file and built-in values
    cli_flag = getattr(args, "_explicit_weights", None)
    path = cli_flag or default_weights_path() or (Path(args.weights) if args.weights else None)
    if path is None:
        raise UsageError("no VGG19 weights: pass --weights or set DILIE_WEIGHTS "
                         "(create a file with `dilie weights init --out vgg19.safetensors`)")
    return Path(path)


def _extractor(args):
    return load_extractor(_weights_path(args))


def _threads(args):
    import torch
    if getattr(args, "threads", 0):
        torch.set_num_threads(args.threads)


def _run_dir(args, stem: str) -> Path:
    return Path(args.out) / (args.run_id or f"{stem}_s{args.seed}")


def _effective(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if not k.startswith("_")}


def _decompose_cfg(args, iterations: int, ext=None):
    lam = P.decompose_weights(ext).lambda_cl if args.lambda_cl is None else args.lambda_cl
    w = L.LossWeights(lambda_cl=lam, cx_bandwidth=args.cx_bandwidth)
    opt = P.OptimizerConfig(step_size=args.step_size, iterations=iterations, seed=args.seed,
                            jitter_sigma=args.jitter, log_every=args.log_every)
    options = P.DecomposeOptions(haze_head=args.haze_head, airlight_init=args.airlight_init,
                                 dark_channel_weight=args.dark_channel_weight)
    return w, opt, options


def _sfe_weights(args, beta):
    base = L.PHOTO_DEFAULTS if beta == "photo" else L.ARTISTIC_DEFAULTS
    return L.LossWeights(mu=base.mu if args.mu is None else args.mu,
                         kappa=base.kappa if args.kappa is None else args.kappa, remd_sites=args.remd_sites)


def _finish(run_dir: Path, manifest: P.RunManifest):
    curves = {st["stage"]: st["losses"] for st in manifest.stages if st.get("losses")}
    if curves:
        loss_curves(run_dir / "losses.png", curves)
    print(f"wrote {run_dir / 'manifest.json'}")


# ---------------------------------------------------------------- commands


def cmd_dehaze(args) -> int:
    src = _need_file(args.input, "--input")
    ext = _extractor(args) if args.lambda_cl is None or args.lambda_cl > 0 else None
    w, opt, options = _decompose_cfg(args, args.iterations, ext)
    img = load_image(src, args.resize_max_side)
    res = P.run_cfe_decompose(img, ext, None, w, opt, options)
    run_dir = _run_dir(args, src.stem)
    manifest = P.RunManifest(run_dir.name, _effective(args), [
        {"stage": "cfe_decompose", "config": res.config, "final_losses": res.final_losses, "airlight": res.airlight,
         "losses": res.history, "wall_time": res.wall_time}], {}, wall_time=res.wall_time)
    P.persist_run(run_dir, manifest, {"input": img, "cfe": res.clean, "haze": res.haze * (1 - res.mask)},
                  {"mask": res.mask})
    _finish(run_dir, manifest)
    return 0


def cmd_denoise(args) -> int:
    src = _need_file(args.input, "--input")
    opt = P.OptimizerConfig(step_size=args.step_size, iterations=args.iterations, seed=args.seed,
                            jitter_sigma=args.jitter, log_every=args.log_every)
    stop = P.EarlyStopState(window=args.window, patience=args.patience, ema_alpha=args.ema_alpha,
                            min_delta=args.min_delta)
    img = load_image(src, args.resize_max_side)
    res = P.run_cfe_reconstruct(img, denoise_head(), None, opt, stop)
    run_dir = _run_dir(args, src.stem)
    manifest = P.RunManifest(run_dir.name, _effective(args), [
        {"stage": "cfe_reconstruct", "config": res.config, "best_iteration": res.best_iteration,
         "stopped_at": res.stopped_at, "early_stopped": res.early_stopped, "losses": res.history,
         "wall_time": res.wall_time}], {}, wall_time=res.wall_time)
    P.persist_run(run_dir, manifest, {"input": img, "cfe": res.image})
    _finish(run_dir, manifest)
    print(f"early stop: {res.early_stopped} (snapshot from iteration {res.best_iteration})")
    return 0


def cmd_stylize(args) -> int:
    src = _need_file(args.input, "--input")
    style = _need_file(args.style, "--style")
    w = _sfe_weights(args, args.beta)
    opt = P.OptimizerConfig(step_size=args.step_size, iterations=args.iterations, seed=args.seed,
                            jitter_sigma=args.jitter, log_every=args.log_every, lr_schedule=args.lr_schedule)
    img, sty = load_image(src, args.resize_max_side), load_image(style, args.resize_max_side)
    ext = _extractor(args)
    res = P.run_sfe(img, sty, ext, args.beta, w, opt, args.parameterization)
    run_dir = _run_dir(args, src.stem)
    manifest = P.RunManifest(run_dir.name, _effective(args), [
        {"stage": f"sfe_{args.beta}", "config": res.config, "final_losses": res.final_losses,
         "losses": res.history, "wall_time": res.wall_time}], {}, wall_time=res.wall_time)
    P.persist_run(run_dir, manifest, {"input": img, "style": sty, "output": res.image})
    _finish(run_dir, manifest)
    return 0


def _enhance_one(args, ext, src: Path, style: np.ndarray, run_dir: Path) -> Path:
    img = load_image(src, args.resize_max_side)
    iters = args.cfe_iterations or (P.DECOMPOSE_ITERATIONS if args.alpha == "decompose" else P.RECONSTRUCT_ITERATIONS)
    w_cfe, opt_cfe, options = _decompose_cfg(args, iters, ext)
    opt_sfe = P.OptimizerConfig(step_size=args.sfe_step_size, iterations=args.sfe_iterations, seed=args.seed,
                                jitter_sigma=args.jitter, log_every=args.log_every,
                                lr_schedule=args.sfe_lr_schedule)
    config = {**_effective(args), "input": str(src)}
    _, manifest = P.run_dilie(img, style, ext, args.alpha, args.beta, w_cfe, _sfe_weights(args, args.beta),
                              opt_cfe, opt_sfe, run_dir, run_dir.name, options, extra_config=config)
    _finish(run_dir, manifest)
    return run_dir


def cmd_enhance(args) -> int:
    if not args.input and not args.dataset:
        raise UsageError("one of --input or --dataset is required")
    style_path = _need_file(args.style, "--style")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if args.input:
        jobs = [_need_file(args.input, "--input")]
    else:
        ds = scan_paired(args.dataset, args.convention, args.resize_max_side)
        for p in ds.unpaired:
            print(f"warning: unpaired file skipped: {p}", file=sys.stderr)
        jobs = [hazy for hazy, _ in ds.pairs]
    style = load_image(style_path, args.resize_max_side)
    ext = _extractor(args)
    if args.input:
        _enhance_one(args, ext, jobs[0], style, _run_dir(args, jobs[0].stem))
        return 0
    # one private generator set per run; the extractor is shared read-only
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = [pool.submit(_enhance_one, args, ext, src, style, Path(args.out) / f"{src.stem}_s{args.seed}")
                   for src in jobs]
        for f in futures:
            f.result()
    return 0


def _eval_pairs(args) -> list[tuple[Path, Path]]:
    if args.outputs or args.references:
        if not (args.outputs and args.references):
            raise UsageError("--outputs and --references go together")
        pairs, unmatched = match_by_stem(args.outputs, args.references)
        if unmatched:
            raise UsageError(f"unpaired files: {', '.join(str(p) for p in unmatched)}")
        return pairs
    if not (args.runs and args.dataset):
        raise UsageError("give --outputs/--references or --runs/--dataset")
    ds = scan_paired(args.dataset, args.convention)
    ref_for = {Path(h).resolve(): g for h, g in ds.pairs}
    pairs = []
    for manifest_path in sorted(Path(args.runs).glob("*/manifest.json"), key=lambda p: p.as_posix().encode()):
        man = read_json(manifest_path)
        src = Path(man.get("config", {}).get("input", "")).resolve()
        if src not in ref_for:
            raise UsageError(f"{manifest_path}: input {src} has no reference in {args.dataset}")
        pairs.append((manifest_path.parent / man["images"]["output"], ref_for[src]))
    if not pairs:
        raise UsageError(f"no run manifests under {args.runs}")
    return pairs


def cmd_eval(args) -> int:
    pairs = _eval_pairs(args)
    backend = None
    if args.backend == "feature_distance":
        backend = M.FeatureDistance(_extractor(args))
    elif args.backend == "external":
        backend = M.ExternalScores.load(_need_file(args.scores, "--scores"))
        backend.require(pairs)
    rows, grid = [], []
    for out_path, ref_path in pairs:
        out = load_image(out_path)
        ref = load_image(ref_path, max(out.shape[:2]))
        if ref.shape != out.shape:
            raise UsageError(f"{out_path} is {out.shape[:2]}, reference {ref_path} is {ref.shape[:2]}")
        row = {"output": out_path.as_posix(), "reference": ref_path.as_posix(),
               "ssim": M.ssim(out, ref), "psnr": M.psnr(out, ref)}
        if backend is not None:
            key = (out_path, ref_path) if args.backend == "external" else (out, ref)
            row["perceptual_error"] = M.perceptual_error(key[0], key[1], backend)
        rows.append(row)
        grid.append([out, ref])
    mean = {"output": "mean", "reference": ""}
    for k in ("ssim", "psnr", "perceptual_error"):
        if k in rows[0]:
            mean[k] = float(np.mean([r[k] for r in rows]))
    write_rows(args.csv, rows + [mean])
    _print_table(rows + [mean])
    print(PUBLISHED_SSIM)
    if args.figure:
        image_grid(args.figure, grid, ["output", "reference"], [Path(o).stem for o, _ in pairs])
    return 0


def _print_table(rows):
    cols = [c for c in ("output", "ssim", "psnr", "perceptual_error") if c in rows[0]]
    print("  ".join(f"{c:>16}" for c in cols))
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{v:16.4f}" if isinstance(v, float) else f"{Path(str(v)).name[-16:]:>16}")
        print("  ".join(cells))


def cmd_synth(args) -> int:
    src = _need_file(args.input, "--input")
    if args.kind == "haze":
        spec = CorruptionSpec("haze", airlight=args.airlight, transmission=args.transmission)
    else:
        spec = CorruptionSpec("gaussian_noise", sigma=args.sigma, seed=args.seed)
    clean = load_image(src, args.resize_max_side)
    out = spec.apply(clean)
    path = save_image(args.output, out)
    meta = {**spec.to_dict(), "source": str(src), "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
    write_json(str(path) + ".json", meta)
    print(f"wrote {path}")
    return 0


def cmd_weights(args) -> int:
    if args.weights_command == "init":
        path = init_random_weights(args.out, args.seed)
        print(f"wrote {path} (random, untrained; seed {args.seed})")
    else:
        path = convert_torchvision(_need_file(args.torchvision, "--torchvision"), args.out)
        print(f"wrote {path}")
    return 0


def cmd_study(args) -> int:
    ext = _extractor(args)
    out = Path(args.out)
    opt = P.decompose_defaults(iterations=args.iterations)
    if args.name == "ablation":
        pairs = X.synthetic_haze_pairs(args.images, args.size)
        report = X.run_ablation_contextual(pairs, ext, args.seeds, out / "ablation", opt)
        print(f"lambda_cl=1 wins on {report['wins']} of {report['pairs']} pairs; "
              f"mean dSSIM {report['mean_delta_ssim']:+.4f}")
        X.write_report(out / "ablation", report)
    else:
        pair = X.synthetic_haze_pairs(args.images[:1], args.size)[0]
        style = X.standard_image(args.style_image, args.size)
        opt_sfe = P.sfe_defaults(iterations=args.sfe_iterations, seed=args.seeds[0])
        opt = P.decompose_defaults(iterations=args.iterations, seed=args.seeds[0])
        methods = {"dilie": X.dilie_method(ext, args.beta, opt, opt_sfe),
                   "sfe_only": X.sfe_method(ext, args.beta, opt_sfe)}
        report = X.run_haze_corruption_study(pair.clean, pair.degraded, style, methods, M.FeatureDistance(ext),
                                             out / "haze_corruption")
        for name, h in report["H"].items():
            print(f"{name:>10}  H = {h:.4f}")
        X.write_report(out / "haze_corruption", report)
    return 0


COMMANDS = {"dehaze": cmd_dehaze, "denoise": cmd_denoise, "stylize": cmd_stylize, "enhance": cmd_enhance,
            "eval": cmd_eval, "synth": cmd_synth, "weights": cmd_weights, "study": cmd_study}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    args._explicit_weights = _explicit(argv, "--weights")
    try:
        _threads(args)
        return COMMANDS[args.command](args)
    except (UsageError, DimensionError, LoadError, DatasetError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RunError, IntegrityError) as exc:
        stage = getattr(exc, "stage", None)
        print(f"error{f' in stage {stage}' if stage else ''}: {exc}", file=sys.stderr)
        return 1


def _explicit(argv, flag):
    for i, a in enumerate(argv):
        if a == flag and i + 1 < len(argv):
            return Path(argv[i + 1])
        if a.startswith(flag + "="):
            return Path(a.split("=", 1)[1])
    return None


if __name__ == "__main__":
    sys.exit(main())
