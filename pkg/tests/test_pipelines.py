import math

import numpy as np
import pytest

from dilie import losses as L
from dilie import pipelines as P
from dilie.core import RunError, add_noise, compose_haze, image_delta
from dilie.data_io import read_json


def smooth_image(rng, side=32):
    from scipy.ndimage import gaussian_filter
    return np.clip(gaussian_filter(rng.random((side, side, 3)), (3, 3, 0)) * 2 - 0.5, 0, 1)


def quick(iterations, **kw):
    return P.OptimizerConfig(**{"iterations": iterations, "jitter_sigma": 0.0, "log_every": 5, **kw})


# ---------------------------------------------------------------- configs


def test_decompose_weights_follow_feature_source(ext):
    assert not ext.pretrained and P.decompose_weights(ext).lambda_cl == 0.0
    assert P.decompose_weights(None).lambda_cl == 0.0

    class Pretrained:
        pretrained = True
    assert P.decompose_weights(Pretrained()).lambda_cl == 1.0


def test_lr_factor_schedules():
    assert all(P.lr_factor("constant", i, 100) == 1.0 for i in range(100))
    f = [P.lr_factor("warmup_cosine", i, 100) for i in range(100)]
    assert f[0] == pytest.approx(0.1)
    assert max(f) <= 1.0 and f[9] == pytest.approx(0.5 * (1 + math.cos(math.pi * 0.09)))
    assert all(b <= a for a, b in zip(f[9:], f[10:]))  # monotone after warmup
    assert f[-1] < 1e-3
    assert P.sfe_defaults().lr_schedule == "warmup_cosine"
    with pytest.raises(ValueError):
        P.OptimizerConfig(lr_schedule="step")


def test_optimizer_config_validation():
    assert P.OptimizerConfig().jitter_sigma == pytest.approx(1 / 30)
    for bad in ({"step_size": 0}, {"step_size": math.inf}, {"iterations": 0}, {"jitter_sigma": -1},
                {"log_every": 0}):
        with pytest.raises(ValueError):
            P.OptimizerConfig(**bad)
    assert P.decompose_defaults().iterations == 4000
    assert P.reconstruct_defaults().iterations == 3000
    assert P.sfe_defaults().step_size == 0.05 and P.sfe_defaults().iterations == 1000


def test_decompose_options_validation():
    for bad in ({"haze_head": "x"}, {"airlight_init": "x"}, {"mask_step_factor": 0}, {"dark_channel_weight": -1},
                {"dark_channel_patch": 0}, {"dark_channel_omega": 0}):
        with pytest.raises(ValueError):
            P.DecomposeOptions(**bad)


def test_early_stop_state():
    with pytest.raises(ValueError):
        P.EarlyStopState(patience=0)
    s = P.EarlyStopState(window=1, patience=3, ema_alpha=0.5, min_delta=0.0)
    assert s.update(0, 1.0) == (True, False)
    assert s.update(1, 0.5) == (True, False)
    # flat from here: three comparison points without a gain then stop
    outs = [s.update(i, 10.0) for i in range(2, 6)]
    assert [o[1] for o in outs] == [False, False, True, True]
    assert s.best_iteration == 1 and s.fired


def test_early_stop_small_gains_do_not_reset_patience():
    s = P.EarlyStopState(window=1, patience=5, ema_alpha=0.5, min_delta=0.1)
    s.update(0, 1.0)
    v, fired_at = 1.0, None
    for i in range(1, 20):
        v *= 0.999
        if s.update(i, v)[1]:
            fired_at = i
            break
    assert fired_at == 5
    assert s.best_iteration == 5  # tiny gains still move the snapshot


def test_early_stop_steady_progress_keeps_running():
    # 0.2% per check is 2% per patience span, above the 1% margin
    s = P.EarlyStopState(window=1, patience=10, ema_alpha=0.5, min_delta=1e-2)
    v = 1.0
    for i in range(300):
        assert not s.update(i, v)[1]
        v *= 0.998
    with pytest.raises(ValueError):
        P.EarlyStopState(min_delta=1.0)


# ---------------------------------------------------------------- decomposition


def test_dark_channel_transmission_recovers_uniform_haze():
    img = np.zeros((40, 40, 3))
    img[..., 0] = np.linspace(0, 1, 40)[None]
    img[::2, ::2, 1] = 0.8
    hazy = compose_haze(img, 0.85, 0.6)
    t = P.dark_channel_transmission(hazy, np.full(3, 0.85), patch=5, omega=1.0)
    assert t.shape == (40, 40, 1)
    assert np.abs(t - 0.6).max() < 1e-9


def test_bright_airlight():
    img = np.full((20, 20, 3), 0.2)
    img[3, 4] = [0.9, 0.8, 0.95]
    assert np.allclose(P.bright_airlight(img), [0.9, 0.8, 0.95])


def test_decompose_structure_and_consistency(rng):
    I = compose_haze(smooth_image(rng), 0.85, 0.6)
    records = []

    def cb(it, rec):
        recomputed = L.loss_id(rec["I"], rec["clean"], rec["haze"], rec["mask"]).item()
        records.append((it, recomputed, rec["row"]["id"]))

    res = P.run_cfe_decompose(I, None, None, L.LossWeights(lambda_cl=0), quick(20), callback=cb)
    assert res.clean.shape == (32, 32, 3) and res.mask.shape == (32, 32, 1) and res.haze.shape == (32, 32, 3)
    assert np.array_equal(res.recomposed, compose_haze(res.clean, res.haze, res.mask))
    assert math.isfinite(res.final_losses["id"]) and "dc" in res.final_losses
    assert [r[0] for r in records] == [0, 5, 10, 15, 19]
    for _, a, b in records:
        assert abs(a - b) <= 1e-6
    assert len(res.airlight) == 3


def test_decompose_with_contextual_term_and_generator_haze(ext, rng):
    I = compose_haze(smooth_image(rng), 0.85, 0.6)
    res = P.run_cfe_decompose(I, ext, None, L.LossWeights(lambda_cl=1), quick(6),
                              P.DecomposeOptions(haze_head="generator", dark_channel_weight=0))
    assert "cl" in res.final_losses and "dc" not in res.final_losses
    assert res.airlight is None
    assert all("cl" in row for row in res.history)
    with pytest.raises(ValueError):
        P.run_cfe_decompose(I, None, None, L.LossWeights(lambda_cl=1), quick(2))


def test_decompose_deterministic(rng):
    I = compose_haze(smooth_image(rng), 0.85, 0.6)
    a = P.run_cfe_decompose(I, None, None, L.LossWeights(lambda_cl=0), quick(8, seed=3))
    b = P.run_cfe_decompose(I, None, None, L.LossWeights(lambda_cl=0), quick(8, seed=3))
    assert np.array_equal(a.clean, b.clean) and np.array_equal(a.mask, b.mask)
    assert a.history == b.history


def test_decompose_nan_is_a_run_error(rng, monkeypatch):
    I = compose_haze(smooth_image(rng), 0.85, 0.6)
    real, calls = L.loss_id, {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        out = real(*args)
        return out * float("nan") if calls["n"] > 4 else out

    monkeypatch.setattr(L, "loss_id", flaky)
    with pytest.raises(RunError) as err:
        P.run_cfe_decompose(I, None, None, L.LossWeights(lambda_cl=0), quick(10))
    assert err.value.stage == "cfe_decompose" and err.value.last_finite_iteration == 3


# ---------------------------------------------------------------- reconstruction


def test_reconstruct_clean_fit(rng):
    # 64 px so the five-level hourglass keeps a 2x2 bottleneck
    I = smooth_image(rng, 64)
    res = P.run_cfe_reconstruct(I, None, None, quick(500, log_every=50), None)
    assert image_delta(res.image, I) <= 0.02
    assert not res.early_stopped and res.stopped_at == 499


def test_reconstruct_snapshot_is_best_smoothed(rng):
    I = add_noise(smooth_image(rng), 0.25, 1)
    stop = P.EarlyStopState(window=5, patience=20)
    seen = []
    res = P.run_cfe_reconstruct(I, None, None, quick(400, log_every=5),
                                stop, callback=lambda it, rec: seen.append((it, rec["row"]["stop_smoothed"],
                                                                            rec["output"].clone())))
    best = min(s for _, s, _ in seen)
    assert res.best_smoothed_loss == pytest.approx(best, rel=1e-12)
    snap = next(o for it, _, o in seen if it == res.best_iteration)
    assert image_delta(res.image, snap[0].permute(1, 2, 0).numpy().astype(np.float64)) < 1e-6
    if res.early_stopped:
        assert res.stopped_at < 399


def test_reconstruct_with_downsampling_transform(rng):
    # the generator is fitted to T(I), so its output has T(I)'s size
    I = smooth_image(rng, 128)
    res = P.run_cfe_reconstruct(I, None, L.downsample(2), quick(3), None)
    assert res.image.shape == (64, 64, 3)
    assert res.config["transform"] == "downsample_x2"


# ---------------------------------------------------------------- stylization


def test_sfe_self_style_artistic(ext, rng):
    C = smooth_image(rng)
    before = C.copy()
    res = P.run_sfe(C, C, ext, "artistic", None, P.sfe_defaults(iterations=100))
    assert image_delta(res.image, C) <= 0.05
    assert np.array_equal(C, before)


def test_sfe_photo_affine_only_is_fixed_point(ext, rng):
    C = smooth_image(rng)
    S = rng.random((32, 32, 3))
    res = P.run_sfe(C, S, ext, "photo", L.LossWeights(mu=0, kappa=0), P.sfe_defaults(iterations=100))
    assert image_delta(res.image, C) <= 0.01


def test_sfe_artistic_shifts_hue(ext):
    gray = np.full((32, 32, 3), 0.5) + np.linspace(-0.1, 0.1, 32)[None, :, None]
    red = np.zeros((32, 32, 3))
    red[..., 0] = 0.9
    red[::4, :, 1] = 0.1
    res = P.run_sfe(gray, red, ext, "artistic", None, P.sfe_defaults(iterations=150))
    dominance = lambda x: x[..., 0].mean() - x[..., 1:].mean()  # noqa: E731
    assert dominance(res.image) > dominance(gray)
    assert res.image.min() >= 0 and res.image.max() <= 1


def test_sfe_generator_parameterization(ext, rng):
    C = smooth_image(rng)
    res = P.run_sfe(C, C, ext, "artistic", None, P.sfe_defaults(iterations=3, step_size=0.01, jitter_sigma=0),
                    parameterization="generator")
    assert res.image.shape == C.shape
    with pytest.raises(ValueError):
        P.run_sfe(C, C, ext, "cubist")


# ---------------------------------------------------------------- end to end


def test_run_dilie_structure(ext, rng, tmp_path):
    I = compose_haze(smooth_image(rng), 0.85, 0.6)
    S = rng.random((32, 32, 3))
    out, man = P.run_dilie(I, S, ext, "decompose", "photo", L.LossWeights(lambda_cl=0), None, quick(5),
                           quick(5, step_size=0.05), out_dir=tmp_path / "r", run_id="r")
    assert [s["stage"] for s in man.stages] == ["cfe_decompose", "sfe_photo"]
    assert sorted(man.images) == ["cfe", "haze", "input", "output"]
    assert man.auxiliary == {"mask": "mask.png"}
    for name in ("manifest.json", "input.png", "cfe.png", "haze.png", "output.png", "mask.png", "losses.csv"):
        assert (tmp_path / "r" / name).exists(), name
    data = read_json(tmp_path / "r" / "manifest.json")
    assert data["run_id"] == "r" and data["environment"]["weights_pretrained"] is False
    assert out.shape == I.shape


def test_run_dilie_reconstruct_and_determinism(ext, rng, tmp_path):
    I = add_noise(smooth_image(rng), 0.1, 0)
    S = rng.random((32, 32, 3))
    runs = [P.run_dilie(I, S, ext, "reconstruct", "artistic", None, None, quick(5, seed=7), quick(5, step_size=0.05))
            for _ in range(2)]
    assert np.array_equal(runs[0][0], runs[1][0])
    assert [s["stage"] for s in runs[0][1].stages] == ["cfe_reconstruct", "sfe_artistic"]
    with pytest.raises(ValueError):
        P.run_dilie(I, S, ext, "inpaint")


@pytest.mark.slow
def test_cfe_benefit_on_noise(ext, weights_path):
    from dilie.experiments import standard_image
    from dilie.metrics import FeatureDistance, perceptual_error
    C = standard_image("astronaut", 64)
    I = add_noise(C, 0.25, 0)
    S = standard_image("coffee", 64)
    opt_sfe = P.sfe_defaults(iterations=200)
    istar, _ = P.run_dilie(I, S, ext, "reconstruct", "artistic", opt_cfe=P.reconstruct_defaults(iterations=1500),
                           opt_sfe=opt_sfe)
    raw = P.run_sfe(I, S, ext, "artistic", None, opt_sfe).image
    fd = FeatureDistance(ext)
    assert perceptual_error(C, istar, fd) < perceptual_error(C, raw, fd)
