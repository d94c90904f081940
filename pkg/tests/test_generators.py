import pytest
import torch

from dilie.core import DimensionError
from dilie.generators import (GeneratorSpec, build_generator, denoise_head, expected_parameter_count, forward,
                              image_head, load_generator, mask_head, mean_abs_laplacian, sample_noise_input,
                              save_generator)
from oracles import hourglass_param_count

# frozen from the layer-by-layer enumeration oracle for the default channel list
DEFAULT_IMAGE_PARAMS = 1037403
DEFAULT_MASK_PARAMS = 1037369
DEFAULT_NOSKIP_PARAMS = 1027379
ALL_LEVEL_SKIP_PARAMS = 1041815


def test_seeded_build_is_deterministic():
    a = build_generator(GeneratorSpec(), 1).parameter_vector()
    b = build_generator(GeneratorSpec(), 1).parameter_vector()
    assert torch.equal(a, b)
    c = build_generator(GeneratorSpec(), 2).parameter_vector()
    assert not torch.equal(a, c)


@pytest.mark.parametrize("spec,frozen", [(image_head(), DEFAULT_IMAGE_PARAMS), (mask_head(), DEFAULT_MASK_PARAMS),
                                         (denoise_head(), DEFAULT_NOSKIP_PARAMS),
                                         (image_head(skip_channels=4), ALL_LEVEL_SKIP_PARAMS)])
def test_parameter_count_oracle(spec, frozen):
    g = build_generator(spec, 0)
    skips = [0] * spec.depth if not spec.skip_connections else (
        [spec.skip_channels] * spec.depth if isinstance(spec.skip_channels, int) else list(spec.skip_channels))
    oracle = hourglass_param_count(spec.depth, spec.channels, skips, spec.input_channels, spec.output_channels)
    assert g.parameter_count == oracle == expected_parameter_count(spec) == frozen


def test_skip_toggle_changes_count_by_skip_branches():
    s = GeneratorSpec()
    with_skip = build_generator(s, 0).parameter_count
    without = build_generator(GeneratorSpec(skip_connections=False), 0).parameter_count
    # per level: 1x1 conv (c_in*s + s), its norm (2s), and s extra channels into the up block (norm 2s, conv 9*s*c_i)
    branch = 0
    for i, k in enumerate((0, 0, 0, 4, 4)):
        cin = s.input_channels if i == 0 else s.channels[i - 1]
        branch += cin * k + k + 2 * k + 2 * k + 9 * k * s.channels[i]
    assert with_skip - without == branch


@pytest.mark.parametrize("kw", [dict(depth=3), dict(depth=1, channels=(8,)), dict(output_channels=2),
                                dict(channels=(0, 8, 8, 8, 8)), dict(output_activation="tanh"),
                                dict(skip_channels=(4, 4)), dict(skip_channels=(0, 0, 0, 0, 0))])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        build_generator(GeneratorSpec(**kw), 0)


def test_noise_input_range_and_reproducibility():
    z = sample_noise_input((256, 256), 32, 3)
    assert z.values.min() >= 0 and z.values.max() <= 0.1
    assert torch.equal(z.values, sample_noise_input((256, 256), 32, 3).values)
    other = sample_noise_input((256, 256), 32, 4).values
    assert (z.values != other).float().mean() > 0.99


def test_noise_input_undersized():
    with pytest.raises(ValueError):
        sample_noise_input((16, 64), 32, 0)


def test_jitter_is_seeded():
    a = sample_noise_input((32, 32), 4, 1, jitter_sigma=0.1)
    b = sample_noise_input((32, 32), 4, 1, jitter_sigma=0.1)
    assert torch.equal(a.jittered(), b.jittered())
    assert not torch.equal(a.jittered(), a.values)
    assert torch.equal(sample_noise_input((32, 32), 4, 1).jittered(), a.values)


@pytest.mark.parametrize("shape", [(32, 32), (48, 40), (37, 45)])
def test_forward_shape_and_range(shape):
    for spec in (image_head(), mask_head(), denoise_head()):
        g = build_generator(spec, 0)
        z = sample_noise_input(shape, spec.input_channels, 1)
        out = forward(g, z)
        assert tuple(out.shape) == shape + (spec.output_channels,)
        assert (out > 0).all() and (out < 1).all()
        assert torch.equal(out, forward(g, z))


def test_channel_mismatch():
    g = build_generator(image_head(), 0)
    with pytest.raises(DimensionError):
        forward(g, sample_noise_input((32, 32), 8, 0))


def test_parameter_gradient_finite_differences():
    g = build_generator(GeneratorSpec(channels=(4, 4, 4), depth=3, input_channels=4, skip_channels=2), 0).double()
    z = sample_noise_input((32, 32), 4, 0, dtype=torch.float64)
    params = [p for p in g.parameters()]
    loss = forward(g, z).mean()
    loss.backward()
    gen = torch.Generator().manual_seed(0)
    h = 1e-5
    checked = 0
    while checked < 10:
        p = params[int(torch.randint(len(params), (1,), generator=gen))]
        i = int(torch.randint(p.numel(), (1,), generator=gen))
        with torch.no_grad():
            old = p.view(-1)[i].item()
            p.view(-1)[i] = old + h
            fp = forward(g, z).mean().item()
            p.view(-1)[i] = old - h
            fm = forward(g, z).mean().item()
            p.view(-1)[i] = old
        num, ana = (fp - fm) / (2 * h), p.grad.view(-1)[i].item()
        if abs(ana) < 1e-8:
            continue
        assert abs(num - ana) / abs(ana) < 1e-3
        checked += 1


@pytest.mark.parametrize("spec", [image_head(), mask_head(), denoise_head()])
def test_untrained_output_is_smooth(spec):
    g = build_generator(spec, 0)
    z = sample_noise_input((64, 64), 32, 0)
    out = forward(g, z).detach().numpy()
    zin = z.values[:3].permute(1, 2, 0).numpy()
    assert mean_abs_laplacian(out) < mean_abs_laplacian(zin)


def test_spec_roundtrip():
    for spec in (image_head(), mask_head(), denoise_head(), image_head(skip_channels=4)):
        assert GeneratorSpec.from_dict(spec.to_dict()) == spec


def test_checkpoint_roundtrip(tmp_path):
    g = build_generator(mask_head(), 5)
    save_generator(g, tmp_path / "g.safetensors")
    h = load_generator(tmp_path / "g.safetensors")
    assert h.spec == g.spec
    assert torch.equal(h.parameter_vector(), g.parameter_vector())
