import numpy as np
import pytest
import torch

from iguane import example_volume
from iguane.blocks.preprocessing import median_normalize, to_model_space
from iguane.errors import ConfigError, IntegrityError, ShapeError, SpaceError
from iguane.networks import (
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    MADInstanceNorm3d,
    ParameterSet,
    Predictor,
    PredictorSpec,
    discriminator_forward,
    generator_forward,
    mad_instance_norm,
    patch_map_shape,
    receptive_field,
)

tiny_generator = GeneratorSpec(levels=2, base_channels=4)
tiny_discriminator = DiscriminatorSpec(channels=(4, 8, 16))


def test_mad_instance_norm():
    x = torch.tensor([1.0, 2.0, 3.0]).view(1, 1, 3, 1, 1)
    np.testing.assert_allclose(
        mad_instance_norm(x).flatten().numpy(), [-1.5, 0.0, 1.5], atol=1e-4
    )


def test_mad_instance_norm_per_channel():
    torch.manual_seed(0)
    x = torch.randn(2, 3, 4, 4, 4) * 5 + 2
    y = mad_instance_norm(x)
    np.testing.assert_allclose(y.mean(dim=(2, 3, 4)).numpy(), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.abs().mean(dim=(2, 3, 4)).numpy(), 1.0, atol=1e-3)


def test_mad_instance_norm_gradients():
    torch.manual_seed(0)
    x = torch.randn(1, 2, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(mad_instance_norm, (x,))
    norm = MADInstanceNorm3d(2).double()
    assert torch.autograd.gradcheck(norm, (x,))


def test_generator_shapes():
    generator = Generator(tiny_generator)
    x = torch.randn(2, 1, 16, 24, 16)
    assert generator(x).shape == x.shape
    with pytest.raises(ShapeError):
        generator(torch.randn(1, 1, 16, 18, 16))


@pytest.mark.slow
def test_generator_full_size():
    generator = Generator(GeneratorSpec(levels=4, base_channels=2))
    with torch.no_grad():
        for shape in [(32, 48, 32), (160, 192, 160)]:
            x = torch.randn(1, 1, *shape)
            assert generator(x).shape == x.shape


def test_generator_zero_residual():
    generator = Generator(tiny_generator).zero_residual()
    x = torch.randn(1, 1, 8, 8, 8)
    torch.testing.assert_close(generator(x), x)


def test_generator_mask_and_clip():
    generator = Generator(tiny_generator).zero_residual()
    x = torch.full((1, 1, 8, 8, 8), -3.0)
    mask = torch.zeros_like(x, dtype=torch.bool)
    mask[..., 2:6, 2:6, 2:6] = True
    out = generator(x, mask=mask)
    assert (out[~mask] == -1).all()
    assert (out[mask] == -3).all()
    assert (generator(x, mask=mask, inference=True) == -1).all()


def test_generator_spec_constraints():
    with pytest.raises(ConfigError):
        GeneratorSpec(skip_connections=False)
    with pytest.raises(ConfigError):
        GeneratorSpec(final_activation="relu")


def test_receptive_field():
    assert receptive_field(DiscriminatorSpec()) == 38
    assert patch_map_shape(DiscriminatorSpec(), (160, 192, 160)) == (20, 24, 20)
    assert patch_map_shape(tiny_discriminator, (32, 48, 32)) == (4, 6, 4)


def test_discriminator_shapes():
    discriminator = Discriminator(tiny_discriminator)
    assert discriminator(torch.randn(2, 1, 32, 48, 32)).shape == (2, 1, 4, 6, 4)
    with pytest.raises(ShapeError):
        discriminator(torch.randn(1, 1, 4, 8, 8))


def test_discriminator_locality():
    torch.manual_seed(0)
    discriminator = Discriminator(DiscriminatorSpec(channels=(4, 8, 16), normalize=False))
    x = torch.randn(1, 1, 48, 48, 48)
    y = x.clone()
    y[..., :2, :2, :2] += 10
    with torch.no_grad():
        a, b = discriminator(x), discriminator(y)
    torch.testing.assert_close(a[..., -1, -1, -1], b[..., -1, -1, -1])
    assert not torch.allclose(a[..., 0, 0, 0], b[..., 0, 0, 0])


def test_predictor():
    x = torch.randn(3, 1, 16, 16, 16)
    regression = Predictor(PredictorSpec(blocks=2, base_channels=2, target_offset=50.0))
    assert regression(x).shape == (3,)
    classifier = Predictor(PredictorSpec(task="classification", blocks=2, base_channels=2))
    p = classifier(x)
    assert ((p > 0) & (p < 1)).all()
    with pytest.raises(ShapeError):
        regression(torch.randn(1, 1, 2, 16, 16))
    with pytest.raises(ConfigError):
        PredictorSpec(task="ranking")


def test_parameter_set_round_trip(tmp_path):
    torch.manual_seed(0)
    params = ParameterSet.from_module(Discriminator(tiny_discriminator))
    assert params.kind == "discriminator"
    assert not next(iter(params.arrays.values())).flags.writeable
    params.save(tmp_path / "d")
    loaded = ParameterSet.load(tmp_path / "d")
    assert loaded.hash == params.hash
    assert loaded.spec == params.spec

    x = torch.randn(1, 1, 16, 16, 16)
    with torch.no_grad():
        torch.testing.assert_close(
            params.to_module("cpu")(x), loaded.to_module("cpu")(x)
        )


def test_parameter_set_tampered(tmp_path):
    params = ParameterSet.from_module(Generator(tiny_generator))
    params.save(tmp_path / "g")
    path = tmp_path / "g" / "output.bias.npy"
    np.save(path, np.ones(1, dtype=np.float32))
    with pytest.raises(IntegrityError):
        ParameterSet.load(tmp_path / "g")


def test_parameter_set_missing(tmp_path):
    with pytest.raises(IntegrityError):
        ParameterSet.load(tmp_path)


def test_parameter_set_spec_mismatch():
    params = ParameterSet.from_module(Generator(tiny_generator))
    wrong = ParameterSet(GeneratorSpec(levels=2, base_channels=8), params.arrays)
    with pytest.raises(IntegrityError):
        wrong.to_module("cpu")


def test_volume_forward_passes():
    vol = to_model_space(median_normalize(example_volume()))
    generator = ParameterSet.from_module(Generator(tiny_generator).zero_residual())
    out = generator_forward(generator, vol, inference=True, device="cpu")
    assert out.shape == vol.shape
    np.testing.assert_allclose(out.data[vol.mask], vol.data[vol.mask], atol=1e-5)
    assert (out.data[~out.mask] == -1).all()

    scores = discriminator_forward(
        ParameterSet.from_module(Discriminator(tiny_discriminator)), vol, device="cpu"
    )
    assert scores.shape == (4, 5, 4)

    with pytest.raises(SpaceError):
        generator_forward(generator, example_volume(), device="cpu")
