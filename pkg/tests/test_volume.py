import nibabel as nib
import numpy as np
import pytest

from iguane import Space, Volume, example_volume
from iguane.blocks.preprocessing import (
    apply_mask,
    crop_background,
    from_model_space,
    median_normalize,
    neutralize_background,
    pad_to_multiple,
    preprocess_external,
    to_model_space,
    unpad,
)
from iguane.core.volume import BACKGROUND
from iguane.errors import (
    AdapterError,
    DegenerateInputError,
    ExclusionError,
    SpaceError,
    ValidationError,
)
from iguane.io import load_volume, mask_path, save_volume
from iguane.io.nifti import parse_description
from iguane.tools import ToolConfig


def cube(shape=(10, 10, 10), lo=3, hi=7, value=100.0):
    data = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    mask[lo:hi, lo:hi, lo:hi] = True
    data[mask] = value
    return Volume(data=data, mask=mask)


def model_volume(seed=0):
    return to_model_space(median_normalize(example_volume(seed)))


def test_volume_default_mask():
    vol = Volume(data=np.ones((4, 4, 4)))
    assert vol.mask.all()
    assert vol.space == Space.RAW


def test_volume_mask_dims():
    with pytest.raises(ValidationError):
        Volume(data=np.ones((4, 4, 4)), mask=np.ones((4, 4, 3), dtype=bool))


def test_computed_attributes():
    vol = Volume(data=np.ones((2, 2, 2)))
    vol.foo = 3
    assert vol.computed["foo"] == 3
    assert vol.foo == 3


def test_crop_background():
    vol = cube()
    cropped = crop_background(vol, (6, 6, 6))
    assert cropped.shape == (6, 6, 6)
    assert cropped.mask.sum() == vol.mask.sum()
    # two slices removed on each low face
    np.testing.assert_allclose(cropped.affine[:3, 3], [2.0, 2.0, 2.0])


def test_crop_background_unbalanced():
    vol = cube(lo=1, hi=5)
    # 1 empty slice below, 5 above: all 4 come from the high faces
    cropped = crop_background(vol, (6, 6, 6))
    assert cropped.mask.sum() == vol.mask.sum()
    np.testing.assert_allclose(cropped.affine[:3, 3], [0.0, 0.0, 0.0])


def test_crop_background_identity():
    vol = cube()
    cropped = crop_background(vol, vol.shape)
    np.testing.assert_array_equal(cropped.data, vol.data)


def test_crop_background_exclusion():
    vol = Volume(data=np.ones((8, 8, 8)))
    with pytest.raises(ExclusionError):
        crop_background(vol, (6, 6, 6))


def test_crop_background_larger_target():
    with pytest.raises(ValidationError):
        crop_background(cube(), (12, 10, 10))


def test_median_normalize():
    data = np.array([2.0, 4.0, 6.0, 9.0]).reshape(1, 1, 4)
    mask = np.array([True, True, True, False]).reshape(1, 1, 4)
    vol = median_normalize(Volume(data=data, mask=mask))
    np.testing.assert_allclose(vol.data.ravel(), [250, 500, 750, 0])
    assert vol.space == Space.PREPROCESSED
    assert vol.normalization == "median"


def test_median_normalize_constant():
    vol = median_normalize(cube(value=3.7))
    np.testing.assert_allclose(vol.brain, 500.0)
    assert (vol.data[~vol.mask] == 0).all()


def test_median_normalize_degenerate():
    with pytest.raises(DegenerateInputError):
        median_normalize(cube(value=0.0))


def test_model_space():
    vol = median_normalize(example_volume())
    model = to_model_space(vol)
    assert model.space == Space.MODEL
    assert abs(np.median(model.brain)) < 1e-3
    assert (model.data[~model.mask] == -1).all()
    back = from_model_space(model)
    np.testing.assert_allclose(back.data, vol.data, rtol=1e-6, atol=1e-9)


def test_model_space_wrong_space():
    with pytest.raises(SpaceError):
        to_model_space(example_volume())
    with pytest.raises(SpaceError):
        from_model_space(median_normalize(example_volume()))


def test_neutralize_background():
    vol = model_volume()
    neutral = neutralize_background(vol)
    np.testing.assert_allclose(neutral.data[~vol.mask], np.median(vol.brain))
    np.testing.assert_array_equal(neutral.brain, vol.brain)
    np.testing.assert_array_equal(neutralize_background(neutral).data, neutral.data)


def test_neutralize_background_full_mask():
    vol = to_model_space(median_normalize(Volume(data=np.arange(1.0, 9.0).reshape(2, 2, 2))))
    np.testing.assert_array_equal(neutralize_background(vol).data, vol.data)


def test_apply_mask():
    vol = model_volume()
    np.testing.assert_array_equal(apply_mask(vol, np.ones(vol.shape)).data, vol.data)
    np.testing.assert_array_equal(apply_mask(vol, np.zeros(vol.shape)).data, -1.0)

    mask = np.zeros(vol.shape, dtype=bool)
    mask[:10] = True
    masked = apply_mask(vol, mask)
    np.testing.assert_array_equal(masked.data[mask], vol.data[mask])
    assert (masked.data[~mask] == -1).all()


def test_apply_mask_dims():
    vol = model_volume()
    with pytest.raises(ValidationError):
        apply_mask(vol, np.ones((2, 2, 2)))


def test_pad_to_multiple():
    vol = model_volume()
    padded, pads = pad_to_multiple(vol, 16)
    assert padded.shape == (32, 48, 32)
    assert pads == ((0, 0), (4, 4), (0, 0))
    assert (padded.data[:, :4] == -1).all()
    assert not padded.mask[:, :4].any()
    restored = unpad(padded, pads)
    np.testing.assert_array_equal(restored.data, vol.data)
    np.testing.assert_array_equal(restored.mask, vol.mask)
    np.testing.assert_allclose(restored.affine, vol.affine)


def test_save_load(tmp_path):
    vol = median_normalize(example_volume())
    path = tmp_path / "sub" / "vol.nii.gz"
    save_volume(vol, path, dict(cfg="abcdef0123456789", seed=3))
    assert mask_path(path).exists()

    loaded = load_volume(path)
    assert loaded.space == Space.PREPROCESSED
    assert loaded.normalization == "median"
    np.testing.assert_array_equal(loaded.mask, vol.mask)
    np.testing.assert_allclose(loaded.data, vol.data, rtol=1e-6)
    assert "cfg=abcdef01" in str(nib.load(str(path)).header["descrip"])


@pytest.mark.parametrize("space", list(Space))
@pytest.mark.parametrize("normalization", [None, "median", "hm", "ws"])
@pytest.mark.parametrize("background", [None, -3.25])
def test_save_load_header(tmp_path, space, normalization, background):
    background = BACKGROUND[space] if background is None else background
    vol = cube(shape=(6, 6, 6), lo=1, hi=5)
    vol.data[~vol.mask] = background
    vol.space, vol.normalization, vol.background_value = space, normalization, background
    path = tmp_path / "vol.nii.gz"
    save_volume(vol, path, dict(cfg="abcdef0123456789", seed=3))

    loaded = load_volume(path)
    assert loaded.space == space
    assert loaded.normalization == normalization
    assert loaded.background_value == pytest.approx(background)
    fields = parse_description(nib.load(str(path)).header["descrip"])
    assert fields["cfg"] == "abcdef01"
    assert fields["seed"] == "3"


def test_parse_description_types():
    expected = {"space": "model_space", "seed": "3"}
    assert parse_description(b"space=model_space seed=3") == expected
    assert parse_description("space=model_space seed=3") == expected
    assert parse_description(np.array(b"space=model_space seed=3", dtype="S80")) == expected


def test_load_bad_header(tmp_path):
    image = nib.Nifti1Image(np.ones((4, 4, 4), dtype=np.float32), np.eye(4))
    image.header["descrip"] = "space=model_space bg=dark"
    nib.save(image, str(tmp_path / "bad.nii.gz"))
    with pytest.raises(ValidationError, match="header"):
        load_volume(tmp_path / "bad.nii.gz")


def test_writeto(tmp_path):
    vol = example_volume()
    vol.writeto(tmp_path / "vol.nii.gz")
    loaded = load_volume(tmp_path / "vol.nii.gz")
    assert loaded.space == Space.RAW
    np.testing.assert_array_equal(loaded.mask, vol.mask)


def test_load_without_mask(tmp_path):
    path = tmp_path / "plain.nii.gz"
    nib.save(nib.Nifti1Image(np.ones((4, 5, 6), dtype=np.float32), np.eye(4)), str(path))
    vol = load_volume(path)
    assert vol.shape == (4, 5, 6)
    assert vol.mask.all()
    assert vol.space == Space.RAW


def test_load_mask_mismatch(tmp_path):
    path = tmp_path / "plain.nii.gz"
    nib.save(nib.Nifti1Image(np.ones((4, 5, 6), dtype=np.float32), np.eye(4)), str(path))
    nib.save(nib.Nifti1Image(np.ones((4, 5, 5), dtype=np.uint8), np.eye(4)), str(mask_path(path)))
    with pytest.raises(ValidationError):
        load_volume(path)


def test_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nothing.nii.gz")


def test_preprocess_external_bypass(tmp_path):
    vol = cube(shape=(12, 12, 12), lo=3, hi=9, value=40.0)
    path = tmp_path / "input.nii.gz"
    save_volume(vol, path)
    out = preprocess_external(path, ToolConfig(), target_dims=(8, 8, 8))
    assert out.shape == (8, 8, 8)
    assert out.space == Space.PREPROCESSED
    np.testing.assert_allclose(np.median(out.brain), 500.0)


def test_preprocess_external_tool_failure(tmp_path):
    vol = cube()
    path = tmp_path / "input.nii.gz"
    save_volume(vol, path)
    tools = ToolConfig(pre_stripped=False, skull_strip="false {input} {output}")
    with pytest.raises(AdapterError) as err:
        preprocess_external(path, tools, target_dims=(6, 6, 6))
    assert err.value.returncode == 1
