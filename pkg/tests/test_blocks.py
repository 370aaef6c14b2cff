import numpy as np
import pytest
import torch

from iguane import Sequence, SequenceParallel, Space, Volume, blocks, example_volume
from iguane.errors import ConfigError
from iguane.io import load_volume
from iguane.networks import Generator, GeneratorSpec, ParameterSet

spec = GeneratorSpec(levels=2, base_channels=4)


def volumes(n=3):
    vols = [example_volume(seed=i, age=30 + 10 * i) for i in range(n)]
    for i, vol in enumerate(vols):
        vol.metadata.update(subject_id=f"s{i}", site_id="ref", age=30 + 10 * i)
    return vols


def identity_generator():
    torch.manual_seed(0)
    return ParameterSet.from_module(Generator(spec).zero_residual())


def test_sequence_model_space():
    get = blocks.Get("space", median=lambda v: float(np.median(v.brain)))
    Sequence([blocks.MedianNormalize(), blocks.ToModelSpace(), get]).run(
        volumes(), show_progress=False
    )
    assert get.space == [Space.MODEL] * 3
    np.testing.assert_allclose(get.median, 0.0, atol=1e-9)


def test_block_call_copies():
    vol = example_volume()
    out = blocks.MedianNormalize()(vol)
    assert vol.space == Space.RAW
    assert out.space == Space.PREPROCESSED


def test_sequence_discards():
    vols = volumes(2)
    vols.insert(1, Volume(data=np.ones((32, 40, 32)), metadata={"subject_id": "full"}))
    get = blocks.Get("subject_id")
    sequence = Sequence([blocks.CropBackground((30, 38, 30)), get])
    sequence.run(vols, show_progress=False)

    assert get.subject_id == ["s0", "s1"]
    assert sequence.discards == {"CropBackground": ["1"]}
    block, reason = sequence.reasons[1]
    assert block == "CropBackground"
    assert reason.startswith("ExclusionError")


def test_sequence_space_error_discards():
    sequence = Sequence([blocks.ToModelSpace()])
    sequence.run(volumes(2), show_progress=False)
    assert sorted(sequence.reasons) == [0, 1]
    assert sequence.reasons[0][1].startswith("SpaceError")


def test_sequence_empty():
    with pytest.raises(ValueError):
        Sequence([blocks.MedianNormalize()]).run([], show_progress=False)


def test_sequence_parallel():
    get = blocks.Get("subject_id", median=lambda v: float(np.median(v.brain)))
    sequence = SequenceParallel(
        [blocks.MedianNormalize()], data_blocks=[get], workers=2
    )
    sequence.run(volumes(4), show_progress=False)
    assert get.subject_id == ["s0", "s1", "s2", "s3"]
    np.testing.assert_allclose(get.median, 500.0)


def test_sequence_parallel_data_blocks():
    with pytest.raises(ConfigError):
        SequenceParallel([blocks.Get("i")]).run(volumes(1), show_progress=False)


def test_get_metadata():
    get = blocks.Get("metadata:site_id", age="metadata:age", arrays=True)
    Sequence([get]).run(volumes(), show_progress=False)
    assert list(get.site_id) == ["ref"] * 3
    np.testing.assert_array_equal(get["age"], [30, 40, 50])


def test_write_to(tmp_path):
    write = blocks.WriteTo(tmp_path, provenance=dict(cfg="0123abcd", seed=1))
    Sequence([blocks.MedianNormalize(), write]).run(volumes(2), show_progress=False)
    assert write.files == [tmp_path / "ref" / "s0.nii.gz", tmp_path / "ref" / "s1.nii.gz"]
    loaded = load_volume(write.files[0])
    assert loaded.space == Space.PREPROCESSED


def test_write_to_no_overwrite(tmp_path):
    vol = volumes(1)[0]
    blocks.WriteTo(tmp_path)(vol)
    write = blocks.WriteTo(tmp_path, overwrite=False)
    with pytest.raises(FileExistsError):
        write.run(vol)
    assert write.files == []


def test_write_to_same_key(tmp_path):
    first, second = volumes(2)
    second.metadata["subject_id"] = "s0"
    write = blocks.WriteTo(tmp_path)
    write.run(first)
    with pytest.raises(FileExistsError):
        write.run(second)
    assert write.files == [tmp_path / "ref" / "s0.nii.gz"]


def test_write_to_unknown_ids(tmp_path):
    vol = example_volume()
    vol.metadata.update(path="/data/scan_01.nii.gz", subject_id="", site_id="ref")
    write = blocks.WriteTo(tmp_path)
    write.run(vol)
    assert write.files == [tmp_path / "scan_01.nii.gz"]


def test_apply():
    touch = blocks.Apply(lambda v: setattr(v, "touched", True))
    vol = touch(example_volume())
    assert vol.touched


def test_harmonize_identity():
    vol = blocks.MedianNormalize()(example_volume())
    out = blocks.Harmonize(identity_generator())(vol)
    assert out.space == Space.PREPROCESSED
    assert out.shape == vol.shape
    assert out.harmonized
    np.testing.assert_allclose(out.data, vol.data, rtol=1e-5, atol=1e-3)


def test_harmonize_model_space():
    vol = blocks.ToModelSpace()(blocks.MedianNormalize()(example_volume()))
    out = blocks.Harmonize(identity_generator())(vol)
    assert out.space == Space.MODEL
    assert (out.data[~out.mask] == -1).all()


def test_harmonize_padding():
    # 24 is not a multiple of 16: padded to 32 then cropped back
    vol = blocks.MedianNormalize()(example_volume(shape=(24, 32, 24)))
    out = blocks.Harmonize(identity_generator())(vol)
    assert out.shape == (24, 32, 24)
    np.testing.assert_allclose(out.data, vol.data, rtol=1e-5, atol=1e-3)


def test_harmonize_raw_discarded():
    sequence = Sequence([blocks.Harmonize(identity_generator())])
    sequence.run([example_volume()], show_progress=False)
    assert sequence.reasons[0][1].startswith("SpaceError")


def test_sequence_table():
    sequence = Sequence([blocks.MedianNormalize(name="median")])
    sequence.run(volumes(1), show_progress=False)
    assert "median" in str(sequence)
