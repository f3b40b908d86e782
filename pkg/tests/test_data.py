import json

import numpy as np
import pytest
from scipy import ndimage

from anlcl.data import (
    PatchRef,
    PatchStack,
    RainParams,
    SynthDataset,
    crop_window,
    dataset_iter,
    downsample,
    extract_patches,
    load_image,
    make_clean_image,
    random_crop,
    save_image,
    synth_rain,
    write_synth_dataset,
)
from anlcl.errors import ConfigError, DataIOError, DimensionError, FormatError, ParameterError


@pytest.fixture
def rgb():
    return make_clean_image(48, rng_seed=3)


def test_load_normalizes_extremes(tmp_path):
    img = np.zeros((16, 16, 1))
    img[0, 0] = 1.0
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    assert back.shape == (16, 16, 1)
    assert back[0, 0, 0] == 1.0
    assert back[5, 5, 0] == 0.0


def test_round_trip_within_one_level(tmp_path, rgb):
    save_image(rgb, tmp_path / "a.png")
    first = load_image(tmp_path / "a.png")
    save_image(first, tmp_path / "b.png")
    second = load_image(tmp_path / "b.png")
    assert np.max(np.abs(second - rgb)) <= 1 / 255 + 1e-12
    assert first.shape == rgb.shape


def test_load_errors(tmp_path):
    with pytest.raises(DataIOError):
        load_image(tmp_path / "missing.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image at all")
    with pytest.raises(FormatError):
        load_image(bad)


def test_random_crop_identity_and_determinism():
    img = make_clean_image(32, 0)
    assert np.array_equal(random_crop(img, 32, 5), img)
    big = np.random.default_rng(0).random((512, 512, 3))
    assert np.array_equal(random_crop(big, 64, 7), random_crop(big, 64, 7))


def test_random_crop_matches_reported_window():
    img = np.random.default_rng(1).random((50, 70, 3))
    top, left = crop_window(img.shape, 20, 11)
    crop = random_crop(img, 20, 11)
    for y in range(20):
        for x in range(20):
            assert np.array_equal(crop[y, x], img[top + y, left + x])


def test_random_crop_too_large():
    with pytest.raises(DimensionError):
        random_crop(np.zeros((16, 16, 1)), 17, 0)


def test_downsample_cases():
    img = np.random.default_rng(2).random((8, 8, 3))
    assert np.array_equal(downsample(img, 1), img)
    const = np.full((12, 12, 1), 0.3)
    assert np.allclose(downsample(const, 4), 0.3)
    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    assert np.allclose(downsample(checker, 2), 0.5)
    with pytest.raises(ParameterError):
        downsample(img, 0)


def test_downsample_pads_by_reflection():
    img = np.arange(25, dtype=float).reshape(5, 5) / 25
    out = downsample(img, 2)
    assert out.shape == (3, 3, 1)
    # bottom-right block: pixel (4,4) reflected into a 2x2 block
    assert out[2, 2, 0] == pytest.approx(img[4, 4])


@pytest.mark.parametrize("side,size,stride,count", [(16, 16, 1, 1), (32, 16, 16, 4)])
def test_extract_patch_counts(side, size, stride, count):
    assert len(extract_patches(np.zeros((side, side, 1)), size, stride)) == count


def test_extract_patch_count_matches_loop():
    expected = 0
    for top in range(0, 64 - 16 + 1, 8):
        for left in range(0, 64 - 16 + 1, 8):
            expected += 1
    stack = extract_patches(np.zeros((64, 64, 3)), 16, 8)
    assert len(stack) == expected == 49
    assert (stack.refs[0].top, stack.refs[0].left) == (0, 0)
    assert (stack.refs[1].top, stack.refs[1].left) == (0, 8)


def test_patch_refs_reproduce_blocks(rgb):
    stack = extract_patches(rgb, 16, 5)
    for block, ref in zip(stack.patches, stack.refs):
        assert np.array_equal(ref.read(rgb), block)


def test_extract_errors():
    with pytest.raises(ParameterError):
        extract_patches(np.zeros((16, 16, 1)), 16, 0)
    with pytest.raises(ParameterError):
        extract_patches(np.zeros((16, 16, 1)), 17, 1)


def test_patch_ref_out_of_bounds():
    with pytest.raises(DimensionError):
        PatchRef(0, 10, 0, 8).read(np.zeros((16, 16, 1)))


def test_patch_stack_mismatch():
    with pytest.raises(DimensionError):
        PatchStack(np.zeros((2, 4, 4, 1)), [PatchRef(0, 0, 0, 4)])


def test_synth_no_rain(rgb):
    rainy, rain = synth_rain(rgb, RainParams(streak_count=0), 0)
    assert np.array_equal(rainy, rgb)
    assert not rain.any()


def test_synth_veiling_only(rgb):
    rainy, rain = synth_rain(rgb, RainParams(streak_count=0, veiling_strength=0.2), 0)
    assert np.allclose(rain, 0.2)


def test_synth_component_count():
    clean = np.zeros((128, 128, 3))
    params = RainParams(streak_count=20, length_px=(6, 14), allow_overlap=False)
    _, rain = synth_rain(clean, params, 4)
    _, n = ndimage.label(rain[:, :, 0] > 0, structure=np.ones((3, 3)))
    assert n == 20


def test_synth_additivity_and_determinism(rgb):
    params = RainParams(streak_count=40)
    rainy, rain = synth_rain(rgb, params, 9)
    assert rain.min() >= 0
    unclipped = rgb + rain <= 1
    # (a + b) - a recovers b up to one rounding of the sum
    assert np.allclose((rainy - rgb)[unclipped], rain[unclipped], atol=2.3e-16, rtol=0)
    again = synth_rain(rgb, params, 9)
    assert np.array_equal(again[0], rainy) and np.array_equal(again[1], rain)


def test_rain_params_validation():
    with pytest.raises(ParameterError):
        RainParams(length_px=(10, 5))
    with pytest.raises(ParameterError):
        RainParams(intensity=(0.5, 1.5))
    with pytest.raises(ParameterError):
        RainParams(veiling_strength=1.0)


@pytest.fixture
def image_dir(tmp_path):
    for i in range(3):
        save_image(make_clean_image(40, i), tmp_path / f"{i}.png")
    return tmp_path


def test_dataset_iter_epoch(image_dir):
    crops = list(dataset_iter(image_dir, 16, 2, rng_seed=1))
    assert len(crops) == 3
    assert all(c.shape == (16, 16, 3) for c in crops)
    again = list(dataset_iter(image_dir, 16, 2, rng_seed=1))
    assert all(np.array_equal(a, b) for a, b in zip(crops, again))


def test_dataset_iter_cycles(image_dir):
    it = dataset_iter(image_dir, 16, 1, rng_seed=0, cycle=True)
    assert len([next(it) for _ in range(7)]) == 7


def test_dataset_iter_empty(tmp_path):
    with pytest.raises(ConfigError):
        next(dataset_iter(tmp_path, 16, 1, 0))


def test_synth_dataset_layout(tmp_path):
    out = write_synth_dataset(tmp_path / "ds", 3, RainParams(streak_count=10), seed=5, size=32)
    for sub in ("clean", "rainy", "rain"):
        assert len(list((out / sub).glob("*.png"))) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["rain_params"]["streak_count"] == 10
    ds = SynthDataset(out)
    assert ds.paired and len(ds) == 3
    batch = next(ds.batches(2, 16, 0))
    assert batch["rainy"].shape == (2, 16, 16, 3)
    assert batch["clean"].shape == batch["rain"].shape == batch["real"].shape
