"""Scene container round-trips, channel adaptation, synthesis statistics,
patch extraction and augmentation geometry."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icefm.errors import ConfigError, SceneFormatError
from icefm.metrics import IGNORE_INDEX
from icefm.sardata import (NUM_CLASSES, REGIONS, SEASONS, DatasetManifest,
                           Scene, SynthConfig, adapt_channels, augment_patch,
                           build_patchset, domain_key, extract_patches,
                           generate_dataset, load_scene, save_scene,
                           scene_seed, shift_heavy_config, synthesize_scene)


def _toy_scene(h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    return Scene(
        scene_id="spring_east_000", season="spring", region="east",
        hh=rng.normal(-14, 3, (h, w)).astype(np.float32),
        hv=rng.normal(-22, 3, (h, w)).astype(np.float32),
        labels=rng.integers(0, NUM_CLASSES, (h, w)).astype(np.uint8),
    )


def _toy_manifest(patch_size=8):
    return DatasetManifest(
        class_count=NUM_CLASSES, patch_size=patch_size, scenes=[], splits={},
        channel_stats={"hh": [0.0, 1.0], "hv": [0.0, 1.0], "ratio": [0.0, 1.0]})


def test_scene_roundtrip_bit_exact(tmp_path):
    scene = _toy_scene()
    scene.labels[0, :] = IGNORE_INDEX
    path = tmp_path / "s.npz"
    save_scene(scene, path)
    back = load_scene(path)
    assert np.array_equal(scene.hh, back.hh)
    assert np.array_equal(scene.hv, back.hv)
    assert np.array_equal(scene.labels, back.labels)
    assert back.hh.dtype == np.float32 and back.labels.dtype == np.uint8
    assert (back.scene_id, back.season, back.region) == ("spring_east_000", "spring", "east")


def test_truncated_scene_file_rejected(tmp_path):
    scene = _toy_scene()
    path = tmp_path / "s.npz"
    save_scene(scene, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(SceneFormatError):
        load_scene(path)


def test_out_of_range_labels_rejected(tmp_path):
    scene = _toy_scene()
    scene.labels[3, 3] = NUM_CLASSES  # one past the last class, not 255
    with pytest.raises(SceneFormatError):
        save_scene(scene, tmp_path / "bad.npz")


def test_missing_file_and_shape_mismatch(tmp_path):
    with pytest.raises(SceneFormatError):
        load_scene(tmp_path / "absent.npz")
    scene = _toy_scene()
    scene.hv = scene.hv[:8]
    with pytest.raises(SceneFormatError):
        scene.validate()


def test_adapt_channels_values():
    scene = _toy_scene(4, 4)
    scene.hh[:] = -12.0
    scene.hv[:] = -20.0
    two = adapt_channels(scene, "two_channel")
    assert two.shape == (2, 4, 4)
    assert np.array_equal(two[0], scene.hh) and np.array_equal(two[1], scene.hv)
    three = adapt_channels(scene, "three_channel")
    assert three.shape == (3, 4, 4)
    assert np.allclose(three[2], 8.0)
    scene.hv[:] = scene.hh
    assert np.all(adapt_channels(scene, "three_channel")[2] == 0.0)
    with pytest.raises(ConfigError):
        adapt_channels(scene, "four_channel")


def test_ratio_channel_matches_linear_route():
    # HH - HV in dB must equal the linear-intensity ratio converted to dB
    scene = _toy_scene(8, 8, seed=5)
    ratio_db = adapt_channels(scene, "three_channel")[2].astype(np.float64)
    lin = 10.0 ** (scene.hh.astype(np.float64) / 10.0) / \
        10.0 ** (scene.hv.astype(np.float64) / 10.0)
    # the channel is stored in float32, so agreement is limited by that dtype
    assert np.abs(ratio_db - 10.0 * np.log10(lin)).max() < 1e-5


def test_tiled_extraction_covers_and_drops_edges():
    scene = _toy_scene(20, 28)
    patches = extract_patches(scene, _toy_manifest(8), "tiled_eval")
    # rows at 0 and 8 (16 > 20-8), cols at 0, 8, 16 -> 2 x 3 tiles
    assert len(patches) == 6
    offsets = {p.offset for p in patches}
    assert offsets == {(r, c) for r in (0, 8) for c in (0, 8, 16)}
    assert all(p.channels.shape == (2, 8, 8) for p in patches)


def test_random_extraction_deterministic_and_in_bounds():
    scene = _toy_scene(32, 32)
    man = _toy_manifest(8)
    a = extract_patches(scene, man, "random_train", count=12, augment=True,
                        rng=np.random.default_rng(7))
    b = extract_patches(scene, man, "random_train", count=12, augment=True,
                        rng=np.random.default_rng(7))
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.channels, pb.channels)
        assert np.array_equal(pa.labels, pb.labels)
    for p in a:
        r, c = p.offset
        assert 0 <= r <= 24 and 0 <= c <= 24
    with pytest.raises(ConfigError):
        extract_patches(scene, man, "random_train", count=3)  # rng required


def test_normalization_applied_from_manifest_stats():
    scene = _toy_scene(8, 8)
    man = _toy_manifest(8)
    man.channel_stats = {"hh": [-14.0, 2.0], "hv": [-22.0, 4.0], "ratio": [8.0, 1.0]}
    patch = extract_patches(scene, man, "tiled_eval", channels="three_channel")[0]
    expect_hh = (scene.hh - -14.0) / 2.0
    assert np.allclose(patch.channels[0], expect_hh, atol=1e-6)
    expect_ratio = ((scene.hh - scene.hv) - 8.0) / 1.0
    assert np.allclose(patch.channels[2], expect_ratio, atol=1e-5)


def test_augment_rotation_against_reference():
    chans = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    labs = np.array([[0, 1], [2, IGNORE_INDEX]], dtype=np.uint8)
    out_c, out_l = augment_patch(chans, labs, False, False, 1)
    assert np.array_equal(out_l, np.rot90(labs))
    assert np.array_equal(out_c[0], np.rot90(chans[0]))
    out_c4, out_l4 = augment_patch(chans, labs, False, False, 4)
    assert np.array_equal(out_l4, labs) and np.array_equal(out_c4, chans)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.booleans(), st.booleans(), st.integers(0, 3))
def test_augment_preserves_label_multiset_and_pairing(seed, fh, fv, k):
    rng = np.random.default_rng(seed)
    chans = rng.normal(size=(2, 6, 6)).astype(np.float32)
    labs = rng.integers(0, 6, (6, 6)).astype(np.uint8)
    labs[0, 0] = IGNORE_INDEX
    out_c, out_l = augment_patch(chans, labs, fh, fv, k)
    assert sorted(out_l.ravel()) == sorted(labs.ravel())
    # channel/label pairing is preserved: the pixel marked 255 carries its value
    src = np.argwhere(labs == IGNORE_INDEX)[0]
    dst = np.argwhere(out_l == IGNORE_INDEX)[0]
    assert out_c[0][tuple(dst)] == chans[0][tuple(src)]


def test_scene_seed_stable_and_distinct():
    a = np.random.default_rng(scene_seed(0, "winter_east_000")).integers(0, 2 ** 31)
    b = np.random.default_rng(scene_seed(0, "winter_east_000")).integers(0, 2 ** 31)
    c = np.random.default_rng(scene_seed(0, "winter_east_001")).integers(0, 2 ** 31)
    d = np.random.default_rng(scene_seed(1, "winter_east_000")).integers(0, 2 ** 31)
    assert a == b
    assert a != c and a != d


def test_synth_config_validation():
    cfg = shift_heavy_config()
    bad = shift_heavy_config()
    key = domain_key("winter", "east")
    bad.class_priors[key] = [0.5] * NUM_CLASSES  # sums to 3
    with pytest.raises(ConfigError, match="class_priors"):
        bad.validate()
    bad2 = shift_heavy_config()
    del bad2.domain_offset[key]
    with pytest.raises(ConfigError, match="domain_offset"):
        bad2.validate()
    with pytest.raises(ConfigError):
        SynthConfig(speckle_looks=0.0).validate()
    with pytest.raises(ConfigError):
        SynthConfig(scene_size=(16, 16), patch_size=32).validate()
    cfg.validate()  # the shipped preset is self-consistent


def test_generated_dataset_structure(heavy_dataset):
    m = heavy_dataset
    assert len(m.scenes) == 4 * 4 * 4  # seasons x regions x scenes_per_domain
    assert {s.season for s in m.scenes} == set(SEASONS)
    assert {s.region for s in m.scenes} == set(REGIONS)
    counts = {k: len(v) for k, v in m.splits.items()}
    assert counts == {"train": 32, "val": 16, "test": 16}
    # every domain contributes to every split
    for season in SEASONS:
        for region in REGIONS:
            assert m.split_ids("train", season=season, region=region)
            assert m.split_ids("test", season=season, region=region)
    for key in ("hh", "hv", "ratio"):
        mean, std = m.channel_stats[key]
        assert np.isfinite(mean) and std > 0


def test_manifest_roundtrip_and_validation(heavy_dataset, tmp_path):
    path = tmp_path / "manifest.json"
    heavy_dataset.save(path)
    back = DatasetManifest.load(path)
    assert back.splits == heavy_dataset.splits
    assert back.channel_stats == heavy_dataset.channel_stats
    payload = json.loads(path.read_text())
    payload["splits"]["train"].append("no_such_scene")
    path.write_text(json.dumps(payload))
    with pytest.raises(ConfigError, match="no_such_scene"):
        DatasetManifest.load(path)


def test_seasonal_prior_shift_shows_in_labels(heavy_dataset):
    # winter tilts young ice (class 2), summer tilts open water (class 0)
    def class_freq(season, cls):
        hist = np.zeros(NUM_CLASSES)
        for sid in heavy_dataset.split_ids("train", season=season):
            labels = heavy_dataset.load_scene(sid).labels
            valid = labels[labels != IGNORE_INDEX]
            hist += np.bincount(valid, minlength=NUM_CLASSES)
        return hist[cls] / hist.sum()

    assert class_freq("winter", 2) > class_freq("summer", 2)
    assert class_freq("summer", 0) > class_freq("winter", 0)


def test_domain_offset_shifts_backscatter():
    cfg = shift_heavy_config()
    rng_a = np.random.default_rng(1)
    rng_b = np.random.default_rng(1)
    hot = synthesize_scene(cfg, "winter", "east", "a", rng_a)   # offset +12
    cold = synthesize_scene(cfg, "fall", "north", "b", rng_b)   # offset -12
    assert hot.hh.mean() > cold.hh.mean() + 10


def test_speckle_variance_shrinks_with_looks():
    base = dict(scene_size=(64, 64), seeds_per_scene=1, texture_std=0.0,
                ignore_border=0, patch_size=32)
    noisy = SynthConfig(speckle_looks=2.0, **base)
    clean = SynthConfig(speckle_looks=500.0, **base)
    s_noisy = synthesize_scene(noisy, "spring", "east", "x", np.random.default_rng(3))
    s_clean = synthesize_scene(clean, "spring", "east", "x", np.random.default_rng(3))
    assert s_noisy.hh.std() > 3 * s_clean.hh.std()
    assert s_clean.hh.std() < 0.5  # looks -> inf: dB raster collapses to the class mean


def test_build_patchset_shapes_and_errors(heavy_dataset):
    ids = heavy_dataset.splits["train"][:3]
    ps = build_patchset(heavy_dataset, ids, "random_train", "three_channel",
                        per_scene=4, augment=True, seed=11)
    assert ps.channels.shape == (12, 3, 32, 32)
    assert ps.labels.shape == (12, 32, 32)
    assert ps.channels.dtype == np.float32 and ps.labels.dtype == np.uint8
    with pytest.raises(ConfigError):
        build_patchset(heavy_dataset, [], "random_train", "two_channel", per_scene=2)
