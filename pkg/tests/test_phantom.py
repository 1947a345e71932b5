import hashlib
import json
import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from bionet.phantom import (
    MANIFEST_NAME,
    DatasetError,
    DatasetManifest,
    PhantomConfig,
    choroid_surfaces,
    generate_dataset,
    generate_phantom,
    import_annotated,
    read_dataset,
)
from bionet.types import Sample, validate_sample

from oracles import thickness_loop


def same_sample(a: Sample, b: Sample) -> bool:
    return (
        a.id == b.id
        and np.array_equal(a.image.pixels, b.image.pixels)
        and np.array_equal(a.layers.labels, b.layers.labels)
        and np.array_equal(a.choroid.mask, b.choroid.mask)
        and a.thickness == b.thickness
    )


def test_deterministic_generation():
    cfg = PhantomConfig(seed=9)
    a, b = generate_phantom(cfg, 4), generate_phantom(cfg, 4)
    assert same_sample(a, b)
    assert a.image.pixels.tobytes() == b.image.pixels.tobytes()
    assert not np.array_equal(a.image.pixels, generate_phantom(cfg, 5).image.pixels)


def test_noise_free_is_piecewise_constant():
    cfg = PhantomConfig(seed=2, speckle_strength=0.0, csi_blur_sigma=0.0)
    s = generate_phantom(cfg, 0)
    values = {}
    for k in range(cfg.num_layers):
        region = s.image.pixels[s.layers.labels == k]
        assert region.size > 0
        assert np.all(region == region[0])
        values[k] = region[0]
    assert len(set(values.values())) == cfg.num_layers
    # each band's intensity identifies its region exactly
    for k, v in values.items():
        assert np.array_equal(s.image.pixels == v, s.layers.labels == k)


def test_thickness_matches_column_count_oracle(phantoms):
    for s in phantoms:
        assert abs(s.thickness.value - thickness_loop(s.choroid.mask)) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), index=st.integers(0, 10_000))
def test_generated_samples_satisfy_invariants(seed, index):
    cfg = PhantomConfig(seed=seed, height=64, width=48, choroid_thickness_range=(10.0, 20.0))
    s = generate_phantom(cfg, index)
    assert validate_sample(s) == []
    lab = s.layers.labels
    # label monotonicity and non-crossing surfaces
    assert np.all(np.diff(lab, axis=0) >= 0)
    assert np.all(np.diff(s.surfaces, axis=0) > 0)
    assert np.array_equal(s.choroid.mask, (lab == cfg.choroid_class).astype(np.uint8))
    # every band present in every column
    for k in range(cfg.num_layers):
        assert np.all((lab == k).any(axis=0))
    up, lo = choroid_surfaces(s)
    assert np.all(up >= 0) and np.all(lo <= cfg.height - 1)


def test_default_geometry_in_range(phantoms):
    for s in phantoms:
        assert 15.0 <= s.thickness.value <= 55.0


def test_rejects_impossible_configs():
    with pytest.raises(ValueError, match="height"):
        PhantomConfig(height=15).validate()
    with pytest.raises(ValueError, match="fit"):
        PhantomConfig(height=30, choroid_thickness_range=(20, 25)).validate()
    with pytest.raises(ValueError):
        PhantomConfig(csi_blur_sigma=-1).validate()
    with pytest.raises(ValueError):
        PhantomConfig(speckle_strength=1.5).validate()
    with pytest.raises(ValueError):
        generate_phantom(PhantomConfig(height=30, choroid_thickness_range=(20, 25)), 0)


def test_other_layer_counts():
    cfg = PhantomConfig(seed=1, num_layers=4, choroid_class=2, height=64, width=32,
                        choroid_thickness_range=(10.0, 20.0))
    s = generate_phantom(cfg, 0)
    assert validate_sample(s) == []
    assert s.layers.labels.max() == 3


def test_full_scale_dimensions():
    s = generate_phantom(PhantomConfig.full_scale(seed=1), 0)
    assert s.image.pixels.shape == (992, 512)
    assert validate_sample(s) == []


def _hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = hashlib.sha256(open(p, "rb").read()).hexdigest()
    return out


def test_generate_dataset_layout_and_determinism(tmp_path):
    cfg = PhantomConfig(seed=7, height=32, width=32, choroid_thickness_range=(8.0, 12.0))
    m = generate_dataset(cfg, 4, 2, tmp_path / "a")
    assert len(m.entries) == 6
    assert len({e.id for e in m.entries}) == 6
    assert len(m.split("train")) == 4 and len(m.split("test")) == 2
    raw = json.loads((tmp_path / "a" / MANIFEST_NAME).read_text())
    assert raw["num_classes"] == 12 and raw["choroid_class"] == 9
    generate_dataset(cfg, 4, 2, tmp_path / "b")
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")


def test_round_trip(tmp_path):
    cfg = PhantomConfig(seed=4, height=48, width=40, choroid_thickness_range=(8.0, 14.0))
    m = generate_dataset(cfg, 3, 2, tmp_path)
    loaded = list(read_dataset(tmp_path))
    assert [s.id for s in loaded] == [e.id for e in m.entries]
    for i, s in enumerate(loaded):
        orig = generate_phantom(cfg, i)
        assert validate_sample(s) == []
        assert np.max(np.abs(s.image.pixels - orig.image.pixels)) <= 1 / 65535
        assert np.array_equal(s.layers.labels, orig.layers.labels)
        assert np.array_equal(s.choroid.mask, orig.choroid.mask)
        assert s.thickness.value == orig.thickness.value
    assert len(read_dataset(tmp_path, "train")) == 3


def test_missing_file_names_sample(tmp_path):
    cfg = PhantomConfig(seed=4, height=32, width=32, choroid_thickness_range=(8.0, 12.0))
    m = generate_dataset(cfg, 2, 1, tmp_path)
    victim = m.entries[1]
    os.remove(tmp_path / victim.image)
    ds = read_dataset(tmp_path)
    ds[0]
    with pytest.raises(DatasetError, match=victim.id):
        ds[1]


def test_corrupt_label_reported(tmp_path):
    from PIL import Image

    cfg = PhantomConfig(seed=4, height=32, width=32, choroid_thickness_range=(8.0, 12.0))
    m = generate_dataset(cfg, 1, 1, tmp_path)
    e = m.entries[0]
    lab = np.array(Image.open(tmp_path / e.layers))
    lab[0, 0] = 40
    Image.fromarray(lab).save(tmp_path / e.layers)
    with pytest.raises(DatasetError, match=e.id):
        read_dataset(tmp_path)[0]
    small = np.zeros((16, 16), np.uint8)
    Image.fromarray(small).save(tmp_path / m.entries[1].mask)
    with pytest.raises(DatasetError, match="dimension"):
        read_dataset(tmp_path)[1]


def test_duplicate_ids_rejected(tmp_path):
    cfg = PhantomConfig(seed=4, height=32, width=32, choroid_thickness_range=(8.0, 12.0))
    generate_dataset(cfg, 2, 0, tmp_path)
    raw = json.loads((tmp_path / MANIFEST_NAME).read_text())
    raw["samples"][1]["id"] = raw["samples"][0]["id"]
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(raw))
    with pytest.raises(DatasetError, match="duplicate"):
        DatasetManifest.load(tmp_path)


def test_import_annotated(tmp_path):
    s = generate_phantom(PhantomConfig(seed=8, height=32, width=32, choroid_thickness_range=(8.0, 12.0)), 0)
    img16 = np.round(s.image.pixels * 65535).astype(np.uint16)
    import_annotated([("scan-a", img16, s.layers.labels, "test")], tmp_path)
    (loaded,) = list(read_dataset(tmp_path))
    assert loaded.id == "scan-a"
    assert np.array_equal(loaded.choroid.mask, s.choroid.mask)
    assert validate_sample(loaded) == []
