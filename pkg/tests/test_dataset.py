import filecmp
import json

import numpy as np
import pytest

from softproprio.dataset import (
    DatasetError,
    Manifest,
    RenderConfig,
    config_hash,
    generate_dataset,
    load_arrays,
    read_sample,
    split,
)
from softproprio.formats import FormatError
from softproprio.simulator import ActuatorSpec, ScenarioConfig

TINY = ScenarioConfig(n_scenarios=3, frames_per_scenario=2, p_contact=0.5)
RENDER = RenderConfig(image_size=32, cloud_points=64)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return generate_dataset(ActuatorSpec(), TINY, RENDER, "P2", 5, out), out


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    assert not mismatch and not errors
    for sub in cmp.common_dirs:
        _same_tree(a / sub, b / sub)


class TestGenerate:
    def test_layout(self, tiny):
        manifest, out = tiny
        assert len(manifest) == 6
        assert (out / "manifest.json").is_file()
        assert sorted(p.name for p in (out / "images").iterdir())[0] == "000000.pgm"
        assert len(list((out / "clouds").iterdir())) == 6
        assert [s["scenario_id"] for s in manifest.scenarios] == [0, 1, 2]

    def test_byte_identical(self, tiny, tmp_path):
        _, out = tiny
        generate_dataset(ActuatorSpec(), TINY, RENDER, "P2", 5, tmp_path)
        _same_tree(out, tmp_path)

    def test_parallel_matches_serial(self, tiny, tmp_path):
        _, out = tiny
        generate_dataset(ActuatorSpec(), TINY, RENDER, "P2", 5, tmp_path, jobs=2)
        _same_tree(out, tmp_path)

    def test_seed_changes_data(self, tiny, tmp_path):
        manifest, _ = tiny
        other = generate_dataset(ActuatorSpec(), TINY, RENDER, "P2", 6, tmp_path)
        assert other.config_hash != manifest.config_hash

    def test_hash_covers_every_input(self):
        base = config_hash(ActuatorSpec(), TINY, RENDER, "P2", 0)
        assert config_hash(ActuatorSpec(), TINY, RENDER, "P1", 0) != base
        assert config_hash(ActuatorSpec(youngs_modulus=2.0), TINY, RENDER, "P2", 0) != base
        assert config_hash(ActuatorSpec(), TINY, RenderConfig(image_size=64, cloud_points=64), "P2", 0) != base
        assert config_hash(ActuatorSpec(), TINY, RENDER, "P2", 0) == base

    def test_read_sample(self, tiny):
        manifest, _ = tiny
        image, cloud, load = read_sample(manifest, 3)
        assert image.pixels.shape == (32, 32)
        assert cloud.points.shape == (64, 3) and cloud.frame_id == 3
        assert load == manifest.sample(3).load

    def test_load_arrays(self, tiny):
        manifest, _ = tiny
        x, y = load_arrays(manifest, [0, 1, 2])
        assert x.shape == (3, 32, 32) and x.dtype == np.uint8
        assert set(np.unique(x)) <= {0, 1}
        assert y.shape == (3, 64, 3)


class TestManifest:
    def test_round_trip(self, tiny):
        manifest, out = tiny
        back = Manifest.load(out)
        assert back == manifest
        assert back.root == out

    def test_unknown_frame(self, tiny):
        manifest, _ = tiny
        with pytest.raises(DatasetError, match="frame 99"):
            manifest.sample(99)

    def test_duplicate_ids(self, tiny):
        manifest, _ = tiny
        with pytest.raises(DatasetError):
            Manifest("h", "P2", 0, [], manifest.samples + manifest.samples[:1])

    def test_invalid_json(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DatasetError, match="invalid manifest"):
            Manifest.load(tmp_path)

    def test_missing_file(self, tiny, tmp_path):
        manifest, out = tiny
        d = json.loads((out / "manifest.json").read_text())
        (tmp_path / "manifest.json").write_text(json.dumps(d))
        with pytest.raises(DatasetError, match="file not found"):
            read_sample(Manifest.load(tmp_path), 0)

    def test_corrupt_image(self, tiny, tmp_path):
        import shutil

        _, out = tiny
        shutil.copytree(out, tmp_path / "c")
        (tmp_path / "c" / "images" / "000000.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(FormatError, match="P5"):
            read_sample(Manifest.load(tmp_path / "c"), 0)


class TestSplit:
    @pytest.mark.parametrize("n,train,val", [(6919, 5535, 1384), (10, 8, 2), (1000, 800, 200)])
    def test_sizes(self, n, train, val):
        tr, va = split(list(range(n)), 0.8, 0)
        assert (len(tr), len(va)) == (train, val)

    def test_half(self):
        tr, va = split(list(range(10)), 0.5, 3)
        assert len(tr) == len(va) == 5

    def test_disjoint_cover_deterministic(self):
        ids = list(range(50))
        tr, va = split(ids, 0.7, 11)
        assert sorted(tr + va) == ids
        assert split(ids, 0.7, 11) == (tr, va)
        assert split(ids, 0.7, 12) != (tr, va)

    def test_bad_fraction(self):
        with pytest.raises(DatasetError):
            split([1, 2, 3], 1.0)
