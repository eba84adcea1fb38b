import numpy as np
import pytest

import gated_scd.data as data_module
from gated_scd.data import (
    change_from_semantics,
    gen_synthetic_pair,
    list_sample_ids,
    load_dataset,
    load_pair,
    read_pgm,
    read_ppm,
    stack_batch,
    synthetic_dataset,
    write_pair,
    write_pgm,
    write_ppm,
)
from gated_scd.decoder import forward_model, init_params
from gated_scd.errors import DataError, FormatError, ParameterError, ShapeError
from gated_scd.storage import (
    CHECKPOINT_NAME,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_model,
)


class TestNetpbm:
    def test_pgm_payload(self, tmp_path):
        path = tmp_path / "m.pgm"
        write_pgm(np.array([[0, 1], [2, 255]]), path)
        assert path.read_bytes() == b"P5\n2 2\n255\n\x00\x01\x02\xff"

    def test_pgm_round_trip(self, tmp_path, rng):
        label_map = rng.integers(0, 256, size=(7, 5)).astype(np.uint8)
        write_pgm(label_map, tmp_path / "m.pgm")
        np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), label_map)

    def test_header_comment(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x03\x04")
        np.testing.assert_array_equal(read_pgm(path), [[3, 4]])

    def test_sixteen_bit_rejected(self, tmp_path):
        path = tmp_path / "wide.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError):
            read_pgm(path)

    def test_short_payload(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n2 2\n255\n\x00")
        with pytest.raises(FormatError):
            read_pgm(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "m.pgm"
        write_ppm(np.zeros((3, 1, 1)), path)
        with pytest.raises(FormatError):
            read_pgm(path)

    def test_ppm_rounding(self, tmp_path):
        path = tmp_path / "i.ppm"
        image = np.stack([np.full((1, 1), v) for v in (0.0, 0.5, 1.0)])
        write_ppm(image, path)
        assert path.read_bytes()[-3:] == b"\x00\x80\xff"

    def test_ppm_round_trip_within_quantization(self, tmp_path, rng):
        image = rng.uniform(size=(1, 3, 4, 6))
        write_ppm(image, tmp_path / "i.ppm")
        back = read_ppm(tmp_path / "i.ppm")
        assert back.shape == (1, 3, 4, 6)
        assert np.max(np.abs(back - image)) <= 0.5 / 255 + 1e-12


class TestSynthetic:
    def test_label_invariants(self):
        pair = gen_synthetic_pair(7, 64, 64, 4, 0.3)
        changed = pair.change_mask.astype(bool)
        assert not pair.sem_A[~changed].any()
        assert not pair.sem_B[~changed].any()
        assert np.all(pair.sem_A[changed] != pair.sem_B[changed])
        assert pair.sem_A.max() <= 4
        np.testing.assert_array_equal(change_from_semantics(pair.sem_A, pair.sem_B),
                                      pair.change_mask)

    def test_image_range_and_shape(self):
        pair = gen_synthetic_pair(1, 32, 64, 3)
        assert pair.image_A.shape == (1, 3, 32, 64)
        assert pair.image_A.min() >= 0.0
        assert pair.image_B.max() <= 1.0

    def test_deterministic(self):
        first = gen_synthetic_pair([4, 2])
        second = gen_synthetic_pair([4, 2])
        for name in ("image_A", "image_B", "sem_A", "sem_B", "change_mask"):
            np.testing.assert_array_equal(getattr(first, name), getattr(second, name))

    def test_change_fraction_tracks_rate(self):
        fractions = [gen_synthetic_pair(s, 64, 64, 4, 0.3).change_mask.mean() for s in range(10)]
        assert abs(np.mean(fractions) - 0.3) < 0.1

    @pytest.mark.parametrize("kwargs", [{"H": 48}, {"K": 1}, {"change_rate": 1.0}])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ParameterError):
            gen_synthetic_pair(0, **kwargs)

    def test_chunked_region_growth_matches(self, monkeypatch):
        whole = gen_synthetic_pair(3, 64, 64, 4)
        monkeypatch.setattr(data_module, "REGION_CHUNK_ELEMENTS", 100)
        chunked = gen_synthetic_pair(3, 64, 64, 4)
        for name in ("image_A", "image_B", "sem_A", "sem_B", "change_mask"):
            np.testing.assert_array_equal(getattr(whole, name), getattr(chunked, name))

    def test_large_scene(self):
        pair = gen_synthetic_pair(0, 256, 256, 4, 0.3)
        assert pair.sem_A.shape == (256, 256)
        assert abs(pair.change_mask.mean() - 0.3) < 0.1

    def test_dataset_ids(self):
        pairs = synthetic_dataset(3, 2, size=32)
        assert [p.sample_id for p in pairs] == ["pair_0000", "pair_0001"]

    def test_stack_batch(self):
        images_a, images_b, labels = stack_batch(synthetic_dataset(0, 3, size=32))
        assert images_a.shape == images_b.shape == (3, 3, 32, 32)
        assert labels.sem_A.shape == labels.change.shape == (3, 32, 32)


class TestDatasetDirectory:
    def test_write_and_load(self, tmp_path):
        pair = synthetic_dataset(0, 1, size=32)[0]
        paths = write_pair(pair, tmp_path)
        assert sorted(p.name for p in paths) == sorted(
            f"pair_0000_{s}" for s in ("imA.ppm", "imB.ppm", "semA.pgm", "semB.pgm", "change.pgm")
        )
        loaded = load_pair(tmp_path, "pair_0000")
        np.testing.assert_array_equal(loaded.sem_A, pair.sem_A)
        np.testing.assert_array_equal(loaded.change_mask, pair.change_mask)
        assert list_sample_ids(tmp_path) == ["pair_0000"]

    def test_missing_file_named(self, tmp_path):
        pair = synthetic_dataset(0, 1, size=32)[0]
        write_pair(pair, tmp_path)
        (tmp_path / "pair_0000_imB.ppm").unlink()
        with pytest.raises(DataError, match="imB.ppm"):
            load_pair(tmp_path, "pair_0000")

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        params = {"a.weight": rng.normal(size=(2, 3, 3, 3)), "a.bias": np.zeros((1, 2, 1, 1))}
        save_checkpoint(params, tmp_path / "c.scd")
        loaded = load_checkpoint(tmp_path / "c.scd")
        assert list(loaded) == list(params)
        for name in params:
            np.testing.assert_array_equal(loaded[name], params[name])

    def test_header_layout(self, tmp_path):
        save_checkpoint({"x": np.ones((1, 1, 1, 1))}, tmp_path / "c.scd")
        raw = (tmp_path / "c.scd").read_bytes()
        assert raw[:4] == b"SCD1"
        assert len(raw) == 4 + 4 + 4 + 4 + 1 + 16 + 8

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.scd").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "c.scd")

    def test_truncated(self, tmp_path, rng):
        save_checkpoint({"x": rng.normal(size=(1, 2, 2, 2))}, tmp_path / "c.scd")
        raw = (tmp_path / "c.scd").read_bytes()
        (tmp_path / "c.scd").write_bytes(raw[:-3])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(tmp_path / "c.scd")

    def test_trailing_bytes(self, tmp_path):
        save_checkpoint({"x": np.ones((1, 1, 1, 1))}, tmp_path / "c.scd")
        with open(tmp_path / "c.scd", "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(tmp_path / "c.scd")

    def test_rank_enforced(self, tmp_path):
        with pytest.raises(ShapeError):
            save_checkpoint({"x": np.ones((2, 2))}, tmp_path / "c.scd")

    def test_model_round_trip_predictions(self, tmp_path, rng, tiny_config):
        params = init_params(tiny_config, rng)
        save_model(params, tiny_config, tmp_path)
        loaded, config = load_model(tmp_path / CHECKPOINT_NAME)
        assert config == tiny_config
        image_a, image_b = rng.uniform(size=(2, 1, 3, 32, 32))
        _, before = forward_model(params, image_a, image_b, tiny_config)
        _, after = forward_model(loaded, image_a, image_b, config)
        np.testing.assert_array_equal(before.change_logit.value, after.change_logit.value)
        np.testing.assert_array_equal(before.sem_logits_A.value, after.sem_logits_A.value)
