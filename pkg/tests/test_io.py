"""Dataset and checkpoint round trips, validation order, error reporting."""

import json

import numpy as np
import pytest

from protocast.config import Config, config_from_text, config_to_text
from protocast.dataio import (
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from protocast.errors import ValidationError
from protocast.model import Model
from protocast.preprocess import EntitySeries
from protocast.synthetic import CorpusSpec, generate_corpus


def tiny_cfg(**kw):
    base = dict(d_model=8, patch_len=8, time_layers=1, latent_layers=1,
                heads=2, prototypes=2, l_min=16, l_cap=32, t_max=8,
                m_max=2, variate_budget=4, seed=0)
    base.update(kw)
    return Config(**base)


class TestConfigText:
    def test_round_trip(self):
        cfg = tiny_cfg(alpha=0.25, quantiles=(0.2, 0.5, 0.8), use_ffn=True,
                       freeze=("head",))
        back = config_from_text(config_to_text(cfg))
        assert config_to_text(back) == config_to_text(cfg)
        assert back.quantiles == (0.2, 0.5, 0.8)
        assert back.use_ffn is True
        assert back.freeze == ("head",)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown key"):
            config_from_text("nonsense = 4\n")

    def test_comments_and_blanks_ignored(self):
        cfg = config_from_text("# comment\n\nd_model = 16  # inline\n")
        assert cfg.d_model == 16


class TestDataset:
    def test_write_read_round_trip_bit_exact(self, tmp_path):
        spec = CorpusSpec(length=64, kernelsynth=1, leadlag=1)
        written = generate_corpus(spec, seed=3, out_dir=tmp_path)
        loaded = load_dataset(tmp_path)
        assert [e.entity_id for e in loaded] == [e.entity_id for e in written]
        for a, b in zip(written, loaded):
            assert np.array_equal(a.values, b.values)

    def test_empty_field_is_missing(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({
            "format_version": 1,
            "entities": [{"id": "x", "path": "x.csv", "variates": 3,
                          "length": 1, "frequency": ""}],
        }))
        (tmp_path / "x.csv").write_text("t,var_0,var_1,var_2\n0,1.5,,3.0\n")
        (entity,) = load_dataset(tmp_path)
        assert entity.values[0, 0] == 1.5
        assert np.isnan(entity.values[1, 0])
        assert entity.values[2, 0] == 3.0

    def test_dimension_mismatch_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({
            "format_version": 1,
            "entities": [{"id": "x", "path": "x.csv", "variates": 3,
                          "length": 1, "frequency": ""}],
        }))
        (tmp_path / "x.csv").write_text("t,var_0,var_1\n0,1.0,2.0\n")
        with pytest.raises(ValidationError, match="declares 3 variates"):
            load_dataset(tmp_path)

    def test_unparseable_value_itemized(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({
            "format_version": 1,
            "entities": [{"id": "x", "path": "x.csv", "variates": 1,
                          "length": 2, "frequency": ""}],
        }))
        (tmp_path / "x.csv").write_text("t,var_0\n0,1.0\n1,banana\n")
        with pytest.raises(ValidationError, match="banana"):
            load_dataset(tmp_path)

    def test_missing_file_reported(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({
            "format_version": 1,
            "entities": [{"id": "x", "path": "gone.csv", "variates": 1,
                          "length": 2, "frequency": ""}],
        }))
        with pytest.raises(ValidationError, match="gone.csv"):
            load_dataset(tmp_path)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model = Model(tiny_cfg(), seed=5)
        path = tmp_path / "m.flcx"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.params.names() == model.params.names()
        for p in model.params:
            q = loaded.params.get(p.name)
            assert np.array_equal(p.value.data, q.value.data)
        assert config_to_text(loaded.cfg) == config_to_text(model.cfg)

    def test_save_is_deterministic(self, tmp_path):
        model = Model(tiny_cfg(), seed=6)
        save_checkpoint(model, tmp_path / "a.flcx")
        save_checkpoint(model, tmp_path / "b.flcx")
        assert (tmp_path / "a.flcx").read_bytes() == (tmp_path / "b.flcx").read_bytes()

    def test_truncation_names_expected_length(self, tmp_path):
        model = Model(tiny_cfg(), seed=7)
        path = tmp_path / "m.flcx"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 100])
        with pytest.raises(ValidationError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.flcx"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValidationError, match="magic"):
            load_checkpoint(path)

    def test_config_mismatch_rejected_before_tensor_read(self, tmp_path):
        model = Model(tiny_cfg(d_model=8), seed=8)
        path = tmp_path / "m.flcx"
        save_checkpoint(model, path)
        # expecting a different width must fail on the config comparison...
        with pytest.raises(ValidationError, match="d_model"):
            load_checkpoint(path, expect=tiny_cfg(d_model=16))
        # ...even when every tensor payload is unreadable garbage
        blob = bytearray(path.read_bytes())
        blob[-50:] = b"\xff" * 50
        truncated = tmp_path / "garbage.flcx"
        truncated.write_bytes(bytes(blob[:len(blob) // 2]))
        with pytest.raises(ValidationError, match="d_model"):
            load_checkpoint(truncated, expect=tiny_cfg(d_model=16))

    def test_trailing_garbage_rejected(self, tmp_path):
        model = Model(tiny_cfg(), seed=9)
        path = tmp_path / "m.flcx"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(ValidationError, match="trailing"):
            load_checkpoint(path)

    def test_mutated_tensor_name_rejected_with_offset(self, tmp_path):
        model = Model(tiny_cfg(), seed=10)
        path = tmp_path / "m.flcx"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        pos = blob.find(b"gate.w")
        blob[pos:pos + 6] = b"fake.w"
        path.write_bytes(bytes(blob))
        with pytest.raises(ValidationError, match="offset"):
            load_checkpoint(path)
