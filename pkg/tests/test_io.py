from dataclasses import dataclass
from typing import Optional

import numpy as np
import pytest

from sparsetof import checkpoint, quant
from sparsetof.config import ConfigError, build_dataclass, dump_kv, parse_kv
from sparsetof.data import DataError, directory_checksum, generate_dataset, load_dataset, mean_sparsity, val_indices
from sparsetof.model import ModelConfig, build, predict
from sparsetof.train import TrainConfig


@dataclass
class Cfg:
    a: int = 1
    b: float = 2.0
    c: Optional[int] = None
    flag: bool = False
    name: str = "x"


class TestConfig:
    def test_parse(self):
        assert parse_kv("# header\na = 3  # trailing\n\nname=foo\n") == {"a": "3", "name": "foo"}
        with pytest.raises(ConfigError):
            parse_kv("justtext")

    def test_build_and_roundtrip(self):
        c = build_dataclass(Cfg, {"a": "5", "c": "none", "flag": "true", "b": "1e-3"})
        assert (c.a, c.b, c.c, c.flag) == (5, 1e-3, None, True)
        assert build_dataclass(Cfg, parse_kv(dump_kv(c))) == c
        t = TrainConfig(regime="MP", act_bits=8.0, lr=3e-4)
        assert build_dataclass(TrainConfig, parse_kv(dump_kv(t))) == t

    def test_errors(self):
        with pytest.raises(ConfigError, match="unknown config keys: zz"):
            build_dataclass(Cfg, {"zz": "1"})
        with pytest.raises(ConfigError):
            build_dataclass(Cfg, {"a": "x"})
        with pytest.raises(ConfigError):
            build_dataclass(Cfg, {"flag": "maybe"})


class TestData:
    def test_layout_and_split(self, tiny_data):
        assert (tiny_data.width, tiny_data.height, len(tiny_data.samples)) == (64, 64, 10)
        assert len(tiny_data.split("test")) == 1 and len(tiny_data.split("train")) == 9
        s = tiny_data.samples[0]
        assert s.dgt.shape == (64, 64) and s.ngt.shape == s.color.shape == (3, 64, 64)
        valid = s.dsparse > 0
        np.testing.assert_array_equal(s.dsparse[valid], s.dgt[valid])
        assert mean_sparsity(tiny_data) == pytest.approx(100 * 40 / 4096, rel=0.15)

    def test_val_indices(self):
        assert len(val_indices(64, 1)) == 6
        assert val_indices(64, 1) == val_indices(64, 1) != val_indices(64, 2)
        assert len(val_indices(3, 0)) == 1 and val_indices(1, 0) == set()

    def test_checksum_deterministic(self, tmp_path):
        for name in ("a", "b"):
            generate_dataset(tmp_path / name, 3, 40, 32, 12, seed=9)
        assert directory_checksum(tmp_path / "a") == directory_checksum(tmp_path / "b")
        generate_dataset(tmp_path / "c", 3, 40, 32, 12, seed=10)
        assert directory_checksum(tmp_path / "a") != directory_checksum(tmp_path / "c")
        (tmp_path / "a" / "run_manifest.txt").write_text("[run]\n")
        assert directory_checksum(tmp_path / "a") == directory_checksum(tmp_path / "b")

    def test_bad_inputs(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(tmp_path, 1, 16, 64, 10, 0)
        with pytest.raises(ValueError):
            generate_dataset(tmp_path, 1, 64, 64, 0, 0)
        with pytest.raises(DataError, match="no dataset manifest"):
            load_dataset(tmp_path / "missing")
        generate_dataset(tmp_path / "d", 2, 32, 32, 8, 0)
        (tmp_path / "d" / "scene_000001" / "dgt.dtb").unlink()
        with pytest.raises(DataError, match="missing tensor"):
            load_dataset(tmp_path / "d")


def probe():
    return np.random.default_rng(0).uniform(0, 1, (1, 5, 16, 16)).astype(np.float32)


class TestCheckpoint:
    def test_float_roundtrip(self, tmp_path):
        net = build(ModelConfig(4, 3, zero_last=False), seed=5)
        checkpoint.save(net, tmp_path, meta={"regime": "float"})
        back = checkpoint.load(tmp_path)
        assert back.meta == {"regime": "float"} and not back.is_quantized
        assert predict(back, probe()).tobytes() == predict(net, probe()).tobytes()

    @pytest.mark.parametrize("mode", ["UP", "MP"])
    def test_quantized_roundtrip(self, tmp_path, mode):
        net = build(ModelConfig(4, 3, zero_last=False), seed=5)
        q = quant.attach(net, quant.QuantPlan(mode=mode, weight_bits=3, act_bits=6), calibration=probe())
        checkpoint.save(q, tmp_path)
        back = checkpoint.load(tmp_path)
        assert set(back.weight_quant) == set(q.weight_quant) and set(back.act_quant) == set(q.act_quant)
        assert all(back.weight_quant[k].bits() == q.weight_quant[k].bits() for k in q.weight_quant)
        assert predict(back, probe()).tobytes() == predict(q, probe()).tobytes()
        assert "b_w=3 b_a=6" in (tmp_path / "checkpoint.txt").read_text()

    def test_fixed_point_export(self, tmp_path):
        net = build(ModelConfig(4, 2, zero_last=False), seed=6)
        q = quant.attach(net, quant.QuantPlan(mode="MP", weight_bits=4))
        checkpoint.export_fixed_point(q, tmp_path)
        deq = checkpoint.load_fixed_point(tmp_path)
        assert set(deq) == set(q.weight_quant)
        for name, (w, b) in deq.items():
            wq = q.weight_quant[name]
            l = net.layer(name)
            np.testing.assert_array_equal(w, quant.quantize(l.weight.data, wq.d, wq.x_max))
            np.testing.assert_array_equal(b, quant.quantize(l.bias.data, wq.d, wq.x_max))
            assert np.unique(w).size <= 2 ** wq.bits()

    def test_corrupt(self, tmp_path):
        with pytest.raises(DataError):
            checkpoint.load(tmp_path)
        checkpoint.save(build(ModelConfig(4, 2)), tmp_path)
        (tmp_path / "enc1a.weight.dtb").write_bytes(b"DTB1")
        with pytest.raises(DataError):
            checkpoint.load(tmp_path)
