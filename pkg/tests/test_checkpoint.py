import json
import struct

import numpy as np
import pytest

from emofuse import checkpoint as ckp
from emofuse import nn
from emofuse.errors import ConfigError, FormatError
from emofuse.model import FusionModel

from test_model import micro_cfg, micro_inputs


class TestKeyMapping:
    def test_nested_path(self):
        assert ckp.tensor_key("fuse_pm.merge.weight") == "blocks/fuse_pm.merge/weight"
        assert ckp.param_path("blocks/fuse_pm.merge/weight") == "fuse_pm.merge.weight"

    def test_root_level_param(self):
        assert ckp.tensor_key("prosody_token") == "blocks/model/prosody_token"
        assert ckp.param_path("blocks/model/prosody_token") == "prosody_token"

    def test_malformed_key(self):
        with pytest.raises(FormatError):
            ckp.param_path("weights/foo")

    def test_roundtrip_over_model_paths(self, rng):
        model = FusionModel(micro_cfg(use_prosody=False), rng)
        for path in model.named_parameters():
            assert ckp.param_path(ckp.tensor_key(path)) == path


class TestFileFormat:
    def test_bytes_match_layout_oracle(self, rng, tmp_path):
        lin = nn.Linear(3, 2, rng)
        path = tmp_path / "lin.ckp"
        ckp.save_checkpoint(path, lin, {"d_in": 3})
        buf = path.read_bytes()
        assert buf[:4] == b"CKP1"
        (count,) = struct.unpack_from("<I", buf, 4)
        assert count == 2
        off = 8
        seen = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + name_len].decode()
            off += name_len
            rank = buf[off]
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            seen[name] = np.frombuffer(buf, "<f4", n, off).reshape(shape)
            off += 4 * n
        assert json.loads(buf[off:]) == {"d_in": 3}
        np.testing.assert_array_equal(seen["blocks/model/weight"], lin.weight.data.astype(np.float32))
        np.testing.assert_array_equal(seen["blocks/model/bias"], lin.bias.data.astype(np.float32))

    def test_two_saves_identical_bytes(self, rng, tmp_path):
        model = FusionModel(micro_cfg(), rng)
        a, b = tmp_path / "a.ckp", tmp_path / "b.ckp"
        ckp.save_checkpoint(a, model, {"k": 1})
        ckp.save_checkpoint(b, model, {"k": 1})
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckp"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FormatError):
            ckp.load_checkpoint(path)

    def test_truncated_payload(self, rng, tmp_path):
        lin = nn.Linear(3, 2, rng)
        path = tmp_path / "lin.ckp"
        ckp.save_checkpoint(path, lin)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(FormatError):
            ckp.load_checkpoint(path)

    def test_bad_config_blob(self, rng, tmp_path):
        lin = nn.Linear(2, 2, rng)
        path = tmp_path / "lin.ckp"
        ckp.save_checkpoint(path, lin)
        with open(path, "ab") as fh:
            fh.write(b"{not json")
        with pytest.raises(FormatError):
            ckp.load_checkpoint(path)


class TestRestore:
    def test_model_roundtrip_matches_float32(self, rng, tmp_path):
        cfg = micro_cfg()
        model = FusionModel(cfg, np.random.default_rng(1))
        path = tmp_path / "m.ckp"
        ckp.save_checkpoint(path, model, cfg.to_dict())
        tensors, config = ckp.load_checkpoint(path)
        assert config == json.loads(json.dumps(cfg.to_dict()))
        clone = FusionModel(cfg, np.random.default_rng(99))
        restored = ckp.restore_module(clone, tensors)
        assert set(restored) == set(model.named_parameters())
        for path_name, p in model.named_parameters().items():
            np.testing.assert_array_equal(
                clone.named_parameters()[path_name].data,
                p.data.astype(np.float32).astype(np.float64),
            )

    def test_restored_model_predicts_like_source(self, rng, tmp_path):
        cfg = micro_cfg()
        model = FusionModel(cfg, np.random.default_rng(1)).eval()
        path = tmp_path / "m.ckp"
        ckp.save_checkpoint(path, model)
        clone = FusionModel(cfg, np.random.default_rng(2)).eval()
        ckp.restore_module(clone, ckp.load_checkpoint(path)[0])
        p, m, e = micro_inputs(rng)
        np.testing.assert_allclose(model.embed(p, m, e).data, clone.embed(p, m, e).data, atol=1e-5)

    def test_shape_mismatch_names_tensor(self, rng, tmp_path):
        lin = nn.Linear(3, 2, rng)
        path = tmp_path / "lin.ckp"
        ckp.save_checkpoint(path, lin)
        bigger = nn.Linear(4, 2, rng)
        with pytest.raises(ConfigError) as err:
            ckp.restore_module(bigger, ckp.load_checkpoint(path)[0])
        assert "blocks/model/weight" in str(err.value)

    def test_missing_tensor_strict_vs_lenient(self, rng, tmp_path):
        lin = nn.Linear(3, 2, rng)
        path = tmp_path / "lin.ckp"
        ckp.save_checkpoint(path, lin)
        tensors, _ = ckp.load_checkpoint(path)
        del tensors["blocks/model/bias"]
        with pytest.raises(ConfigError):
            ckp.restore_module(nn.Linear(3, 2, rng), tensors)
        restored = ckp.restore_module(nn.Linear(3, 2, rng), tensors, strict=False)
        assert restored == ["weight"]

    def test_rank_zero_tensor(self, rng, tmp_path):
        class Scalar(nn.Module):
            def __init__(self):
                super().__init__()
                self.gain = self.param("gain", np.float64(2.5))

        holder = Scalar()
        path = tmp_path / "s.ckp"
        ckp.save_checkpoint(path, holder)
        tensors, _ = ckp.load_checkpoint(path)
        assert tensors["blocks/model/gain"].shape == ()
        assert tensors["blocks/model/gain"] == 2.5
