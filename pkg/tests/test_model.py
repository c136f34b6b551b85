import dataclasses
import json

import numpy as np
import pytest

from modiqa import PRESETS, DiffNetConfig, ModelConfig, QualityModel, ViTConfig
from modiqa.encoder import ConfigError
from modiqa.model import CheckpointError, read_checkpoint


def closed_form_counts(cfg: ModelConfig):
    v, d = cfg.vit, cfg.diffnet
    D = v.hidden_size
    lin = lambda a, b: a * b + b  # noqa: E731
    layer = 2 * 2 * D + 4 * lin(D, D) + lin(D, v.mlp_ratio * D) + lin(v.mlp_ratio * D, D)
    positional = D + v.pos_grid**2 * D
    encoder = lin(v.patch_dim, D) + positional + v.num_layers * layer + 2 * D
    rcab = lin(D, D) + lin(D, D // d.reduction) + lin(D // d.reduction, D)
    diffnet = d.n_rg * (d.n_rcab * rcab + lin(D, D))
    widths = [D, *d.widths_for(D), 1]
    head = sum(lin(a, b) for a, b in zip(widths[:-1], widths[1:]))
    return {"encoder": encoder, "positional": positional, "diffnet": diffnet, "head": head,
            "total": encoder + diffnet + head}


class TestCounts:
    @pytest.mark.parametrize("preset", ["tiny", "toy"])
    def test_closed_form(self, preset):
        assert QualityModel(PRESETS[preset]).parameter_counts() == closed_form_counts(PRESETS[preset])

    def test_tiny_by_hand(self):
        counts = QualityModel(PRESETS["tiny"]).parameter_counts()
        # patch embed 48*16+16, positions 16+16*16, one layer 2224, final norm 32
        assert counts["encoder"] == 784 + 272 + 2224 + 32
        assert counts["diffnet"] == 272 + 68 + 80 + 272
        assert counts["head"] == 136 + 36 + 5

    def test_base_closed_form(self):
        counts = closed_form_counts(PRESETS["base-16-6-4-4"])
        assert counts["encoder"] == 43_270_656
        assert counts["total"] == 56_644_609

    def test_empty_diffnet(self):
        cfg = ModelConfig(PRESETS["tiny"].vit, DiffNetConfig(n_rg=0))
        counts = QualityModel(cfg).parameter_counts()
        assert counts["diffnet"] == 0 and counts["total"] == counts["encoder"] + counts["head"]

    def test_same_seed_same_weights(self):
        a, b = QualityModel(PRESETS["tiny"]), QualityModel(PRESETS["tiny"])
        for (na, pa), (nb, pb) in zip(a.store.items(), b.store.items()):
            assert na == nb and np.array_equal(pa.data, pb.data)


class TestForward:
    def test_identical_pair_constant(self, tiny_model, rng):
        outs = set()
        for _ in range(5):
            img = rng.standard_normal((12, 12, 3))
            outs.add(tiny_model.predict_pair(img, img.copy(), 6, rng))
        assert len(outs) == 1

    def test_sampler_patch_size_must_match(self, tiny_model, rng):
        from modiqa import SamplerConfig

        img = rng.standard_normal((12, 12, 3))
        with pytest.raises(ConfigError):
            tiny_model.predict_pair(img, img, 4, rng, SamplerConfig(patch_size=8))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(ViTConfig(4, 18, 1, 2, 2, 4), DiffNetConfig(1, 1, 4))
        with pytest.raises(ConfigError):
            ModelConfig(dtype="float16")
        with pytest.raises(ConfigError):
            ViTConfig(hidden_size=10, num_heads=4)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = QualityModel(dataclasses.replace(PRESETS["tiny"], seed=3))
        for p in model.store:
            p.data[...] = rng.standard_normal(p.shape)
        model.save(tmp_path / "m.npz", {"note": "x"})
        loaded, header = QualityModel.from_checkpoint(tmp_path / "m.npz")
        assert header["extra"] == {"note": "x"}
        assert loaded.config == model.config
        for (_, a), (_, b) in zip(model.store.items(), loaded.store.items()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_little_endian_arrays(self, tmp_path, tiny_model):
        tiny_model.save(tmp_path / "m.npz")
        _, state = read_checkpoint(tmp_path / "m.npz")
        assert all(v.dtype == v.dtype.newbyteorder("<") for v in state.values())

    def test_load_state_rejects_other_config(self, tmp_path, tiny_model):
        tiny_model.save(tmp_path / "m.npz")
        other = QualityModel(dataclasses.replace(PRESETS["tiny"], diffnet=DiffNetConfig(2, 1, 4)))
        with pytest.raises(CheckpointError):
            other.load_state(tmp_path / "m.npz")

    def test_shape_mismatch(self, tmp_path, tiny_model):
        tiny_model.save(tmp_path / "m.npz")
        with np.load(tmp_path / "m.npz") as npz:
            arrays = dict(npz)
        arrays["param/head.head.layers.0.weight"] = np.zeros((3, 3))
        np.savez(tmp_path / "bad.npz", **arrays)
        with pytest.raises(CheckpointError, match="shape"):
            QualityModel.from_checkpoint(tmp_path / "bad.npz")

    def test_missing_parameter(self, tmp_path, tiny_model):
        tiny_model.save(tmp_path / "m.npz")
        with np.load(tmp_path / "m.npz") as npz:
            arrays = {k: v for k, v in npz.items() if k != "param/encoder.norm.gamma"}
        np.savez(tmp_path / "bad.npz", **arrays)
        with pytest.raises(CheckpointError, match="missing"):
            QualityModel.from_checkpoint(tmp_path / "bad.npz")

    def test_truncated_file(self, tmp_path, tiny_model):
        tiny_model.save(tmp_path / "m.npz")
        data = (tmp_path / "m.npz").read_bytes()
        (tmp_path / "cut.npz").write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            QualityModel.from_checkpoint(tmp_path / "cut.npz")

    def test_missing_header(self, tmp_path):
        np.savez(tmp_path / "x.npz", a=np.zeros(2))
        with pytest.raises(CheckpointError, match="header"):
            read_checkpoint(tmp_path / "x.npz")

    def test_wrong_format_tag(self, tmp_path):
        header = np.frombuffer(json.dumps({"format": "other", "model": {}}).encode(), dtype=np.uint8)
        np.savez(tmp_path / "x.npz", __header__=header)
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "x.npz")

    def test_not_a_zip(self, tmp_path):
        (tmp_path / "x.npz").write_bytes(b"garbage")
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "x.npz")
