"""Architecture assembly: configs, presets, forward/backward, padding, save/load."""

import json

import numpy as np
import pytest

from revunet.rng import rng_for
from revunet.tensor import ShapeError
from revunet.unet import (
    PRESETS,
    TOY_ANALOG,
    Model,
    UNetConfig,
    build,
    crop_to_record,
    pad_to_grid,
    resolve_config,
)


def _toy():
    return UNetConfig(widths=(4, 8), image_size=(8, 8, 8),
                      block_kind="mbconv", expand_ratio=2)


class TestConfig:
    def test_validate_accepts_presets(self):
        for name, cfg in PRESETS.items():
            cfg.validate()

    def test_levels_and_grid(self):
        cfg = PRESETS["mbconv-base"]
        assert cfg.levels == 5
        assert cfg.grid == 16

    @pytest.mark.parametrize("kwargs", [
        dict(widths=(5, 8)),                       # odd width
        dict(widths=(8, 4)),                       # not strictly increasing
        dict(widths=(8,)),                         # fewer than 2 levels
        dict(widths=(4, 8), image_size=(9, 8, 8)),  # not divisible by grid
        dict(widths=(4, 8), block_kind="magic"),
        dict(widths=(4, 8), block_kind="mbconv", expand_ratio=None),
        dict(widths=(4, 8), block_kind="mbconv", expand_ratio=0),
        dict(widths=(4, 8), block_kind="standard", expand_ratio=2),
    ])
    def test_validate_rejects(self, kwargs):
        kwargs.setdefault("image_size", (8, 8, 8))
        kwargs.setdefault("block_kind", "mbconv")
        if kwargs["block_kind"] == "mbconv":
            kwargs.setdefault("expand_ratio", 2)
        with pytest.raises(ValueError):
            UNetConfig(**kwargs).validate()

    def test_dict_roundtrip(self):
        cfg = _toy()
        assert UNetConfig.from_dict(cfg.to_dict()) == cfg

    def test_resolve_config(self, tmp_path):
        assert resolve_config("mbconv-base") is PRESETS["mbconv-base"]
        cfg = _toy()
        assert resolve_config(cfg) is cfg
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert resolve_config(str(path)) == cfg
        with pytest.raises(ValueError):
            resolve_config("no-such-preset")

    def test_toy_analog_covers_desk_presets(self):
        desk = {n for n in PRESETS if not n.endswith("-toy")}
        assert set(TOY_ANALOG) == desk
        for toy in TOY_ANALOG.values():
            assert max(PRESETS[toy].widths) <= 16
            assert max(PRESETS[toy].image_size) <= 16


class TestModel:
    def test_forward_shape(self):
        model = build(_toy(), seed=0)
        x = rng_for(0, "x").standard_normal((1, 4, 8, 8, 8))
        assert model.forward(x, None).shape == (1, 4, 8, 8, 8)

    def test_build_deterministic(self):
        a = build(_toy(), seed=5)
        b = build(_toy(), seed=5)
        c = build(_toy(), seed=6)
        names = [n for n, _, _, _ in a.parameters()]
        assert names == [n for n, _, _, _ in b.parameters()]
        for (_, _, _, pa), (_, _, _, pb) in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa, pb)
        assert any(not np.array_equal(pa, pc) for (_, _, _, pa), (_, _, _, pc)
                   in zip(a.parameters(), c.parameters()))

    def test_uninitialized_model_maps_to_zero(self):
        model = Model(_toy(), precision="double")
        x = rng_for(0, "x0").standard_normal((1, 4, 8, 8, 8))
        assert np.array_equal(model.forward(x, None), np.zeros((1, 4, 8, 8, 8)))

    def test_forward_identical_across_strategies(self):
        model = build(_toy(), seed=1)
        x = rng_for(1, "x").standard_normal((1, 4, 8, 8, 8))
        model.set_strategy("store-all")
        a = model.forward(x, None)
        model.set_strategy("reversible")
        b = model.forward(x, None)
        assert np.array_equal(a, b)

    def test_input_validation(self):
        model = build(_toy(), seed=0)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((2, 4, 8, 8, 8)), None)  # batch != 1
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 3, 8, 8, 8)), None)  # wrong channels
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 4, 7, 8, 8)), None)  # not grid-divisible
        with pytest.raises(ValueError):
            model.forward(np.zeros((1, 4, 8, 8, 8), dtype=np.float32), None)

    def test_parameter_names_unique_and_structured(self):
        model = build(PRESETS["mbconv-base-toy"], seed=0)
        names = [n for n, _, _, _ in model.parameters()]
        assert len(names) == len(set(names))
        assert "enc0.raise.w" in names
        assert "enc0.rev.f.expand.w" in names
        assert "dec0.conv.w" in names
        assert "head.b" in names

    def test_backward_accumulates_on_every_parameter(self):
        model = build(_toy(), seed=2)
        from revunet.engine import Tape
        x = rng_for(2, "x").standard_normal((1, 4, 8, 8, 8))
        tape = Tape(None)
        model.forward(x, tape)
        model.zero_grads()
        model.backward(rng_for(2, "dy").standard_normal((1, 4, 8, 8, 8)), tape)
        for name, leaf, attr, _ in model.parameters():
            assert np.any(leaf.grads[attr] != 0), name


class TestPadding:
    def test_native_scan_size_pads_to_grid(self):
        vol = np.zeros((1, 4, 240, 240, 155), dtype=np.float32)
        padded, record = pad_to_grid(vol, levels=5)
        assert padded.shape == (1, 4, 240, 240, 160)  # 240 = 15*16 stays
        assert record["pad"] == [[0, 0], [0, 0], [2, 3]]  # extra voxel goes high

    def test_roundtrip_restores_exactly(self):
        vol = rng_for(0, "pad").standard_normal((1, 2, 5, 9, 12)).astype(np.float32)
        padded, record = pad_to_grid(vol, levels=3)
        assert all(s % 4 == 0 for s in padded.shape[2:])
        assert np.array_equal(crop_to_record(padded, record), vol)

    def test_padding_is_zero(self):
        vol = np.ones((1, 1, 3, 4, 4), dtype=np.float32)
        padded, _ = pad_to_grid(vol, levels=3)
        assert padded.sum() == vol.sum()

    def test_already_aligned_unchanged(self):
        vol = np.ones((1, 1, 8, 8, 8), dtype=np.float32)
        padded, record = pad_to_grid(vol, levels=2)
        assert padded.shape == vol.shape
        assert record["pad"] == [[0, 0], [0, 0], [0, 0]]


class TestSaveLoad:
    def test_roundtrip(self, tmp_path):
        model = build(_toy(), seed=7, precision="single")
        model.save(tmp_path / "m")
        back = Model.load(tmp_path / "m")
        assert back.config == model.config
        assert back.precision == "single"
        for (na, _, _, pa), (nb, _, _, pb) in zip(model.parameters(), back.parameters()):
            assert na == nb
            assert np.array_equal(pa, pb)
        x = rng_for(7, "x").standard_normal((1, 4, 8, 8, 8)).astype(np.float32)
        assert np.array_equal(model.forward(x, None), back.forward(x, None))

    def test_missing_parameter_rejected(self, tmp_path):
        model = build(_toy(), seed=0)
        model.save(tmp_path / "m")
        manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
        manifest["params"] = manifest["params"][1:]
        (tmp_path / "m" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError):
            Model.load(tmp_path / "m")

    def test_unknown_parameter_rejected(self, tmp_path):
        model = build(_toy(), seed=0)
        model.save(tmp_path / "m")
        manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
        extra = dict(manifest["params"][0])
        extra["name"] = "ghost.w"
        manifest["params"].append(extra)
        (tmp_path / "m" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError):
            Model.load(tmp_path / "m")
