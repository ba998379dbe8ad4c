import json
import struct

import numpy as np
import pytest

from splitsr import numerics as nx
from splitsr.cost import model_cost
from splitsr.model import SplitSR, load_checkpoint, preset, read_checkpoint, save_checkpoint
from splitsr.numerics import Tensor

# as-built sizes of the degradation and split predictors
D_PARAMS = (3 * 64 * 9 + 64) + (64 * 33 * 9 + 33) + (33 * 33 * 9 + 33) + (33 * 33 + 33)
A_PARAMS_DESK = (33 * 25 + 25) + (25 * 2 + 2)


@pytest.fixture(scope="module")
def desk():
    return SplitSR(preset("desk"), seed=0)


@pytest.fixture
def lr_batch(rng):
    return rng.random((2, 3, 12, 10))


class TestPresets:
    def test_unknown(self):
        with pytest.raises(ValueError):
            preset("edsr")

    def test_overrides(self):
        assert preset("desk", channels=16, blocks=4).channels == 16

    @pytest.mark.parametrize("scale", [5, 1])
    def test_bad_scale(self, scale):
        with pytest.raises(ValueError):
            preset("desk", scale=scale)

    def test_parameter_audit(self):
        m = SplitSR(preset("desk"))
        assert m.num_params("d.") == D_PARAMS == 31_789
        assert m.num_params("a.") == A_PARAMS_DESK
        assert m.num_params() == model_cost(m.config, (24, 24)).params

    def test_full_scale_counts(self):
        assert SplitSR(preset("srresnet")).num_params() == 1_517_571
        dcs = SplitSR(preset("dcs"))
        assert dcs.num_params("sr.") == 1_517_571
        assert dcs.num_params() == 1_517_571 + D_PARAMS + (33 * 25 + 25) + (25 * 16 + 16)


class TestPredictors:
    def test_degradation_shape_and_determinism(self, desk, lr_batch):
        a = desk.predict_degradation(lr_batch).data
        assert a.shape == (2, 33) and np.all(np.isfinite(a))
        assert np.array_equal(a, desk.predict_degradation(lr_batch).data)

    def test_identical_images_identical_rows(self, desk, rng):
        x = rng.random((1, 3, 9, 11))
        u = desk.predict_degradation(np.concatenate([x, x])).data
        assert np.array_equal(u[0], u[1])

    def test_zero_weights_give_half(self):
        m = SplitSR(preset("desk"))
        for n in ("a.fc0.weight", "a.fc0.bias", "a.fc1.weight", "a.fc1.bias"):
            m[n].data[...] = 0
        assert np.all(m.predict_split(np.random.default_rng(0).random((3, 33))).data == 0.5)

    def test_split_bounded(self, desk, rng):
        a = desk.predict_split(rng.standard_normal((4, 33)) * 10).data
        assert a.shape == (4, 2) and np.all((a > 0) & (a < 1))

    def test_full_scale_block_count(self):
        m = SplitSR(preset("dcs"))
        assert m.predict_split(np.zeros((1, 33))).shape == (1, 16)

    def test_missing_predictors(self):
        with pytest.raises(RuntimeError):
            SplitSR(preset("srresnet", channels=4, blocks=1)).predict_degradation(np.zeros((1, 3, 4, 4)))


class TestSuperResolve:
    def test_shape_x2(self, desk, rng):
        assert desk.super_resolve(rng.random((1, 3, 16, 16)), 0.5).shape == (1, 3, 32, 32)

    @pytest.mark.parametrize("scale", [2, 3, 4])
    @pytest.mark.parametrize("hw", [(6, 8), (7, 5)])
    def test_scale_equivariant_shape(self, scale, hw, rng):
        m = SplitSR(preset("desk", scale=scale, channels=4))
        out = m.super_resolve(rng.random((1, 3) + hw), 0.5)
        assert out.shape == (1, 3, hw[0] * scale, hw[1] * scale)

    def test_odd_input_pad_crop(self, desk, rng):
        x = rng.random((3, 17, 17))
        sr, _, _ = desk.infer(x)
        assert sr.shape == (1, 3, 34, 34) and sr.min() >= 0 and sr.max() <= 1

    def test_a_ones_matches_plain_backbone(self, rng):
        m = SplitSR(preset("desk", predictors=False), seed=4)
        plain = SplitSR(preset("desk", predictors=False, loc=False), seed=9)
        for n, p in m.params.items():
            plain[n].data = p.data.copy()
        x = rng.random((2, 3, 8, 6))
        diff = m.super_resolve(x, np.ones(2)).data - plain.super_resolve(x, 0.5).data
        assert np.max(np.abs(diff)) < 1e-10

    @pytest.mark.parametrize("a", [np.ones(3), np.ones((2, 3)), np.ones((3, 2))])
    def test_a_length_mismatch(self, desk, lr_batch, a):
        with pytest.raises(ValueError):
            desk.super_resolve(lr_batch, a)

    def test_per_sample_split_equals_separate_runs(self, desk, lr_batch):
        a = np.array([[0.2, 0.9], [0.6, 0.4]])
        joint = desk.super_resolve(lr_batch, a).data
        for i in range(2):
            np.testing.assert_array_equal(joint[i], desk.super_resolve(lr_batch[i:i + 1], a[i]).data[0])


class TestPipeline:
    def test_deterministic(self, desk, lr_batch):
        a = desk.forward_pipeline(lr_batch)
        b = desk.forward_pipeline(lr_batch)
        for x, y in zip(a, b):
            assert np.array_equal(x.data, y.data)

    def test_fixed_a_bypasses_predictors(self, desk, lr_batch):
        with nx.count_flops() as fc:
            sr, u_hat, a = desk.forward_pipeline(lr_batch, fixed_a=0.5)
        assert u_hat is None and np.all(a == 0.5)
        assert "dense" not in fc.by_op
        np.testing.assert_array_equal(sr.data, desk.super_resolve(lr_batch, 0.5).data)

    def test_wiring(self, desk, lr_batch):
        sr, u_hat, a = desk.forward_pipeline(lr_batch)
        np.testing.assert_array_equal(u_hat.data, desk.predict_degradation(lr_batch).data)
        np.testing.assert_array_equal(a.data, desk.predict_split(u_hat).data)
        np.testing.assert_array_equal(sr.data, desk.super_resolve(lr_batch, a.data).data)

    @pytest.mark.parametrize("hw", [(24, 24), (13, 10)])
    def test_instrumented_flops_match_cost_model(self, desk, rng, hw):
        x = rng.random((1, 3) + hw)
        with nx.count_flops() as fc:
            _, _, a = desk.forward_pipeline(x)
        assert fc.total == model_cost(desk.config, hw, a.data[0]).flops

    def test_infer_clamps(self, desk, rng):
        sr, u, a = desk.infer(rng.random((3, 8, 8)) * 3)
        assert sr.min() >= 0 and sr.max() <= 1 and u.shape == (1, 33) and a.shape == (1, 2)


class TestCheckpoint:
    def test_round_trip(self, desk, tmp_path, lr_batch):
        path = tmp_path / "m.bin"
        save_checkpoint(path, desk, meta={"note": "x"})
        m2 = load_checkpoint(path)
        assert m2.config == desk.config
        for n, p in desk.params.items():
            assert np.array_equal(p.data, m2[n].data)
        np.testing.assert_array_equal(m2.infer(lr_batch)[0], desk.infer(lr_batch)[0])

    def test_layout(self, desk, tmp_path):
        path = tmp_path / "m.bin"
        save_checkpoint(path, desk, extra_tensors={"extra": np.arange(3.0)})
        blob = path.read_bytes()
        assert blob[:8] == b"SPLITSR1"
        (n,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16:16 + n])
        assert header["layout_version"] == 1 and header["seed"] == 0
        assert [t["name"] for t in header["tensors"]][:2] == ["sr.head.weight", "sr.head.bias"]
        last = header["tensors"][-1]
        raw = np.frombuffer(blob[16 + n + last["offset"]:], dtype="<f8")
        assert raw.tolist() == [0.0, 1.0, 2.0]
        assert len(blob) == 16 + n + 8 * (desk.num_params() + 3)
        _, arrays = read_checkpoint(path)
        assert arrays["extra"].tolist() == [0.0, 1.0, 2.0]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_shape_mismatch(self, tmp_path):
        small = SplitSR(preset("desk", channels=4))
        path = tmp_path / "s.bin"
        save_checkpoint(path, small)
        blob = bytearray(path.read_bytes())
        (n,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16:16 + n])
        header["config"]["channels"] = 8
        raw = json.dumps(header).encode()
        path.write_bytes(b"SPLITSR1" + struct.pack("<Q", len(raw)) + raw + bytes(blob[16 + n:]))
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestPipelineGradients:
    def test_relaxed_pipeline_reaches_every_tensor(self, rng):
        m = SplitSR(preset("desk"), seed=2)
        x = rng.random((2, 3, 8, 8))
        hr = rng.random((2, 3, 16, 16))
        sr, u_hat, a = m.forward_pipeline(x, grad_mode="relaxed")
        ((sr - Tensor(hr)).abs().mean() + u_hat.abs().mean() + a.sum()).backward()
        for n, p in m.named_parameters():
            assert p.grad is not None and np.any(p.grad != 0), n
