import math

import numpy as np
import pytest

from paraclap.errors import DimMismatch, FormatError, InvalidDim, IoError, VersionMismatch
from paraclap.losses import LossWeights, TrainBatch, final_loss
from paraclap.model import (
    Layer,
    ModelCheckpoint,
    ProjectionHead,
    backward,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)


class TestInitModel:
    def test_same_seed_identical(self):
        a = init_model(8, 6, d_embed=4, seed=123)
        b = init_model(8, 6, d_embed=4, seed=123)
        for ha, hb in ((a.audio_head, b.audio_head), (a.text_head, b.text_head)):
            for la, lb in zip(ha.layers, hb.layers):
                np.testing.assert_array_equal(la.weights, lb.weights)
                np.testing.assert_array_equal(la.bias, lb.bias)
        assert a.log_tau == b.log_tau == math.log(0.07)

    def test_no_hidden_single_layer(self):
        ckpt = init_model(8, 6, d_embed=4, seed=0)
        assert len(ckpt.audio_head.layers) == 1
        assert len(ckpt.text_head.layers) == 1
        assert ckpt.audio_head.layers[0].activation == "identity"

    def test_hidden_gives_tanh_then_identity(self):
        ckpt = init_model(8, 6, d_embed=4, hidden=5, seed=0)
        acts = [layer.activation for layer in ckpt.text_head.layers]
        assert acts == ["tanh", "identity"]
        assert ckpt.text_head.input_dim == 6
        assert ckpt.text_head.output_dim == 4

    def test_glorot_bounds_and_zero_bias(self):
        ckpt = init_model(10, 10, d_embed=6, seed=7)
        layer = ckpt.audio_head.layers[0]
        s = math.sqrt(6.0 / (10 + 6))
        assert np.all(np.abs(layer.weights) <= s)
        np.testing.assert_array_equal(layer.bias, 0.0)

    def test_zero_features_give_zero_embeddings(self):
        ckpt = init_model(5, 5, d_embed=3, seed=1)
        out = forward(ckpt.audio_head, np.zeros((4, 5)))
        np.testing.assert_array_equal(out, 0.0)

    @pytest.mark.parametrize("bad", [0, -3, 2.5])
    def test_invalid_dims(self, bad):
        with pytest.raises(InvalidDim):
            init_model(bad, 4, d_embed=4)


class TestForward:
    def test_identity_layer(self):
        head = ProjectionHead([Layer(np.eye(3), np.zeros(3))])
        x = np.array([[1.0, -2.0, 0.5]])
        np.testing.assert_array_equal(forward(head, x), x)

    def test_scaling_layer(self):
        head = ProjectionHead([Layer(np.array([[2.0, 0.0], [0.0, 2.0]]), np.zeros(2))])
        np.testing.assert_array_equal(forward(head, [[1.0, 1.0]]), [[2.0, 2.0]])

    def test_dim_mismatch(self):
        head = ProjectionHead([Layer(np.eye(3), np.zeros(3))])
        with pytest.raises(DimMismatch):
            forward(head, np.ones((2, 4)))

    def test_linear_positive_homogeneity(self):
        rng = np.random.default_rng(0)
        ckpt = init_model(6, 6, d_embed=4, seed=3)
        x = rng.standard_normal((5, 6))
        np.testing.assert_allclose(
            forward(ckpt.audio_head, 2.5 * x), 2.5 * forward(ckpt.audio_head, x), rtol=1e-12
        )

    def test_tanh_output_bounded_by_final_layer_norm(self):
        # after tanh every hidden coordinate is in [-1, 1], so an interval
        # bound on the output is |W| @ 1 + |b|.
        ckpt = init_model(4, 4, d_embed=3, hidden=6, seed=9)
        final = ckpt.audio_head.layers[-1]
        bound = np.abs(final.weights).sum(axis=1) + np.abs(final.bias)
        huge = np.random.default_rng(1).standard_normal((10, 4)) * 1e6
        out = forward(ckpt.audio_head, huge)
        assert np.all(np.abs(out) <= bound[None, :] + 1e-12)


class TestBackward:
    def test_linear_layer_definitional(self):
        rng = np.random.default_rng(5)
        head = ProjectionHead([Layer(rng.standard_normal((3, 4)), rng.standard_normal(3))])
        x = rng.standard_normal((6, 4))
        g = rng.standard_normal((6, 3))
        (gw, gb), gx = backward(head, x, g)[0][0], backward(head, x, g)[1]
        np.testing.assert_allclose(gw, g.T @ x, rtol=1e-12)
        np.testing.assert_allclose(gb, g.sum(axis=0), rtol=1e-12)
        np.testing.assert_allclose(gx, g @ head.layers[0].weights, rtol=1e-12)

    def test_zero_grad_out(self):
        head = ProjectionHead([Layer(np.eye(3), np.zeros(3))])
        grads, gx = backward(head, np.ones((2, 3)), np.zeros((2, 3)))
        np.testing.assert_array_equal(grads[0][0], 0.0)
        np.testing.assert_array_equal(gx, 0.0)

    @pytest.mark.parametrize("hidden", [None, 5])
    def test_end_to_end_gradcheck_through_loss(self, hidden):
        # composed objective: final_loss over head outputs; finite-difference
        # every head parameter.
        rng = np.random.default_rng(3)
        n, d_in, d_embed = 4, 8, 6
        ckpt = init_model(d_in, d_in, d_embed=d_embed, hidden=hidden, seed=3)
        feats = {name: rng.standard_normal((n, d_in)) for name in ("audio", "text", "p1", "p2")}
        w = LossWeights()

        def objective(model):
            batch = TrainBatch(
                audio=forward(model.audio_head, feats["audio"]),
                text=forward(model.text_head, feats["text"]),
                para1=forward(model.text_head, feats["p1"]),
                para2=forward(model.text_head, feats["p2"]),
            )
            return final_loss(batch, tau=model.tau, w=w)

        bd = objective(ckpt)
        audio_grads, _ = backward(ckpt.audio_head, feats["audio"], bd.grad_audio)
        text_grads, _ = backward(ckpt.text_head, feats["text"], bd.grad_text)
        p1_grads, _ = backward(ckpt.text_head, feats["p1"], bd.grad_para1)
        p2_grads, _ = backward(ckpt.text_head, feats["p2"], bd.grad_para2)
        text_total = [
            (gw1 + gw2 + gw3, gb1 + gb2 + gb3)
            for (gw1, gb1), (gw2, gb2), (gw3, gb3) in zip(text_grads, p1_grads, p2_grads)
        ]

        h = 1e-6
        worst = 0.0
        for head_name, grads in (("audio_head", audio_grads), ("text_head", text_total)):
            head = getattr(ckpt, head_name)
            for li, layer in enumerate(head.layers):
                for arr, garr in ((layer.weights, grads[li][0]), (layer.bias, grads[li][1])):
                    flat = arr.reshape(-1)
                    for i in range(flat.size):
                        orig = flat[i]
                        flat[i] = orig + h
                        up = objective(ckpt).l_final
                        flat[i] = orig - h
                        down = objective(ckpt).l_final
                        flat[i] = orig
                        numeric = (up - down) / (2 * h)
                        ana = garr.reshape(-1)[i]
                        worst = max(worst, abs(ana - numeric) / max(1.0, abs(ana), abs(numeric)))
        assert worst < 1e-5


class TestCheckpointRoundTrip:
    def test_save_load_save_identical_bytes(self, tmp_path):
        ckpt = init_model(8, 6, d_embed=4, hidden=3, seed=11)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        save_checkpoint(ckpt, d1)
        loaded = load_checkpoint(d1)
        save_checkpoint(loaded, d2)
        assert (d1 / "model.bin").read_bytes() == (d2 / "model.bin").read_bytes()
        assert (d1 / "model.json").read_text() == (d2 / "model.json").read_text()

    def test_round_trip_preserves_parameters_bitwise(self, tmp_path):
        ckpt = init_model(5, 7, d_embed=3, seed=2)
        save_checkpoint(ckpt, tmp_path / "m")
        loaded = load_checkpoint(tmp_path / "m")
        for ha, hb in ((ckpt.audio_head, loaded.audio_head), (ckpt.text_head, loaded.text_head)):
            for la, lb in zip(ha.layers, hb.layers):
                assert la.weights.tobytes() == lb.weights.tobytes()
                assert la.bias.tobytes() == lb.bias.tobytes()
        assert loaded.log_tau == ckpt.log_tau
        assert loaded.metadata == ckpt.metadata

    def test_truncated_blob_is_format_error(self, tmp_path):
        ckpt = init_model(4, 4, d_embed=2, seed=0)
        save_checkpoint(ckpt, tmp_path / "m")
        blob = (tmp_path / "m" / "model.bin").read_bytes()
        (tmp_path / "m" / "model.bin").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m")

    def test_bad_magic(self, tmp_path):
        ckpt = init_model(4, 4, d_embed=2, seed=0)
        save_checkpoint(ckpt, tmp_path / "m")
        blob = (tmp_path / "m" / "model.bin").read_bytes()
        (tmp_path / "m" / "model.bin").write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m")

    def test_corrupted_payload_fails_sha(self, tmp_path):
        ckpt = init_model(4, 4, d_embed=2, seed=0)
        save_checkpoint(ckpt, tmp_path / "m")
        blob = bytearray((tmp_path / "m" / "model.bin").read_bytes())
        blob[10] ^= 0xFF
        (tmp_path / "m" / "model.bin").write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m")

    def test_version_mismatch(self, tmp_path):
        import json

        ckpt = init_model(4, 4, d_embed=2, seed=0)
        save_checkpoint(ckpt, tmp_path / "m")
        doc = json.loads((tmp_path / "m" / "model.json").read_text())
        doc["format"] = "pck_v999"
        (tmp_path / "m" / "model.json").write_text(json.dumps(doc))
        with pytest.raises(VersionMismatch):
            load_checkpoint(tmp_path / "m")

    def test_missing_dir_is_io_error(self, tmp_path):
        with pytest.raises(IoError):
            load_checkpoint(tmp_path / "nope")

    def test_config_digest_mismatch_warns_but_loads(self, tmp_path):
        ckpt = init_model(4, 4, d_embed=2, seed=0)
        save_checkpoint(ckpt, tmp_path / "m")
        with pytest.warns(UserWarning, match="config digest"):
            loaded = load_checkpoint(tmp_path / "m", expected_config_digest="deadbeef")
        assert isinstance(loaded, ModelCheckpoint)

    def test_log_tau_out_of_range_rejected(self, tmp_path):
        import json

        ckpt = init_model(4, 4, d_embed=2, seed=0)
        save_checkpoint(ckpt, tmp_path / "m")
        doc = json.loads((tmp_path / "m" / "model.json").read_text())
        doc["log_tau"] = 99.0
        (tmp_path / "m" / "model.json").write_text(json.dumps(doc))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m")
