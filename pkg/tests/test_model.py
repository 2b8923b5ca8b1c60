import math
import struct

import numpy as np
import pytest

from west import autodiff as ad
from west.errors import CorruptCheckpoint, ShapeMismatch, VersionMismatch
from west.graphcore import MinMaxScaler, renormalize
from west.model import (
    FORMAT_VERSION,
    Checkpoint,
    WestConfig,
    WestParams,
    forward,
    gcn_encode,
    init_params,
    load_checkpoint,
    lstm_decode,
    param_shapes,
    predict,
    save_checkpoint,
)


def _gcn_params(*weights):
    return WestParams({f"gcn_{k}": ad.Parameter(w) for k, w in enumerate(weights)})


def _lstm_params(n_in, hidden, rng=None, scale=1.0):
    out = {}
    for g in "fico":
        for name, shape in ((f"W_{g}", (n_in, hidden)), (f"U_{g}", (hidden, hidden)),
                            (f"b_{g}", (1, hidden))):
            v = np.zeros(shape) if rng is None else rng.uniform(-scale, scale, shape)
            out[name] = ad.Parameter(v, name)
    return WestParams(out)


class TestInit:
    def test_deterministic(self):
        cfg = WestConfig(5, k_layers=2, seed=3)
        a, b = init_params(cfg), init_params(cfg)
        for name in a.names():
            assert np.array_equal(a[name].value, b[name].value)

    def test_bounds_and_zero_biases(self):
        cfg = WestConfig(5, k_layers=3, gcn_hidden=7, lstm_hidden=9)
        params = init_params(cfg, seed=11)
        for name, (r, c) in param_shapes(cfg).items():
            v = params[name].value
            if name.startswith("b_") or name == "dense_b":
                assert not v.any()
            else:
                assert np.abs(v).max() <= math.sqrt(6 / (r + c))

    def test_mean_near_zero(self):
        cfg = WestConfig(2, u_in=1, k_layers=1, gcn_hidden=100, lstm_hidden=100)
        v = init_params(cfg, seed=0)["U_f"].value
        assert v.shape == (100, 100) and abs(v.mean()) <= 0.02

    def test_layer_shapes(self):
        step = param_shapes(WestConfig(4, u_in=5, k_layers=2, gcn_hidden=3, lstm_hidden=2))
        assert step["gcn_0"] == (1, 3) and step["gcn_1"] == (3, 3) and step["W_f"] == (3, 2)
        block = param_shapes(WestConfig(4, u_in=5, gcn_hidden=3, encoder_mode="block"))
        assert block["gcn_0"] == (5, 3) and block["W_f"] == (1, 64)
        assert "b_f" not in param_shapes(WestConfig(4, use_bias=False))

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            WestConfig(4, k_layers=0)
        with pytest.raises(ValueError):
            WestConfig(4, encoder_mode="time")


class TestGcn:
    def test_identity(self):
        z = np.abs(np.random.default_rng(0).normal(size=(4, 3)))
        out = gcn_encode(z, renormalize(np.zeros((4, 4))), _gcn_params(np.eye(3)), 1)
        np.testing.assert_array_equal(out.value, z)

    def test_two_node_hand_example(self):
        m = np.array([[0.5, 0.5], [0.5, 0.5]])
        out = gcn_encode([[2.0], [0.0]], m, _gcn_params(np.eye(1)), 1)
        np.testing.assert_array_equal(out.value, [[1.0], [1.0]])
        # the same operator results from renormalising a unit edge
        np.testing.assert_allclose(renormalize([[0, 1], [1, 0]]).matrix, m, atol=1e-15)

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(1)
        n = 7
        a = rng.uniform(size=(n, n))
        a = (a + a.T) / 2
        m = renormalize(a / a.max()).matrix
        params = _gcn_params(rng.normal(size=(3, 5)), rng.normal(size=(5, 5)))
        z = rng.normal(size=(n, 3))
        base = gcn_encode(z, m, params, 2).value
        for _ in range(10):
            p = rng.permutation(n)
            out = gcn_encode(z[p], m[np.ix_(p, p)], params, 2).value
            np.testing.assert_allclose(out, base[p], rtol=0, atol=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        params = _gcn_params(rng.normal(size=(4, 6)), rng.normal(size=(6, 6)))
        out = gcn_encode(rng.normal(size=(5, 4)), renormalize(np.ones((5, 5))), params, 2)
        assert (out.value >= 0).all()

    @pytest.mark.parametrize("k,far", [(1, [2, 3, 4]), (2, [3, 4])])
    def test_hop_locality(self, path_adjacency, k, far):
        rng = np.random.default_rng(3)
        m = renormalize(path_adjacency).matrix
        params = _gcn_params(*(rng.normal(size=(3, 3)) for _ in range(k)))
        z = np.abs(rng.normal(size=(5, 3))) + 0.1
        probe = z.copy()
        probe[far] = 0.0
        base, cut = gcn_encode(z, m, params, k).value, gcn_encode(probe, m, params, k).value
        assert np.abs(base[0] - cut[0]).max() < 1e-12

    def test_two_hops_reach(self, path_adjacency):
        m = renormalize(path_adjacency).matrix
        # positive weights keep every unit active so influence is visible
        params = _gcn_params(*(np.random.default_rng(4).uniform(0.1, 1, (3, 3)) for _ in range(2)))
        z = np.ones((5, 3))
        probe = z.copy()
        probe[2] = 0.0
        diff = gcn_encode(z, m, params, 2).value[0] - gcn_encode(probe, m, params, 2).value[0]
        assert np.abs(diff).max() > 1e-6

    def test_shape_errors(self):
        with pytest.raises(ShapeMismatch):
            gcn_encode(np.ones((3, 2)), np.eye(2), _gcn_params(np.eye(2)), 1)
        with pytest.raises(ShapeMismatch):
            gcn_encode(np.ones((2, 2)), np.eye(2), _gcn_params(np.eye(2)), 2)


class TestLstm:
    def test_zero_input(self):
        params = _lstm_params(3, 4)
        h = lstm_decode([ad.Tensor(np.zeros((2, 3)))] * 5, params)
        assert not h.value.any()

    def test_zero_input_gates(self):
        params = _lstm_params(3, 4)
        x = ad.Tensor(np.zeros((2, 3)))
        z = ad.add(ad.matmul(x, params["W_f"]), params["b_f"])
        np.testing.assert_array_equal(ad.sigmoid(z).value, 0.5)
        np.testing.assert_array_equal(ad.tanh_(z).value, 0.0)

    def test_forget_saturation(self):
        rng = np.random.default_rng(5)
        params = _lstm_params(2, 3, rng)
        params["W_f"].value[...] = 0.0
        params["U_f"].value[...] = 0.0
        params["b_f"].value[...] = 50.0
        x = rng.normal(size=(4, 2))
        h = lstm_decode([ad.Tensor(x)], params).value

        def sig(v):
            return 1 / (1 + np.exp(-v))

        i = sig(x @ params["W_i"].value + params["b_i"].value)
        c = np.tanh(x @ params["W_c"].value + params["b_c"].value)
        o = sig(x @ params["W_o"].value + params["b_o"].value)
        np.testing.assert_allclose(h, o * np.tanh(i * c), rtol=0, atol=1e-15)

    def test_bounds(self):
        rng = np.random.default_rng(6)
        params = _lstm_params(3, 5, rng, scale=3.0)
        seq = [ad.Tensor(rng.normal(scale=10, size=(4, 3))) for _ in range(8)]
        h = lstm_decode(seq, params).value
        assert (np.abs(h) < 1).all()

    def test_column_sequence(self):
        rng = np.random.default_rng(7)
        params = _lstm_params(1, 3, rng)
        x = rng.normal(size=(4, 5))
        a = lstm_decode(ad.Tensor(x), params).value
        b = lstm_decode([ad.Tensor(x[:, [t]]) for t in range(5)], params).value
        assert np.array_equal(a, b)

    def test_width_mismatch(self):
        with pytest.raises(ShapeMismatch):
            lstm_decode([ad.Tensor(np.zeros((2, 4)))], _lstm_params(3, 2))


MODES = [("step", "node"), ("block", "node"), ("step", "global"), ("block", "global")]


def _setup(mode, head, n=4, seed=0, **kw):
    cfg = WestConfig(n, u_in=3, u_out=2, k_layers=2, gcn_hidden=5, lstm_hidden=4,
                     encoder_mode=mode, head=head, seed=seed, **kw)
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(n, n))
    a = (a + a.T) / 2
    return cfg, renormalize(a / a.max()), init_params(cfg), rng


class TestForward:
    @pytest.mark.parametrize("mode,head", MODES)
    def test_shapes(self, mode, head):
        cfg, m, params, rng = _setup(mode, head)
        assert forward(rng.normal(size=(4, 3)), m, params, cfg).shape == (4, 2)
        assert forward(rng.normal(size=(6, 4, 3)), m, params, cfg).shape == (24, 2)
        assert predict(rng.normal(size=(6, 4, 3)), m, params, cfg).shape == (6, 4, 2)

    @pytest.mark.parametrize("mode,head", MODES)
    def test_batch_matches_single(self, mode, head):
        cfg, m, params, rng = _setup(mode, head)
        xs = rng.normal(size=(3, 4, 3))
        batch = predict(xs, m, params, cfg)
        for b in range(3):
            np.testing.assert_allclose(batch[b], predict(xs[b], m, params, cfg), atol=1e-14)

    def test_bad_input_shape(self):
        cfg, m, params, _ = _setup("step", "node")
        with pytest.raises(ShapeMismatch):
            forward(np.zeros((4, 5)), m, params, cfg)

    @pytest.mark.parametrize("mode,head", MODES)
    def test_gradient_check(self, mode, head):
        cfg, m, params, rng = _setup(mode, head, seed=2)
        for p in params.as_list():  # nonzero biases exercise every path
            if not p.value.any():
                p.value[...] = rng.uniform(-0.5, 0.5, p.shape)
        x, y = rng.uniform(size=(2, 4, 3)), rng.uniform(size=(8, 2))
        err = finite_diff_check_model(cfg, m, params, x, y)
        assert err < 1e-4

    def test_deterministic_forward_backward(self):
        def run():
            cfg, m, params, rng = _setup("step", "node", seed=4)
            with ad.Tape():
                loss = ad.mse_loss(forward(rng.normal(size=(4, 3)), m, params, cfg),
                                   np.zeros((4, 2)))
            ad.backward(loss, params.as_list())
            return [p.grad.copy() for p in params.as_list()]

        assert all(np.array_equal(a, b) for a, b in zip(run(), run()))

    def test_node_head_equivariant(self):
        cfg, m, params, rng = _setup("step", "node", n=5)
        x = rng.normal(size=(5, 3))
        p = rng.permutation(5)
        mp = type(m)(5, m.matrix[np.ix_(p, p)])
        np.testing.assert_allclose(predict(x[p], mp, params, cfg),
                                   predict(x, m, params, cfg)[p], atol=1e-12)


def finite_diff_check_model(cfg, m, params, x, y):
    return ad.finite_diff_check(lambda _: ad.mse_loss(forward(x, m, params, cfg), y),
                                params.as_list())


class TestCheckpoint:
    @pytest.fixture(params=["model.json", "model.bin"])
    def saved(self, request, tmp_path):
        cfg, m, params, rng = _setup("step", "node", seed=8)
        ckpt = Checkpoint(cfg, m, params, MinMaxScaler(0.0, 0.1 + 1e-17 * 3))
        path = tmp_path / request.param
        save_checkpoint(path, ckpt)
        return path, ckpt, rng.normal(size=(3, 4, 3))

    def test_round_trip(self, saved):
        path, ckpt, x = saved
        back = load_checkpoint(path)
        assert back.config == ckpt.config and back.scaler == ckpt.scaler
        assert back.format_version == FORMAT_VERSION
        assert np.array_equal(back.adjacency.matrix, ckpt.adjacency.matrix)
        assert back.params.names() == ckpt.params.names()
        for name in ckpt.params.names():
            assert np.array_equal(back.params[name].value, ckpt.params[name].value)
        assert np.array_equal(predict(x, back.adjacency, back.params, back.config),
                              predict(x, ckpt.adjacency, ckpt.params, ckpt.config))

    def test_truncated(self, saved):
        path = saved[0]
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_garbage(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"\x00\x01garbage")
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "x.bin")

    def test_future_version(self, saved):
        path = saved[0]
        raw = path.read_bytes()
        if raw.startswith(b"WESTCKPT"):
            raw = raw[:8] + struct.pack("<I", FORMAT_VERSION + 1) + raw[12:]
        else:
            raw = raw.replace(b'"format_version":1', b'"format_version":2', 1)
        path.write_bytes(raw)
        with pytest.raises(VersionMismatch) as err:
            load_checkpoint(path)
        assert err.value.found == FORMAT_VERSION + 1 and err.value.expected == FORMAT_VERSION
        assert str(FORMAT_VERSION + 1) in str(err.value) and str(FORMAT_VERSION) in str(err.value)

    def test_shape_tamper(self, tmp_path):
        cfg, m, params, _ = _setup("step", "node")
        other = WestConfig(4, u_in=3, u_out=2, k_layers=1, gcn_hidden=5, lstm_hidden=4)
        save_checkpoint(tmp_path / "c.json", Checkpoint(other, m, params, MinMaxScaler(0, 1)))
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "c.json")
