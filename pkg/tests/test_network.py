import numpy as np
import pytest

from wnetseg.model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from wnetseg.model.layers import (
    BatchNorm,
    Context,
    Conv3x3,
    Depthwise3x3,
    Dropout,
    MaxPool2,
    Pointwise,
    ReLU,
    SeparableConv3x3,
    UpConv2,
    softmax,
    softmax_backward,
)
from wnetseg.model.network import (
    ConfigError,
    WNetConfig,
    backward_decode,
    backward_encode,
    build,
    count_conv_layers,
    forward_decode,
    forward_encode,
)
from wnetseg.model.train import (
    TrainConfig,
    TrainState,
    TrainingDiverged,
    ncut_step,
    read_trace,
    reconstruction_step,
    train,
    write_trace,
)
from wnetseg.affinity import build_affinity
from wnetseg.synth import two_region
from wnetseg.tensor import make_rng

SMALL = WNetConfig(input_size=8, k=3, depth=1, base_channels=2, dropout=0.0, dtype="float64")


def naive_conv3x3(x, w, b):
    n, h, wd, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[3]))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, i:i + 3, j:j + 3, :]
            out[:, i, j, :] = np.einsum("nabc,abcd->nd", patch, w) + b
    return out


def layer_fd_check(layer, x, seed=0, training=False, state=None, h=1e-6, tol=1e-6):
    """Compare a layer's backward pass with central differences of <y, dy>."""
    rng = make_rng(seed)
    params = layer.init(rng, np.float64)
    for name in params:
        params[name] = params[name] + rng.normal(0, 0.1, params[name].shape)
    state = state if state is not None else layer.init_state(np.float64)

    def run(p, xx):
        ctx = Context(training=training, rng=make_rng(99), state={k: v.copy() for k, v in state.items()})
        return layer.forward(p, xx, ctx)

    y, cache = run(params, x)
    dy = rng.standard_normal(y.shape)
    grads = {}
    dx = layer.backward(params, dy, cache, grads)

    def loss(p, xx):
        return float(np.sum(run(p, xx)[0] * dy))

    probes = [("x", idx) for idx in map(tuple, rng.integers(0, x.shape, size=(6, x.ndim)))]
    for name in params:
        for _ in range(3):
            probes.append((name, tuple(int(rng.integers(0, s)) for s in params[name].shape)))
    for which, idx in probes:
        if which == "x":
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = (loss(params, xp) - loss(params, xm)) / (2 * h)
            an = dx[idx]
        else:
            pp = {k: v.copy() for k, v in params.items()}
            pm = {k: v.copy() for k, v in params.items()}
            pp[which][idx] += h
            pm[which][idx] -= h
            fd = (loss(pp, x) - loss(pm, x)) / (2 * h)
            an = grads[which][idx]
        assert abs(fd - an) <= tol * max(1.0, abs(fd)), (which, idx, fd, an)


class TestLayers:
    x = make_rng(5).standard_normal((2, 6, 4, 3))

    def test_dense_conv_matches_loop_oracle(self):
        layer = Conv3x3("c", 3, 5)
        params = layer.init(make_rng(1), np.float64)
        params["c.b"] = make_rng(2).standard_normal(5)
        y, _ = layer.forward(params, self.x, Context())
        np.testing.assert_allclose(y, naive_conv3x3(self.x, params["c.w"], params["c.b"]), atol=1e-12)

    def test_depthwise_matches_loop_oracle(self):
        layer = Depthwise3x3("d", 3)
        params = layer.init(make_rng(1), np.float64)
        y, _ = layer.forward(params, self.x, Context())
        w = params["d.w"]
        expect = np.zeros_like(self.x)
        for c in range(3):
            wc = np.zeros((3, 3, 1, 1))
            wc[:, :, 0, 0] = w[:, :, c]
            expect[..., c] = naive_conv3x3(self.x[..., c:c + 1], wc, np.zeros(1))[..., 0]
        np.testing.assert_allclose(y, expect, atol=1e-12)

    @pytest.mark.parametrize("layer", [
        Conv3x3("c", 3, 4), Depthwise3x3("d", 3), Pointwise("p", 3, 2),
        SeparableConv3x3("s", 3, 4), UpConv2("u", 3, 2), ReLU(), MaxPool2(),
    ], ids=lambda l: type(l).__name__)
    def test_backward_matches_finite_differences(self, layer):
        layer_fd_check(layer, self.x)

    def test_batch_norm_training_statistics(self):
        layer_fd_check(BatchNorm("bn", 3), self.x, training=True)

    def test_batch_norm_running_statistics(self):
        state = {"bn.running_mean": np.array([0.1, -0.2, 0.3]), "bn.running_var": np.array([1.5, 0.7, 2.0])}
        layer_fd_check(BatchNorm("bn", 3), self.x, training=False, state=state)

    def test_dropout_with_fixed_mask(self):
        layer_fd_check(Dropout(0.5), self.x, training=True)

    def test_dropout_keeps_expectation(self):
        x = np.ones((1, 200, 200, 1))
        y, _ = Dropout(0.65).forward({}, x, Context(training=True, rng=make_rng(0)))
        assert y.mean() == pytest.approx(1.0, abs=0.02)
        y_eval, _ = Dropout(0.65).forward({}, x, Context())
        np.testing.assert_array_equal(y_eval, x)

    def test_softmax_backward(self):
        rng = make_rng(3)
        z = rng.standard_normal((4, 5))
        dp = rng.standard_normal((4, 5))
        an = softmax_backward(softmax(z), dp)
        h = 1e-6
        for i, j in [(0, 0), (1, 3), (3, 4)]:
            zp, zm = z.copy(), z.copy()
            zp[i, j] += h
            zm[i, j] -= h
            fd = (np.sum(softmax(zp) * dp) - np.sum(softmax(zm) * dp)) / (2 * h)
            assert fd == pytest.approx(an[i, j], abs=1e-8)

    def test_max_pool_tie_goes_to_first(self):
        x = np.ones((1, 2, 2, 1))
        y, cache = MaxPool2().forward({}, x, Context())
        dx = MaxPool2().backward({}, np.ones_like(y), cache, {})
        np.testing.assert_array_equal(dx[0, :, :, 0], [[1, 0], [0, 0]])

    def test_batch_norm_updates_running_average(self):
        bn = BatchNorm("bn", 1)
        state = bn.init_state(np.float64)
        x = np.full((1, 2, 2, 1), 3.0)
        x[0, 0, 0, 0] = 7.0
        bn.forward(bn.init(None, np.float64), x, Context(training=True, state=state))
        assert state["bn.running_mean"][0] == pytest.approx(0.9 * 0 + 0.1 * 4.0)
        assert state["bn.running_var"][0] == pytest.approx(0.9 * 1 + 0.1 * 3.0)


class TestArchitecture:
    def test_full_scale_configuration_has_46_convolutions(self):
        cfg = WNetConfig.full_scale()
        assert cfg.module_count == 18
        assert count_conv_layers(cfg) == 46 == cfg.conv_layer_count()
        assert cfg.dense_module_set() == {1, 9, 10, 18}

    def test_desk_output_shapes(self):
        cfg = WNetConfig()
        net = build(cfg, make_rng(0))
        x = make_rng(1).random((64, 64, 3))
        p, _ = forward_encode(net, x)
        recon, _ = forward_decode(net, p)
        assert p.shape == (64, 64, 8) and recon.shape == (64, 64, 3)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_separable_parameter_count(self):
        cin, cout = 16, 32
        sep = SeparableConv3x3("s", cin, cout).init(make_rng(0), np.float32)
        dense = Conv3x3("c", cin, cout).init(make_rng(0), np.float32)
        assert sum(v.size for v in sep.values()) == cin * 9 + cin * cout + cout
        assert sum(v.size for v in dense.values()) == cin * cout * 9 + cout

    def test_indivisible_size(self):
        with pytest.raises(ConfigError):
            WNetConfig(input_size=60, depth=3)

    def test_wrong_input_shape(self):
        net = build(SMALL, make_rng(0))
        with pytest.raises(ValueError, match="resize"):
            forward_encode(net, np.zeros((9, 8, 3)))

    def test_zero_head_gives_uniform(self):
        net = build(WNetConfig(), make_rng(0))
        net.params["enc.head.w"][:] = 0
        net.params["enc.head.b"][:] = 0
        p, _ = forward_encode(net, make_rng(2).random((64, 64, 3)))
        np.testing.assert_array_equal(p, np.float32(1 / 8))

    def test_partition_is_exact(self):
        net = build(WNetConfig(), make_rng(0))
        enc, dec = set(net.encoder_names), set(net.decoder_names)
        assert enc.isdisjoint(dec) and enc | dec == set(net.params)

    def test_dropout_keep_reading(self):
        assert WNetConfig(dropout=0.65, dropout_is_keep=True).drop_probability == pytest.approx(0.35)

    def test_deterministic_forward(self):
        x = make_rng(1).random((64, 64, 3))
        a, _ = forward_encode(build(WNetConfig(), make_rng(4)), x)
        b, _ = forward_encode(build(WNetConfig(), make_rng(4)), x)
        assert a.tobytes() == b.tobytes()


def _network_loss(net, x, target, rng_seed):
    p, _ = forward_encode(net, x, training=True, rng=make_rng(rng_seed))
    recon, _ = forward_decode(net, p, training=True, rng=make_rng(rng_seed + 1))
    return float(np.mean((recon - target) ** 2))


class TestNetworkGradient:
    @pytest.mark.parametrize("dropout", [0.0, 0.5])
    def test_full_network_against_finite_differences(self, dropout):
        cfg = WNetConfig(input_size=8, k=3, depth=2, base_channels=2, dropout=dropout, dtype="float64")
        net = build(cfg, make_rng(0))
        rng = make_rng(1)
        x = rng.random((2, 8, 8, 3))
        net.state = {k: v.copy() for k, v in net.state.items()}
        frozen = {k: v.copy() for k, v in net.state.items()}

        p, enc_cache = forward_encode(net, x, training=True, rng=make_rng(10))
        recon, dec_cache = forward_decode(net, p, training=True, rng=make_rng(11))
        diff = recon - x
        dp, grads = backward_decode(net, 2 * diff / diff.size, dec_cache)
        grads.update(backward_encode(net, dp, enc_cache))

        h = 1e-6
        names = sorted(net.params)
        for _ in range(40):
            name = names[int(rng.integers(len(names)))]
            idx = tuple(int(rng.integers(s)) for s in net.params[name].shape)
            old = net.params[name][idx]
            vals = []
            for delta in (h, -h):
                net.params[name][idx] = old + delta
                net.state = {k: v.copy() for k, v in frozen.items()}
                p, _ = forward_encode(net, x, training=True, rng=make_rng(10))
                r, _ = forward_decode(net, p, training=True, rng=make_rng(11))
                vals.append(np.mean((r - x) ** 2))
            net.params[name][idx] = old
            fd = (vals[0] - vals[1]) / (2 * h)
            assert abs(fd - grads[name][idx]) <= 1e-5 * max(abs(fd), 1e-3), (name, idx)


class TestTraining:
    def images(self, n=3, size=8):
        rng = make_rng(0)
        return [two_region(size, split=int(rng.integers(2, size - 1)), noise=0.02, rng=rng)[0]
                for _ in range(n)]

    def test_lr_schedule(self):
        tc = TrainConfig()
        assert tc.lr_at(0) == 0.003 and tc.lr_at(999) == 0.003
        assert tc.lr_at(1000) == pytest.approx(0.0003, rel=1e-15)
        assert tc.lr_at(2500) == pytest.approx(0.00003, rel=1e-15)

    def test_full_scale_training_schedule(self):
        tc = TrainConfig.full_scale()
        assert (tc.batch_size, tc.lr_initial, tc.max_iters) == (10, 0.003, 50_000)

    def test_ncut_step_leaves_decoder_untouched(self):
        net = build(SMALL, make_rng(0))
        before = {n: net.params[n].tobytes() for n in net.decoder_names}
        enc_before = {n: net.params[n].copy() for n in net.encoder_names}
        batch = np.stack(self.images(2))
        ncut_step(net, batch, [build_affinity(b) for b in batch], 0.1, make_rng(0))
        assert all(net.params[n].tobytes() == before[n] for n in net.decoder_names)
        assert any(not np.array_equal(net.params[n], enc_before[n]) for n in net.encoder_names)

    def test_reconstruction_step_moves_both_halves(self):
        net = build(SMALL, make_rng(0))
        start = net.copy()
        reconstruction_step(net, np.stack(self.images(2)), 0.1, make_rng(0))
        for names in (net.encoder_names, net.decoder_names):
            assert any(not np.array_equal(net.params[n], start.params[n]) for n in names)

    def test_trace_values(self, tmp_path):
        net = build(SMALL, make_rng(0))
        tc = TrainConfig(batch_size=2, max_iters=5, lr_initial=0.05)
        state = train(net, self.images(), tc)
        assert [row[0] for row in state.trace] == list(range(5))
        assert all(np.isfinite(row[1]) and np.isfinite(row[2]) for row in state.trace)
        write_trace(state.trace, tmp_path / "t.csv")
        back = read_trace(tmp_path / "t.csv")
        assert [r[0] for r in back] == list(range(5))
        np.testing.assert_allclose([r[1] for r in back], [r[1] for r in state.trace], rtol=1e-9)

    def test_ncut_disabled_logs_nan(self):
        net = build(SMALL, make_rng(0))
        state = train(net, self.images(), TrainConfig(batch_size=2, max_iters=2, use_ncut=False))
        assert all(np.isnan(row[2]) for row in state.trace)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_iteration(self):
        net = build(SMALL, make_rng(0))
        with pytest.raises(TrainingDiverged) as info:
            train(net, self.images(), TrainConfig(batch_size=2, max_iters=50, lr_initial=1e6))
        assert "iteration" in str(info.value)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(build(SMALL, make_rng(0)), [], TrainConfig())

    def test_same_seed_same_parameters(self):
        results = []
        for _ in range(2):
            net = build(SMALL, make_rng(3))
            train(net, self.images(), TrainConfig(batch_size=2, max_iters=6, seed=4))
            results.append(b"".join(net.params[n].tobytes() for n in sorted(net.params)))
        assert results[0] == results[1]

    def test_soft_ncut_trend_on_two_region_corpus(self):
        cfg = WNetConfig(input_size=16, k=2, depth=1, base_channels=4, dropout=0.0)
        net = build(cfg, make_rng(0))
        rng = make_rng(1)
        imgs = [two_region(16, split=int(rng.integers(4, 13)), noise=0.02, rng=rng)[0] for _ in range(8)]
        state = train(net, imgs, TrainConfig(batch_size=2, max_iters=400, lr_initial=0.1, lr_decay_every=10**6))
        j = np.array([row[2] for row in state.trace])
        assert np.all(np.isfinite(j)) and np.all(np.isfinite([row[1] for row in state.trace]))
        windows = j.reshape(4, 100).mean(axis=1)
        assert np.all(np.diff(windows) <= 0), windows


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = build(SMALL, make_rng(0))
        tc = TrainConfig(batch_size=2, max_iters=7)
        state = TrainState(3, make_rng(5))
        save_checkpoint(tmp_path / "c.bin", net, tc, state)
        net2, tc2, state2 = load_checkpoint(tmp_path / "c.bin")
        assert net2.config == net.config and tc2 == tc and state2.iteration == 3
        for name in net.params:
            assert net2.params[name].tobytes() == net.params[name].tobytes()
        assert state2.rng.random() == make_rng(5).random()

    def test_bytes_are_reproducible(self, tmp_path):
        for name in ("a.bin", "b.bin"):
            save_checkpoint(tmp_path / name, build(SMALL, make_rng(0)))
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    @pytest.mark.parametrize("corrupt", ["magic", "truncate"])
    def test_corruption_detected(self, tmp_path, corrupt):
        path = tmp_path / "c.bin"
        save_checkpoint(path, build(SMALL, make_rng(0)))
        data = path.read_bytes()
        path.write_bytes(b"XXXXXXXX" + data[8:] if corrupt == "magic" else data[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_resume_equals_uninterrupted(self, tmp_path):
        imgs = TestTraining().images()
        tc = TrainConfig(batch_size=2, max_iters=8, lr_initial=0.05)
        full = build(SMALL, make_rng(0))
        train(full, imgs, tc)

        part = build(SMALL, make_rng(0))
        state = train(part, imgs, tc, stop_at=4)
        save_checkpoint(tmp_path / "c.bin", part, tc, state)
        resumed, tc2, state2 = load_checkpoint(tmp_path / "c.bin")
        train(resumed, imgs, tc2, state=state2)
        for name in full.params:
            assert resumed.params[name].tobytes() == full.params[name].tobytes(), name
        for name in full.state:
            assert resumed.state[name].tobytes() == full.state[name].tobytes(), name
