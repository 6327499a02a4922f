import math

import numpy as np
import pytest

from dcscn.data import Dataset, LabeledSample, generate_synthetic, preprocess_dataset
from dcscn.errors import BuildError, ConfigError, DimensionError
from dcscn.network import (BuildConfig, DoGKernel, LayerGrowth, LayerSpec,
                           LayoutEntry, NetworkModel, accuracy, build,
                           candidate_score, configure_next_kernel, dog_weights,
                           feature_matrix, layer_forward, load_model,
                           param_count, predict, predict_batch, sample_kernel,
                           save_model, solve_readout)
from dcscn.numerics import RngStream, cross_correlate, max_pool, sigmoid


def small_cfg(**kw):
    base = dict(t_max=10, l_max=1, c_max=2, ridge=0.0, u_scale=1e-9,
                xi_range=(1.5, 5.0), r_range=(1.05, 1.5), retry_rounds=3)
    base.update(kw)
    return BuildConfig(**base)


def tiny_dataset(n_per_class=4, size=12, seed=0):
    return preprocess_dataset(generate_synthetic(n_per_class, 32, RngStream(seed)),
                              crop=32, resize=size)


def manual_model(kernels_per_layer, pool_flags, input_shape, m=4, ridge=0.0):
    """Assemble a NetworkModel directly from kernel lists."""
    h, w, _ = input_shape
    layers, layout, offset = [], [], 0
    for li, (kerns, pool) in enumerate(zip(kernels_per_layer, pool_flags)):
        layers.append(LayerSpec(kernels=list(kerns), pool_after=pool))
        k = kerns[0].k
        h, w = h - k + 1, w - k + 1
        if pool:
            h, w = h // 2, w // 2
        for j in range(len(kerns)):
            layout.append(LayoutEntry(li, j, offset, h * w))
            offset += h * w
    readout = np.zeros((offset, m))
    return NetworkModel(layers, readout, layout, input_shape, tuple("abcd"[:m]), ridge)


def make_kernel(xi, r, k=3, bias=0.3):
    return DoGKernel(xi, r, k, bias, dog_weights(xi, r, k))


class TestDogWeights:
    def test_center_closed_form(self):
        rng = RngStream(1)
        for _ in range(100):
            xi = rng.uniform(0.5, 5.0)
            r = rng.uniform(0.8, 1.5)
            w = dog_weights(xi, r, 5)
            expect = (1.0 - 1.0 / r) / (2.0 * math.pi)
            assert abs(w[2, 2] - expect) < 1e-12

    def test_r_one_cancels(self):
        assert np.array_equal(dog_weights(2.0, 1.0, 3), np.zeros((3, 3)))

    def test_grid_symmetries_exact(self):
        rng = RngStream(2)
        for _ in range(20):
            k = 3 if rng.uniform(0, 1) < 0.5 else 5
            w = dog_weights(rng.uniform(0.5, 5.0), rng.uniform(0.8, 1.5), k)
            assert np.array_equal(w, w.T)
            assert np.array_equal(w, w[::-1, ::-1])

    def test_grid_matches_formula_pointwise(self):
        xi, r, k = 1.7, 1.3, 5
        w = dog_weights(xi, r, k)
        c = (k - 1) / 2
        for i in range(k):
            for j in range(k):
                x, y = j - c, i - c
                rr = x * x + y * y
                expect = (math.exp(-rr / (2 * xi * xi))
                          - math.exp(-rr / (2 * r * r * xi * xi)) / r) / (2 * math.pi)
                assert abs(w[i, j] - expect) < 1e-12

    def test_sample_kernel_ranges(self):
        cfg = small_cfg()
        rng = RngStream(3)
        for _ in range(50):
            kern = sample_kernel(cfg, rng)
            assert cfg.xi_range[0] <= kern.xi < cfg.xi_range[1]
            assert cfg.r_range[0] <= kern.r < cfg.r_range[1]
            assert 0.0 <= kern.bias < 1.0
            assert kern.weights.shape == (cfg.k, cfg.k)


class TestLayerForward:
    def test_zero_input_gives_sigmoid_bias(self):
        kern = make_kernel(2.0, 1.2, bias=0.7)
        out = layer_forward(np.zeros((6, 6, 2)), LayerSpec([kern], False))
        assert np.allclose(out, sigmoid(0.7))
        assert out.shape == (4, 4, 1)

    def test_single_channel_matches_composition_oracle(self, rng):
        img = rng.uniforms(64).reshape(8, 8, 1)
        kern = make_kernel(1.8, 1.3, bias=0.2)
        out = layer_forward(img, LayerSpec([kern], True))
        oracle = max_pool(sigmoid(cross_correlate(img[:, :, 0], kern.weights) + 0.2), 2)
        assert np.allclose(out[:, :, 0], oracle, atol=1e-12)

    def test_channel_swap_invariance(self, rng):
        img = rng.uniforms(128).reshape(8, 8, 2)
        swapped = img[:, :, ::-1].copy()
        spec = LayerSpec([make_kernel(2.2, 1.4)], False)
        assert np.allclose(layer_forward(img, spec), layer_forward(swapped, spec))

    def test_too_small_input(self):
        with pytest.raises(DimensionError):
            layer_forward(np.zeros((2, 2, 1)), LayerSpec([make_kernel(2.0, 1.2)], False))


class TestFeatureMatrix:
    def test_pooled_map_width(self):
        # 11x11 input, k=3 -> 9x9, pooled -> 4x4 = 16 features per kernel
        model = manual_model([[make_kernel(2.0, 1.2)]], [True], (11, 11, 1))
        phi = feature_matrix(np.zeros((3, 11, 11, 1)), model)
        assert phi.shape == (3, 16)

    def test_kernel_append_extends_layout(self, pinned_build):
        model, _ = pinned_build
        lengths = [e.length for e in model.layout]
        assert sum(lengths) == model.feature_dim
        offsets = [e.offset for e in model.layout]
        assert offsets == [sum(lengths[:i]) for i in range(len(lengths))]

    def test_identical_samples_identical_rows(self):
        model = manual_model([[make_kernel(2.0, 1.2)]], [False], (8, 8, 1))
        img = np.random.default_rng(0).random((8, 8, 1))
        phi = feature_matrix(np.stack([img, img]), model)
        assert np.array_equal(phi[0], phi[1])

    def test_shape_mismatch(self):
        model = manual_model([[make_kernel(2.0, 1.2)]], [False], (8, 8, 1))
        with pytest.raises(DimensionError):
            feature_matrix(np.zeros((2, 9, 9, 1)), model)


class TestSolveReadout:
    def test_one_hot_features_fit_exactly(self):
        y = np.eye(4)[[0, 1, 2, 3, 1, 2]]
        out, resid, rmse = solve_readout(y, y, 0.0)
        assert rmse < 1e-12
        assert np.allclose(out, np.eye(4), atol=1e-10)

    def test_rmse_monotone_under_append(self, rng):
        y = np.asarray(rng.uniforms(16)).reshape(8, 2)
        phi = np.asarray(rng.uniforms(8)).reshape(8, 1)
        prev = np.inf
        for _ in range(6):
            _, _, rmse = solve_readout(phi, y, 0.0)
            assert rmse <= prev + 1e-9
            prev = rmse
            phi = np.hstack([phi, np.asarray(rng.uniforms(8)).reshape(8, 1)])

    def test_single_sample_interpolates(self, rng):
        phi = np.asarray(rng.uniforms(6)).reshape(1, 6)
        y = np.array([[0.0, 1.0]])
        _, _, rmse = solve_readout(phi, y, 0.0)
        assert rmse <= 1e-8


class TestCandidateScore:
    def test_zero_residual(self):
        sigma, total = candidate_score(np.zeros((5, 3)), np.ones(5), 2.0, 1.2, 0.5)
        assert np.array_equal(sigma, np.zeros(3))
        assert total == 0.0

    def test_aligned_summary_hits_cauchy_schwarz_bound(self, rng):
        e = np.asarray(rng.uniforms(12)).reshape(6, 2)
        sigma, _ = candidate_score(e, e[:, 0], 2.0, 1.2, 0.0)
        assert abs(sigma[0] - e[:, 0] @ e[:, 0]) < 1e-10

    def test_matches_formula_oracle(self, rng):
        for _ in range(20):
            e = np.asarray(rng.normals(12)).reshape(6, 2)
            h = np.asarray(rng.normals(6))
            xi, r, u = rng.uniform(0.5, 5), rng.uniform(0.8, 1.5), rng.uniform(0, 1)
            sigma, total = candidate_score(e, h, xi, r, u)
            expect = np.array([
                (e[:, q] @ h) ** 2 / (h @ h) - (xi + r) * u * (e[:, q] @ e[:, q])
                for q in range(2)])
            assert np.allclose(sigma, expect, atol=1e-12)
            assert abs(total - expect.sum()) < 1e-12

    def test_degenerate_summary_rejected_without_exception(self):
        sigma, total = candidate_score(np.ones((4, 2)), np.zeros(4), 2.0, 1.2, 0.5)
        assert total == float("-inf")
        assert not total > 0


class TestConfigureNextKernel:
    def test_picks_argmax_when_all_qualify(self):
        ds = tiny_dataset()
        images = ds.image_stack()
        residual = ds.one_hot()
        cfg = small_cfg(t_max=8)
        state = LayerGrowth(images.sum(axis=3), residual, 0, False, 1)
        kern, maps, score = configure_next_kernel(state, cfg, RngStream(77))
        # replay the identical draw sequence and score every candidate
        replay = RngStream(77)
        from dcscn.network import _kernel_maps
        best = -np.inf
        for _ in range(cfg.t_max):
            cand = sample_kernel(cfg, replay)
            cmaps = _kernel_maps(state.channel_sum, cand, False)
            _, s = candidate_score(residual, cmaps.mean(axis=(1, 2)),
                                   cand.xi, cand.r, cfg.u_scale)
            best = max(best, s)
        assert score == best and score > 0

    def test_exhaustion_on_empty_layer_raises(self):
        ds = tiny_dataset()
        state = LayerGrowth(ds.image_stack().sum(axis=3), ds.one_hot(), 0, False, 1)
        cfg = small_cfg(u_scale=1e9)  # supervisory term dwarfs any projection
        with pytest.raises(BuildError, match="no qualifying kernel"):
            configure_next_kernel(state, cfg, RngStream(5))

    def test_exhaustion_on_grown_layer_closes(self):
        ds = tiny_dataset()
        state = LayerGrowth(ds.image_stack().sum(axis=3), ds.one_hot(), 2, False, 1)
        cfg = small_cfg(u_scale=1e9)
        assert configure_next_kernel(state, cfg, RngStream(5)) is None


class TestBuild:
    def test_bounds_one_kernel(self):
        ds = tiny_dataset()
        model, trace = build(ds, small_cfg(c_max=1, l_max=1), RngStream(2))
        assert sum(len(l.kernels) for l in model.layers) == 1
        assert len(trace.rows) == 1

    def test_deterministic(self):
        ds = tiny_dataset()
        cfg = small_cfg(c_max=2, l_max=2, ridge=1.0)
        m1, t1 = build(ds, cfg, RngStream(9))
        m2, t2 = build(ds, cfg, RngStream(9))
        assert np.array_equal(m1.readout, m2.readout)
        assert t1.rows == t2.rows
        for l1, l2 in zip(m1.layers, m2.layers):
            for k1, k2 in zip(l1.kernels, l2.kernels):
                assert np.array_equal(k1.weights, k2.weights)

    def test_trace_monotone_and_gated(self):
        ds = tiny_dataset(n_per_class=6)
        cfg = small_cfg(c_max=3, l_max=2, ridge=1.0)
        _, trace = build(ds, cfg, RngStream(4))
        rm = trace.rmse_series()
        assert np.all(np.diff(rm) <= 1e-9 * np.maximum(rm[:-1], 1e-30))
        assert (trace.sigma_series() > 0).all()

    def test_spatial_collapse_closes_gracefully(self):
        # 12x12 input: L1 12->10, L2 10->8 pooled->4, L3 4->2 pooled->1,
        # then layer 4 cannot even correlate -> growth stops early
        ds = tiny_dataset(size=12)
        cfg = small_cfg(c_max=1, l_max=8, pool_every=2, ridge=1.0)
        model, _ = build(ds, cfg, RngStream(6))
        assert 1 <= len(model.layers) < 8

    def test_input_smaller_than_kernel_fails(self):
        imgs = tuple(LabeledSample(np.zeros((2, 2, 1)), i % 2) for i in range(4))
        ds = Dataset(imgs, class_names=("a", "b"))
        with pytest.raises(BuildError):
            build(ds, small_cfg(), RngStream(0))

    def test_single_class_fails(self):
        imgs = tuple(LabeledSample(np.full((8, 8, 1), 0.1), 0) for _ in range(4))
        ds = Dataset(imgs, class_names=("only",))
        with pytest.raises(BuildError):
            build(ds, small_cfg(), RngStream(0))

    def test_missing_class_fails(self):
        imgs = tuple(LabeledSample(np.full((8, 8, 1), 0.1), 0) for _ in range(4))
        ds = Dataset(imgs, class_names=("a", "b"))
        with pytest.raises(BuildError, match="classes"):
            build(ds, small_cfg(), RngStream(0))


class TestPredict:
    def test_probabilities_sum_to_one(self, pinned_build, pinned_splits):
        model, _ = pinned_build
        probs, _ = predict(model, pinned_splits["test"].samples[0].image)
        assert abs(probs.sum() - 1.0) < 1e-12

    def test_batch_equals_per_sample(self, pinned_build, pinned_splits):
        model, _ = pinned_build
        images = pinned_splits["test"].image_stack()[:5]
        bp, bl = predict_batch(model, images)
        for i in range(5):
            sp, sl = predict(model, images[i])
            assert np.allclose(sp, bp[i], atol=1e-12)
            assert sl == bl[i]

    def test_zero_residual_fit_predicts_training_labels(self):
        ds = tiny_dataset(n_per_class=2)
        model, trace = build(ds, small_cfg(c_max=1, ridge=0.0), RngStream(3))
        assert trace.rows[-1].rmse < 1e-8  # 100-wide block interpolates 8 samples
        _, labels = predict_batch(model, ds.image_stack())
        assert np.array_equal(labels, ds.labels())

    def test_shape_mismatch(self, pinned_build):
        model, _ = pinned_build
        with pytest.raises(DimensionError):
            predict(model, np.zeros((5, 5, 1)))


class TestAccuracy:
    def test_perfect_fit_scores_one(self):
        ds = tiny_dataset(n_per_class=2)
        model, _ = build(ds, small_cfg(c_max=1, ridge=0.0), RngStream(3))
        assert accuracy(model, ds) == 1.0

    def test_matches_confusion_matrix_oracle(self):
        ds = tiny_dataset(n_per_class=3)
        model, _ = build(ds, small_cfg(c_max=1, ridge=1.0), RngStream(3))
        _, predicted = predict_batch(model, ds.image_stack())
        m = ds.n_classes
        confusion = np.zeros((m, m))
        for t, p in zip(ds.labels(), predicted):
            confusion[t, p] += 1
        assert accuracy(model, ds) == np.trace(confusion) / len(ds)

    def test_half_correct(self):
        ds = tiny_dataset(n_per_class=2)
        model, _ = build(ds, small_cfg(c_max=1, ridge=0.0), RngStream(3))
        _, predicted = predict_batch(model, ds.image_stack())
        relabeled = tuple(
            LabeledSample(s.image, int(predicted[i]) if i % 2 == 0
                          else int((predicted[i] + 1) % 4), s.mask)
            for i, s in enumerate(ds.samples))
        assert accuracy(model, Dataset(relabeled, ds.class_names)) == 0.5


class TestParamCount:
    def test_hand_case(self):
        # one layer of 2 3x3 kernels over 3 channels, D=16, m=4:
        # (27+1)*2 + 17*4 = 124
        kerns = [make_kernel(2.0, 1.2), make_kernel(3.0, 1.4)]
        model = manual_model([kerns], [True], (11, 11, 3))
        model.layers[0].kernels = kerns
        model = NetworkModel(model.layers, np.zeros((16, 4)),
                             [LayoutEntry(0, 0, 0, 8), LayoutEntry(0, 1, 8, 8)],
                             (11, 11, 3), ("a", "b", "c", "d"))
        raw, mb = param_count(model)
        assert raw == 124
        assert abs(mb - 124 * 4 / 2**20) < 1e-15

    def test_adding_kernel_increases_count(self, pinned_build, pinned_splits):
        model, _ = pinned_build
        raw_full, _ = param_count(model)
        smaller = NetworkModel(
            [LayerSpec(model.layers[0].kernels[:-1], model.layers[0].pool_after)]
            + model.layers[1:],
            np.zeros((model.feature_dim - model.layout[0].length, model.n_classes)),
            model.layout[:-1], model.input_shape, model.class_names)
        raw_small, _ = param_count(smaller)
        assert raw_full > raw_small

    def test_empty_model_counts_only_readout(self):
        model = NetworkModel([], np.zeros((0, 4)), [], (8, 8, 1),
                             ("a", "b", "c", "d"))
        raw, _ = param_count(model)
        assert raw == 4  # (0 + 1) * m


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path, pinned_build, pinned_splits):
        model, _ = pinned_build
        path = tmp_path / "model.json"
        save_model(model, path)
        back = load_model(path)
        assert np.array_equal(back.readout, model.readout)
        assert back.input_shape == model.input_shape
        assert back.class_names == model.class_names
        assert back.ridge == model.ridge
        for la, lb in zip(model.layers, back.layers):
            assert la.pool_after == lb.pool_after
            for ka, kb in zip(la.kernels, lb.kernels):
                assert np.array_equal(ka.weights, kb.weights)
                assert (ka.xi, ka.r, ka.k, ka.bias) == (kb.xi, kb.r, kb.k, kb.bias)
        img = pinned_splits["test"].samples[0].image
        pa, la = predict(model, img)
        pb, lb = predict(back, img)
        assert np.array_equal(pa, pb) and la == lb

    def test_version_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text('{"version": 99}')
        with pytest.raises(ConfigError):
            load_model(path)


class TestConfigValidation:
    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            BuildConfig(k=4, r_range=(1.05, 1.5)).validate()

    def test_bad_xi_range_rejected(self):
        with pytest.raises(ConfigError):
            BuildConfig(xi_range=(-1.0, 2.0)).validate()
        with pytest.raises(ConfigError):
            BuildConfig(xi_range=(2.0, 1.0)).validate()

    def test_r_range_containing_one_warns(self):
        with pytest.warns(UserWarning, match="r range"):
            BuildConfig(r_range=(0.8, 1.5)).validate()
