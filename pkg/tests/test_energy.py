import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrecon.energy import (
    EnergyParams,
    bilateral_filter,
    build_mrf,
    confidence,
    contrast_sigma,
    contrast_term,
    contrast_weights,
    data_costs,
    data_term,
    luminance,
    ncc,
    ncc_cost,
    neighbor_pairs,
    smoothness_batch,
    smoothness_term,
    total_energy,
)
from dynrecon.geometry import CameraView
from dynrecon.synthetic import value_noise

U = float("nan")


def make_camera(f=100.0, c=(32.0, 32.0), R=None, t=None, size=(65, 65)):
    K = np.array([[f, 0.0, c[0]], [0.0, f, c[1]], [0.0, 0.0, 1.0]])
    return CameraView(
        K=K,
        R=np.eye(3) if R is None else R,
        t=np.zeros(3) if t is None else t,
        width=size[0],
        height=size[1],
    )


class TestEnergyParams:
    def test_defaults_valid(self):
        p = EnergyParams()
        assert p.sigma_i == 0.3
        assert p.epsilon == 1.0

    def test_rejects_negative_lambda(self):
        with pytest.raises(ValueError):
            EnergyParams(lambda_data=-0.1)

    def test_rejects_even_window(self):
        with pytest.raises(ValueError):
            EnergyParams(ncc_window=8)


class TestNcc:
    def test_identical_patches(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 255, (15, 15))
        assert ncc(a, a) == pytest.approx(1.0)
        assert ncc_cost(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_negated_about_mean(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 255, (7, 7))
        b = 2 * a.mean() - a
        assert ncc(a, b) == pytest.approx(-1.0)
        assert ncc_cost(a, b) == pytest.approx(2.0)

    def test_affine_intensity_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 255, (9, 9))
        assert ncc(a, 2.0 * a + 3.0) == pytest.approx(1.0)

    def test_zero_variance_is_undefined(self):
        a = np.ones((5, 5))
        b = np.random.default_rng(3).uniform(0, 1, (5, 5))
        assert math.isnan(ncc(a, b))
        assert ncc_cost(a, b) == 1.0

    @settings(max_examples=60, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        alpha=st.floats(0.01, 50.0),
        beta=st.floats(-100.0, 100.0),
    )
    def test_affine_invariance_property(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0, 255, (5, 5))
        b = rng.uniform(0, 255, (5, 5))
        base = ncc(a, b)
        scaled = ncc(a, alpha * b + beta)
        assert abs(scaled - base) <= 1e-9


class TestConfidence:
    def test_uniform_costs_give_uniform_weights(self):
        for n in (2, 5, 9):
            w = confidence(np.full(n, 0.7), sigma=0.3)
            assert np.allclose(w, 1.0 / n)

    def test_dominant_best_candidate(self):
        w = confidence(np.array([0.0, 50.0, 60.0]), sigma=0.3)
        assert w[0] > 0.999999

    def test_hand_computed_two_candidates(self):
        # costs {0.0, 0.6} at sigma 0.3: weights {1, exp(-0.6/0.18)} normalized
        w = confidence(np.array([0.0, 0.6]), sigma=0.3)
        raw = np.array([1.0, math.exp(-0.6 / 0.18)])
        assert np.allclose(w, raw / raw.sum(), atol=1e-12)
        assert w[0] == pytest.approx(0.9655, abs=1e-4)
        assert w[1] == pytest.approx(0.0345, abs=1e-4)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            costs = rng.uniform(0, 2, size=rng.integers(1, 20))
            assert abs(confidence(costs, 0.3).sum() - 1.0) <= 1e-12

    def test_invalid_candidates_get_zero_weight(self):
        w = confidence(np.array([0.4, np.inf, 0.4]), sigma=0.3)
        assert w[1] == 0.0
        assert abs(w.sum() - 1.0) <= 1e-12

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            confidence(np.array([]), 0.3)


def render_plane_views(depth_plane=2.0, size=65, baseline=0.2):
    """Two views of a fronto-parallel textured Lambertian plane."""
    cam_a = make_camera(size=(size, size))
    cam_b = make_camera(size=(size, size), t=np.array([-baseline, 0.0, 0.0]))

    def render(cam):
        xs, ys = np.meshgrid(np.arange(size), np.arange(size))
        pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1).astype(float)
        rays = pix @ cam.K_inv.T
        rays /= rays[..., 2:3]
        origin = cam.center
        scale = (depth_plane - origin[2]) / rays[..., 2]
        pts = origin + rays * scale[..., None]
        return 255.0 * (
            0.6 * value_noise(pts, seed=7, scale=0.1)
            + 0.4 * value_noise(pts, seed=13, scale=0.037)
        )

    return cam_a, cam_b, render(cam_a), render(cam_b)


class TestDataTerm:
    def test_unknown_label_costs_m_unknown(self):
        cam_a, cam_b, img_a, img_b = render_plane_views()
        params = EnergyParams(m_unknown=0.37)
        cost = data_term(
            cam_a, img_a, (32, 32), np.array([1.8, 2.0, 2.2]), None,
            {1: cam_b}, {1: img_b}, params,
        )
        assert cost == 0.37

    def test_correct_depth_beats_wrong_candidates(self):
        cam_a, cam_b, img_a, img_b = render_plane_views(depth_plane=2.0)
        params = EnergyParams(k_views=1)
        coords = np.array([[28, 30], [32, 32], [36, 35]])
        depths = np.tile(np.array([1.7, 1.85, 2.0, 2.15, 2.3]), (3, 1))
        block = data_costs(cam_a, img_a, coords, depths, {1: cam_b}, {1: img_b}, params)
        for row in block:
            assert np.argmin(row[:5]) == 2
            assert row[2] < row[0] and row[2] < row[4]

    def test_all_projections_off_image_fall_back_to_unknown_cost(self):
        cam_a, cam_b, img_a, img_b = render_plane_views()
        params = EnergyParams(m_unknown=0.61)
        # aux camera looking away: every projection lands behind it
        R_away = np.diag([1.0, -1.0, -1.0])
        cam_away = make_camera(R=R_away, t=np.zeros(3))
        block = data_costs(
            cam_a, img_a, np.array([[32, 32]]), np.array([[1.8, 2.0]]),
            {1: cam_away}, {1: img_a}, params,
        )
        assert block[0, 0] == 0.61
        assert block[0, 1] == 0.61
        assert block[0, 2] == 0.61  # unknown column

    def test_nan_padding_is_inadmissible(self):
        cam_a, cam_b, img_a, img_b = render_plane_views()
        params = EnergyParams()
        block = data_costs(
            cam_a, img_a, np.array([[32, 32]]), np.array([[2.0, np.nan]]),
            {1: cam_b}, {1: img_b}, params,
        )
        assert np.isfinite(block[0, 0])
        assert np.isinf(block[0, 1])


class TestBilateral:
    def test_constant_image_unchanged(self):
        img = np.full((20, 20), 40.0)
        out = bilateral_filter(img, 2.0, 10.0)
        assert np.allclose(out, 40.0, atol=1e-9)

    def test_step_edge_preserved(self):
        img = np.zeros((16, 16))
        img[:, 8:] = 100.0
        out = bilateral_filter(img, 3.0, 5.0)
        # range kernel suppresses cross-edge mixing: under one gray level
        assert np.abs(out - img).max() < 1.0

    def test_impulse_attenuated_toward_background(self):
        img = np.zeros((15, 15))
        img[7, 7] = 30.0
        out = bilateral_filter(img, 2.0, 40.0)  # wide range kernel: smoothing
        # kernel-sum oracle: impulse keeps weight w0/(w0 + sum of neighbors)
        r = max(1, int(math.ceil(2.5 * 2.0)))
        weights = [
            math.exp(-(dy * dy + dx * dx) / (2 * 4.0)) * math.exp(-(30.0 ** 2) * ((dy, dx) != (0, 0)) / (2 * 1600.0))
            for dy in range(-r, r + 1)
            for dx in range(-r, r + 1)
        ]
        w_self = math.exp(0) * 1.0
        expected_center = 30.0 * w_self / sum(weights)
        assert out[7, 7] == pytest.approx(expected_center, rel=1e-6)
        assert 0 < out[7, 7] < 30.0

    def test_rejects_bad_sigmas(self):
        with pytest.raises(ValueError):
            bilateral_filter(np.zeros((4, 4)), 0.0, 1.0)


class TestContrast:
    def test_equal_labels_cost_zero(self):
        img = np.random.default_rng(0).uniform(0, 255, (8, 8))
        params = EnergyParams()
        assert contrast_term(img, (1, 1), (2, 1), U, U, params) == 0.0
        assert contrast_term(img, (1, 1), (2, 1), 2.0, 2.0, params) == 0.0

    def test_zero_contrast_costs_one(self):
        # C = 0 with epsilon = 1 gives (1/2)(1 + exp(0)) = 1
        img = np.full((8, 8), 9.0)  # flat: sigma_pq = 0 -> C = 0
        params = EnergyParams(epsilon=1.0)
        assert contrast_term(img, (1, 1), (2, 1), 2.0, 2.1, params) == pytest.approx(1.0)

    def test_infinite_contrast_limit_is_half(self):
        # one strong edge in an otherwise flat image drives C to +inf
        params = EnergyParams(epsilon=1.0)
        img = np.zeros((8, 8))
        img[:, 4:] = 1.0
        sigma = contrast_sigma(img)
        cost = contrast_term(img, (3, 2), (4, 2), 1.0, U, params, sigma_pq=sigma)
        assert cost == pytest.approx(0.5, abs=1e-3)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 255, (10, 10))
        params = EnergyParams(epsilon=1.0)
        sigma = contrast_sigma(img)
        for _ in range(30):
            x, y = rng.integers(0, 9, 2)
            p, q = (int(x), int(y)), (int(x) + 1, int(y))
            a = contrast_term(img, p, q, 1.0, 2.0, params, sigma_pq=sigma)
            b = contrast_term(img, q, p, 2.0, 1.0, params, sigma_pq=sigma)
            assert a == pytest.approx(b, abs=1e-12)
            assert 0.5 <= a <= 1.0

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 255, (9, 9, 3))
        params = EnergyParams()
        coords = np.array([[x, y] for y in range(9) for x in range(9)])
        edges = neighbor_pairs((9, 9), coords)
        w = contrast_weights(img, coords, edges, params)
        sigma = contrast_sigma(img)
        for eid in rng.integers(0, len(edges), 12):
            p = tuple(coords[edges[eid, 0]])
            q = tuple(coords[edges[eid, 1]])
            scalar = contrast_term(img, p, q, 1.0, 2.0, params, sigma_pq=sigma)
            assert w[eid] == pytest.approx(scalar, abs=1e-12)


class TestSmoothness:
    def test_case_table(self):
        assert smoothness_term(U, U, 1.25) == 0.0
        assert smoothness_term(2.0, 2.1, 1.25) == pytest.approx(0.1)
        assert smoothness_term(2.0, U, 1.25) == 1.25
        assert smoothness_term(U, 2.0, 1.25) == 1.25
        assert smoothness_term(0.5, 9.0, 1.25) == 1.25  # truncation

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(6)
        vals = rng.uniform(0.5, 3.0, 50)
        vals[rng.uniform(size=50) < 0.3] = np.nan
        a, b = vals[:25], vals[25:]
        batch = smoothness_batch(a, b, 0.8)
        for i in range(25):
            assert batch[i] == pytest.approx(smoothness_term(a[i], b[i], 0.8))

    def test_metric_over_label_space(self):
        # symmetric, zero iff equal, triangle inequality including unknown
        candidates = [1.0, 1.4, 1.9, 2.3, U]
        d_max = 0.6

        def d(a, b):
            return smoothness_term(a, b, d_max)

        for a, b, c in itertools.product(candidates, repeat=3):
            def eq(x, y):
                return (isinstance(x, float) and isinstance(y, float)
                        and ((math.isnan(x) and math.isnan(y)) or x == y))
            assert d(a, b) == pytest.approx(d(b, a))
            if eq(a, b):
                assert d(a, b) == 0.0
            else:
                assert d(a, b) > 0.0
            assert d(a, b) <= d(a, c) + d(c, b) + 1e-12


class TestTotalEnergy:
    def _tiny_problem(self):
        # 2x1 domain with hand-set blocks
        unary = np.array([[0.2, 0.8, 0.6], [0.5, 0.1, 0.6]])  # cols: d0, d1, unknown
        depth_values = np.array([[2.0, 2.4, U], [2.1, 2.5, U]])
        edges = np.array([[0, 1]])
        weights = np.array([0.75])
        params = EnergyParams(lambda_data=0.5, lambda_contrast=1.0, lambda_smooth=0.01, d_max=0.3)
        return unary, depth_values, edges, weights, params

    def test_hand_summed_value(self):
        unary, dv, edges, w, params = self._tiny_problem()
        # labels (d0, d1): data 0.5*(0.2+0.1); smooth 0.01*min(|2.0-2.5|,0.3);
        # contrast 1.0*0.75 since labels differ
        expected = 0.5 * 0.3 + 0.01 * 0.3 + 0.75
        assert total_energy([0, 1], unary, dv, edges, w, params) == pytest.approx(expected)

    def test_all_unknown_is_pure_data_cost(self):
        unary, dv, edges, w, params = self._tiny_problem()
        expected = 0.5 * (0.6 + 0.6)  # lambda_data * n * m_unknown
        assert total_energy([2, 2], unary, dv, edges, w, params) == pytest.approx(expected)

    def test_single_pixel_is_data_only(self):
        unary, dv, _, _, params = self._tiny_problem()
        e = total_energy([1], unary[:1], dv[:1], np.empty((0, 2), int), np.empty(0), params)
        assert e == pytest.approx(0.5 * 0.8)

    def test_matches_mrf_energy(self):
        unary, dv, edges, w, params = self._tiny_problem()
        problem = build_mrf(unary, dv, edges, w, params)
        for labels in itertools.product(range(3), repeat=2):
            direct = total_energy(list(labels), unary, dv, edges, w, params)
            assert problem.energy(np.array(labels)) == pytest.approx(direct, abs=1e-9)

    def test_rejects_out_of_range_label(self):
        unary, dv, edges, w, params = self._tiny_problem()
        with pytest.raises(ValueError):
            total_energy([0, 3], unary, dv, edges, w, params)


class TestNeighborPairs:
    def test_full_grid_pair_count(self):
        coords = np.array([[x, y] for y in range(4) for x in range(3)])
        edges = neighbor_pairs((4, 3), coords)
        assert len(edges) == 3 * 4 * 2 - 3 - 4  # 2*W*H - W - H
        # symmetric by construction: each unordered pair appears exactly once
        seen = {frozenset(e) for e in edges.tolist()}
        assert len(seen) == len(edges)

    def test_subset_respects_membership(self):
        coords = np.array([[0, 0], [1, 0], [5, 5]])
        edges = neighbor_pairs((8, 8), coords)
        assert edges.tolist() == [[0, 1]]


class TestLuminance:
    def test_grayscale_passthrough(self):
        img = np.random.default_rng(0).uniform(0, 255, (5, 5))
        assert np.array_equal(luminance(img), img)

    def test_rec601_weights(self):
        img = np.zeros((1, 1, 3))
        img[0, 0] = [255.0, 0.0, 0.0]
        assert luminance(img)[0, 0] == pytest.approx(255 * 0.299)
