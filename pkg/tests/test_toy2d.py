"""Toy dataset generators and trajectory diagnostics (light-budget checks)."""
import numpy as np
import pytest

from latentflow.errors import InputError
from latentflow.flow import StepRule
from latentflow.tensor import Tensor
from latentflow.toy2d import (
    ToyKind,
    crossing_fraction,
    gen_pairs,
    infer_trajectories,
    straightness,
    toy_diagnostics,
)


class TestGenerators:
    def test_crossing_x_n2_is_exact_x(self):
        ds = gen_pairs(ToyKind.CROSSING_X, 2, sigma=0.0, seed=0)
        assert np.array_equal(ds.x0, [[0.0, 0.0], [0.0, 1.0]])
        assert np.array_equal(ds.x1, [[1.0, 1.0], [1.0, 0.0]])

    def test_deterministic(self):
        a = gen_pairs(ToyKind.SWAPPED_CLUSTERS, 64, 0.05, seed=3)
        b = gen_pairs(ToyKind.SWAPPED_CLUSTERS, 64, 0.05, seed=3)
        assert np.array_equal(a.x0, b.x0) and np.array_equal(a.x1, b.x1)

    def test_swapped_clusters_cross_mid_path(self):
        ds = gen_pairs(ToyKind.SWAPPED_CLUSTERS, 256, 0.05, seed=0)
        assert crossing_fraction(ds) > 0.95

    def test_parallel_lines_do_not_cross(self):
        ds = gen_pairs(ToyKind.PARALLEL_LINES, 128, 0.01, seed=0)
        # chords are near-parallel translates: almost no mid-path intersections
        half = ds.n_pairs // 2
        from latentflow.toy2d import ToyDataset
        assert crossing_fraction(ds) < 0.05

    def test_cluster_geometry(self):
        ds = gen_pairs(ToyKind.SWAPPED_CLUSTERS, 100, 0.0, seed=1)
        assert np.array_equal(ds.x0[0], [0.0, 1.0])
        assert np.array_equal(ds.x1[0], [1.0, -1.0])
        assert np.array_equal(ds.x0[-1], [0.0, -1.0])
        assert np.array_equal(ds.x1[-1], [1.0, 1.0])

    def test_too_few_pairs(self):
        with pytest.raises(InputError):
            gen_pairs(ToyKind.CROSSING_X, 1, 0.0, seed=0)


class TestStraightness:
    def test_straight_path_zero(self):
        traj = np.array([[[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]])
        assert straightness(traj) == 0.0

    def test_right_angle(self):
        traj = np.array([[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]])
        assert straightness(traj) == pytest.approx(np.sqrt(2.0) - 1.0, abs=1e-12)

    def test_semicircle_limit(self):
        theta = np.linspace(0, np.pi, 400)
        arc = np.stack([np.cos(theta), np.sin(theta)], axis=1)[None]
        assert straightness(arc) == pytest.approx(np.pi / 2 - 1.0, abs=1e-3)

    def test_zero_chord_skipped_with_warning(self):
        good = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        degenerate = np.array([[0.5, 0.5], [0.7, 0.5], [0.5, 0.5]])
        with pytest.warns(UserWarning):
            val = straightness(np.stack([good, degenerate]))
        assert val == pytest.approx(np.sqrt(2.0) - 1.0, abs=1e-12)


class TestDiagnostics:
    class StraightField:
        def __init__(self, ds):
            self.v = ds.x1 - ds.x0

        def __call__(self, x, t, context=None):
            return Tensor(self.v)

    def test_exact_field_preserves_pairs(self):
        ds = gen_pairs(ToyKind.PARALLEL_LINES, 32, 0.02, seed=2)
        diag, traj = toy_diagnostics(self.StraightField(ds), ds, k_infer=4,
                                     rule=StepRule.EULER)
        assert diag.pair_preservation == 1.0
        assert diag.endpoint_nmse < 1e-20
        assert diag.straightness < 1e-12
        assert traj.shape == (32, 5, 2)

    def test_preservation_one_under_tight_endpoint_bound(self):
        # endpoints within half the min inter-target gap of their own target
        ds = gen_pairs(ToyKind.CROSSING_X, 16, 0.0, seed=4)
        gaps = ((ds.x1[:, None] - ds.x1[None, :]) ** 2).sum(-1)
        np.fill_diagonal(gaps, np.inf)
        half_gap = 0.5 * np.sqrt(gaps.min(axis=1).min())

        class NearTarget:
            def __call__(inner, x, t, context=None):
                return Tensor(ds.x1 + 0.4 * half_gap - x.data)

        diag, _ = toy_diagnostics(NearTarget(), ds, k_infer=1, rule=StepRule.EULER)
        assert diag.pair_preservation == 1.0

    def test_trajectory_grid_matches_infer(self):
        ds = gen_pairs(ToyKind.CROSSING_X, 8, 0.0, seed=5)
        field = self.StraightField(ds)
        traj = infer_trajectories(field, ds.x0, 4, StepRule.EULER)
        assert np.array_equal(traj[:, 0], ds.x0)
        assert np.abs(traj[:, -1] - ds.x1).max() < 1e-12
