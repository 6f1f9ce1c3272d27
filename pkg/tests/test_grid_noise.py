"""Test script for time grids, coupled noise and iterated integrals."""

import dataclasses
import unittest

import numpy as np

from tools.particle_system.grid_noise import (
    NoiseBundle,
    NoiseId,
    coarsen,
    default_substeps,
    internal_increment,
    iterated_integral,
    iterated_integrals,
    levy_subsample_sum,
    make_grid,
    make_uniform_grid,
    sample_initial,
    sample_noise,
)


def _bundle_with(grid, particle, etas, common=None):
    """Build a bundle from explicit sub-increments [n, K, N, m1]."""
    particle = np.asarray(particle, dtype=float)
    n, K, N, m1 = particle.shape
    common = np.zeros((n, K, 0)) if common is None else np.asarray(common, dtype=float)
    return NoiseBundle(
        grid=grid,
        n_particles=N,
        m1=m1,
        m0=common.shape[2],
        substeps=K,
        particle_increments=particle,
        common_increments=common,
        etas=np.asarray(etas, dtype=float),
        particle_bridge=np.zeros((n, N, m1)),
        common_bridge=np.zeros((n, common.shape[2])),
        seed=0,
        replicate=0,
    )


class TestTimeGrid(unittest.TestCase):
    """Test cases for grid construction."""

    def test_uniform_grid(self):
        """Test equidistant points."""
        grid = make_uniform_grid(1.0, 4)
        np.testing.assert_array_equal(grid.times, [0.0, 0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(grid.steps, 0.25)
        self.assertEqual(grid.h_max, 0.25)
        self.assertTrue(grid.is_uniform())

    def test_single_step(self):
        """Test the degenerate single-step grid."""
        grid = make_uniform_grid(1.0, 1)
        np.testing.assert_array_equal(grid.times, [0.0, 1.0])
        self.assertEqual(grid.n_steps, 1)

    def test_step_bound(self):
        """Test that steps above min(1, T) are rejected."""
        self.assertEqual(make_uniform_grid(2.0, 2).h_max, 1.0)
        with self.assertRaises(ValueError):
            make_uniform_grid(2.0, 1)
        with self.assertRaises(ValueError):
            make_grid([0.0, 0.1, 0.5, 1.6])

    def test_invalid_arguments(self):
        """Test rejection of non-positive horizon and step count."""
        for T, n in [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, -2), (1.0, 2.5)]:
            with self.assertRaises(ValueError):
                make_uniform_grid(T, n)

    def test_general_grid(self):
        """Test non-equidistant grids and their invariants."""
        grid = make_grid([0.0, 0.1, 0.4, 1.0])
        np.testing.assert_allclose(grid.steps, [0.1, 0.3, 0.6])
        self.assertFalse(grid.is_uniform())
        for times in ([0.1, 0.5, 1.0], [0.0, 0.5, 0.5, 1.0], [0.0, 0.6, 0.4, 1.0], [0.0]):
            with self.assertRaises(ValueError):
                make_grid(times)

    def test_default_substeps(self):
        """Test K = ceil(1/h)."""
        self.assertEqual(default_substeps(0.125), 8)
        self.assertEqual(default_substeps(0.3), 4)
        self.assertEqual(default_substeps(1.0), 1)


class TestSampleNoise(unittest.TestCase):
    """Test cases for noise sampling."""

    def setUp(self):
        """Set up test fixtures."""
        self.grid = make_uniform_grid(1.0, 8)

    def test_determinism(self):
        """Test that the same keys give bit-identical bundles."""
        first = sample_noise(self.grid, 3, 2, 1, 4, seed=11, replicate=5)
        second = sample_noise(self.grid, 3, 2, 1, 4, seed=11, replicate=5)
        for name in ("particle_increments", "common_increments", "etas", "particle_partial"):
            np.testing.assert_array_equal(getattr(first, name), getattr(second, name))

    def test_shapes(self):
        """Test array shapes of a populated bundle."""
        bundle = sample_noise(self.grid, 3, 2, 1, 4, seed=1, replicate=0)
        self.assertEqual(bundle.particle_increments.shape, (8, 4, 3, 2))
        self.assertEqual(bundle.common_increments.shape, (8, 4, 1))
        self.assertEqual(bundle.particle_coarse.shape, (8, 3, 2))
        self.assertEqual(bundle.common_partial.shape, (8, 1))
        self.assertEqual(bundle.particle_path.shape, (9, 3, 2))
        self.assertTrue(np.all((bundle.etas > 0) & (bundle.etas < 1)))

    def test_invalid_counts(self):
        """Test precondition violations."""
        for kwargs in (dict(N=0), dict(m1=0), dict(m0=-1), dict(K=0)):
            arguments = dict(N=2, m1=1, m0=0, K=2)
            arguments.update(kwargs)
            with self.assertRaises(ValueError):
                sample_noise(self.grid, seed=0, replicate=0, **arguments)

    def test_coarse_increment_is_sum(self):
        """Test that the coarse increment is the sum of its sub-increments."""
        bundle = sample_noise(self.grid, 4, 1, 1, 8, seed=3, replicate=0)
        np.testing.assert_allclose(
            bundle.particle_coarse, bundle.particle_increments.sum(axis=1), rtol=0, atol=1e-14
        )
        np.testing.assert_allclose(
            bundle.common_coarse, bundle.common_increments.sum(axis=1), rtol=0, atol=1e-14
        )

    def test_replicates_independent(self):
        """Test that different replicates are uncorrelated."""
        grid = make_uniform_grid(1.0, 1)
        a = sample_noise(grid, 1, 1, 0, 100_000, seed=5, replicate=0).particle_increments.ravel()
        b = sample_noise(grid, 1, 1, 0, 100_000, seed=5, replicate=1).particle_increments.ravel()
        self.assertLess(abs(np.corrcoef(a, b)[0, 1]), 0.02)

    def test_populations_share_common_noise(self):
        """Test that the population tag only changes idiosyncratic streams."""
        a = sample_noise(self.grid, 2, 1, 1, 4, seed=5, replicate=0, population=0)
        b = sample_noise(self.grid, 2, 1, 1, 4, seed=5, replicate=0, population=1)
        np.testing.assert_array_equal(a.common_increments, b.common_increments)
        np.testing.assert_array_equal(a.etas, b.etas)
        self.assertFalse(np.array_equal(a.particle_increments, b.particle_increments))

    def test_particle_streams_do_not_depend_on_count(self):
        """Test that particle i draws the same noise in systems of any size."""
        small = sample_noise(self.grid, 2, 1, 0, 4, seed=5, replicate=0)
        large = sample_noise(self.grid, 6, 1, 0, 4, seed=5, replicate=0)
        np.testing.assert_array_equal(
            small.particle_increments, large.particle_increments[:, :, :2]
        )

    def test_increment_statistics(self):
        """Test mean and variance of standardized sub-increments."""
        grid = make_uniform_grid(1.0, 10)
        bundle = sample_noise(grid, 100, 1, 0, 100, seed=17, replicate=0)
        z = (bundle.particle_increments / np.sqrt(0.1 / 100)).ravel()
        self.assertEqual(z.size, 100_000)
        self.assertLess(abs(z.mean()), 4.0 / np.sqrt(z.size))
        self.assertLess(abs(z.var() - 1.0), 0.05)

    def test_eta_statistics(self):
        """Test that etas look uniform on (0, 1)."""
        grid = make_uniform_grid(1.0, 10_000)
        etas = sample_noise(grid, 1, 1, 0, 1, seed=2, replicate=0).etas
        self.assertLess(abs(etas.mean() - 0.5), 4 * np.sqrt(1 / 12) / 100)
        self.assertLess(abs(etas.var() - 1 / 12), 0.005)

    def test_sample_initial(self):
        """Test initial ensembles."""
        np.testing.assert_array_equal(sample_initial(3, 2, 1.5, 0.0, 0, 0), np.full((3, 2), 1.5))
        spread = sample_initial(50, 1, 0.0, 2.0, seed=4, replicate=1)
        np.testing.assert_array_equal(spread, sample_initial(50, 1, 0.0, 2.0, seed=4, replicate=1))
        self.assertGreater(spread.std(), 1.0)

    def test_fine_path(self):
        """Test that the fine path ends at the coarse path's terminal value."""
        bundle = sample_noise(self.grid, 2, 1, 1, 4, seed=8, replicate=0)
        times, values = bundle.fine_path(NoiseId.particle(1))
        self.assertEqual(times.size, 8 * 4 + 1)
        self.assertAlmostEqual(times[-1], 1.0)
        self.assertAlmostEqual(values[-1], bundle.particle_path[-1, 1, 0], places=12)
        _, common = bundle.fine_path(NoiseId.common())
        self.assertAlmostEqual(common[-1], bundle.common_path[-1, 0], places=12)


class TestInternalIncrement(unittest.TestCase):
    """Test cases for increments up to the randomised point."""

    def setUp(self):
        """Set up test fixtures."""
        self.grid = make_uniform_grid(1.0, 2)
        self.particle = np.arange(1.0, 17.0).reshape(2, 4, 2, 1) / 10.0

    def test_point_on_fine_node(self):
        """Test the exact partial sum when the point is a fine node."""
        bundle = _bundle_with(self.grid, self.particle, etas=[0.5, 0.25])
        first = internal_increment(bundle, 1, NoiseId.particle(0))
        expected = self.particle[0, 0, 0] + self.particle[0, 1, 0]
        np.testing.assert_array_equal(first, expected)
        second = internal_increment(bundle, 2, NoiseId.particle(1))
        np.testing.assert_array_equal(second, self.particle[1, 0, 1])

    def test_full_step(self):
        """Test that eta = 1 gives the full coarse increment."""
        bundle = _bundle_with(self.grid, self.particle, etas=[1.0, 1.0])
        for j in (1, 2):
            np.testing.assert_array_equal(
                internal_increment(bundle, j, NoiseId.particle(1)),
                bundle.particle_coarse[j - 1, 1],
            )

    def test_out_of_range_step(self):
        """Test rejection of invalid step indices."""
        bundle = _bundle_with(self.grid, self.particle, etas=[0.5, 0.5])
        for j in (0, 3, -1):
            with self.assertRaises(ValueError):
                internal_increment(bundle, j, NoiseId.particle(0))
        with self.assertRaises(ValueError):
            internal_increment(bundle, 1, NoiseId.particle(2))

    def test_bridge_variance(self):
        """Test Var = eta h for the increment at eta = 0.5."""
        grid = make_uniform_grid(1.0, 1000)
        for K in (1, 3):
            bundle = sample_noise(grid, 100, 1, 0, K, seed=21, replicate=K)
            bundle = dataclasses.replace(bundle, etas=np.full(1000, 0.5))
            partial = bundle.particle_partial.ravel()
            self.assertEqual(partial.size, 100_000)
            self.assertLess(abs(partial.var() / (0.5 * 1e-3) - 1.0), 0.02)


class TestIteratedIntegrals(unittest.TestCase):
    """Test cases for iterated stochastic integrals."""

    def test_exact_diagonal(self):
        """Test ((dB)^2 - h) / 2 with dB = 0.3 and h = 0.25."""
        grid = make_uniform_grid(1.0, 4)
        particle = np.zeros((4, 2, 1, 1))
        particle[0, :, 0, 0] = [0.1, 0.2]
        bundle = _bundle_with(grid, particle, etas=np.full(4, 0.5))
        source = (NoiseId.particle(0), 0)
        self.assertAlmostEqual(iterated_integral(bundle, 1, source, source), -0.08, places=12)

    def test_zero_inner_path(self):
        """Test that an identically zero inner path gives 0."""
        grid = make_uniform_grid(1.0, 1)
        particle = np.zeros((1, 4, 2, 1))
        particle[0, :, 1, 0] = [0.3, -0.1, 0.2, 0.5]
        bundle = _bundle_with(grid, particle, etas=[0.5])
        value = iterated_integral(bundle, 1, (NoiseId.particle(0), 0), (NoiseId.particle(1), 0))
        self.assertEqual(value, 0.0)

    def test_subsample_sum(self):
        """Test the left-point sum on a hand-computed example."""
        self.assertAlmostEqual(levy_subsample_sum([1.0, 2.0, 3.0], [1.0, 1.0, 1.0]), 0 + 1 + 3)
        with self.assertRaises(ValueError):
            levy_subsample_sum([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_blocks_match_scalar_integrals(self):
        """Test that the vectorised blocks agree with scalar evaluation."""
        grid = make_uniform_grid(1.0, 2)
        bundle = sample_noise(grid, 2, 2, 2, 5, seed=9, replicate=0)
        blocks = iterated_integrals(bundle, 2, cross_particle=True)
        p, c = NoiseId.particle, NoiseId.common()
        for i in range(2):
            for a in range(2):
                for b in range(2):
                    self.assertAlmostEqual(
                        blocks.particle_self[i, a, b],
                        iterated_integral(bundle, 2, (p(i), a), (p(i), b)),
                        places=12,
                    )
                    self.assertAlmostEqual(
                        blocks.common_to_particle[a, i, b],
                        iterated_integral(bundle, 2, (c, a), (p(i), b)),
                        places=12,
                    )
                    self.assertAlmostEqual(
                        blocks.particle_to_common[i, a, b],
                        iterated_integral(bundle, 2, (p(i), a), (c, b)),
                        places=12,
                    )
                    for k in range(2):
                        self.assertAlmostEqual(
                            blocks.particle_cross[k, a, i, b],
                            iterated_integral(bundle, 2, (p(k), a), (p(i), b)),
                            places=12,
                        )
                self.assertAlmostEqual(
                    blocks.common_common[a, i],
                    iterated_integral(bundle, 2, (c, a), (c, i)),
                    places=12,
                )

    def test_diagonal_blocks_are_exact(self):
        """Test that diagonals of the blocks use the exact formula bitwise."""
        grid = make_uniform_grid(1.0, 2)
        bundle = sample_noise(grid, 3, 2, 1, 6, seed=9, replicate=0)
        blocks = iterated_integrals(bundle, 1)
        dw = bundle.particle_coarse[0]
        np.testing.assert_array_equal(
            np.einsum("iaa->ia", blocks.particle_self), 0.5 * (dw**2 - 0.5)
        )
        self.assertIsNone(blocks.particle_cross)

    def test_subsampling_error_rate(self):
        """Test that the RMS subsampling error halves when K quadruples."""
        grid = make_uniform_grid(1.0, 10_000)
        h = 1e-4
        source = (NoiseId.particle(0), 0)
        rms = {}
        for K in (64, 256):
            bundle = sample_noise(grid, 1, 1, 0, K, seed=13, replicate=0)
            gaps = [
                iterated_integral(bundle, j, source, source, exact_diagonal=False)
                - iterated_integral(bundle, j, source, source)
                for j in range(1, 10_001)
            ]
            rms[K] = np.sqrt(np.mean(np.square(gaps)))
            self.assertLess(abs(rms[K] / (h / np.sqrt(2 * K)) - 1.0), 0.05)
        self.assertTrue(1.6 <= rms[64] / rms[256] <= 2.4)

    def test_cross_term_variance(self):
        """Test Var I(W^1 -> W^2) = h^2 (1 - 1/K) / 2 at K = 1024."""
        K, n = 1024, 2000
        grid = make_uniform_grid(1.0, n)
        h = 1.0 / n
        values = []
        for replicate in range(20):
            bundle = sample_noise(grid, 1, 2, 0, K, seed=31, replicate=replicate)
            for j in range(1, n + 1):
                values.append(iterated_integrals(bundle, j).particle_self[0, 0, 1])
        expected = 0.5 * h * h * (1.0 - 1.0 / K)
        self.assertLess(abs(np.var(values) / expected - 1.0), 0.05)


class TestCoarsen(unittest.TestCase):
    """Test cases for coarsening bundles."""

    def setUp(self):
        """Set up test fixtures."""
        self.grid = make_uniform_grid(1.0, 8)
        self.bundle = sample_noise(self.grid, 3, 1, 1, 2, seed=4, replicate=2)

    def test_identity(self):
        """Test that factor 1 returns the bundle itself."""
        self.assertIs(coarsen(self.bundle, 1), self.bundle)

    def test_merged_increments(self):
        """Test that merged steps carry the sum of the fine increments."""
        coarse = coarsen(self.bundle, 2)
        self.assertEqual(coarse.n_steps, 4)
        self.assertEqual(coarse.substeps, 4)
        self.assertEqual(coarse.eta_level, 2)
        fine = self.bundle.particle_coarse
        np.testing.assert_allclose(coarse.particle_coarse, fine[0::2] + fine[1::2], atol=1e-14)
        np.testing.assert_allclose(
            coarse.common_coarse,
            self.bundle.common_coarse[0::2] + self.bundle.common_coarse[1::2],
            atol=1e-14,
        )
        np.testing.assert_array_equal(
            coarse.particle_increments[1, 2:], self.bundle.particle_increments[3]
        )

    def test_regrouped_substeps(self):
        """Test summing sub-increments into fewer groups."""
        coarse = coarsen(self.bundle, 4, substeps=2)
        self.assertEqual(coarse.substeps, 2)
        np.testing.assert_allclose(
            coarse.particle_increments[0, 0],
            self.bundle.particle_increments[0:2].sum(axis=(0, 1)),
            atol=1e-14,
        )
        with self.assertRaises(ValueError):
            coarsen(self.bundle, 4, substeps=3)

    def test_cumulative_factor(self):
        """Test that coarsening twice by 2 equals coarsening once by 4."""
        twice = coarsen(coarsen(self.bundle, 2), 2)
        once = coarsen(self.bundle, 4)
        np.testing.assert_array_equal(twice.etas, once.etas)
        np.testing.assert_array_equal(twice.particle_increments, once.particle_increments)

    def test_rejects_invalid_factor(self):
        """Test non-divisible factors and non-uniform grids."""
        with self.assertRaises(ValueError):
            coarsen(self.bundle, 3)
        with self.assertRaises(ValueError):
            coarsen(self.bundle, 0)
        uneven = sample_noise(make_grid([0.0, 0.25, 1.0]), 1, 1, 0, 1, seed=0, replicate=0)
        with self.assertRaises(ValueError):
            coarsen(uneven, 2)


if __name__ == "__main__":
    unittest.main()
