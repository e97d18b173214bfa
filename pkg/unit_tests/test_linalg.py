# seka: spectral key editing for attention steering.
#
# Copyright (C) 2026 The seka developers
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

import numpy as np

from .utils import BaseTestCase

# unit under test
from seka import linalg
from seka.errors import InvalidInput, NumericalFailure


class TestSvd(BaseTestCase):

    def check_invariants(self, a, result):
        u, s, v = result
        r = min(a.shape)
        self.assertEqual(u.shape, (a.shape[0], r))
        self.assertEqual(v.shape, (a.shape[1], r))
        self.assertTrue(np.all(np.diff(s) <= 0.0))
        self.assertTrue(np.all(s >= 0.0))
        self.assertLessEqual(np.linalg.norm(u.T @ u - np.eye(r)), 1e-10)
        self.assertLessEqual(np.linalg.norm(v.T @ v - np.eye(r)), 1e-10)
        self.assertLessEqual(np.linalg.norm(u @ np.diag(s) @ v.T - a),
                             1e-8 * max(1.0, np.linalg.norm(a)))
        for k in range(r):
            pivot = int(np.argmax(np.abs(u[:, k])))
            self.assertGreaterEqual(u[pivot, k], 0.0)

    def test_identity(self):
        u, s, v = linalg.svd(np.eye(3))
        self.assertAllClose(s, [1.0, 1.0, 1.0])
        self.assertAllClose(u, np.eye(3))
        self.assertAllClose(v, np.eye(3))

    def test_diagonal(self):
        u, s, v = linalg.svd(np.diag([3.0, 1.0]))
        self.assertAllClose(s, [3.0, 1.0])
        self.assertAllClose(u, np.eye(2))
        self.assertAllClose(v, np.eye(2))

    def test_sorts_descending(self):
        u, s, v = linalg.svd(np.diag([1.0, 5.0, 2.0]))
        self.assertAllClose(s, [5.0, 2.0, 1.0])
        self.assertAllClose(u[:, 0], [0.0, 1.0, 0.0])

    def test_against_gram_eigenvalues(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((4, 3))
        result = linalg.svd(a)
        self.check_invariants(a, result)
        eigenvalues = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1]
        self.assertAllClose(result.S ** 2, eigenvalues, atol=1e-9)

    def test_random_shapes(self):
        rng = np.random.default_rng(11)
        for m, n in ((1, 1), (1, 5), (5, 1), (7, 3), (3, 7), (16, 16),
                     (32, 20)):
            a = rng.standard_normal((m, n))
            self.check_invariants(a, linalg.svd(a))

    def test_rank_deficient(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 2))
        a = x @ x.T
        result = linalg.svd(a)
        self.check_invariants(a, result)
        self.assertEqual(int(np.sum(result.S > 1e-10)), 2)

    def test_zero_matrix(self):
        result = linalg.svd(np.zeros((3, 2)))
        self.check_invariants(np.zeros((3, 2)), result)
        self.assertBitwiseEqual(result.S, [0.0, 0.0])

    def test_symmetric_psd_matches_eigenvalues(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 5))
        a = x @ x.T
        s = linalg.svd(a).S
        self.assertAllClose(s, np.sort(np.linalg.eigvalsh(a))[::-1],
                            atol=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((8, 5))
        first = linalg.svd(a)
        second = linalg.svd(a.copy())
        for x, y in zip(first, second):
            self.assertBitwiseEqual(x, y)

    def test_invalid_input(self):
        with self.assertRaises(InvalidInput):
            linalg.svd(np.array([[1.0, np.nan]]))
        with self.assertRaises(InvalidInput):
            linalg.svd(np.array([[np.inf]]))
        with self.assertRaises(InvalidInput):
            linalg.svd(np.zeros((0, 3)))
        with self.assertRaises(InvalidInput):
            linalg.svd(np.ones(3))

    def test_no_convergence(self):
        self.patch_object(linalg, 'MAX_SWEEPS', new=0)
        with self.assertRaises(NumericalFailure):
            linalg.svd(np.array([[1.0, 2.0], [3.0, 4.0]]))


class TestPca2(BaseTestCase):

    def test_points_on_a_line(self):
        points = np.array([[x, 0.0, 0.0] for x in (-2.0, 1.0, 3.0, 5.0)])
        result = linalg.pca2(points)
        self.assertAllClose(np.abs(result.components[:, 0]), [1.0, 0.0, 0.0])
        self.assertAllClose(result.components[:, 0] @ result.components[:, 1],
                            0.0)
        self.assertAllClose(result.projected[:, 1], np.zeros(4))

    def test_centered_2d(self):
        points = np.array([[1.0, 2.0], [-1.0, -2.0], [2.0, -1.0],
                           [-2.0, 1.0]])
        result = linalg.pca2(points)
        self.assertAllClose(result.mean, [0.0, 0.0])
        reconstructed = result.projected @ result.components.T
        self.assertAllClose(reconstructed, points)

    def test_variance_ratio(self):
        rng = np.random.default_rng(10)
        points = rng.standard_normal((10, 4)) * [3.0, 2.0, 1.0, 0.5]
        result = linalg.pca2(points)
        centered = points - points.mean(axis=0)
        eigenvalues = np.sort(np.linalg.eigvalsh(centered.T @ centered))[::-1]
        captured = np.sum(result.projected ** 2)
        self.assertAllClose(captured / np.sum(centered ** 2),
                            np.sum(eigenvalues[:2]) / np.sum(eigenvalues),
                            atol=1e-9)

    def test_invalid(self):
        with self.assertRaises(InvalidInput):
            linalg.pca2(np.ones((1, 3)))
        with self.assertRaises(InvalidInput):
            linalg.pca2(np.ones((4, 1)))
