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

"""Module to provide helper for writing unit tests."""

import functools
import os
import tempfile
from typing import Tuple
from unittest import mock
import unittest

import numpy as np

from seka import data
from seka.model import init_model, ModelConfig, ToyModel
from seka.steering import learn_bank, ProjectionBank


SMALL_CONFIG = ModelConfig(n_layers=2, n_query_heads=4, n_kv_heads=2,
                           d_model=32, d_k=8, max_seq=96, seed=3)
ACCEPTANCE_CONFIG = ModelConfig(n_layers=4, n_query_heads=8, n_kv_heads=4,
                                d_model=128, d_k=16, max_seq=128, seed=0)


@functools.lru_cache(maxsize=None)
def get_model(config: ModelConfig = SMALL_CONFIG) -> ToyModel:
    """Models are immutable, so tests share one per config."""
    return init_model(config)


@functools.lru_cache(maxsize=None)
def get_bank(config: ModelConfig = SMALL_CONFIG, n: int = 6, seed: int = 42,
             gamma: float = 0.9) -> ProjectionBank:
    return learn_bank(get_model(config), get_triplets(n, seed), gamma)


@functools.lru_cache(maxsize=None)
def get_triplets(n: int, seed: int) -> Tuple[data.PromptTriplet, ...]:
    return tuple(t for s in data.generate_synthetic(n, seed)
                 for t in data.expand_triplets(s))


def orthonormal(rng: np.random.Generator, d: int, r: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return q


class BaseTestCase(unittest.TestCase):
    """Base class for creating classes of unit tests."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._patches = {}
        self._patches_start = {}

    def shortDescription(self):
        """Disable reporting unit test doc strings rather than names."""
        return None

    def setUp(self):
        """Run setup of patches."""
        self._patches = {}
        self._patches_start = {}

    def tearDown(self):
        """Run teardown of patches."""
        for k, v in self._patches.items():
            v.stop()
            setattr(self, k, None)
        self._patches = None
        self._patches_start = None

    def patch_object(self, obj, attr, return_value=None, name=None, new=None,
                     **kwargs):
        """Patch the given object."""
        if name is None:
            name = attr
        if new is not None:
            mocked = mock.patch.object(obj, attr, new=new, **kwargs)
        else:
            mocked = mock.patch.object(obj, attr, **kwargs)
        self._patches[name] = mocked
        started = mocked.start()
        if new is None:
            started.return_value = return_value
        self._patches_start[name] = started
        setattr(self, name, started)

    def patch(self, item, return_value=None, name=None, new=None, **kwargs):
        """Patch the given item."""
        if name is None:
            raise RuntimeError("Must pass 'name' to .patch()")
        if new is not None:
            mocked = mock.patch(item, new=new, **kwargs)
        else:
            mocked = mock.patch(item, **kwargs)
        self._patches[name] = mocked
        started = mocked.start()
        if new is None:
            started.return_value = return_value
        self._patches_start[name] = started
        setattr(self, name, started)

    def tmp_path(self, name: str) -> str:
        """A path inside a directory removed when the test ends."""
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        return os.path.join(tmp.name, name)

    def assertAllClose(self, actual, desired, atol: float = 1e-10,
                       rtol: float = 0.0):
        np.testing.assert_allclose(actual, desired, rtol=rtol, atol=atol)

    def assertBitwiseEqual(self, actual, desired):
        np.testing.assert_array_equal(actual, desired)
