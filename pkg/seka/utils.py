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

import json
import os
from typing import Any

import numpy as np

from seka.errors import InvalidConfig

try:
    from functools import cache
except ImportError:
    from functools import lru_cache as cache

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
MASK64 = 0xffffffffffffffff

SPLITMIX_GAMMA = np.uint64(0x9e3779b97f4a7c15)
SPLITMIX_M1 = np.uint64(0xbf58476d1ce4e5b9)
SPLITMIX_M2 = np.uint64(0x94d049bb133111eb)

THREADS_ENV = 'SEKA_THREADS'


def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a hash over the UTF-8 bytes of text."""
    h = FNV_OFFSET
    for byte in text.encode('utf-8'):
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def derive_key(seed: int, *parts: Any) -> int:
    """Derive a stream key from a seed and a list of role labels.

    :param seed: the 64-bit model seed.
    :param parts: labels such as a layer index and a matrix role.
    :returns: a 64-bit key for :func:`splitmix64`.
    """
    label = '|'.join([str(seed & MASK64)] + [str(p) for p in parts])
    return fnv1a_64(label)


def splitmix64(key: int, start: int, count: int) -> np.ndarray:
    """Counter based SplitMix64 stream.

    Element i is the SplitMix64 output for state key + (start+i+1)*gamma, so
    any window of the stream can be regenerated without the elements before
    it.

    :param key: the 64-bit stream key.
    :param start: index of the first element.
    :param count: number of elements.
    :returns: uint64 array of length count.
    """
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = counters * SPLITMIX_GAMMA + np.uint64(key & MASK64)
    z = (z ^ (z >> np.uint64(30))) * SPLITMIX_M1
    z = (z ^ (z >> np.uint64(27))) * SPLITMIX_M2
    return z ^ (z >> np.uint64(31))


def uniform(key: int, start: int, count: int, bound: float) -> np.ndarray:
    """Uniform float64 draws in [-bound, bound) from a SplitMix64 stream."""
    bits = splitmix64(key, start, count) >> np.uint64(11)
    unit = bits.astype(np.float64) * (2.0 ** -53)
    return (2.0 * unit - 1.0) * bound


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def fingerprint(obj: Any) -> str:
    """Hash of the canonical JSON of obj, as 16 hex digits."""
    return f"{fnv1a_64(canonical_json(obj)):016x}"


def format_double(x: float) -> str:
    return f"{float(x):.17g}"


@cache
def get_thread_count() -> int:
    """Return the cap on internal parallelism.

    Reads SEKA_THREADS once; falls back to the CPU count.

    :raises: InvalidConfig if SEKA_THREADS isn't a positive integer.
    """
    value = os.environ.get(THREADS_ENV)
    if value is None or not value.strip():
        return max(1, os.cpu_count() or 1)
    try:
        threads = int(value)
    except ValueError:
        raise InvalidConfig(
            f"{THREADS_ENV} must be an integer, got '{value}'")
    if threads < 1:
        raise InvalidConfig(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads
