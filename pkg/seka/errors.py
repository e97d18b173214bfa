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

"""Exceptions raised by the seka library.

The command line maps these onto exit codes; see :mod:`seka.cmd`.
"""

from typing import Optional


class SekaError(Exception):
    """Base class for all seka errors."""
    pass


class InvalidInput(SekaError):
    """Error raised if an argument just isn't okay."""
    pass


class NumericalFailure(SekaError):
    """Error raised if an iterative routine fails to converge."""
    pass


class InvalidConfig(SekaError):
    """Error raised if a model or run configuration is inconsistent."""
    pass


class InvalidPlan(SekaError):
    """Error raised if an edit plan doesn't fit the model or bank."""
    pass


class InvalidSample(SekaError):
    """Error raised if a contrastive sample breaks its invariants."""
    pass


class CapacityError(SekaError):
    """Error raised if more unique items are requested than can exist."""
    pass


class UnsupportedVersion(SekaError):
    """Error raised on an unknown file format_version."""
    pass


class DuplicateKeyError(SekaError):
    """Error if a registry entry is duplicated by name."""
    pass


class SpanResolutionError(SekaError):
    """Error raised if a span can't be found in a tokenized prompt."""

    def __init__(self, message: str, triplet_index: Optional[int] = None):
        super().__init__(message)
        self.triplet_index = triplet_index


class ParseError(SekaError):
    """Error raised on malformed highlight markers."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (at byte offset {byte_offset})")
        self.byte_offset = byte_offset


class SchemaError(SekaError):
    """Error raised if a JSON document doesn't match its schema."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path
