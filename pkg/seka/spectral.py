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

"""Spectral projections of key embeddings.

Cross-covariances between neutral and signed key embeddings are decomposed
with :func:`seka.linalg.svd`; the top left singular vectors of the positive
covariance and the tail left singular vectors of the negative covariance span
the subspaces that key edits amplify.
"""

from dataclasses import dataclass
import logging
from typing import Tuple

import numpy as np

from seka.errors import InvalidInput
from seka.linalg import as_matrix, SvdResult

LOG = logging.getLogger(__name__)

POSITIVE = 'positive'
NEGATIVE = 'negative'

SYMMETRY_TOLERANCE = 1e-10
IDEMPOTENCY_TOLERANCE = 1e-9
ORTHONORMAL_TOLERANCE = 1e-8


@dataclass(frozen=True)
class CrossCovariancePair:
    omega_pos: np.ndarray
    omega_neg: np.ndarray
    n_tokens: int


@dataclass(frozen=True)
class ProjectionPair:
    """P+ and P- for one (layer, kv-head), with their ranks.

    k_neg is the split index: P- is built from the columns after it.
    """
    p_pos: np.ndarray
    p_neg: np.ndarray
    k_pos: int
    k_neg: int
    gamma: float

    @property
    def d_k(self) -> int:
        return self.p_pos.shape[0]


@dataclass(frozen=True)
class SteeringGains:
    g_pos: float
    g_neg: float

    def __post_init__(self):
        if not (np.isfinite(self.g_pos) and np.isfinite(self.g_neg)):
            raise InvalidInput(
                f"gains must be finite, got ({self.g_pos}, {self.g_neg})")

    @property
    def is_zero(self) -> bool:
        return self.g_pos == 0.0 and self.g_neg == 0.0


def cross_covariance(h_neutral, h_signed) -> np.ndarray:
    """Omega = h_neutral^T h_signed / n.

    :param h_neutral: n x d_k neutral key embeddings.
    :param h_signed: n x d_k positive or negative key embeddings, paired
        row-for-row with h_neutral.
    :returns: d_k x d_k matrix.
    :raises: InvalidInput on a shape mismatch.
    """
    h = as_matrix(h_neutral, 'h_neutral')
    hs = as_matrix(h_signed, 'h_signed')
    if h.shape != hs.shape:
        raise InvalidInput(
            f"shape mismatch: neutral {h.shape} vs signed {hs.shape}")
    return (h.T @ hs) / h.shape[0]


def cross_covariance_pair(h_neutral, h_pos, h_neg) -> CrossCovariancePair:
    return CrossCovariancePair(cross_covariance(h_neutral, h_pos),
                               cross_covariance(h_neutral, h_neg),
                               np.asarray(h_neutral).shape[0])


def select_rank(s, gamma: float, side: str = POSITIVE) -> int:
    """Smallest k whose head mass sum(S[:k]) / sum(S) reaches gamma.

    The same rule serves both sides.  On the positive side k is the number
    of leading singular vectors kept.  On the negative side it is the split
    index: the least significant vectors S[k:] are the ones used.

    :param s: singular values, descending and nonnegative.
    :param gamma: variance threshold in (0, 1].
    :param side: POSITIVE or NEGATIVE; only affects logging.
    :returns: k in 1..len(s).
    :raises: InvalidInput on bad spectra or thresholds.
    """
    values = np.asarray(s, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise InvalidInput("singular values must be a non-empty vector")
    if not np.all(np.isfinite(values)) or np.any(values < 0.0):
        raise InvalidInput("singular values must be finite and nonnegative")
    if np.any(np.diff(values) > 0.0):
        raise InvalidInput("singular values must be sorted descending")
    if not (0.0 < gamma <= 1.0):
        raise InvalidInput(f"gamma must be in (0, 1], got {gamma}")
    if side not in (POSITIVE, NEGATIVE):
        raise InvalidInput(f"unknown side '{side}'")
    cumulative = np.cumsum(values)
    total = cumulative[-1]
    if total <= 0.0:
        raise InvalidInput("all singular values are zero")
    ratios = cumulative / total
    k = int(np.argmax(ratios >= gamma)) + 1
    LOG.debug("%s rank %d of %d at gamma %s", side, k, values.size, gamma)
    return k


def top_projection(u: np.ndarray, k: int) -> np.ndarray:
    head = u[:, :k]
    return head @ head.T


def tail_projection(u: np.ndarray, k: int) -> np.ndarray:
    tail = u[:, k:]
    return tail @ tail.T


def build_projections(svd_pos: SvdResult, svd_neg: SvdResult,
                      gamma: float) -> ProjectionPair:
    """Build P+ from the top and P- from the tail singular vectors.

    An empty negative tail (k- equal to d_k) gives P- = 0 with a warning.

    :param svd_pos: SVD of the positive cross-covariance.
    :param svd_neg: SVD of the negative cross-covariance.
    :param gamma: variance threshold.
    :returns: the ProjectionPair.
    """
    k_pos = select_rank(svd_pos.S, gamma, POSITIVE)
    k_neg = select_rank(svd_neg.S, gamma, NEGATIVE)
    return projection_pair_from_components(
        svd_pos.U, k_pos, svd_neg.U, k_neg, gamma)


def projection_pair_from_components(u_pos: np.ndarray, k_pos: int,
                                    u_neg: np.ndarray, k_neg: int,
                                    gamma: float) -> ProjectionPair:
    if k_neg >= u_neg.shape[1]:
        LOG.warning("negative tail is empty (k- = %d = d_k); P- is zero",
                    k_neg)
    return ProjectionPair(p_pos=top_projection(u_pos, k_pos),
                          p_neg=tail_projection(u_neg, k_neg),
                          k_pos=k_pos,
                          k_neg=k_neg,
                          gamma=gamma)


def edit_matrix(pair: ProjectionPair, gains: SteeringGains) -> np.ndarray:
    """M = (g+ P+ + g- P-) / 2, so that k' = k + M k."""
    return (gains.g_pos * pair.p_pos + gains.g_neg * pair.p_neg) / 2.0


def edit_key(k, pair: ProjectionPair, gains: SteeringGains) -> np.ndarray:
    """k' = k + (g+ P+ k + g- P- k) / 2.

    :raises: InvalidInput on a dimension mismatch.
    """
    key = np.asarray(k, dtype=np.float64)
    if key.shape != (pair.d_k,):
        raise InvalidInput(
            f"key has shape {key.shape}, projections are {pair.d_k}-d")
    return key + edit_matrix(pair, gains) @ key


def check_orthonormal(u, tolerance: float = ORTHONORMAL_TOLERANCE
                      ) -> np.ndarray:
    basis = as_matrix(u, 'U')
    gram = basis.T @ basis
    error = np.linalg.norm(gram - np.eye(basis.shape[1]))
    if error > tolerance:
        raise InvalidInput(
            f"columns of U are not orthonormal (|U^T U - I| = {error:.3e})")
    return basis


def decompose_subspace(x, u) -> Tuple[np.ndarray, np.ndarray]:
    """Split x into its components inside and orthogonal to span(U).

    :param x: a d vector.
    :param u: d x r matrix with orthonormal columns.
    :returns: (x_parallel, x_perp).
    :raises: InvalidInput if U isn't orthonormal or dimensions differ.
    """
    basis = check_orthonormal(u)
    vec = np.asarray(x, dtype=np.float64)
    if vec.shape != (basis.shape[0],):
        raise InvalidInput(
            f"x has shape {vec.shape}, U has {basis.shape[0]} rows")
    parallel = basis @ (basis.T @ vec)
    return parallel, vec - parallel


def amplify(x, u, g: float) -> np.ndarray:
    """(I + g U U^T) x."""
    basis = check_orthonormal(u)
    vec = np.asarray(x, dtype=np.float64)
    return vec + g * (basis @ (basis.T @ vec))


def is_projection(p: np.ndarray) -> bool:
    return (np.linalg.norm(p - p.T) <= SYMMETRY_TOLERANCE and
            np.linalg.norm(p @ p - p) <= IDEMPOTENCY_TOLERANCE)
