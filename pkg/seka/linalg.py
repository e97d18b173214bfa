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

"""Dense real linear algebra: a one-sided Jacobi SVD and a 2-component PCA.

Everything is float64.  The SVD fixes the sign of each singular vector pair
so that routing scores built from the left singular vectors are
reproducible.
"""

import math
from typing import NamedTuple

import numpy as np

from seka.errors import InvalidInput, NumericalFailure

MAX_SWEEPS = 64
OFF_TOLERANCE = 1e-12
EPS = float(np.finfo(np.float64).eps)


class SvdResult(NamedTuple):
    """Thin SVD; A = U diag(S) V^T with r = min(rows, cols)."""
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


class Pca2(NamedTuple):
    projected: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def as_matrix(a, name: str = 'matrix') -> np.ndarray:
    """Return a as a finite, non-empty float64 2-d array.

    :raises: InvalidInput on the wrong rank, an empty axis or NaN/Inf.
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInput(f"{name} must be 2-d, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise InvalidInput(f"{name} has an empty axis: {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput(f"{name} has non-finite entries")
    return m


def svd(a) -> SvdResult:
    """Thin singular value decomposition.

    Singular values are sorted descending.  In every column of U the entry of
    largest magnitude is nonnegative (lowest row index wins ties) and the
    matching column of V is flipped with it.  Columns for zero singular
    values are completed to an orthonormal set deterministically.

    :param a: an m x n finite matrix.
    :returns: SvdResult with U (m x r), S (r,), V (n x r).
    :raises: InvalidInput for a non-finite or empty matrix.
    :raises: NumericalFailure if Jacobi sweeps don't converge.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        u, s, v = _one_sided_jacobi(a.T)
        u, v = v, u
    else:
        u, s, v = _one_sided_jacobi(a)
    for k in range(s.shape[0]):
        pivot = int(np.argmax(np.abs(u[:, k])))
        if u[pivot, k] < 0.0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]
    return SvdResult(u, s, v)


def _one_sided_jacobi(a: np.ndarray):
    # a is m x n with m >= n.
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    frob = float(np.linalg.norm(a))
    negligible = (EPS * frob) ** 2
    for sweep in range(MAX_SWEEPS):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi = w[:, i]
                wj = w[:, j]
                alpha = float(wi @ wi)
                beta = float(wj @ wj)
                if alpha <= negligible or beta <= negligible:
                    continue
                gamma = float(wi @ wj)
                rel = gamma / math.sqrt(alpha * beta)
                off += rel * rel
                if abs(rel) <= EPS:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (
                    abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wi_old = wi.copy()
                w[:, i] = c * wi_old - s * wj
                w[:, j] = s * wi_old + c * w[:, j]
                vi_old = v[:, i].copy()
                v[:, i] = c * vi_old - s * v[:, j]
                v[:, j] = s * vi_old + c * v[:, j]
        if math.sqrt(off) <= OFF_TOLERANCE:
            break
    else:
        raise NumericalFailure(
            f"Jacobi SVD didn't converge in {MAX_SWEEPS} sweeps "
            f"for a {m}x{n} matrix")

    norms = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-norms, kind='stable')
    norms = norms[order]
    w = w[:, order]
    v = v[:, order]
    cutoff = max(m, n) * EPS * (norms[0] if n else 0.0)
    s = np.where(norms > cutoff, norms, 0.0)
    u = np.zeros((m, n))
    nonzero = [k for k in range(n) if s[k] > 0.0]
    for k in nonzero:
        u[:, k] = w[:, k] / s[k]
    zero = [k for k in range(n) if s[k] == 0.0]
    if zero:
        basis = u[:, nonzero]
        for k, column in zip(zero, _complete_basis(basis, len(zero)).T):
            u[:, k] = column
    return u, s, v


def _complete_basis(basis: np.ndarray, count: int) -> np.ndarray:
    """Extend orthonormal columns with count more, from the standard basis.

    The candidate e_i with the largest residual against the current basis is
    taken each time, so the result is deterministic.
    """
    m = basis.shape[0]
    q = basis.copy()
    added = []
    for _ in range(count):
        residual = np.eye(m) - q @ q.T
        pick = int(np.argmax(np.sum(residual * residual, axis=0)))
        x = np.zeros(m)
        x[pick] = 1.0
        for _ in range(2):
            x = x - q @ (q.T @ x)
        x = x / np.linalg.norm(x)
        added.append(x)
        q = np.column_stack([q, x])
    return np.column_stack(added)


def pca2(points) -> Pca2:
    """Project points on their top two principal components.

    :param points: n x d matrix with n >= 2 and d >= 2.
    :returns: Pca2(projected n x 2, components d x 2, mean d).
    :raises: InvalidInput if there are fewer than 2 rows or columns.
    """
    x = as_matrix(points, 'points')
    if x.shape[0] < 2:
        raise InvalidInput("PCA needs at least 2 points")
    if x.shape[1] < 2:
        raise InvalidInput("PCA needs at least 2 dimensions")
    mean = x.mean(axis=0)
    centered = x - mean
    components = svd(centered).V[:, :2].copy()
    return Pca2(centered @ components, components, mean)
