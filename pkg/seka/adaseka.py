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

"""Query-adaptive steering over a bank of named experts.

Each expert keeps the top K positive singular vectors and values per
(layer, kv head).  For a prompt, the last-token query of every kv group is
scored against each expert, the scores are divided by their largest magnitude
and the signed sum of expert projections becomes the edit for that head.
"""

from dataclasses import dataclass, field
import logging
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from seka.data import ExpertDataset
from seka.errors import DuplicateKeyError, InvalidInput, InvalidPlan
from seka.linalg import svd
from seka.model import capture_last_query, TokenSequence, ToyModel
from seka.spectral import check_orthonormal, cross_covariance
from seka.steering import (
    Cell,
    collect_keys,
    EditPlan,
    HeadSelection,
    KeyEmbeddingSet,
)

LOG = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExpertComponents:
    u: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class ExpertEntry:
    name: str
    entries: Dict[Cell, ExpertComponents]


@dataclass(frozen=True)
class ExpertBank:
    fingerprint: str
    K: int
    experts: Dict[str, ExpertEntry] = field(default_factory=dict)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.experts)

    def add_expert(self, expert: ExpertEntry) -> 'ExpertBank':
        """Return a bank with expert appended; existing experts are kept.

        :raises: DuplicateKeyError if the name is taken.
        :raises: InvalidInput if the expert has a different component count.
        """
        if expert.name in self.experts:
            raise DuplicateKeyError(
                f"expert '{expert.name}' is already in the bank")
        for cell, comp in expert.entries.items():
            if comp.u.shape[1] != self.K:
                raise InvalidInput(
                    f"expert '{expert.name}' head {cell} has "
                    f"{comp.u.shape[1]} components, bank uses {self.K}")
        experts = dict(self.experts)
        experts[expert.name] = expert
        return ExpertBank(self.fingerprint, self.K, experts)

    def validate(self) -> 'ExpertBank':
        """Check orthonormal columns and descending nonnegative values.

        :raises: InvalidInput on the first violation.
        """
        if not self.experts:
            raise InvalidInput("expert bank has no experts")
        for name, expert in self.experts.items():
            for cell, comp in sorted(expert.entries.items()):
                try:
                    check_orthonormal(comp.u)
                except InvalidInput as e:
                    raise InvalidInput(f"expert '{name}' head {cell}: {e}")
                if (comp.s.shape != (comp.u.shape[1],) or
                        np.any(comp.s < 0.0) or
                        np.any(np.diff(comp.s) > 0.0)):
                    raise InvalidInput(
                        f"expert '{name}' head {cell}: singular values must "
                        f"be descending and nonnegative")
        return self


@dataclass(frozen=True)
class RoutingCoefficients:
    """alpha[cell][m] for the experts in names order."""
    names: Tuple[str, ...]
    alpha: Dict[Cell, np.ndarray]


def learn_expert(model: ToyModel, dataset: ExpertDataset, K: int,
                 keys: Optional[KeyEmbeddingSet] = None) -> ExpertEntry:
    """Top K positive components of the dataset, for every head.

    :param model: the model to capture keys from.
    :param dataset: neutral/positive pairs of the expert's task.
    :param K: components kept, 1 <= K <= d_k.
    :param keys: already pooled keys, to skip the capture.
    :raises: InvalidInput on an empty dataset or bad K.
    :raises: SpanResolutionError naming the failing pair.
    """
    d_k = model.config.d_k
    if not 1 <= K <= d_k:
        raise InvalidInput(f"K must be in 1..{d_k}, got {K}")
    if keys is None:
        if not dataset.pairs:
            raise InvalidInput(f"dataset '{dataset.name}' is empty")
        keys = collect_keys(model, [
            ((p.neutral_prompt, p.positive_prompt), p.span_texts)
            for p in dataset.pairs])
    entries = {}
    config = model.config
    for layer in range(config.n_layers):
        for kv_head in range(config.n_kv_heads):
            result = svd(cross_covariance(keys.neutral[layer, kv_head],
                                          keys.positive[layer, kv_head]))
            entries[(layer, kv_head)] = ExpertComponents(
                u=result.U[:, :K].copy(), s=result.S[:K].copy())
    LOG.info("learnt expert '%s' from %d tokens", dataset.name,
             keys.n_tokens)
    return ExpertEntry(dataset.name, entries)


def normalize_scores(raw) -> np.ndarray:
    """Divide by the largest magnitude, keeping signs.

    Scores that are all zero stay zero.
    """
    scores = np.asarray(raw, dtype=np.float64)
    peak = float(np.max(np.abs(scores))) if scores.size else 0.0
    if peak == 0.0:
        return np.zeros_like(scores)
    return scores / peak


def routing_scores(queries, bank: ExpertBank,
                   cells: Optional[Iterable[Cell]] = None
                   ) -> Dict[Cell, np.ndarray]:
    """raw_m = sum_k (q . u_m^k) s_m^k for each head and expert.

    :param queries: [layer][kv_head][d_k] last-token queries.
    :param bank: the expert bank.
    :param cells: heads to score; defaults to every head of the queries.
    :raises: InvalidInput on a dimension mismatch or an unknown head.
    """
    q = np.asarray(queries, dtype=np.float64)
    if not bank.experts:
        raise InvalidInput("expert bank has no experts")
    if q.ndim != 3:
        raise InvalidInput(
            f"queries must be [layer][kv_head][d_k], got {q.shape}")
    if cells is None:
        cells = [(layer, kv_head) for layer in range(q.shape[0])
                 for kv_head in range(q.shape[1])]
    scores = {}
    for cell in cells:
        layer, kv_head = cell
        if not (0 <= layer < q.shape[0] and 0 <= kv_head < q.shape[1]):
            raise InvalidInput(f"head {cell} is outside the queries")
        raw = np.empty(len(bank.experts))
        for m, expert in enumerate(bank.experts.values()):
            comp = expert.entries.get(cell)
            if comp is None:
                raise InvalidInput(
                    f"expert '{expert.name}' has no entry for head {cell}")
            if comp.u.shape[0] != q.shape[2]:
                raise InvalidInput(
                    f"query is {q.shape[2]}-d, expert '{expert.name}' is "
                    f"{comp.u.shape[0]}-d")
            raw[m] = (q[layer, kv_head] @ comp.u) @ comp.s
        scores[cell] = raw
    return scores


def route_coefficients(queries, bank: ExpertBank,
                       cells: Optional[Iterable[Cell]] = None
                       ) -> RoutingCoefficients:
    """Normalized routing coefficients per head.

    A head whose scores are all zero gets all-zero coefficients and a
    warning.
    """
    alpha = {}
    for cell, raw in routing_scores(queries, bank, cells).items():
        alpha[cell] = normalize_scores(raw)
        if not np.any(raw):
            LOG.warning("query at head %s is orthogonal to every expert; "
                        "no steering there", cell)
    return RoutingCoefficients(bank.names, alpha)


def dynamic_projection(alpha: RoutingCoefficients, bank: ExpertBank,
                       layer: int, kv_head: int) -> np.ndarray:
    """P_dyn = sum_m alpha_m U_m U_m^T over the stored columns.

    :raises: InvalidInput if the head or an expert is unknown.
    """
    cell = (layer, kv_head)
    coefficients = alpha.alpha.get(cell)
    if coefficients is None:
        raise InvalidInput(f"no routing coefficients for head {cell}")
    projection = None
    for name, a in zip(alpha.names, coefficients):
        expert = bank.experts.get(name)
        if expert is None or cell not in expert.entries:
            raise InvalidInput(f"expert '{name}' has no head {cell}")
        u = expert.entries[cell].u
        term = a * (u @ u.T)
        projection = term if projection is None else projection + term
    return projection


def plan_from_routing(bank: ExpertBank, alpha: RoutingCoefficients,
                      selection: HeadSelection, g: float,
                      mask: Iterable[int]) -> EditPlan:
    """Edit matrices g * P_dyn for every selected head."""
    mask = frozenset(int(i) for i in mask)
    if not mask:
        raise InvalidInput("an edit plan needs at least one masked position")
    if not np.isfinite(g):
        raise InvalidInput(f"gain must be finite, got {g}")
    entries = {cell: g * dynamic_projection(alpha, bank, *cell)
               for cell in sorted(selection.selected)}
    return EditPlan(entries=entries,
                    mask=mask,
                    fingerprint=bank.fingerprint,
                    metadata={'method': 'adaseka',
                              'g': g,
                              'K': bank.K,
                              'experts': list(alpha.names),
                              'delta_min': selection.delta_min})


def adaseka_plan(model: ToyModel, seq: TokenSequence, bank: ExpertBank,
                 selection: HeadSelection, g: float,
                 mask: Iterable[int]) -> EditPlan:
    """Route the prompt's last-token queries and build its edit plan.

    The plan is only valid for seq; build one per prompt.

    :raises: InvalidPlan if bank, selection and model don't belong together.
    :raises: InvalidInput on an empty mask or a non-finite gain.
    """
    if bank.fingerprint != model.fingerprint:
        raise InvalidPlan(
            f"expert bank was learnt on model {bank.fingerprint}, "
            f"not {model.fingerprint}")
    if selection.fingerprint and selection.fingerprint != model.fingerprint:
        raise InvalidPlan(
            f"selection was made for model {selection.fingerprint}, "
            f"not {model.fingerprint}")
    queries = capture_last_query(model, seq)
    alpha = route_coefficients(queries, bank, sorted(selection.selected))
    return plan_from_routing(bank, alpha, selection, g, mask)
