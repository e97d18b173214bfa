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

"""Projection banks, head selection and key-edit plans.

The offline phase captures span keys of every triplet under its neutral,
positive and negative prompts, pools them per (layer, kv head) and keeps the
SVD components of the two cross-covariances.  At inference a plan holds one
combined edit matrix per selected (layer, kv head) plus the highlighted
positions it applies to.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import math
from typing import (
    Any,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from seka.data import locate_span, PromptTriplet
from seka.errors import InvalidInput, InvalidPlan, SpanResolutionError
from seka.linalg import svd
from seka.model import (
    capture_keys,
    CaptureFlags,
    forward,
    tokenize,
    ToyModel,
    TokenSequence,
)
from seka.spectral import (
    cross_covariance,
    edit_matrix,
    NEGATIVE,
    POSITIVE,
    projection_pair_from_components,
    ProjectionPair,
    select_rank,
    SteeringGains,
)
from seka.utils import get_thread_count

LOG = logging.getLogger(__name__)

Cell = Tuple[int, int]


@dataclass(frozen=True)
class KeyEmbeddingSet:
    """Pooled span keys, each [layer][kv_head][token][d_k].

    Rows of every variant are paired token-for-token.
    """
    neutral: np.ndarray
    positive: np.ndarray
    negative: Optional[np.ndarray] = None

    @property
    def n_tokens(self) -> int:
        return self.neutral.shape[2]


@dataclass(frozen=True)
class BankEntry:
    u_pos: np.ndarray
    s_pos: np.ndarray
    u_neg: np.ndarray
    s_neg: np.ndarray
    k_pos: int
    k_neg: int
    head_distance: float

    def projection_pair(self, gamma: float) -> ProjectionPair:
        return projection_pair_from_components(
            self.u_pos, self.k_pos, self.u_neg, self.k_neg, gamma)


@dataclass(frozen=True)
class ProjectionBank:
    fingerprint: str
    gamma: float
    entries: Dict[Cell, BankEntry]

    @property
    def shape(self) -> Tuple[int, int]:
        """(n_layers, n_kv_heads) covered by the entries."""
        if not self.entries:
            return (0, 0)
        return (max(c[0] for c in self.entries) + 1,
                max(c[1] for c in self.entries) + 1)

    def head_distances(self) -> np.ndarray:
        distances = np.zeros(self.shape)
        for (layer, kv_head), entry in self.entries.items():
            distances[layer, kv_head] = entry.head_distance
        return distances

    def check_model(self, model: ToyModel) -> 'ProjectionBank':
        """Ensure the bank was learnt on model and covers all its heads.

        :raises: InvalidPlan otherwise.
        """
        if self.fingerprint != model.fingerprint:
            raise InvalidPlan(
                f"bank was learnt on model {self.fingerprint}, "
                f"not {model.fingerprint}")
        config = model.config
        missing = [(layer, kv_head)
                   for layer in range(config.n_layers)
                   for kv_head in range(config.n_kv_heads)
                   if (layer, kv_head) not in self.entries]
        if missing:
            raise InvalidPlan(f"bank has no entry for heads {missing}")
        return self


@dataclass(frozen=True)
class HeadSelection:
    delta_min: float
    selected: FrozenSet[Cell]
    fingerprint: str = ''


@dataclass(frozen=True)
class EditPlan:
    """Combined edit matrices per (layer, kv head) and the masked positions.

    The model replaces each masked key k of a planned head by k + M k.
    """
    entries: Dict[Cell, np.ndarray]
    mask: FrozenSet[int]
    fingerprint: str
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.entries and not self.mask:
            raise InvalidPlan("a plan with edit entries needs a mask")
        for cell, matrix in self.entries.items():
            if (matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or
                    not np.all(np.isfinite(matrix))):
                raise InvalidPlan(
                    f"edit matrix for {cell} must be square and finite")


###
#
# Offline phase
#
###

def _span_rows(seq: TokenSequence, prompt: str,
               span_texts: Sequence[str], index: int) -> List[int]:
    rows: List[int] = []
    for span_text in span_texts:
        try:
            rows.extend(locate_span(prompt, span_text, seq))
        except SpanResolutionError as e:
            raise SpanResolutionError(f"item {index}: {e}", index)
    return rows


def _capture_item(model: ToyModel, index: int, prompts: Sequence[str],
                  span_texts: Sequence[str]) -> List[np.ndarray]:
    captured = []
    for prompt in prompts:
        seq = tokenize(prompt)
        captured.append(capture_keys(
            model, seq, _span_rows(seq, prompt, span_texts, index)))
    counts = {c.shape[2] for c in captured}
    if len(counts) != 1:
        raise SpanResolutionError(
            f"item {index}: span covers {sorted(counts)} tokens in different "
            f"variants", index)
    return captured


def collect_keys(model: ToyModel,
                 items: Sequence[Tuple[Sequence[str], Sequence[str]]]
                 ) -> KeyEmbeddingSet:
    """Pool span keys over items of (prompts, span_texts).

    prompts holds the neutral, positive and optionally negative prompt of one
    item; all spans of an item are concatenated.  Pooling order is the item
    order, whatever the scheduling.

    :raises: InvalidInput if nothing is pooled.
    :raises: SpanResolutionError naming the failing item.
    """
    if not items:
        raise InvalidInput("no items to pool keys from")
    # generated once, before the workers share the model.
    model.embedding_table
    with ThreadPoolExecutor(max_workers=get_thread_count()) as executor:
        captured = list(executor.map(
            lambda args: _capture_item(model, *args),
            [(i, prompts, spans) for i, (prompts, spans) in enumerate(items)]))
    variants = len(captured[0])
    pooled = [np.concatenate([c[v] for c in captured], axis=2)
              for v in range(variants)]
    if pooled[0].shape[2] == 0:
        raise InvalidInput("no span tokens were pooled")
    LOG.info("pooled %d span tokens from %d items",
             pooled[0].shape[2], len(items))
    return KeyEmbeddingSet(*pooled)


def _learn_cell(keys: KeyEmbeddingSet, cell: Cell, gamma: float,
                distance: float) -> BankEntry:
    layer, kv_head = cell
    neutral = keys.neutral[layer, kv_head]
    pos = svd(cross_covariance(neutral, keys.positive[layer, kv_head]))
    neg = svd(cross_covariance(neutral, keys.negative[layer, kv_head]))
    k_pos = select_rank(pos.S, gamma, POSITIVE)
    k_neg = select_rank(neg.S, gamma, NEGATIVE)
    LOG.debug("head %s: k+ = %d, k- = %d, distance %.6g",
              cell, k_pos, k_neg, distance)
    return BankEntry(u_pos=pos.U, s_pos=pos.S, u_neg=neg.U, s_neg=neg.S,
                     k_pos=k_pos, k_neg=k_neg, head_distance=distance)


def learn_bank(model: ToyModel, triplets: Sequence[PromptTriplet],
               gamma: float) -> ProjectionBank:
    """Learn positive and negative spectral components for every head.

    :param model: the model to capture keys from.
    :param triplets: supervision triplets; must not be empty.
    :param gamma: variance threshold in (0, 1].
    :returns: the ProjectionBank.
    :raises: InvalidInput on an empty input or a bad gamma.
    :raises: SpanResolutionError with the failing triplet index.
    """
    if not (0.0 < gamma <= 1.0):
        raise InvalidInput(f"gamma must be in (0, 1], got {gamma}")
    if not triplets:
        raise InvalidInput("at least one triplet is needed")
    keys = collect_keys(model, [
        ((t.neutral_prompt, t.positive_prompt, t.negative_prompt),
         (t.span_text,)) for t in triplets])
    distances = compute_head_distances(keys)
    config = model.config
    cells = [(layer, kv_head)
             for layer in range(config.n_layers)
             for kv_head in range(config.n_kv_heads)]
    with ThreadPoolExecutor(max_workers=get_thread_count()) as executor:
        entries = list(executor.map(
            lambda cell: _learn_cell(keys, cell, gamma,
                                     float(distances[cell])),
            cells))
    return ProjectionBank(fingerprint=model.fingerprint,
                          gamma=gamma,
                          entries=dict(zip(cells, entries)))


def random_bank(bank: ProjectionBank, seed: int) -> ProjectionBank:
    """Swap every learnt basis for a seeded random orthonormal one.

    Ranks, singular values and head distances are kept, so gamma and head
    selection act as they do on bank; only the directions carry no learnt
    relevance.  Selecting every head (delta_min 0) also drops the head
    filter.

    :param bank: the learnt bank whose ranks are reused.
    :param seed: nonnegative seed; each head draws from (seed, layer, head).
    :returns: a ProjectionBank for the same model.
    :raises: InvalidInput on a negative seed.
    """
    if seed < 0:
        raise InvalidInput(f"seed must be >= 0, got {seed}")
    entries = {}
    for cell, entry in sorted(bank.entries.items()):
        rng = np.random.default_rng([seed, *cell])
        d_k = entry.u_pos.shape[0]
        entries[cell] = replace(
            entry,
            u_pos=svd(rng.standard_normal((d_k, d_k))).U,
            u_neg=svd(rng.standard_normal((d_k, d_k))).U)
    LOG.info("replaced %d learnt bases with random ones (seed %d)",
             len(entries), seed)
    return ProjectionBank(fingerprint=bank.fingerprint, gamma=bank.gamma,
                          entries=entries)


def compute_head_distances(source: Union[ProjectionBank, KeyEmbeddingSet,
                                         Tuple[Any, Any]]) -> np.ndarray:
    """D[l][h] = mean over tokens of |h+_i - h-_i|.

    :param source: a bank, a KeyEmbeddingSet or a (positive, negative) pair
        of [layer][kv_head][token][d_k] arrays.
    :returns: n_layers x n_kv_heads matrix.
    :raises: InvalidInput if the captures aren't aligned.
    """
    if isinstance(source, ProjectionBank):
        return source.head_distances()
    if isinstance(source, KeyEmbeddingSet):
        positive, negative = source.positive, source.negative
    else:
        positive, negative = source
    if positive is None or negative is None:
        raise InvalidInput("both positive and negative keys are needed")
    positive = np.asarray(positive, dtype=np.float64)
    negative = np.asarray(negative, dtype=np.float64)
    if positive.ndim != 4 or positive.shape != negative.shape:
        raise InvalidInput(
            f"misaligned captures: {positive.shape} vs {negative.shape}")
    if positive.shape[2] == 0:
        raise InvalidInput("no tokens to measure")
    return np.mean(np.linalg.norm(positive - negative, axis=-1), axis=-1)


def select_heads(distances, delta_min: float,
                 fingerprint: str = '') -> HeadSelection:
    """Heads whose distance reaches delta_min.

    :raises: InvalidInput if distances isn't a finite matrix.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or not np.all(np.isfinite(d)):
        raise InvalidInput("head distances must be a finite matrix")
    rows, cols = np.nonzero(d >= delta_min)
    selected = frozenset(zip(rows.tolist(), cols.tolist()))
    LOG.info("delta_min %s selects %d of %d heads",
             delta_min, len(selected), d.size)
    return HeadSelection(delta_min=float(delta_min), selected=selected,
                         fingerprint=fingerprint)


def sweep_heads(distances, deltas: Iterable[float]
                ) -> List[Tuple[float, int]]:
    """Selected head count for each threshold, in ascending threshold order."""
    return [(float(delta), len(select_heads(distances, delta).selected))
            for delta in sorted(deltas)]


def sweep_range(start: float, stop: float, steps: int) -> List[float]:
    if steps < 1:
        raise InvalidInput(f"steps must be >= 1, got {steps}")
    if steps == 1:
        return [float(start)]
    return np.linspace(start, stop, steps).tolist()


###
#
# Inference phase
#
###

def make_edit_plan(bank: ProjectionBank, selection: HeadSelection,
                   gains: SteeringGains, mask: Iterable[int]) -> EditPlan:
    """Combine P+ and P- into one edit matrix per selected head.

    :param bank: the learnt bank.
    :param selection: heads to steer, taken from bank.
    :param gains: the steering gains.
    :param mask: highlighted token indices; must not be empty.
    :returns: EditPlan with M = (g+ P+ + g- P-) / 2 per head.
    :raises: InvalidInput if the mask is empty.
    :raises: InvalidPlan if selection and bank don't belong together.
    """
    mask = frozenset(int(i) for i in mask)
    if not mask:
        raise InvalidInput("an edit plan needs at least one masked position")
    if selection.fingerprint and selection.fingerprint != bank.fingerprint:
        raise InvalidPlan(
            f"selection was made for model {selection.fingerprint}, "
            f"bank is for {bank.fingerprint}")
    entries = {}
    for cell in sorted(selection.selected):
        entry = bank.entries.get(cell)
        if entry is None:
            raise InvalidPlan(f"selected head {cell} is not in the bank")
        if entry.head_distance < selection.delta_min:
            raise InvalidPlan(
                f"head {cell} has distance {entry.head_distance} below "
                f"delta_min {selection.delta_min}")
        entries[cell] = edit_matrix(entry.projection_pair(bank.gamma), gains)
    return EditPlan(entries=entries,
                    mask=mask,
                    fingerprint=bank.fingerprint,
                    metadata={'method': 'seka',
                              'g_pos': gains.g_pos,
                              'g_neg': gains.g_neg,
                              'gamma': bank.gamma,
                              'delta_min': selection.delta_min})


def verify_bias_equivalence(model: ToyModel, seq: TokenSequence,
                            plan: EditPlan) -> float:
    """Max difference between steered logits and unsteered logits plus bias.

    Both paths are compared layer by layer with the queries and raw keys of
    the steered run, so that upstream edits are held fixed.

    :returns: max |A_steered - (A + B)| over layers, query heads and i >= j.
    :raises: InvalidPlan if the plan doesn't fit the model or prompt.
    """
    _, record = forward(model, seq, edit_plan=plan,
                        capture=CaptureFlags(queries=True, raw_keys=True,
                                             attn_logits=True))
    config = model.config
    length = len(seq)
    lower = np.tril(np.ones((length, length), dtype=bool))
    biases = _bias_blocks(model, record, plan)
    scale = 1.0 / math.sqrt(config.d_k)
    worst = 0.0
    for layer in range(config.n_layers):
        for head in range(config.n_query_heads):
            q = record.queries[layer, head]
            k = record.raw_keys[layer, config.kv_group(head)]
            expected = (q @ k.T) * scale
            bias = biases.get((layer, head))
            if bias is not None:
                expected = expected + bias
            diff = np.abs(record.attn_logits[layer, head] - expected)[lower]
            worst = max(worst, float(np.max(diff)))
    return worst


def _bias_blocks(model: ToyModel, record, plan: EditPlan
                 ) -> Dict[Cell, np.ndarray]:
    config = model.config
    mask = np.array(sorted(plan.mask), dtype=np.int64)
    length = record.queries.shape[2]
    scale = 1.0 / math.sqrt(config.d_k)
    blocks = {}
    for (layer, kv_head), matrix in sorted(plan.entries.items()):
        if not np.any(matrix) or mask.size == 0:
            continue
        edits = record.raw_keys[layer, kv_head][mask] @ matrix.T
        for head in config.query_heads_of(kv_head):
            block = np.zeros((length, length))
            block[:, mask] = (record.queries[layer, head] @ edits.T) * scale
            blocks[(layer, head)] = np.tril(block)
    return blocks


def relevance_bias(model: ToyModel, seq: TokenSequence,
                   plan: EditPlan) -> Dict[Cell, np.ndarray]:
    """The realized additive bias B per steered (layer, query head).

    Entries above the diagonal are zero.  Rows from the last masked
    position on have rank at most rank(M) of the kv head.
    """
    _, record = forward(model, seq, edit_plan=plan,
                        capture=CaptureFlags(queries=True, raw_keys=True))
    return _bias_blocks(model, record, plan)
