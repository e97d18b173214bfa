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

from dataclasses import dataclass
import logging
import re
from typing import (
    Iterable,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    TYPE_CHECKING,
)

import numpy as np

from seka.errors import InvalidInput
from seka.linalg import pca2
from seka.model import (
    CaptureFlags,
    forward,
    PastaPlan,
    TOKEN_PATTERN,
    TokenSequence,
    ToyModel,
)
from seka.utils import format_double

if TYPE_CHECKING:
    from seka.steering import EditPlan

LOG = logging.getLogger(__name__)

CORE_PRONOUNS = frozenset(('she', 'he'))
ALL_PRONOUNS = frozenset(('she', 'he', 'her', 'him', 'hers', 'his',
                          'herself', 'himself'))

HEATMAP_HEADER = 'layer,head,distance'
PCA_HEADER = 'pair,neg_x,neg_y,pos_x,pos_y'
WORD = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class MassReport:
    """Attention mass on the highlighted positions at the last query row.

    baseline and steered are [layer][query_head] arrays.
    """
    baseline: np.ndarray
    steered: np.ndarray

    @property
    def baseline_mean(self) -> float:
        return float(np.mean(self.baseline))

    @property
    def steered_mean(self) -> float:
        return float(np.mean(self.steered))

    @property
    def delta(self) -> float:
        return self.steered_mean - self.baseline_mean

    @property
    def improved(self) -> bool:
        return self.delta > 0.0


class PcaShift(NamedTuple):
    neg: np.ndarray
    pos: np.ndarray
    mean_shift: np.ndarray


def _last_row_mass(model: ToyModel, seq: TokenSequence, columns: np.ndarray,
                   plan: Optional['EditPlan'],
                   pasta: Optional[PastaPlan]) -> np.ndarray:
    _, record = forward(model, seq, edit_plan=plan, pasta=pasta,
                        capture=CaptureFlags(last_row=True))
    mass = np.sum(record.last_row_weights[..., columns], axis=-1)
    return np.clip(mass, 0.0, 1.0)


def attention_mass(model: ToyModel, seq: TokenSequence, highlight,
                   plan: Optional['EditPlan'] = None,
                   pasta: Optional[PastaPlan] = None) -> MassReport:
    """Mass the final query row puts on the highlighted positions.

    :param model: the toy model.
    :param seq: the prompt tokens.
    :param highlight: token indices H.
    :param plan: optional key-edit plan for the steered run.
    :param pasta: optional PASTA plan for the steered run.
    :returns: MassReport of baseline and steered masses.
    :raises: InvalidInput if H is empty or out of bounds.
    """
    columns = np.array(sorted(set(int(i) for i in highlight)),
                       dtype=np.int64)
    if columns.size == 0:
        raise InvalidInput("empty highlight set")
    if columns[0] < 0 or columns[-1] >= len(seq):
        raise InvalidInput(
            f"highlight {columns.tolist()} is outside a {len(seq)} token "
            f"prompt")
    baseline = _last_row_mass(model, seq, columns, None, None)
    if plan is None and pasta is None:
        steered = baseline.copy()
    else:
        steered = _last_row_mass(model, seq, columns, plan, pasta)
    return MassReport(baseline, steered)


def efficacy_score(pairs: Iterable[Tuple[float, float]]) -> float:
    """Fraction of (p_new, p_old) pairs with p_new strictly above p_old.

    :raises: InvalidInput on an empty or non-finite input.
    """
    values = np.asarray(list(pairs), dtype=np.float64)
    if values.size == 0:
        raise InvalidInput("no probability pairs")
    if values.ndim != 2 or values.shape[1] != 2:
        raise InvalidInput("expected (p_new, p_old) pairs")
    if not np.all(np.isfinite(values)):
        raise InvalidInput("probabilities must be finite")
    return float(np.mean(values[:, 0] > values[:, 1]))


def _words(text: str) -> list:
    return [m.group().lower() for m in TOKEN_PATTERN.finditer(text)]


def _content_tokens(words: Sequence[str], pronouns) -> set:
    return {w for w in words if w not in pronouns and WORD.fullmatch(w)}


def pronoun_score(original: str, generated: str,
                  pronoun_set: Iterable[str] = CORE_PRONOUNS) -> float:
    """Pronoun-conversion weighted overlap of content tokens.

    score = w * |T_ori & T_gen| / |T_ori|, where w is the fraction of the
    original's pronouns no longer present in the generation (1 if it had
    none) and T are the sets of non-pronoun word tokens.

    :param original: the source text; must not be empty.
    :param generated: the rewritten text; empty scores 0.
    :param pronoun_set: pronouns to convert, e.g. CORE_PRONOUNS.
    :raises: InvalidInput on an empty original.
    """
    if not original or not original.strip():
        raise InvalidInput("original text is empty")
    if not generated or not generated.strip():
        return 0.0
    pronouns = frozenset(p.lower() for p in pronoun_set)
    original_words = _words(original)
    generated_words = _words(generated)
    before = sum(1 for w in original_words if w in pronouns)
    if before == 0:
        weight = 1.0
    else:
        after = sum(1 for w in generated_words if w in pronouns)
        weight = min(1.0, max(0.0, (before - after) / before))
    t_ori = _content_tokens(original_words, pronouns)
    t_gen = _content_tokens(generated_words, pronouns)
    if not t_ori:
        LOG.debug("original has no content tokens; overlap taken as 1")
        return weight
    return weight * len(t_ori & t_gen) / len(t_ori)


def exact_match(prediction: str, answer: str) -> bool:
    """True if the answer appears in the prediction, ignoring case."""
    needle = answer.strip().lower()
    if not needle:
        raise InvalidInput("empty answer")
    return needle in prediction.lower()


def export_heatmap(distances, path: str) -> None:
    """Write D as 'layer,head,distance' rows.

    :raises: InvalidInput if D isn't a finite matrix.
    :raises: OSError naming path if it can't be written.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or not np.all(np.isfinite(d)):
        raise InvalidInput("head distances must be a finite matrix")
    layers, heads = np.indices(d.shape)
    rows = np.column_stack([layers.ravel(), heads.ravel(), d.ravel()])
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        np.savetxt(f, rows, fmt=['%d', '%d', '%.17g'], delimiter=',',
                   header=HEATMAP_HEADER, comments='')
    LOG.info("wrote %d head distances to %s", d.size, path)


def pca_shift(pos_keys, neg_keys) -> PcaShift:
    """Joint 2-component PCA of paired keys and their mean shift.

    :raises: InvalidInput unless pos and neg are paired matrices.
    """
    pos = np.asarray(pos_keys, dtype=np.float64)
    neg = np.asarray(neg_keys, dtype=np.float64)
    if pos.ndim != 2 or pos.shape != neg.shape:
        raise InvalidInput(
            f"positive {pos.shape} and negative {neg.shape} keys must be "
            f"paired")
    n = pos.shape[0]
    projected = pca2(np.vstack([neg, pos])).projected
    neg_xy, pos_xy = projected[:n], projected[n:]
    return PcaShift(neg_xy, pos_xy, np.mean(pos_xy - neg_xy, axis=0))


def export_pca_shift(pos_keys, neg_keys, path: str) -> PcaShift:
    """Write the negative to positive arrows in PCA coordinates.

    One 'pair,neg_x,neg_y,pos_x,pos_y' row per pair, then a
    'MEAN_SHIFT,dx,dy' row.
    """
    shift = pca_shift(pos_keys, neg_keys)
    n = shift.neg.shape[0]
    rows = np.column_stack([np.arange(n), shift.neg, shift.pos])
    footer = 'MEAN_SHIFT,' + ','.join(format_double(x)
                                      for x in shift.mean_shift)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        np.savetxt(f, rows, fmt=['%d'] + ['%.17g'] * 4, delimiter=',',
                   header=PCA_HEADER, footer=footer, comments='')
    return shift
