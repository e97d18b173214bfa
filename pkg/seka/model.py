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

"""A deterministic toy decoder-only transformer with grouped-query attention.

The model exists to provide key embeddings and queries for learning
projections, and to run forward passes with a key-edit plan hooked in before
any attention score is formed.  Attention is computed one query row at a time;
a T x T buffer is only allocated when the debug captures ask for one.
"""

import contextlib
from dataclasses import dataclass, field
from functools import cached_property
import logging
import math
import re
import threading
from typing import (
    Any,
    Dict,
    FrozenSet,
    Iterable,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    TYPE_CHECKING,
)

import numpy as np

from seka import utils
from seka.errors import InvalidConfig, InvalidInput, InvalidPlan

if TYPE_CHECKING:
    from seka.steering import EditPlan

LOG = logging.getLogger(__name__)

VOCAB_SIZE = 65536
FFN_MULTIPLIER = 4
EMBEDDING_BOUND = math.sqrt(3.0)
RMS_EPS = 1e-6
EMBEDDING_CHUNK_ROWS = 4096

TOKEN_PATTERN = re.compile(r"[^\W_]+|[^\w\s]|_")

CONFIG_KEYS = ('n_layers', 'n_query_heads', 'n_kv_heads', 'd_model', 'd_k',
               'max_seq', 'seed')


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_query_heads: int
    n_kv_heads: int
    d_model: int
    d_k: int
    max_seq: int
    seed: int

    def validate(self) -> 'ModelConfig':
        """Check the config invariants.

        :raises: InvalidConfig if any of them fail.
        """
        for key in CONFIG_KEYS:
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int):
                raise InvalidConfig(f"'{key}' must be an int, got {value!r}")
        for key in CONFIG_KEYS[:-1]:
            if getattr(self, key) < 1:
                raise InvalidConfig(f"'{key}' must be >= 1")
        if not 0 <= self.seed <= utils.MASK64:
            raise InvalidConfig("'seed' must be a 64-bit unsigned integer")
        if self.n_query_heads % self.n_kv_heads:
            raise InvalidConfig(
                f"n_query_heads ({self.n_query_heads}) isn't divisible by "
                f"n_kv_heads ({self.n_kv_heads})")
        if self.d_model != self.n_query_heads * self.d_k:
            raise InvalidConfig(
                f"d_model ({self.d_model}) != n_query_heads x d_k "
                f"({self.n_query_heads} x {self.d_k})")
        return self

    @property
    def group_size(self) -> int:
        return self.n_query_heads // self.n_kv_heads

    @property
    def d_ff(self) -> int:
        return FFN_MULTIPLIER * self.d_model

    @property
    def fingerprint(self) -> str:
        return utils.fingerprint(self.to_dict())

    def kv_group(self, query_head: int) -> int:
        return query_head // self.group_size

    def query_heads_of(self, kv_head: int) -> range:
        return range(kv_head * self.group_size,
                     (kv_head + 1) * self.group_size)

    def to_dict(self) -> Dict[str, int]:
        return {key: getattr(self, key) for key in CONFIG_KEYS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelConfig':
        if not isinstance(data, dict):
            raise InvalidConfig("model config must be a JSON object")
        missing = [k for k in CONFIG_KEYS if k not in data]
        if missing:
            raise InvalidConfig(
                f"model config is missing: {', '.join(missing)}")
        unknown = sorted(set(data) - set(CONFIG_KEYS))
        if unknown:
            raise InvalidConfig(
                f"unknown model config keys: {', '.join(unknown)}")
        return cls(**{k: data[k] for k in CONFIG_KEYS}).validate()


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    norm_attn: np.ndarray
    norm_ffn: np.ndarray

    def arrays(self) -> List[np.ndarray]:
        return [self.wq, self.wk, self.wv, self.wo, self.w1, self.w2,
                self.norm_attn, self.norm_ffn]


class ToyModel:
    """Immutable weights plus a hash-addressed embedding table."""

    def __init__(self, config: ModelConfig, layers: Sequence[LayerWeights],
                 final_norm: np.ndarray):
        self.config = config
        self.layers: Tuple[LayerWeights, ...] = tuple(layers)
        self.final_norm = final_norm
        self._embed_key = utils.derive_key(config.seed, 'embed')

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    def embedding_rows(self, ids: Iterable[int]) -> np.ndarray:
        d = self.config.d_model
        return np.stack([
            utils.uniform(self._embed_key, int(i) * d, d, EMBEDDING_BOUND)
            for i in ids])

    @cached_property
    def embedding_table(self) -> np.ndarray:
        """The full VOCAB_SIZE x d_model table, generated on first use."""
        d = self.config.d_model
        table = np.empty((VOCAB_SIZE, d))
        for start in range(0, VOCAB_SIZE, EMBEDDING_CHUNK_ROWS):
            stop = min(VOCAB_SIZE, start + EMBEDDING_CHUNK_ROWS)
            table[start:stop] = utils.uniform(
                self._embed_key, start * d, (stop - start) * d,
                EMBEDDING_BOUND).reshape(stop - start, d)
        return _readonly(table)


def _xavier(seed: int, layer: int, role: str,
            fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    key = utils.derive_key(seed, layer, role)
    return utils.uniform(key, 0, fan_in * fan_out, bound).reshape(
        fan_in, fan_out)


def init_model(config: ModelConfig) -> ToyModel:
    """Build a ToyModel whose weights are a pure function of the config.

    Every matrix is drawn uniform in [-a, a], a = sqrt(6/(fan_in+fan_out)),
    from a SplitMix64 stream keyed by (seed, layer, role).

    :raises: InvalidConfig if the config breaks its invariants.
    """
    config.validate()
    d, d_k = config.d_model, config.d_k
    kv_width = config.n_kv_heads * d_k
    q_width = config.n_query_heads * d_k
    layers = []
    for layer in range(config.n_layers):
        layers.append(LayerWeights(
            wq=_readonly(_xavier(config.seed, layer, 'query', d, q_width)),
            wk=_readonly(_xavier(config.seed, layer, 'key', d, kv_width)),
            wv=_readonly(_xavier(config.seed, layer, 'value', d, kv_width)),
            wo=_readonly(_xavier(config.seed, layer, 'output', q_width, d)),
            w1=_readonly(_xavier(config.seed, layer, 'ffn_in', d,
                                 config.d_ff)),
            w2=_readonly(_xavier(config.seed, layer, 'ffn_out', config.d_ff,
                                 d)),
            norm_attn=_readonly(np.ones(d)),
            norm_ffn=_readonly(np.ones(d)),
        ))
    LOG.debug("initialised toy model %s", config.fingerprint)
    return ToyModel(config, layers, _readonly(np.ones(d)))


@dataclass(frozen=True)
class TokenSequence:
    """Tokens of a prompt; offsets are character ranges into text."""
    ids: Tuple[int, ...]
    texts: Tuple[str, ...]
    offsets: Tuple[Tuple[int, int], ...] = ()
    text: str = ''

    def __len__(self) -> int:
        return len(self.ids)

    def tokens_overlapping(self, start: int, stop: int) -> List[int]:
        """Indices of the tokens overlapping the char range [start, stop)."""
        return [i for i, (a, b) in enumerate(self.offsets)
                if a < stop and b > start]


def token_id(token: str) -> int:
    return utils.fnv1a_64(token) % VOCAB_SIZE


def tokenize(text: str) -> TokenSequence:
    """Lowercase, split on whitespace, punctuation as single tokens.

    :raises: InvalidInput if text is blank.
    """
    if not isinstance(text, str) or not text.strip():
        raise InvalidInput("can't tokenize empty text")
    matches = list(TOKEN_PATTERN.finditer(text))
    texts = tuple(m.group().lower() for m in matches)
    return TokenSequence(ids=tuple(token_id(t) for t in texts),
                         texts=texts,
                         offsets=tuple(m.span() for m in matches),
                         text=text)


@dataclass(frozen=True)
class CaptureFlags:
    """What a forward pass should record.

    attn_weights and attn_logits are debug captures that allocate a T x T
    buffer per (layer, query head); everything else is row or vector sized.
    """
    keys: bool = False
    raw_keys: bool = False
    queries: bool = False
    last_row: bool = False
    attn_weights: bool = False
    attn_logits: bool = False


NO_CAPTURE = CaptureFlags()


@dataclass
class CaptureRecord:
    """Arrays are indexed [layer][head][position...]; None if not captured.

    keys are what attention saw (after any edit), raw_keys are pre-edit.
    """
    keys: Optional[np.ndarray] = None
    raw_keys: Optional[np.ndarray] = None
    queries: Optional[np.ndarray] = None
    last_queries: Optional[np.ndarray] = None
    last_row_weights: Optional[np.ndarray] = None
    attn_weights: Optional[np.ndarray] = None
    attn_logits: Optional[np.ndarray] = None


class ForwardResult(NamedTuple):
    next_token_scores: np.ndarray
    captures: CaptureRecord


@dataclass(frozen=True)
class PastaPlan:
    """Post-softmax row rescaling on a set of (layer, query head)."""
    heads: FrozenSet[Tuple[int, int]]
    mask: FrozenSet[int]
    alpha: float
    fingerprint: str
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise InvalidInput(f"alpha must be > 0, got {self.alpha}")


_tracking = threading.local()


@contextlib.contextmanager
def track_allocations():
    """Record the shape of every attention buffer allocated in this thread.

    Yields the list the shapes are appended to.
    """
    shapes: List[Tuple[int, ...]] = []
    previous = getattr(_tracking, 'shapes', None)
    _tracking.shapes = shapes
    try:
        yield shapes
    finally:
        _tracking.shapes = previous


def _record(buffer: np.ndarray) -> np.ndarray:
    shapes = getattr(_tracking, 'shapes', None)
    if shapes is not None:
        shapes.append(tuple(buffer.shape))
    return buffer


def rms_norm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / rms * scale


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(
        math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)[:, None]
    freqs = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64)
                        / d_model)
    angles = positions * freqs[None, :]
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angles)[:, :(d_model + 1) // 2]
    pe[:, 1::2] = np.cos(angles)[:, :d_model // 2]
    return pe


def _rescale_rows(weights: np.ndarray, columns: np.ndarray,
                  alpha: float) -> np.ndarray:
    scaled = weights.copy()
    scaled[..., columns] *= alpha
    return scaled / np.sum(scaled, axis=-1, keepdims=True)


def pasta_row_transform(row, highlight: Iterable[int],
                        alpha: float) -> np.ndarray:
    """Rescale one attention row towards the highlighted positions.

    Highlighted entries are multiplied by alpha and the row is divided by
    C = alpha * sum(A_H) + sum(A_rest).

    :param row: a probability vector.
    :param highlight: indices into row.
    :param alpha: scale, must be > 0.
    :returns: the renormalised row.
    :raises: InvalidInput on a bad alpha, row or index.
    """
    if not alpha > 0.0:
        raise InvalidInput(f"alpha must be > 0, got {alpha}")
    weights = np.asarray(row, dtype=np.float64)
    if weights.ndim != 1 or np.any(weights < 0.0) or \
            abs(float(np.sum(weights)) - 1.0) > 1e-9:
        raise InvalidInput("row must be a probability vector")
    columns = np.array(sorted(set(highlight)), dtype=np.int64)
    if columns.size and (columns[0] < 0 or columns[-1] >= weights.size):
        raise InvalidInput("highlight index out of range")
    if columns.size == 0 or alpha == 1.0:
        return weights.copy()
    return _rescale_rows(weights, columns, alpha)


PlanLayers = Dict[int, List[Tuple[int, np.ndarray]]]


def _resolve_plan(model: ToyModel, plan: Optional['EditPlan'],
                  length: int) -> Tuple[PlanLayers, np.ndarray]:
    if plan is None:
        return {}, np.zeros(0, dtype=np.int64)
    config = model.config
    if plan.fingerprint != model.fingerprint:
        raise InvalidPlan(
            f"plan was built for model {plan.fingerprint}, "
            f"not {model.fingerprint}")
    by_layer: Dict[int, List[Tuple[int, np.ndarray]]] = {}
    for (layer, kv_head), matrix in sorted(plan.entries.items()):
        if not (0 <= layer < config.n_layers and
                0 <= kv_head < config.n_kv_heads):
            raise InvalidPlan(
                f"plan entry ({layer}, {kv_head}) is outside the model's "
                f"{config.n_layers} layers x {config.n_kv_heads} kv heads")
        if matrix.shape != (config.d_k, config.d_k):
            raise InvalidPlan(
                f"plan entry ({layer}, {kv_head}) has shape {matrix.shape}")
        if not np.any(matrix):
            continue
        by_layer.setdefault(layer, []).append((kv_head, matrix))
    mask = np.array(sorted(plan.mask), dtype=np.int64)
    if mask.size and (mask[0] < 0 or mask[-1] >= length):
        raise InvalidPlan(
            f"plan mask {mask.tolist()} is outside a {length} token prompt")
    return by_layer, mask


def _resolve_pasta(model: ToyModel, pasta: Optional[PastaPlan],
                   length: int) -> Tuple[Dict[int, np.ndarray], np.ndarray]:
    if pasta is None:
        return {}, np.zeros(0, dtype=np.int64)
    config = model.config
    if pasta.fingerprint != model.fingerprint:
        raise InvalidPlan("PASTA plan was built for another model")
    by_layer: Dict[int, List[int]] = {}
    for layer, head in sorted(pasta.heads):
        if not (0 <= layer < config.n_layers and
                0 <= head < config.n_query_heads):
            raise InvalidPlan(f"PASTA head ({layer}, {head}) out of range")
        by_layer.setdefault(layer, []).append(head)
    mask = np.array(sorted(pasta.mask), dtype=np.int64)
    if mask.size and (mask[0] < 0 or mask[-1] >= length):
        raise InvalidPlan(
            f"PASTA mask {mask.tolist()} is outside a {length} token prompt")
    return ({k: np.array(v, dtype=np.int64) for k, v in by_layer.items()},
            mask)


def forward(model: ToyModel,
            seq: TokenSequence,
            edit_plan: Optional['EditPlan'] = None,
            capture: CaptureFlags = NO_CAPTURE,
            pasta: Optional[PastaPlan] = None) -> ForwardResult:
    """Run the model over seq.

    With an edit plan, the keys at masked positions of each planned
    (layer, kv head) become k + M k before any attention score is formed.

    :param model: the toy model.
    :param seq: the tokens.
    :param edit_plan: optional key-edit plan.
    :param capture: which intermediates to record.
    :param pasta: optional PASTA baseline plan.
    :returns: ForwardResult(next_token_scores, captures).
    :raises: InvalidInput if seq is empty or too long.
    :raises: InvalidPlan if a plan doesn't fit the model or prompt.
    """
    config = model.config
    length = len(seq)
    if length == 0:
        raise InvalidInput("empty token sequence")
    if length > config.max_seq:
        raise InvalidInput(
            f"sequence of {length} tokens exceeds max_seq {config.max_seq}")
    plan_layers, mask = _resolve_plan(model, edit_plan, length)
    pasta_layers, pasta_mask = _resolve_pasta(model, pasta, length)

    L, n_q, n_kv = config.n_layers, config.n_query_heads, config.n_kv_heads
    d_k, group = config.d_k, config.group_size
    record = CaptureRecord()
    if capture.keys:
        record.keys = np.empty((L, n_kv, length, d_k))
    if capture.raw_keys:
        record.raw_keys = np.empty((L, n_kv, length, d_k))
    if capture.queries:
        record.queries = np.empty((L, n_q, length, d_k))
        record.last_queries = np.empty((L, n_kv, d_k))
    if capture.last_row:
        record.last_row_weights = np.empty((L, n_q, length))
    if capture.attn_weights:
        record.attn_weights = _record(np.zeros((L, n_q, length, length)))
    if capture.attn_logits:
        record.attn_logits = _record(np.zeros((L, n_q, length, length)))

    scale = 1.0 / math.sqrt(d_k)
    x = model.embedding_rows(seq.ids) + positional_encoding(
        length, config.d_model)
    for layer, w in enumerate(model.layers):
        h = rms_norm(x, w.norm_attn)
        q = (h @ w.wq).reshape(length, n_q, d_k)
        raw = (h @ w.wk).reshape(length, n_kv, d_k)
        v = (h @ w.wv).reshape(length, n_kv, d_k)
        k = raw
        if layer in plan_layers and mask.size:
            k = raw.copy()
            for kv_head, matrix in plan_layers[layer]:
                rows = raw[mask, kv_head, :]
                k[mask, kv_head, :] = rows + rows @ matrix.T
        if record.keys is not None:
            record.keys[layer] = k.transpose(1, 0, 2)
        if record.raw_keys is not None:
            record.raw_keys[layer] = raw.transpose(1, 0, 2)
        if record.queries is not None:
            record.queries[layer] = q.transpose(1, 0, 2)
            record.last_queries[layer] = q[-1].reshape(
                n_kv, group, d_k).mean(axis=1)

        out = np.empty((length, n_kv, group, d_k))
        pasta_heads = pasta_layers.get(layer)
        for i in range(length):
            q_i = q[i].reshape(n_kv, group, d_k)
            logits = _record(np.einsum('gsd,jgd->gsj', q_i,
                                       k[:i + 1]).reshape(n_q, i + 1))
            logits *= scale
            weights = _record(softmax(logits))
            if pasta_heads is not None:
                columns = pasta_mask[pasta_mask <= i]
                if columns.size:
                    weights[pasta_heads] = _rescale_rows(
                        weights[pasta_heads], columns, pasta.alpha)
            if record.attn_logits is not None:
                record.attn_logits[layer, :, i, :i + 1] = logits
            if record.attn_weights is not None:
                record.attn_weights[layer, :, i, :i + 1] = weights
            if record.last_row_weights is not None and i == length - 1:
                record.last_row_weights[layer] = weights
            out[i] = np.einsum('gsj,jgd->gsd',
                               weights.reshape(n_kv, group, i + 1),
                               v[:i + 1])
        x = x + out.reshape(length, n_q * d_k) @ w.wo
        x = x + gelu(rms_norm(x, w.norm_ffn) @ w.w1) @ w.w2

    final = rms_norm(x[-1], model.final_norm)
    return ForwardResult(model.embedding_table @ final, record)


def _span_indices(seq: TokenSequence, span: Sequence[int]) -> np.ndarray:
    indices = np.asarray(list(span), dtype=np.int64)
    if indices.size == 0:
        raise InvalidInput("empty span")
    if indices.min() < 0 or indices.max() >= len(seq):
        raise InvalidInput(
            f"span {indices.tolist()} is outside a {len(seq)} token prompt")
    return indices


def capture_keys(model: ToyModel, seq: TokenSequence,
                 span: Sequence[int]) -> np.ndarray:
    """Unedited keys at the span positions.

    :param span: token indices, e.g. a range.
    :returns: array [layer][kv_head][span position][d_k].
    :raises: InvalidInput if the span is out of bounds.
    """
    indices = _span_indices(seq, span)
    _, record = forward(model, seq, capture=CaptureFlags(keys=True))
    return record.keys[:, :, indices, :]


def capture_last_query(model: ToyModel, seq: TokenSequence) -> np.ndarray:
    """Final-position queries, averaged over each KV group.

    :returns: array [layer][kv_head][d_k].
    """
    _, record = forward(model, seq, capture=CaptureFlags(queries=True))
    return record.last_queries


def pasta_heads_from_selection(selected: Iterable[Tuple[int, int]],
                               config: ModelConfig
                               ) -> FrozenSet[Tuple[int, int]]:
    """Expand (layer, kv head) pairs to the query heads sharing them."""
    return frozenset((layer, head)
                     for layer, kv_head in selected
                     for head in config.query_heads_of(kv_head))
