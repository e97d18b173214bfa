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

"""Contrastive samples, prompt layout, highlights and the JSON file formats.

Prompts are laid out question first, context second:

    Question: <question>
    Context: <context>

Neutral prompts have no question line.  Spans are always searched for in the
context region so that a question that repeats the answer can't capture it.
"""

from dataclasses import dataclass
from functools import partial
import json
import logging
import os
import re
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    List,
    Optional,
    Sequence,
    Tuple,
    TYPE_CHECKING,
)

from jinja2 import Environment, FileSystemLoader, select_autoescape
import numpy as np

from seka.defaults import synthetic
from seka.errors import (
    CapacityError,
    InvalidInput,
    InvalidSample,
    ParseError,
    SchemaError,
    SpanResolutionError,
    UnsupportedVersion,
)
from seka.model import ModelConfig, tokenize, TokenSequence

if TYPE_CHECKING:
    from seka.adaseka import ExpertBank
    from seka.steering import BankEntry, HeadSelection, ProjectionBank

__THIS__ = os.path.dirname(os.path.abspath(__file__))
LOG = logging.getLogger(__name__)

FORMAT_VERSION = 1
MARKER = '**'
CONTEXT_LINE = re.compile(r'^Context: ', re.MULTILINE)
SAMPLE_FIELDS = ('context1', 'context2', 'question1', 'answer1',
                 'question2', 'answer2')

_env: Optional[Environment] = None


def get_template_env() -> Environment:
    """Return the Jinja2 environment singleton for seka/templates."""
    global _env
    if _env is None:
        _env = Environment(
            loader=FileSystemLoader([os.path.join(__THIS__, 'templates')]),
            autoescape=select_autoescape())
    return _env


@dataclass(frozen=True)
class ContrastiveSample:
    context1: str
    context2: str
    question1: str
    answer1: str
    question2: str
    answer2: str

    def validate(self) -> 'ContrastiveSample':
        """Check that each answer is a contiguous substring of its context.

        :raises: InvalidSample otherwise.
        """
        for field_name in SAMPLE_FIELDS:
            if not isinstance(getattr(self, field_name), str):
                raise InvalidSample(f"'{field_name}' must be a string")
        if not self.answer1 or self.answer1 not in self.context1:
            raise InvalidSample(
                f"answer1 '{self.answer1}' isn't a substring of context1")
        if not self.answer2 or self.answer2 not in self.context2:
            raise InvalidSample(
                f"answer2 '{self.answer2}' isn't a substring of context2")
        return self


@dataclass(frozen=True)
class PromptTriplet:
    neutral_prompt: str
    positive_prompt: str
    negative_prompt: str
    span_text: str
    layout: str = 'question-first'


@dataclass(frozen=True)
class HighlightedPrompt:
    clean_text: str
    highlight_spans: FrozenSet[int]
    tokens: Optional[TokenSequence] = None


@dataclass(frozen=True)
class ExpertPair:
    neutral_prompt: str
    positive_prompt: str
    span_texts: Tuple[str, ...]


@dataclass(frozen=True)
class ExpertDataset:
    name: str
    pairs: Tuple[ExpertPair, ...]


def format_prompt(context: str, question: Optional[str] = None) -> str:
    template = get_template_env().get_template('prompt.txt.j2')
    return template.render(context=context, question=question)


def context_start(prompt: str) -> int:
    """Character offset where the context region of a prompt begins.

    Prompts without a 'Context: ' line are searched as a whole.
    """
    match = CONTEXT_LINE.search(prompt)
    if match is None:
        LOG.debug("no context line in prompt; searching all of it")
        return 0
    return match.end()


def locate_span(prompt: str, span_text: str,
                seq: Optional[TokenSequence] = None) -> List[int]:
    """Token indices of the leftmost match of span_text in the context.

    :param prompt: the prompt text.
    :param span_text: the text to find.
    :param seq: the prompt's tokens, if already computed.
    :returns: sorted token indices covering the match.
    :raises: SpanResolutionError if the span can't be found.
    """
    if not span_text:
        raise SpanResolutionError("empty span text")
    start = context_start(prompt)
    found = prompt.find(span_text, start)
    if found < 0:
        raise SpanResolutionError(
            f"span '{span_text}' not found in the context region")
    if prompt.find(span_text, found + 1) >= 0:
        LOG.warning("span '%s' occurs more than once; using the leftmost",
                    span_text)
    if seq is None:
        seq = tokenize(prompt)
    indices = seq.tokens_overlapping(found, found + len(span_text))
    if not indices:
        raise SpanResolutionError(
            f"span '{span_text}' covers no tokens")
    return indices


def parse_highlights(text: str) -> HighlightedPrompt:
    """Strip balanced ** markers, returning the highlighted token indices.

    :param text: prompt with optional **...** regions.
    :returns: HighlightedPrompt over the tokenization of the clean text.
    :raises: ParseError with the byte offset of an unbalanced or empty marker.
    """
    pieces: List[str] = []
    regions: List[Tuple[int, int, int]] = []
    cursor = 0
    clean_length = 0
    opened: Optional[Tuple[int, int]] = None
    while True:
        found = text.find(MARKER, cursor)
        if found < 0:
            break
        pieces.append(text[cursor:found])
        clean_length += found - cursor
        if opened is None:
            opened = (clean_length, found)
        else:
            regions.append((opened[0], clean_length, opened[1]))
            opened = None
        cursor = found + len(MARKER)
    pieces.append(text[cursor:])
    if opened is not None:
        raise ParseError("unbalanced '**' marker",
                         _byte_offset(text, opened[1]))
    clean = ''.join(pieces)
    if not regions:
        return HighlightedPrompt(clean, frozenset(),
                                 tokenize(clean) if clean.strip() else None)
    seq = tokenize(clean)
    spans = set()
    for start, stop, raw in regions:
        covered = seq.tokens_overlapping(start, stop)
        if not covered:
            raise ParseError("highlight covers no tokens",
                             _byte_offset(text, raw))
        spans.update(covered)
    return HighlightedPrompt(clean, frozenset(spans), seq)


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode('utf-8'))


def expand_triplets(sample: ContrastiveSample
                    ) -> Tuple[PromptTriplet, PromptTriplet]:
    """Derive two supervision triplets from one contrastive sample.

    For C1: neutral has no question, positive asks Q1, negative asks Q2;
    the span is A1.  The second triplet mirrors it for C2.

    :raises: InvalidSample if an answer isn't inside its context.
    """
    sample.validate()
    if (sample.context1 == sample.context2 and
            sample.question1 == sample.question2):
        LOG.warning("degenerate sample: positive and negative prompts are "
                    "identical")
    first = PromptTriplet(
        neutral_prompt=format_prompt(sample.context1),
        positive_prompt=format_prompt(sample.context1, sample.question1),
        negative_prompt=format_prompt(sample.context1, sample.question2),
        span_text=sample.answer1)
    second = PromptTriplet(
        neutral_prompt=format_prompt(sample.context2),
        positive_prompt=format_prompt(sample.context2, sample.question2),
        negative_prompt=format_prompt(sample.context2, sample.question1),
        span_text=sample.answer2)
    return first, second


def synthetic_capacity() -> int:
    return (len(synthetic.AGENTS) * len(synthetic.VERBS) *
            len(synthetic.OBJECTS) * len(synthetic.SETTINGS))


def _draw_slots(rng: np.random.Generator,
                avoid: Optional[Tuple[int, ...]] = None) -> Tuple[int, ...]:
    banks = (synthetic.AGENTS, synthetic.VERBS, synthetic.OBJECTS,
             synthetic.SETTINGS)
    if avoid is None:
        return tuple(int(rng.integers(len(bank))) for bank in banks)
    # a different entry in every slot; shift past the avoided index.
    picks = []
    for bank, skip in zip(banks, avoid):
        pick = int(rng.integers(len(bank) - 1))
        picks.append(pick + 1 if pick >= skip else pick)
    return tuple(picks)


def _render_slots(slots: Tuple[int, ...]) -> Tuple[str, str, str]:
    env = get_template_env()
    values = dict(agent=synthetic.AGENTS[slots[0]],
                  verb=synthetic.VERBS[slots[1]],
                  object=synthetic.OBJECTS[slots[2]],
                  setting=synthetic.SETTINGS[slots[3]])
    context = env.get_template('context.txt.j2').render(**values)
    question = env.get_template('question.txt.j2').render(**values)
    return context, question, values['object']


def generate_synthetic(n: int, seed: int) -> List[ContrastiveSample]:
    """Deterministic template-filled contrastive samples.

    Every context1 is unique, C1 and C2 differ in every slot, and each answer
    is the object phrase of its context.

    :param n: number of samples.
    :param seed: seed of the draw.
    :raises: InvalidInput if n < 1.
    :raises: CapacityError if n exceeds the number of unique contexts.
    """
    if n < 1:
        raise InvalidInput(f"n must be >= 1, got {n}")
    capacity = synthetic_capacity()
    if n > capacity:
        raise CapacityError(
            f"{n} samples requested but only {capacity} unique contexts "
            f"exist")
    rng = np.random.default_rng(seed)
    seen = set()
    samples: List[ContrastiveSample] = []
    while len(samples) < n:
        first = _draw_slots(rng)
        second = _draw_slots(rng, avoid=first)
        context1, question1, answer1 = _render_slots(first)
        if context1 in seen:
            continue
        seen.add(context1)
        context2, question2, answer2 = _render_slots(second)
        samples.append(ContrastiveSample(
            context1=context1, context2=context2,
            question1=question1, answer1=answer1,
            question2=question2, answer2=answer2).validate())
    return samples


def dataset_from_samples(name: str,
                         samples: Sequence[ContrastiveSample]
                         ) -> ExpertDataset:
    """Positive halves of the triplets of each sample, as an expert dataset."""
    pairs = []
    for sample in samples:
        for triplet in expand_triplets(sample):
            pairs.append(ExpertPair(triplet.neutral_prompt,
                                    triplet.positive_prompt,
                                    (triplet.span_text,)))
    return ExpertDataset(name, tuple(pairs))


def read_prompt_file(path: str) -> List[str]:
    """Prompts separated by blank lines."""
    with open(path, 'r', encoding='utf-8') as f:
        contents = f.read()
    blocks = [b.strip() for b in re.split(r'\n\s*\n', contents)]
    return [b for b in blocks if b]


###
#
# JSON schema helpers
#
###

def _reject_constant(name: str) -> Any:
    raise SchemaError(f"non-finite number '{name}'", '$')


def read_json(path: str) -> Any:
    """Parse a UTF-8 JSON file.

    :raises: SchemaError on undecodable bytes, bad JSON or non-finite
        constants.
    """
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f, parse_constant=_reject_constant)
        except UnicodeDecodeError as e:
            raise SchemaError(f"not UTF-8: {e}", '$')
        except ValueError as e:
            raise SchemaError(f"invalid JSON: {e}", '$')


def write_json(path: str, document: Any) -> None:
    try:
        text = json.dumps(document, indent=1, allow_nan=False)
    except ValueError as e:
        raise InvalidInput(f"refusing to serialise: {e}")
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
        f.write('\n')


def get_field(obj: Any, key: str, path: str,
              check: Callable[[Any, str], Any]) -> Any:
    if not isinstance(obj, dict):
        raise SchemaError("expected an object", path)
    sub_path = f"{path}.{key}" if path else key
    if key not in obj:
        raise SchemaError("missing field", sub_path)
    return check(obj[key], sub_path)


def is_str(v: Any, path: str) -> str:
    if not isinstance(v, str):
        raise SchemaError(f"'{v}' is not a str", path)
    return v


def is_int(v: Any, path: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(f"'{v}' is not an int", path)
    return v


def is_number(v: Any, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"'{v}' is not a number", path)
    if not np.isfinite(v):
        raise SchemaError("non-finite number", path)
    return float(v)


def is_list(v: Any, path: str) -> list:
    if not isinstance(v, list):
        raise SchemaError("expected an array", path)
    return v


def is_vector(v: Any, path: str) -> np.ndarray:
    return np.array([is_number(x, f"{path}[{i}]")
                     for i, x in enumerate(is_list(v, path))],
                    dtype=np.float64)


def is_index(v: Any, path: str) -> int:
    if is_int(v, path) < 0:
        raise SchemaError(f"'{v}' is negative", path)
    return v


def is_matrix(v: Any, path: str) -> np.ndarray:
    rows = [is_vector(r, f"{path}[{i}]")
            for i, r in enumerate(is_list(v, path))]
    if not rows or len(set(r.size for r in rows)) != 1 or rows[0].size == 0:
        raise SchemaError("expected a non-empty rectangular matrix", path)
    return np.stack(rows)


def check_version(document: Any, path: str = '') -> None:
    version = get_field(document, 'format_version', path, is_int)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(
            f"format_version {version} is not supported "
            f"(expected {FORMAT_VERSION})")


def _matrix_list(m: np.ndarray) -> list:
    return np.asarray(m, dtype=np.float64).tolist()


###
#
# Contrastive samples
#
###

def samples_to_dict(samples: Sequence[ContrastiveSample]) -> Dict:
    return {'samples': [{k: getattr(s, k) for k in SAMPLE_FIELDS}
                        for s in samples]}


def samples_from_dict(document: Any) -> List[ContrastiveSample]:
    entries = get_field(document, 'samples', '', is_list)
    samples = []
    for i, entry in enumerate(entries):
        path = f"samples[{i}]"
        values = {k: get_field(entry, k, path, is_str)
                  for k in SAMPLE_FIELDS}
        samples.append(ContrastiveSample(**values))
    return samples


def save_samples(path: str, samples: Sequence[ContrastiveSample]) -> None:
    write_json(path, samples_to_dict(samples))


def load_samples(path: str) -> List[ContrastiveSample]:
    return samples_from_dict(read_json(path))


###
#
# Expert datasets
#
###

def dataset_to_dict(dataset: ExpertDataset) -> Dict:
    return {
        'format_version': FORMAT_VERSION,
        'name': dataset.name,
        'pairs': [{'neutral_prompt': p.neutral_prompt,
                   'positive_prompt': p.positive_prompt,
                   'span_texts': list(p.span_texts)}
                  for p in dataset.pairs],
    }


def dataset_from_dict(document: Any) -> ExpertDataset:
    check_version(document)
    name = get_field(document, 'name', '', is_str)
    pairs = []
    for i, entry in enumerate(get_field(document, 'pairs', '', is_list)):
        path = f"pairs[{i}]"
        spans = get_field(entry, 'span_texts', path, is_list)
        pairs.append(ExpertPair(
            get_field(entry, 'neutral_prompt', path, is_str),
            get_field(entry, 'positive_prompt', path, is_str),
            tuple(is_str(s, f"{path}.span_texts[{j}]")
                  for j, s in enumerate(spans))))
    return ExpertDataset(name, tuple(pairs))


def save_dataset(path: str, dataset: ExpertDataset) -> None:
    write_json(path, dataset_to_dict(dataset))


def load_dataset(path: str, name: Optional[str] = None) -> ExpertDataset:
    """Load an expert dataset, or build one from a samples file."""
    document = read_json(path)
    if isinstance(document, dict) and 'samples' in document:
        return dataset_from_samples(name or 'samples',
                                    samples_from_dict(document))
    dataset = dataset_from_dict(document)
    if name is not None:
        dataset = ExpertDataset(name, dataset.pairs)
    return dataset


###
#
# Model configs
#
###

def save_model_config(path: str, config: ModelConfig) -> None:
    write_json(path, config.validate().to_dict())


def load_model_config(path: str) -> ModelConfig:
    return ModelConfig.from_dict(read_json(path))


###
#
# Projection banks
#
###

def bank_to_dict(bank: 'ProjectionBank') -> Dict:
    entries = []
    for (layer, kv_head), e in sorted(bank.entries.items()):
        entries.append({
            'layer': layer,
            'kv_head': kv_head,
            'k_pos': e.k_pos,
            'k_neg': e.k_neg,
            'head_distance': float(e.head_distance),
            'U_pos': _matrix_list(e.u_pos),
            'S_pos': _matrix_list(e.s_pos),
            'U_neg': _matrix_list(e.u_neg),
            'S_neg': _matrix_list(e.s_neg),
        })
    return {'format_version': FORMAT_VERSION,
            'fingerprint': bank.fingerprint,
            'gamma': float(bank.gamma),
            'entries': entries}


def bank_from_dict(document: Any) -> 'ProjectionBank':
    from seka.steering import BankEntry, ProjectionBank
    check_version(document)
    entries = {}
    d_k = None
    for i, entry in enumerate(get_field(document, 'entries', '', is_list)):
        path = f"entries[{i}]"
        field = partial(get_field, entry, path=path)
        key = (field('layer', check=is_index),
               field('kv_head', check=is_index))
        bank_entry = BankEntry(
            u_pos=field('U_pos', check=is_matrix),
            s_pos=field('S_pos', check=is_vector),
            u_neg=field('U_neg', check=is_matrix),
            s_neg=field('S_neg', check=is_vector),
            k_pos=field('k_pos', check=is_int),
            k_neg=field('k_neg', check=is_int),
            head_distance=field('head_distance', check=is_number))
        d_k = _check_bank_entry(bank_entry, path, d_k)
        entries[key] = bank_entry
    return ProjectionBank(
        fingerprint=get_field(document, 'fingerprint', '', is_str),
        gamma=get_field(document, 'gamma', '', is_number),
        entries=entries)


def _check_bank_entry(entry: 'BankEntry', path: str,
                      d_k: Optional[int]) -> int:
    """Shapes agree with one d_k across entries and ranks lie in 1..d_k."""
    if d_k is None:
        d_k = entry.u_pos.shape[0]
    for name, m in (('U_pos', entry.u_pos), ('U_neg', entry.u_neg)):
        if m.shape != (d_k, d_k):
            raise SchemaError(f"expected a {d_k}x{d_k} matrix",
                              f"{path}.{name}")
    for name, s in (('S_pos', entry.s_pos), ('S_neg', entry.s_neg)):
        if s.shape != (d_k,):
            raise SchemaError(f"expected {d_k} values", f"{path}.{name}")
    for name, k in (('k_pos', entry.k_pos), ('k_neg', entry.k_neg)):
        if not 1 <= k <= d_k:
            raise SchemaError(f"rank {k} outside 1..{d_k}", f"{path}.{name}")
    return d_k


def save_bank(path: str, bank: 'ProjectionBank') -> None:
    write_json(path, bank_to_dict(bank))


def load_bank(path: str) -> 'ProjectionBank':
    return bank_from_dict(read_json(path))


###
#
# Expert banks
#
###

def expert_bank_to_dict(bank: 'ExpertBank') -> Dict:
    experts = []
    for name, expert in bank.experts.items():
        experts.append({
            'name': name,
            'entries': [{'layer': layer,
                         'kv_head': kv_head,
                         'U': _matrix_list(e.u),
                         'S': _matrix_list(e.s)}
                        for (layer, kv_head), e
                        in sorted(expert.entries.items())],
        })
    return {'format_version': FORMAT_VERSION,
            'fingerprint': bank.fingerprint,
            'K': bank.K,
            'experts': experts}


def expert_bank_from_dict(document: Any) -> 'ExpertBank':
    from seka.adaseka import ExpertBank, ExpertComponents, ExpertEntry
    check_version(document)
    experts = []
    for i, item in enumerate(get_field(document, 'experts', '', is_list)):
        path = f"experts[{i}]"
        components = {}
        for j, entry in enumerate(get_field(item, 'entries', path, is_list)):
            sub = f"{path}.entries[{j}]"
            key = (get_field(entry, 'layer', sub, is_index),
                   get_field(entry, 'kv_head', sub, is_index))
            comp = ExpertComponents(
                u=get_field(entry, 'U', sub, is_matrix),
                s=get_field(entry, 'S', sub, is_vector))
            if comp.s.shape != (comp.u.shape[1],):
                raise SchemaError("expected one value per column of U",
                                  f"{sub}.S")
            components[key] = comp
        experts.append(ExpertEntry(get_field(item, 'name', path, is_str),
                                   components))
    return ExpertBank(
        fingerprint=get_field(document, 'fingerprint', '', is_str),
        K=get_field(document, 'K', '', is_int),
        experts={e.name: e for e in experts})


def save_expert_bank(path: str, bank: 'ExpertBank') -> None:
    write_json(path, expert_bank_to_dict(bank))


def load_expert_bank(path: str) -> 'ExpertBank':
    return expert_bank_from_dict(read_json(path))


###
#
# Head selections
#
###

def selection_to_dict(selection: 'HeadSelection') -> Dict:
    return {'format_version': FORMAT_VERSION,
            'fingerprint': selection.fingerprint,
            'delta_min': float(selection.delta_min),
            'selected': [list(pair) for pair in sorted(selection.selected)]}


def selection_from_dict(document: Any) -> 'HeadSelection':
    from seka.steering import HeadSelection
    check_version(document)
    selected = []
    for i, pair in enumerate(get_field(document, 'selected', '', is_list)):
        path = f"selected[{i}]"
        pair = is_list(pair, path)
        if len(pair) != 2:
            raise SchemaError("expected [layer, kv_head]", path)
        selected.append((is_int(pair[0], f"{path}[0]"),
                         is_int(pair[1], f"{path}[1]")))
    return HeadSelection(
        delta_min=get_field(document, 'delta_min', '', is_number),
        selected=frozenset(selected),
        fingerprint=get_field(document, 'fingerprint', '', is_str))


def save_selection(path: str, selection: 'HeadSelection') -> None:
    write_json(path, selection_to_dict(selection))


def load_selection(path: str) -> 'HeadSelection':
    return selection_from_dict(read_json(path))
