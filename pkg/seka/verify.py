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

"""Invariant suites behind 'seka verify'.

Suites register themselves by name; each is a generator of Failure records
over a VerifyContext.  A suite never raises for a violated invariant, it
reports it and carries on.
"""

from dataclasses import dataclass
import logging
import math
from typing import (
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
)

import numpy as np

from seka.adaseka import (
    adaseka_plan,
    dynamic_projection,
    ExpertBank,
    learn_expert,
    route_coefficients,
    routing_scores,
)
from seka.data import (
    dataset_from_samples,
    expand_triplets,
    format_prompt,
    generate_synthetic,
)
from seka.errors import DuplicateKeyError, InvalidInput
from seka.linalg import svd
from seka.model import (
    capture_last_query,
    CaptureFlags,
    forward,
    tokenize,
    TokenSequence,
    ToyModel,
    track_allocations,
)
from seka.spectral import (
    amplify,
    decompose_subspace,
    is_projection,
    select_rank,
    SteeringGains,
)
from seka.steering import (
    HeadSelection,
    learn_bank,
    make_edit_plan,
    ProjectionBank,
    verify_bias_equivalence,
)

LOG = logging.getLogger(__name__)

EQUIVALENCE_TOLERANCE = 1e-8
RECONSTRUCTION_TOLERANCE = 1e-8
ORTHONORMALITY_TOLERANCE = 1e-10
IDENTITY_TOLERANCE = 1e-10
TRACE_TOLERANCE = 1e-8
NORMALIZATION_TOLERANCE = 1e-12
SCALE_TOLERANCE = 1e-12
SYMMETRY_TOLERANCE = 1e-10
PROMPT_TOKENS = 64
DEFAULT_GAMMA = 0.9
DEFAULT_K = 5


@dataclass(frozen=True)
class Failure:
    suite: str
    invariant: str
    locus: str
    detail: str

    def __str__(self) -> str:
        return (f"[{self.suite}] {self.invariant} violated at {self.locus}: "
                f"{self.detail}")


@dataclass
class VerifyContext:
    model: ToyModel
    bank: ProjectionBank
    expert_bank: Optional[ExpertBank] = None
    seed: int = 0
    matrices: int = 200
    spectra: int = 500
    identities: int = 1000
    cases: int = 50
    prompts: int = 100

    def rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, salt])


Suite = Callable[[VerifyContext], Iterator[Failure]]
suites: Optional[Dict[str, Suite]] = None


def get_suites_singleton() -> Dict[str, Suite]:
    """Return the SUITES singleton."""
    global suites
    if suites is None:
        suites = {}
    return suites


def register_suite(name: str, suite: Suite) -> str:
    registered = get_suites_singleton()
    if name in registered:
        raise DuplicateKeyError(f"suite '{name}' is duplicated.")
    registered[name] = suite
    return name


def resolve_suites(names: Iterable[str]) -> List[str]:
    """Expand 'all' and check the names are registered.

    :raises: InvalidInput on an unknown suite.
    """
    registered = get_suites_singleton()
    resolved: List[str] = []
    for name in names:
        expanded = list(registered) if name == 'all' else [name]
        for n in expanded:
            if n not in registered:
                raise InvalidInput(
                    f"unknown suite '{n}'; choose from "
                    f"{', '.join(sorted(registered))} or all")
            if n not in resolved:
                resolved.append(n)
    return resolved


def run_suites(names: Iterable[str], context: VerifyContext
               ) -> List[Failure]:
    failures: List[Failure] = []
    for name in resolve_suites(names):
        LOG.info("running suite '%s'", name)
        found = list(get_suites_singleton()[name](context))
        for failure in found:
            LOG.error("%s", failure)
        LOG.info("suite '%s': %d failure(s)", name, len(found))
        failures.extend(found)
    return failures


def long_prompts(model: ToyModel, count: int, seed: int,
                 target: int = PROMPT_TOKENS) -> List[str]:
    """Question-first prompts of about target tokens, from synthetic text."""
    target = min(target, model.config.max_seq)
    samples = generate_synthetic(count * 8, seed)
    prompts = []
    cursor = 0
    for _ in range(count):
        first = samples[cursor]
        context = first.context1
        question = first.question1
        cursor += 1
        while True:
            candidate = samples[cursor % len(samples)].context1
            longer = f"{context} {candidate}"
            if len(tokenize(format_prompt(longer, question))) > target:
                break
            context = longer
            cursor += 1
        prompts.append(format_prompt(context, question))
    return prompts


def default_context(model: ToyModel,
                    bank: Optional[ProjectionBank] = None,
                    expert_bank: Optional[ExpertBank] = None,
                    seed: int = 0, **counts: int) -> VerifyContext:
    """A context for model, learning a small bank when none is given."""
    if bank is None:
        LOG.info("no bank given; learning one from synthetic samples")
        triplets = [t for s in generate_synthetic(10, seed)
                    for t in expand_triplets(s)]
        bank = learn_bank(model, triplets, DEFAULT_GAMMA)
    bank.check_model(model)
    return VerifyContext(model=model, bank=bank, expert_bank=expert_bank,
                         seed=seed, **counts)


def _cells(bank: ProjectionBank) -> List:
    return sorted(bank.entries)


###
#
# spectral
#
###

def check_spectral(ctx: VerifyContext) -> Iterator[Failure]:
    yield from _check_svd(ctx)
    yield from _check_select_rank(ctx)
    yield from _check_identity(ctx)
    yield from _check_bank_projections(ctx)


def _check_svd(ctx: VerifyContext) -> Iterator[Failure]:
    rng = ctx.rng(1)
    for i in range(ctx.matrices):
        m, n = (int(x) for x in rng.integers(1, 33, size=2))
        a = rng.standard_normal((m, n))
        u, s, v = svd(a)
        locus = f"matrix {i} ({m}x{n})"
        error = np.linalg.norm(u @ np.diag(s) @ v.T - a)
        bound = RECONSTRUCTION_TOLERANCE * max(1.0, np.linalg.norm(a))
        if error > bound:
            yield Failure('spectral', 'svd reconstruction', locus,
                          f"|U S V^T - A| = {error:.3e} > {bound:.3e}")
        for name, basis in (('U', u), ('V', v)):
            error = np.linalg.norm(basis.T @ basis - np.eye(basis.shape[1]))
            if error > ORTHONORMALITY_TOLERANCE:
                yield Failure('spectral', f"{name} orthonormality", locus,
                              f"|{name}^T {name} - I| = {error:.3e}")


def _check_select_rank(ctx: VerifyContext) -> Iterator[Failure]:
    rng = ctx.rng(2)
    for i in range(ctx.spectra):
        size = int(rng.integers(1, 33))
        s = np.sort(rng.exponential(size=size))[::-1]
        s[rng.random(size) < 0.2] = 0.0
        s = np.sort(s)[::-1]
        if s[0] == 0.0:
            s[0] = 1.0
        gamma = float(rng.uniform(0.01, 1.0))
        ratios = np.cumsum(s) / np.sum(s)
        expected = next((k for k in range(1, size + 1)
                         if ratios[k - 1] >= gamma), size)
        k = select_rank(s, gamma)
        if k != expected:
            yield Failure('spectral', 'select_rank minimality',
                          f"spectrum {i}",
                          f"got {k}, scan gives {expected} at gamma {gamma}")


def _check_identity(ctx: VerifyContext) -> Iterator[Failure]:
    rng = ctx.rng(3)
    gains = (-0.5, 0.0, 0.5, 1.0, 2.0)
    for i in range(ctx.identities):
        d = int(rng.integers(2, 9))
        r = int(rng.integers(1, d + 1))
        u = svd(rng.standard_normal((d, r))).U
        x = rng.standard_normal(d)
        g = gains[i % len(gains)]
        parallel, perp = decompose_subspace(x, u)
        error = np.linalg.norm(amplify(x, u, g) - (perp + (1.0 + g) *
                                                    parallel))
        if error > IDENTITY_TOLERANCE:
            yield Failure('spectral', 'gain scaling identity', f"case {i}",
                          f"residual {error:.3e} at g = {g}")


def _check_bank_projections(ctx: VerifyContext) -> Iterator[Failure]:
    for cell in _cells(ctx.bank):
        entry = ctx.bank.entries[cell]
        pair = entry.projection_pair(ctx.bank.gamma)
        locus = f"(layer {cell[0]}, head {cell[1]})"
        for name, p, rank in (('P+', pair.p_pos, pair.k_pos),
                              ('P-', pair.p_neg, pair.d_k - pair.k_neg)):
            if not is_projection(p):
                yield Failure('spectral', f"{name} idempotent and symmetric",
                              locus, "|P^2 - P| or |P - P^T| too large")
            if abs(np.trace(p) - rank) > TRACE_TOLERANCE:
                yield Failure('spectral', f"{name} trace", locus,
                              f"trace {np.trace(p):.12g} != {rank}")


###
#
# equivalence
#
###

def _random_plan(ctx: VerifyContext, rng: np.random.Generator,
                 length: int, zero: bool = False):
    cells = _cells(ctx.bank)
    count = int(rng.integers(1, len(cells) + 1))
    chosen = rng.choice(len(cells), size=count, replace=False)
    selection = HeadSelection(
        delta_min=0.0,
        selected=frozenset(cells[int(c)] for c in chosen),
        fingerprint=ctx.bank.fingerprint)
    gains = (SteeringGains(0.0, 0.0) if zero else
             SteeringGains(float(rng.uniform(-2.0, 2.0)),
                           float(rng.uniform(-2.0, 2.0))))
    width = int(rng.integers(1, length + 1))
    mask = rng.choice(length, size=width, replace=False)
    return make_edit_plan(ctx.bank, selection, gains, mask.tolist())


def _has_square_buffer(shapes: Sequence, length: int) -> bool:
    return any(sum(1 for dim in shape if dim == length) >= 2
               for shape in shapes)


def check_equivalence(ctx: VerifyContext) -> Iterator[Failure]:
    rng = ctx.rng(4)
    prompts = long_prompts(ctx.model, ctx.cases, ctx.seed)
    for i, prompt in enumerate(prompts):
        seq = tokenize(prompt)
        locus = f"case {i}"
        plan = _random_plan(ctx, rng, len(seq))
        diff = verify_bias_equivalence(ctx.model, seq, plan)
        if not diff <= EQUIVALENCE_TOLERANCE:
            yield Failure('equivalence', 'logit bias equivalence', locus,
                          f"max |A' - (A + B)| = {diff:.3e}")
        yield from _check_unmasked_keys(ctx, seq, plan, locus)
        yield from _check_zero_gain(ctx, rng, seq, locus)
        yield from _check_allocations(ctx, seq, plan, locus)


def _check_unmasked_keys(ctx: VerifyContext, seq: TokenSequence, plan,
                         locus: str) -> Iterator[Failure]:
    _, record = forward(ctx.model, seq, edit_plan=plan,
                        capture=CaptureFlags(keys=True, raw_keys=True))
    unmasked = np.array([j for j in range(len(seq)) if j not in plan.mask],
                        dtype=np.int64)
    if unmasked.size and not np.array_equal(record.keys[:, :, unmasked],
                                            record.raw_keys[:, :, unmasked]):
        yield Failure('equivalence', 'unmasked keys unchanged', locus,
                      "an unmasked key was edited")


def _check_zero_gain(ctx: VerifyContext, rng: np.random.Generator,
                     seq: TokenSequence, locus: str) -> Iterator[Failure]:
    baseline, _ = forward(ctx.model, seq)
    plan = _random_plan(ctx, rng, len(seq), zero=True)
    steered, _ = forward(ctx.model, seq, edit_plan=plan)
    if not np.array_equal(baseline, steered):
        yield Failure('equivalence', 'zero-gain identity', locus,
                      "scores differ from the unsteered run")
    if ctx.expert_bank is not None:
        selection = HeadSelection(0.0, frozenset(_cells(ctx.bank)),
                                  ctx.bank.fingerprint)
        plan = adaseka_plan(ctx.model, seq, ctx.expert_bank, selection, 0.0,
                            sorted(plan.mask))
        steered, _ = forward(ctx.model, seq, edit_plan=plan)
        if not np.array_equal(baseline, steered):
            yield Failure('equivalence', 'zero-gain identity (adaptive)',
                          locus, "scores differ from the unsteered run")


def _check_allocations(ctx: VerifyContext, seq: TokenSequence, plan,
                       locus: str) -> Iterator[Failure]:
    length = len(seq)
    if length == ctx.model.config.n_query_heads:
        LOG.debug("%s: prompt length equals head count; skipped", locus)
        return
    with track_allocations() as shapes:
        forward(ctx.model, seq, edit_plan=plan)
    if _has_square_buffer(shapes, length):
        yield Failure('equivalence', 'no T x T attention buffer', locus,
                      f"a {length} x {length} buffer was allocated")


###
#
# routing
#
###

def routing_bank(ctx: VerifyContext) -> ExpertBank:
    """The context's expert bank, or two experts learnt from synthetic data."""
    if ctx.expert_bank is not None:
        return ctx.expert_bank
    k = min(DEFAULT_K, ctx.model.config.d_k)
    bank = ExpertBank(ctx.model.fingerprint, k)
    for name, seed in (('synthetic-a', ctx.seed + 1),
                       ('synthetic-b', ctx.seed + 2)):
        dataset = dataset_from_samples(name, generate_synthetic(5, seed))
        bank = bank.add_expert(learn_expert(ctx.model, dataset, k))
    return bank


def check_routing(ctx: VerifyContext) -> Iterator[Failure]:
    bank = routing_bank(ctx)
    prompts = long_prompts(ctx.model, ctx.prompts, ctx.seed + 5,
                           target=ctx.model.config.max_seq // 4)
    for i, prompt in enumerate(prompts):
        queries = capture_last_query(ctx.model, tokenize(prompt))
        raw = routing_scores(queries, bank)
        alpha = route_coefficients(queries, bank)
        scaled = route_coefficients(queries * 3.0, bank)
        flipped = route_coefficients(-queries, bank)
        for cell in sorted(alpha.alpha):
            a = alpha.alpha[cell]
            locus = f"prompt {i} (layer {cell[0]}, head {cell[1]})"
            peak = float(np.max(np.abs(a)))
            if min(abs(peak), abs(peak - 1.0)) > NORMALIZATION_TOLERANCE:
                yield Failure('routing', 'max |alpha| in {0, 1}', locus,
                              f"max |alpha| = {peak!r}")
            if not np.array_equal(np.sign(a), np.sign(raw[cell])):
                yield Failure('routing', 'sign preservation', locus,
                              f"alpha {a.tolist()} vs raw "
                              f"{raw[cell].tolist()}")
            if np.max(np.abs(scaled.alpha[cell] - a)) > SCALE_TOLERANCE:
                yield Failure('routing', 'positive scale invariance', locus,
                              "alpha changed under q -> 3q")
            if not np.array_equal(flipped.alpha[cell], -a):
                yield Failure('routing', 'negative scale flips signs',
                              locus, "alpha(-q) != -alpha(q)")
            p = dynamic_projection(alpha, bank, *cell)
            asymmetry = np.linalg.norm(p - p.T)
            if not math.isfinite(asymmetry) or \
                    asymmetry > SYMMETRY_TOLERANCE:
                yield Failure('routing', 'P_dyn symmetry', locus,
                              f"|P - P^T| = {asymmetry:.3e}")


register_suite('spectral', check_spectral)
register_suite('equivalence', check_equivalence)
register_suite('routing', check_routing)
