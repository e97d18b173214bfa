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

import argparse
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from seka import data
from seka.adaseka import (
    adaseka_plan,
    ExpertBank,
    learn_expert,
    route_coefficients,
)
from seka.defaults.runconfig import reference_kv, run_config_kv
from seka.defaults.toy import toy_model_kv
from seka.errors import (
    InvalidConfig,
    InvalidPlan,
    SchemaError,
    SekaError,
    UnsupportedVersion,
)
from seka.metrics import attention_mass, export_heatmap, export_pca_shift
from seka.model import (
    capture_last_query,
    forward,
    init_model,
    ModelConfig,
    PastaPlan,
    pasta_heads_from_selection,
    ToyModel,
)
from seka.spectral import SteeringGains
from seka.steering import (
    collect_keys,
    learn_bank,
    make_edit_plan,
    ProjectionBank,
    random_bank,
    select_heads,
    sweep_heads,
    sweep_range,
)
from seka.utils import format_double
from seka.verify import default_context, get_suites_singleton, run_suites

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3

# Keys that must be known, by flag or run config, before a command runs.
REQUIRED = {
    'learn-bank': ('model', 'samples', 'gamma'),
    'select-heads': ('bank', 'delta_min'),
    'sweep-heads': ('bank',),
    'steer': ('model', 'selection', 'prompt_file'),
    'learn-expert': ('model', 'dataset', 'K'),
    'route': ('model', 'expert_bank', 'selection', 'g', 'prompt_file'),
    'verify': ('model',),
    'export-heatmap': ('bank',),
    'export-pca': ('model', 'samples'),
    'bench': ('model', 'bank', 'selection', 'prompt_file', 'g_pos'),
}

RUN_CONFIG_PATH_KEYS = ('model', 'bank', 'expert_bank', 'samples',
                        'selection', 'dataset', 'prompt_file')


def _range(values) -> str:
    return f"{values[0]} to {values[1]}"


def setup_opts() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='RUN.yaml',
                        help='run configuration file; flags override it')
    common.add_argument('--log-level', dest='log_level',
                        choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))

    parser = argparse.ArgumentParser(
        prog='seka',
        description='Spectral key editing for attention steering.')
    subparsers = parser.add_subparsers(title='subcommands', required=True,
                                       dest='cmd')

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        sub.set_defaults(func=func)
        return sub

    init = add('init-model', cmd_init_model,
               'write the default toy model configuration')
    init.add_argument('--out', required=True)
    init.add_argument('--seed', dest='model_seed', type=int)

    gen = add('gen-data', cmd_gen_data, 'generate synthetic samples')
    gen.add_argument('--n', type=int)
    gen.add_argument('--seed', type=int)
    gen.add_argument('--out', required=True)

    learn = add('learn-bank', cmd_learn_bank, 'learn a projection bank')
    learn.add_argument('--model')
    learn.add_argument('--samples')
    learn.add_argument(
        '--gamma', type=float,
        help=f"variance threshold; reported values range "
             f"{_range(reference_kv['gamma'])}")
    learn.add_argument(
        '--random-seed', type=int,
        help='keep the learnt ranks but use seeded random orthonormal '
             'bases instead of the learnt ones')
    learn.add_argument('--out', required=True)

    select = add('select-heads', cmd_select_heads,
                 'select heads by head distance')
    select.add_argument('--bank')
    select.add_argument(
        '--delta-min', dest='delta_min', type=float,
        help=f"reported values range {_range(reference_kv['delta_min'])}")
    select.add_argument('--out', required=True)

    sweep = add('sweep-heads', cmd_sweep_heads,
                'count selected heads over a delta_min sweep')
    sweep.add_argument('--bank')
    sweep.add_argument('--from', dest='sweep_from', type=float)
    sweep.add_argument('--to', dest='sweep_to', type=float)
    sweep.add_argument('--steps', type=int, default=20)

    steer = add('steer', cmd_steer, 'steer highlighted prompts')
    steer.add_argument('--model')
    steer.add_argument('--bank')
    steer.add_argument('--selection')
    steer.add_argument('--prompt-file', dest='prompt_file')
    steer.add_argument('--method', choices=('seka', 'pasta'),
                       default='seka')
    steer.add_argument(
        '--g-pos', dest='g_pos', type=float,
        help=f"positive gain, halved in the edit; reported values range "
             f"{_range(reference_kv['g_pos'])}")
    steer.add_argument('--g-neg', dest='g_neg', type=float)
    steer.add_argument('--alpha', type=float,
                       help='PASTA scale for highlighted positions')
    steer.add_argument('--top', type=int, default=5)

    expert = add('learn-expert', cmd_learn_expert,
                 'learn an expert and append it to an expert bank')
    expert.add_argument('--model')
    expert.add_argument('--dataset')
    expert.add_argument('--name', required=True)
    expert.add_argument('--K', dest='K', type=int)
    expert.add_argument('--bank', '--expert-bank', dest='expert_bank',
                        required=True)

    route = add('route', cmd_route, 'route prompts over an expert bank')
    route.add_argument('--model')
    route.add_argument('--expert-bank', dest='expert_bank')
    route.add_argument('--selection')
    route.add_argument(
        '--g', type=float,
        help=f"reported values range {_range(reference_kv['g'])}")
    route.add_argument('--prompt-file', dest='prompt_file')

    verify = add('verify', cmd_verify, 'run the invariant suites')
    verify.add_argument('--model')
    verify.add_argument('--bank')
    verify.add_argument('--expert-bank', dest='expert_bank')
    verify.add_argument('--suite',
                        choices=sorted(get_suites_singleton()) + ['all'])
    verify.add_argument('--seed', type=int)
    verify.add_argument('--cases', type=int,
                        help='random plan and prompt pairs')
    verify.add_argument('--prompts', type=int,
                        help='prompts for the routing suite')

    heatmap = add('export-heatmap', cmd_export_heatmap,
                  'write head distances as CSV')
    heatmap.add_argument('--bank')
    heatmap.add_argument('--out', required=True)

    pca = add('export-pca', cmd_export_pca,
              'write the PCA shift of one head as CSV')
    pca.add_argument('--model')
    pca.add_argument('--samples')
    pca.add_argument('--layer', type=int, required=True)
    pca.add_argument('--kv-head', dest='kv_head', type=int, required=True)
    pca.add_argument('--limit', type=int,
                     help='use at most this many samples')
    pca.add_argument('--out', required=True)

    bench = add('bench', cmd_bench, 'time steered and unsteered passes')
    bench.add_argument('--model')
    bench.add_argument('--bank')
    bench.add_argument('--selection')
    bench.add_argument('--prompt-file', dest='prompt_file')
    bench.add_argument('--g-pos', dest='g_pos', type=float)
    bench.add_argument('--g-neg', dest='g_neg', type=float)
    bench.add_argument('--repeat', type=int)

    return parser


def load_run_config(path: str) -> Dict[str, Any]:
    """Read a YAML run configuration.

    :raises: InvalidConfig on bad YAML or unknown keys.
    """
    with open(path, 'r', encoding='utf-8') as f:
        try:
            contents = yaml.load(f, Loader=yaml.SafeLoader)
        except yaml.YAMLError as e:
            raise InvalidConfig(f"{path}: {e}")
    if contents is None:
        return {}
    if not isinstance(contents, dict):
        raise InvalidConfig(f"{path}: expected a mapping of keys")
    known = set(run_config_kv) | set(RUN_CONFIG_PATH_KEYS)
    unknown = sorted(set(contents) - known)
    if unknown:
        raise InvalidConfig(
            f"{path}: unknown keys {', '.join(str(k) for k in unknown)}")
    return contents


def merge_run_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the run config, then from the defaults."""
    values: Dict[str, Any] = dict(run_config_kv)
    values.update({k: None for k in RUN_CONFIG_PATH_KEYS})
    if args.config:
        values.update(load_run_config(args.config))
    for key, value in values.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    missing = [key for key in REQUIRED.get(args.cmd, ())
               if getattr(args, key, None) is None]
    if args.cmd == 'steer' and args.method == 'seka':
        missing.extend(key for key in ('bank', 'g_pos')
                       if getattr(args, key) is None)
    if missing:
        raise InvalidConfig(
            f"{args.cmd}: missing "
            f"{', '.join('--' + m.replace('_', '-') for m in missing)} "
            f"(flag or run config)")
    return args


def _load_model(path: str) -> ToyModel:
    return init_model(data.load_model_config(path))


def _load_bank(path: str, model: ToyModel) -> ProjectionBank:
    return data.load_bank(path).check_model(model)


def _load_selection(path: str, model: ToyModel):
    selection = data.load_selection(path)
    if selection.fingerprint and selection.fingerprint != model.fingerprint:
        raise InvalidPlan(
            f"selection {path} was made for model {selection.fingerprint}, "
            f"not {model.fingerprint}")
    return selection


def _load_prompts(path: str) -> List[data.HighlightedPrompt]:
    prompts = []
    for block in data.read_prompt_file(path):
        prompt = data.parse_highlights(block)
        if not prompt.highlight_spans:
            LOG.warning("prompt without ** highlights skipped: %.40s",
                        prompt.clean_text)
            continue
        prompts.append(prompt)
    LOG.info("read %d highlighted prompts from %s", len(prompts), path)
    return prompts


def cmd_init_model(args) -> int:
    values = dict(toy_model_kv)
    if args.model_seed is not None:
        values['seed'] = args.model_seed
    config = ModelConfig.from_dict(values)
    data.save_model_config(args.out, config)
    print(f"wrote model config {config.fingerprint} to {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    samples = data.generate_synthetic(args.n, args.seed)
    data.save_samples(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_learn_bank(args) -> int:
    model = _load_model(args.model)
    triplets = [t for s in data.load_samples(args.samples)
                for t in data.expand_triplets(s)]
    bank = learn_bank(model, triplets, args.gamma)
    if args.random_seed is not None:
        bank = random_bank(bank, args.random_seed)
    data.save_bank(args.out, bank)
    ranks = [(e.k_pos, e.k_neg) for e in bank.entries.values()]
    print(f"learnt {len(bank.entries)} heads from {len(triplets)} triplets; "
          f"mean k+ {np.mean([r[0] for r in ranks]):.2f}, "
          f"mean k- {np.mean([r[1] for r in ranks]):.2f}")
    return EXIT_OK


def cmd_select_heads(args) -> int:
    bank = data.load_bank(args.bank)
    selection = select_heads(bank.head_distances(), args.delta_min,
                             bank.fingerprint)
    data.save_selection(args.out, selection)
    print(f"selected {len(selection.selected)} of {len(bank.entries)} "
          f"heads at delta_min {args.delta_min}")
    return EXIT_OK


def cmd_sweep_heads(args) -> int:
    distances = data.load_bank(args.bank).head_distances()
    start = (float(np.min(distances)) if args.sweep_from is None
             else args.sweep_from)
    stop = (float(np.max(distances)) if args.sweep_to is None
            else args.sweep_to)
    print('delta_min,heads')
    for delta, count in sweep_heads(distances,
                                    sweep_range(start, stop, args.steps)):
        print(f"{format_double(delta)},{count}")
    return EXIT_OK


def _ranking(seq, baseline: np.ndarray, steered: np.ndarray,
             top: int) -> List[Dict[str, Any]]:
    seen: Dict[int, str] = {}
    for token_id, text in zip(seq.ids, seq.texts):
        seen.setdefault(token_id, text)
    rows = [{'token': text,
             'baseline': float(baseline[token_id]),
             'steered': float(steered[token_id])}
            for token_id, text in seen.items()]
    rows.sort(key=lambda r: (-r['steered'], r['token']))
    return rows[:top]


def cmd_steer(args) -> int:
    model = _load_model(args.model)
    selection = _load_selection(args.selection, model)
    template = data.get_template_env().get_template('report.txt.j2')
    bank = None
    if args.method == 'seka':
        bank = _load_bank(args.bank, model)
        gains = SteeringGains(args.g_pos, args.g_neg)
    for index, prompt in enumerate(_load_prompts(args.prompt_file)):
        seq = prompt.tokens
        plan = pasta = None
        if bank is not None:
            plan = make_edit_plan(bank, selection, gains,
                                  prompt.highlight_spans)
        else:
            pasta = PastaPlan(
                heads=pasta_heads_from_selection(selection.selected,
                                                 model.config),
                mask=prompt.highlight_spans,
                alpha=args.alpha,
                fingerprint=model.fingerprint)
        report = attention_mass(model, seq, prompt.highlight_spans,
                                plan=plan, pasta=pasta)
        baseline, _ = forward(model, seq)
        steered, _ = forward(model, seq, edit_plan=plan, pasta=pasta)
        print(template.render(
            index=index,
            tokens=len(seq),
            highlighted=len(prompt.highlight_spans),
            method=args.method,
            report=report,
            ranking=_ranking(seq, baseline, steered, args.top)))
    return EXIT_OK


def cmd_learn_expert(args) -> int:
    model = _load_model(args.model)
    dataset = data.load_dataset(args.dataset, args.name)
    if os.path.exists(args.expert_bank):
        bank = data.load_expert_bank(args.expert_bank)
        if bank.fingerprint != model.fingerprint:
            raise InvalidPlan(
                f"expert bank {args.expert_bank} belongs to model "
                f"{bank.fingerprint}, not {model.fingerprint}")
        if args.K != bank.K:
            LOG.warning("expert bank %s holds K=%d components per head; "
                        "ignoring --K %d", args.expert_bank, bank.K, args.K)
    else:
        bank = ExpertBank(model.fingerprint, args.K)
    expert = learn_expert(model, dataset, bank.K)
    bank = bank.add_expert(expert)
    data.save_expert_bank(args.expert_bank, bank)
    print(f"added expert '{args.name}' ({len(dataset.pairs)} pairs); "
          f"bank now has {len(bank.experts)} experts")
    return EXIT_OK


def cmd_route(args) -> int:
    model = _load_model(args.model)
    bank = data.load_expert_bank(args.expert_bank).validate()
    selection = _load_selection(args.selection, model)
    cells = sorted(selection.selected)
    for index, prompt in enumerate(_load_prompts(args.prompt_file)):
        seq = prompt.tokens
        alpha = route_coefficients(capture_last_query(model, seq), bank,
                                   cells)
        print(f"Prompt {index}: layer,kv_head,"
              + ','.join(alpha.names))
        for cell in cells:
            print(f"  {cell[0]},{cell[1]},"
                  + ','.join(f"{a:.6f}" for a in alpha.alpha[cell]))
        plan = adaseka_plan(model, seq, bank, selection, args.g,
                            prompt.highlight_spans)
        report = attention_mass(model, seq, prompt.highlight_spans, plan)
        print(f"  attention mass: baseline {report.baseline_mean:.6f}, "
              f"steered {report.steered_mean:.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    model = _load_model(args.model)
    bank = _load_bank(args.bank, model) if args.bank else None
    expert_bank = None
    if args.expert_bank:
        expert_bank = data.load_expert_bank(args.expert_bank).validate()
    counts = {k: v for k, v in (('cases', args.cases),
                                ('prompts', args.prompts))
              if v is not None}
    context = default_context(model, bank, expert_bank, args.seed, **counts)
    failures = run_suites([args.suite], context)
    for failure in failures:
        print(failure)
    if failures:
        print(f"{len(failures)} invariant violation(s)")
        return EXIT_VERIFY_FAILED
    print('all invariants hold')
    return EXIT_OK


def cmd_export_heatmap(args) -> int:
    export_heatmap(data.load_bank(args.bank).head_distances(), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_export_pca(args) -> int:
    model = _load_model(args.model)
    samples = data.load_samples(args.samples)
    if args.limit is not None:
        samples = samples[:args.limit]
    triplets = [t for s in samples for t in data.expand_triplets(s)]
    keys = collect_keys(model, [
        ((t.neutral_prompt, t.positive_prompt, t.negative_prompt),
         (t.span_text,)) for t in triplets])
    config = model.config
    if not (0 <= args.layer < config.n_layers and
            0 <= args.kv_head < config.n_kv_heads):
        raise InvalidConfig(
            f"head ({args.layer}, {args.kv_head}) is outside the model")
    cell = (args.layer, args.kv_head)
    shift = export_pca_shift(keys.positive[cell], keys.negative[cell],
                             args.out)
    print(f"wrote {keys.n_tokens} pairs to {args.out}; mean shift "
          f"({shift.mean_shift[0]:.6g}, {shift.mean_shift[1]:.6g})")
    return EXIT_OK


def _time(fn, repeat: int) -> float:
    start = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - start) / repeat


def cmd_bench(args) -> int:
    model = _load_model(args.model)
    bank = _load_bank(args.bank, model)
    selection = _load_selection(args.selection, model)
    gains = SteeringGains(args.g_pos, args.g_neg)
    if args.repeat < 1:
        raise InvalidConfig(f"--repeat must be >= 1, got {args.repeat}")
    # the embedding table is built once, outside the timed region.
    forward(model, data.parse_highlights('warm up').tokens)
    print('prompt,tokens,unsteered_s,steered_s,overhead')
    for index, prompt in enumerate(_load_prompts(args.prompt_file)):
        seq = prompt.tokens
        plan = make_edit_plan(bank, selection, gains, prompt.highlight_spans)
        plain = _time(lambda: forward(model, seq), args.repeat)
        steered = _time(lambda: forward(model, seq, edit_plan=plan),
                        args.repeat)
        print(f"{index},{len(seq)},{plain:.6f},{steered:.6f},"
              f"{(steered - plain) / plain:+.2%}")
    return EXIT_OK


def dispatch(argv: Sequence[str]) -> int:
    """Run one subcommand and map its outcome to an exit code.

    0 success, 1 verification failure, 2 usage error, 3 IO or schema error.
    """
    parser = setup_opts()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return EXIT_OK if not e.code else EXIT_USAGE
    try:
        merge_run_config(args)
        logging.getLogger().setLevel(args.log_level)
        return args.func(args)
    except (SchemaError, UnsupportedVersion) as e:
        LOG.error("%s", e)
        return EXIT_IO
    except (OSError, UnicodeDecodeError) as e:
        LOG.error("%s", e)
        return EXIT_IO
    except SekaError as e:
        LOG.error("%s", e)
        return EXIT_USAGE


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(format='%(levelname)s %(name)s: %(message)s')
    return dispatch(sys.argv[1:] if argv is None else argv)
