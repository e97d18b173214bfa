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

import contextlib
import io
import logging
import os

from .utils import ACCEPTANCE_CONFIG, BaseTestCase, SMALL_CONFIG

# unit under test
from seka import cmd
from seka import data
from seka.errors import InvalidConfig

PROMPTS = """Question: what did the baker paint?
Context: the baker painted **a copper lantern** in the harbor .

no highlights in this one

Context: the miner hid **an iron anvil** under the bridge .
"""


class CmdTestCase(BaseTestCase):

    def setUp(self):
        super().setUp()
        root = logging.getLogger()
        self.addCleanup(root.setLevel, root.level)
        self.model = self.tmp_path('model.json')
        self.workdir = os.path.dirname(self.model)
        data.save_model_config(self.model, SMALL_CONFIG)

    def path(self, name):
        return os.path.join(self.workdir, name)

    def run_cmd(self, *argv):
        out = io.StringIO()
        with contextlib.redirect_stdout(out), \
                contextlib.redirect_stderr(io.StringIO()):
            code = cmd.dispatch(list(argv))
        return code, out.getvalue()

    def write(self, name, text):
        path = self.path(name)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path


class TestDispatch(CmdTestCase):

    def test_usage_errors(self):
        self.assertEqual(self.run_cmd()[0], cmd.EXIT_USAGE)
        self.assertEqual(self.run_cmd('frobnicate')[0], cmd.EXIT_USAGE)
        self.assertEqual(self.run_cmd('gen-data')[0], cmd.EXIT_USAGE)

    def test_help(self):
        code, out = self.run_cmd('--help')
        self.assertEqual(code, cmd.EXIT_OK)
        self.assertIn('learn-bank', out)

    def test_missing_required_value(self):
        code, _ = self.run_cmd('learn-bank', '--model', self.model,
                               '--out', self.path('bank.json'))
        self.assertEqual(code, cmd.EXIT_USAGE)

    def test_missing_file(self):
        code, _ = self.run_cmd('learn-bank', '--model', self.path('nope'),
                               '--samples', self.path('nope'),
                               '--gamma', '0.9',
                               '--out', self.path('bank.json'))
        self.assertEqual(code, cmd.EXIT_IO)

    def test_unsupported_version(self):
        bank = self.write('bank.json', '{"format_version": 999}')
        code, _ = self.run_cmd('export-heatmap', '--bank', bank,
                               '--out', self.path('heatmap.csv'))
        self.assertEqual(code, cmd.EXIT_IO)

    def test_undecodable_inputs(self):
        raw = self.path('raw.bin')
        with open(raw, 'wb') as f:
            f.write(b'\xff\xfe\x00')
        code, _ = self.run_cmd('export-heatmap', '--bank', raw,
                               '--out', self.path('heatmap.csv'))
        self.assertEqual(code, cmd.EXIT_IO)
        code, _ = self.run_cmd('gen-data', '--config', raw,
                               '--out', self.path('s.json'))
        self.assertEqual(code, cmd.EXIT_IO)

    def test_verify_all_on_fresh_model(self):
        code, out = self.run_cmd('verify', '--model', self.model,
                                 '--suite', 'all')
        self.assertEqual(code, cmd.EXIT_OK)
        self.assertIn('all invariants hold', out)

    def test_main_uses_argv(self):
        self.patch_object(cmd, 'dispatch', return_value=7)
        self.patch('sys.argv', new=['seka', 'verify'], name='argv')
        self.assertEqual(cmd.main(), 7)
        self.dispatch.assert_called_once_with(['verify'])


class TestRunConfig(CmdTestCase):

    def test_flags_override_config(self):
        config = self.write('run.yaml', 'n: 2\nseed: 5\n')
        out = self.path('samples.json')
        code, _ = self.run_cmd('gen-data', '--config', config, '--n', '3',
                               '--out', out)
        self.assertEqual(code, cmd.EXIT_OK)
        self.assertEqual(data.load_samples(out),
                         data.generate_synthetic(3, 5))

    def test_defaults_fill_the_rest(self):
        args = cmd.setup_opts().parse_args(['gen-data', '--out', 'x'])
        cmd.merge_run_config(args)
        self.assertEqual((args.n, args.seed, args.log_level),
                         (100, 42, 'WARNING'))

    def test_config_supplies_required_keys(self):
        config = self.write('run.yaml', 'bank: b.json\ndelta_min: 0.25\n')
        args = cmd.setup_opts().parse_args(
            ['select-heads', '--config', config, '--out', 'x'])
        cmd.merge_run_config(args)
        self.assertEqual((args.bank, args.delta_min), ('b.json', 0.25))

    def test_bad_config(self):
        for text in ('n: [1, 2\n', 'colour: blue\n', '- 1\n- 2\n'):
            with self.assertRaises(InvalidConfig):
                cmd.load_run_config(self.write('run.yaml', text))
        self.assertEqual(cmd.load_run_config(self.write('run.yaml', '')), {})
        code, _ = self.run_cmd('gen-data', '--config',
                               self.write('run.yaml', 'colour: blue\n'),
                               '--out', self.path('s.json'))
        self.assertEqual(code, cmd.EXIT_USAGE)

    def test_steer_needs_g_pos_for_seka_only(self):
        argv = ['steer', '--model', 'm', '--bank', 'b', '--selection', 's',
                '--prompt-file', 'p']
        with self.assertRaises(InvalidConfig):
            cmd.merge_run_config(cmd.setup_opts().parse_args(argv))
        args = cmd.merge_run_config(
            cmd.setup_opts().parse_args(argv + ['--method', 'pasta']))
        self.assertEqual(args.alpha, 100.0)


class TestInitModel(CmdTestCase):

    def test_writes_toy_config(self):
        out = self.path('toy.json')
        self.assertEqual(self.run_cmd('init-model', '--out', out)[0],
                         cmd.EXIT_OK)
        self.assertEqual(data.load_model_config(out), ACCEPTANCE_CONFIG)
        self.run_cmd('init-model', '--out', out, '--seed', '7')
        self.assertEqual(data.load_model_config(out).seed, 7)


class TestPipeline(CmdTestCase):

    def setUp(self):
        super().setUp()
        self.samples = self.path('samples.json')
        self.bank = self.path('bank.json')
        self.selection = self.path('selection.json')
        self.prompts = self.write('prompts.txt', PROMPTS)
        self.assertEqual(self.run_cmd('gen-data', '--n', '3', '--seed', '1',
                                      '--out', self.samples)[0], 0)
        self.assertEqual(self.run_cmd('learn-bank', '--model', self.model,
                                      '--samples', self.samples,
                                      '--gamma', '0.9',
                                      '--out', self.bank)[0], 0)
        self.assertEqual(self.run_cmd('select-heads', '--bank', self.bank,
                                      '--delta-min', '0',
                                      '--out', self.selection)[0], 0)

    def test_learnt_artifacts(self):
        bank = data.load_bank(self.bank)
        self.assertEqual(len(bank.entries),
                         SMALL_CONFIG.n_layers * SMALL_CONFIG.n_kv_heads)
        selection = data.load_selection(self.selection)
        self.assertEqual(selection.selected, frozenset(bank.entries))
        self.assertEqual(selection.fingerprint, SMALL_CONFIG.fingerprint)

    def test_random_bank_ablation(self):
        shuffled = self.path('random.json')
        code, _ = self.run_cmd('learn-bank', '--model', self.model,
                               '--samples', self.samples, '--gamma', '0.9',
                               '--random-seed', '5', '--out', shuffled)
        self.assertEqual(code, 0)
        learnt, ablated = data.load_bank(self.bank), data.load_bank(shuffled)
        for cell, entry in learnt.entries.items():
            self.assertEqual(ablated.entries[cell].k_pos, entry.k_pos)
            self.assertFalse(
                (ablated.entries[cell].u_pos == entry.u_pos).all())

    def test_sweep(self):
        code, out = self.run_cmd('sweep-heads', '--bank', self.bank,
                                 '--from', '0', '--to', '1', '--steps', '3')
        self.assertEqual(code, 0)
        lines = out.splitlines()
        self.assertEqual(lines[0], 'delta_min,heads')
        self.assertEqual(lines[1], '0,4')
        self.assertEqual(len(lines), 4)

    def test_steer(self):
        with self.assertLogs('seka.cmd', level='WARNING'):
            code, out = self.run_cmd('steer', '--model', self.model,
                                     '--bank', self.bank,
                                     '--selection', self.selection,
                                     '--prompt-file', self.prompts,
                                     '--g-pos', '1.5', '--top', '3')
        self.assertEqual(code, 0)
        self.assertIn('Prompt 0 (', out)
        self.assertIn('Prompt 1 (', out)
        self.assertNotIn('Prompt 2 (', out)
        self.assertIn('method seka', out)
        self.assertIn('attention mass on highlight', out)

    def test_steer_pasta(self):
        code, out = self.run_cmd('steer', '--model', self.model,
                                 '--selection', self.selection,
                                 '--prompt-file', self.prompts,
                                 '--method', 'pasta', '--alpha', '4')
        self.assertEqual(code, 0)
        self.assertIn('method pasta', out)

    def test_steer_foreign_selection(self):
        other = self.path('other.json')
        data.save_model_config(other, ACCEPTANCE_CONFIG)
        code, _ = self.run_cmd('steer', '--model', other,
                               '--bank', self.bank,
                               '--selection', self.selection,
                               '--prompt-file', self.prompts,
                               '--g-pos', '1.0')
        self.assertEqual(code, cmd.EXIT_USAGE)

    def test_existing_expert_bank_keeps_its_K(self):
        experts = self.path('experts.json')
        learn = ['learn-expert', '--model', self.model,
                 '--dataset', self.samples, '--bank', experts]
        self.assertEqual(self.run_cmd(*learn, '--K', '3',
                                      '--name', 'facts')[0], 0)
        with self.assertLogs('seka.cmd', level='WARNING') as cm:
            code, _ = self.run_cmd(*learn, '--K', '2', '--name', 'more')
        self.assertEqual(code, 0)
        self.assertIn('ignoring --K 2', cm.output[0])
        self.assertEqual(data.load_expert_bank(experts).K, 3)

    def test_experts_and_routing(self):
        experts = self.path('experts.json')
        learn = ['learn-expert', '--model', self.model,
                 '--dataset', self.samples, '--K', '3', '--bank', experts]
        self.assertEqual(self.run_cmd(*learn, '--name', 'facts')[0], 0)
        self.assertEqual(self.run_cmd(*learn, '--name', 'facts')[0],
                         cmd.EXIT_USAGE)
        self.assertEqual(self.run_cmd(*learn, '--name', 'more')[0], 0)
        self.assertEqual(data.load_expert_bank(experts).names,
                         ('facts', 'more'))
        code, out = self.run_cmd('route', '--model', self.model,
                                 '--expert-bank', experts,
                                 '--selection', self.selection,
                                 '--g', '1.0',
                                 '--prompt-file', self.prompts)
        self.assertEqual(code, 0)
        self.assertIn('Prompt 0: layer,kv_head,facts,more', out)
        self.assertIn('attention mass: baseline', out)

    def test_verify(self):
        code, out = self.run_cmd('verify', '--model', self.model,
                                 '--bank', self.bank,
                                 '--suite', 'equivalence', '--cases', '1')
        self.assertEqual(code, cmd.EXIT_OK)
        self.assertIn('all invariants hold', out)

    def test_verify_reports_failures(self):
        self.patch_object(cmd, 'run_suites', return_value=['broken'])
        code, out = self.run_cmd('verify', '--model', self.model,
                                 '--bank', self.bank, '--suite', 'spectral')
        self.assertEqual(code, cmd.EXIT_VERIFY_FAILED)
        self.assertIn('1 invariant violation(s)', out)

    def test_exports(self):
        heatmap = self.path('heatmap.csv')
        self.assertEqual(self.run_cmd('export-heatmap', '--bank', self.bank,
                                      '--out', heatmap)[0], 0)
        with open(heatmap) as f:
            self.assertEqual(len(f.read().splitlines()), 5)
        pca = self.path('pca.csv')
        argv = ['export-pca', '--model', self.model,
                '--samples', self.samples, '--limit', '2', '--out', pca]
        self.assertEqual(self.run_cmd(*argv, '--layer', '1',
                                      '--kv-head', '0')[0], 0)
        with open(pca) as f:
            self.assertTrue(f.read().splitlines()[-1].startswith(
                'MEAN_SHIFT,'))
        self.assertEqual(self.run_cmd(*argv, '--layer', '9',
                                      '--kv-head', '0')[0], cmd.EXIT_USAGE)

    def test_bench(self):
        code, out = self.run_cmd('bench', '--model', self.model,
                                 '--bank', self.bank,
                                 '--selection', self.selection,
                                 '--prompt-file', self.prompts,
                                 '--g-pos', '1.0', '--repeat', '1')
        self.assertEqual(code, 0)
        lines = out.splitlines()
        self.assertEqual(lines[0],
                         'prompt,tokens,unsteered_s,steered_s,overhead')
        self.assertEqual(len(lines), 3)
