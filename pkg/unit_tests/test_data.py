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

import json

import numpy as np

from .utils import BaseTestCase, get_bank, SMALL_CONFIG

# unit under test
from seka import data
from seka.adaseka import ExpertBank, ExpertComponents, ExpertEntry
from seka.errors import (
    CapacityError,
    InvalidInput,
    InvalidSample,
    ParseError,
    SchemaError,
    SpanResolutionError,
    UnsupportedVersion,
)
from seka.steering import HeadSelection


SAMPLE = data.ContrastiveSample(
    context1="The baker painted a copper lantern in the harbor.",
    context2="The miner hid an iron anvil under the bridge.",
    question1="What did the baker paint in the harbor?",
    answer1="a copper lantern",
    question2="What did the miner hide under the bridge?",
    answer2="an iron anvil")


class TestPromptLayout(BaseTestCase):

    def test_format_prompt(self):
        self.assertEqual(data.format_prompt("C."), "Context: C.")
        self.assertEqual(data.format_prompt("C.", "Q?"),
                         "Question: Q?\nContext: C.")

    def test_template_env_is_shared(self):
        self.assertIs(data.get_template_env(), data.get_template_env())

    def test_context_start(self):
        self.assertEqual(data.context_start("Question: q\nContext: c"), 21)
        self.assertEqual(data.context_start("no context line"), 0)

    def test_locate_span_in_context(self):
        prompt = ("Question: where is the lamp?\n"
                  "Context: the lamp is on the lamp post")
        with self.assertLogs('seka.data', level='WARNING'):
            self.assertEqual(data.locate_span(prompt, "lamp"), [10])
        self.assertEqual(data.locate_span(prompt, "on the"), [12, 13])

    def test_locate_span_failures(self):
        prompt = "Question: a lamp?\nContext: a table"
        for span in ("lamp", "", "chair"):
            with self.assertRaises(SpanResolutionError):
                data.locate_span(prompt, span)


class TestHighlights(BaseTestCase):

    def test_single_region(self):
        parsed = data.parse_highlights("a **b c** d")
        self.assertEqual(parsed.clean_text, "a b c d")
        self.assertEqual(parsed.highlight_spans, frozenset({1, 2}))
        self.assertEqual(parsed.tokens.texts, ('a', 'b', 'c', 'd'))

    def test_two_regions(self):
        parsed = data.parse_highlights("**x** y **z**")
        self.assertEqual(parsed.clean_text, "x y z")
        self.assertEqual(parsed.highlight_spans, frozenset({0, 2}))

    def test_no_markers(self):
        parsed = data.parse_highlights("plain text")
        self.assertEqual(parsed.highlight_spans, frozenset())
        self.assertEqual(len(parsed.tokens), 2)
        self.assertIsNone(data.parse_highlights("").tokens)

    def test_unbalanced(self):
        with self.assertRaises(ParseError) as cm:
            data.parse_highlights("a **b")
        self.assertEqual(cm.exception.byte_offset, 2)
        with self.assertRaises(ParseError) as cm:
            data.parse_highlights("é **b")
        self.assertEqual(cm.exception.byte_offset, 3)

    def test_empty_region(self):
        with self.assertRaises(ParseError) as cm:
            data.parse_highlights("a **  ** b")
        self.assertEqual(cm.exception.byte_offset, 2)


class TestSamples(BaseTestCase):

    def test_validate(self):
        self.assertIs(SAMPLE.validate(), SAMPLE)
        bad = data.ContrastiveSample(SAMPLE.context1, SAMPLE.context2,
                                     SAMPLE.question1, "a silver kettle",
                                     SAMPLE.question2, SAMPLE.answer2)
        with self.assertRaises(InvalidSample):
            bad.validate()
        with self.assertRaises(InvalidSample):
            data.ContrastiveSample(SAMPLE.context1, SAMPLE.context2,
                                   SAMPLE.question1, SAMPLE.answer1,
                                   None, SAMPLE.answer2).validate()

    def test_expand_triplets(self):
        first, second = data.expand_triplets(SAMPLE)
        self.assertEqual(first.neutral_prompt, f"Context: {SAMPLE.context1}")
        self.assertEqual(
            first.positive_prompt,
            f"Question: {SAMPLE.question1}\nContext: {SAMPLE.context1}")
        self.assertEqual(
            first.negative_prompt,
            f"Question: {SAMPLE.question2}\nContext: {SAMPLE.context1}")
        self.assertEqual(first.span_text, SAMPLE.answer1)
        self.assertEqual(
            second.positive_prompt,
            f"Question: {SAMPLE.question2}\nContext: {SAMPLE.context2}")
        self.assertEqual(
            second.negative_prompt,
            f"Question: {SAMPLE.question1}\nContext: {SAMPLE.context2}")
        self.assertEqual(second.span_text, SAMPLE.answer2)

    def test_degenerate_sample_warns(self):
        sample = data.ContrastiveSample(SAMPLE.context1, SAMPLE.context1,
                                        SAMPLE.question1, SAMPLE.answer1,
                                        SAMPLE.question1, SAMPLE.answer1)
        with self.assertLogs('seka.data', level='WARNING'):
            first, _ = data.expand_triplets(sample)
        self.assertEqual(first.positive_prompt, first.negative_prompt)

    def test_generate_synthetic(self):
        samples = data.generate_synthetic(200, 42)
        self.assertEqual(samples, data.generate_synthetic(200, 42))
        self.assertNotEqual(samples[:5], data.generate_synthetic(5, 43))
        self.assertEqual(len({s.context1 for s in samples}), 200)
        for s in samples:
            self.assertIs(s.validate(), s)
            self.assertNotEqual(s.answer1, s.answer2)
            self.assertEqual(len(data.expand_triplets(s)), 2)

    def test_generate_synthetic_bounds(self):
        with self.assertRaises(InvalidInput):
            data.generate_synthetic(0, 1)
        self.patch_object(data, 'synthetic_capacity', return_value=3)
        with self.assertRaises(CapacityError):
            data.generate_synthetic(4, 1)

    def test_dataset_from_samples(self):
        dataset = data.dataset_from_samples('facts', [SAMPLE])
        self.assertEqual(dataset.name, 'facts')
        self.assertEqual(len(dataset.pairs), 2)
        self.assertEqual(dataset.pairs[1].span_texts, (SAMPLE.answer2,))
        self.assertEqual(dataset.pairs[0].neutral_prompt,
                         f"Context: {SAMPLE.context1}")

    def test_read_prompt_file(self):
        path = self.tmp_path('prompts.txt')
        with open(path, 'w') as f:
            f.write("one\n\n  \ntwo\nlines\n\n\n")
        self.assertEqual(data.read_prompt_file(path), ['one', 'two\nlines'])


class TestJsonFormats(BaseTestCase):

    def test_samples(self):
        path = self.tmp_path('samples.json')
        data.save_samples(path, [SAMPLE])
        self.assertEqual(data.load_samples(path), [SAMPLE])
        with open(path) as f:
            self.assertTrue(f.read().endswith('}\n'))

    def test_sample_schema_path(self):
        path = self.tmp_path('samples.json')
        document = data.samples_to_dict([SAMPLE])
        del document['samples'][0]['answer1']
        with open(path, 'w') as f:
            json.dump(document, f)
        with self.assertRaises(SchemaError) as cm:
            data.load_samples(path)
        self.assertEqual(cm.exception.path, 'samples[0].answer1')

    def test_non_finite_numbers(self):
        path = self.tmp_path('bad.json')
        with open(path, 'w') as f:
            f.write('{"gamma": NaN}')
        with self.assertRaises(SchemaError):
            data.read_json(path)
        with self.assertRaises(InvalidInput):
            data.write_json(path, {'gamma': float('inf')})

    def test_invalid_json(self):
        path = self.tmp_path('bad.json')
        with open(path, 'w') as f:
            f.write('{"samples": ')
        with self.assertRaises(SchemaError):
            data.load_samples(path)

    def test_undecodable_file(self):
        path = self.tmp_path('bank.json')
        with open(path, 'wb') as f:
            f.write(b'\xff\xfe{}')
        with self.assertRaises(SchemaError) as cm:
            data.load_bank(path)
        self.assertEqual(cm.exception.path, '$')

    def test_versions(self):
        document = data.dataset_to_dict(
            data.dataset_from_samples('facts', [SAMPLE]))
        document['format_version'] = 999
        with self.assertRaises(UnsupportedVersion):
            data.dataset_from_dict(document)
        del document['format_version']
        with self.assertRaises(SchemaError) as cm:
            data.dataset_from_dict(document)
        self.assertEqual(cm.exception.path, 'format_version')

    def test_dataset(self):
        path = self.tmp_path('dataset.json')
        dataset = data.dataset_from_samples('facts', [SAMPLE])
        data.save_dataset(path, dataset)
        self.assertEqual(data.load_dataset(path), dataset)
        self.assertEqual(data.load_dataset(path, 'renamed').name, 'renamed')

    def test_dataset_from_samples_file(self):
        path = self.tmp_path('samples.json')
        data.save_samples(path, [SAMPLE])
        dataset = data.load_dataset(path)
        self.assertEqual(dataset.name, 'samples')
        self.assertEqual(len(dataset.pairs), 2)

    def test_model_config(self):
        path = self.tmp_path('model.json')
        data.save_model_config(path, SMALL_CONFIG)
        self.assertEqual(data.load_model_config(path), SMALL_CONFIG)

    def test_bank(self):
        path = self.tmp_path('bank.json')
        bank = get_bank()
        data.save_bank(path, bank)
        loaded = data.load_bank(path)
        self.assertEqual(loaded.fingerprint, bank.fingerprint)
        self.assertEqual(loaded.gamma, bank.gamma)
        self.assertEqual(set(loaded.entries), set(bank.entries))
        for cell, entry in bank.entries.items():
            other = loaded.entries[cell]
            self.assertBitwiseEqual(other.u_pos, entry.u_pos)
            self.assertBitwiseEqual(other.s_neg, entry.s_neg)
            self.assertEqual((other.k_pos, other.k_neg),
                             (entry.k_pos, entry.k_neg))
            self.assertEqual(other.head_distance, entry.head_distance)

    def test_bank_bad_matrix(self):
        document = data.bank_to_dict(get_bank())
        document['entries'][0]['U_pos'] = [[1.0, 2.0], [3.0]]
        with self.assertRaises(SchemaError) as cm:
            data.bank_from_dict(document)
        self.assertEqual(cm.exception.path, 'entries[0].U_pos')

    def test_resave_is_byte_identical(self):
        experts = ExpertBank('toy', 1).add_expert(ExpertEntry(
            'first', {(0, 1): ExpertComponents(np.array([[0.6], [0.8]]),
                                               np.array([2.5]))}))
        cases = (
            (data.save_bank, data.load_bank, get_bank()),
            (data.save_expert_bank, data.load_expert_bank, experts),
            (data.save_samples, data.load_samples,
             data.generate_synthetic(5, 42)),
        )
        for save, load, value in cases:
            first = self.tmp_path('first.json')
            second = self.tmp_path('second.json')
            save(first, value)
            save(second, load(first))
            with open(first, 'rb') as a, open(second, 'rb') as b:
                self.assertEqual(a.read(), b.read(), save.__name__)

    def test_bank_shapes_checked(self):
        d_k = SMALL_CONFIG.d_k
        cases = [
            ('U_neg', [[1.0] * (d_k - 1)] * d_k, 'entries[1].U_neg'),
            ('S_pos', [1.0] * (d_k + 1), 'entries[1].S_pos'),
            ('k_pos', 0, 'entries[1].k_pos'),
            ('k_neg', d_k + 1, 'entries[1].k_neg'),
            ('layer', -1, 'entries[1].layer'),
        ]
        for field, value, path in cases:
            document = data.bank_to_dict(get_bank())
            document['entries'][1][field] = value
            with self.assertRaises(SchemaError) as cm:
                data.bank_from_dict(document)
            self.assertEqual(cm.exception.path, path, field)

    def test_bank_entries_share_d_k(self):
        document = data.bank_to_dict(get_bank())
        entry = document['entries'][1]
        entry['U_pos'] = entry['U_neg'] = [[1.0, 0.0], [0.0, 1.0]]
        entry['S_pos'] = entry['S_neg'] = [1.0, 0.5]
        entry['k_pos'] = entry['k_neg'] = 1
        with self.assertRaises(SchemaError) as cm:
            data.bank_from_dict(document)
        self.assertEqual(cm.exception.path, 'entries[1].U_pos')

    def test_expert_values_match_columns(self):
        document = data.expert_bank_to_dict(
            ExpertBank('toy', 1).add_expert(ExpertEntry(
                'first', {(0, 1): ExpertComponents(np.array([[0.6], [0.8]]),
                                                   np.array([2.5]))})))
        document['experts'][0]['entries'][0]['S'] = [2.5, 1.0]
        with self.assertRaises(SchemaError) as cm:
            data.expert_bank_from_dict(document)
        self.assertEqual(cm.exception.path, 'experts[0].entries[0].S')

    def test_expert_bank(self):
        path = self.tmp_path('experts.json')
        bank = ExpertBank('toy', 1).add_expert(ExpertEntry(
            'first', {(0, 1): ExpertComponents(np.array([[0.6], [0.8]]),
                                               np.array([2.5]))}))
        data.save_expert_bank(path, bank)
        loaded = data.load_expert_bank(path)
        self.assertEqual((loaded.fingerprint, loaded.K, loaded.names),
                         ('toy', 1, ('first',)))
        comp = loaded.experts['first'].entries[(0, 1)]
        self.assertBitwiseEqual(comp.u, [[0.6], [0.8]])
        self.assertBitwiseEqual(comp.s, [2.5])

    def test_selection(self):
        path = self.tmp_path('selection.json')
        selection = HeadSelection(0.25, frozenset({(1, 0), (0, 1)}), 'abc')
        data.save_selection(path, selection)
        self.assertEqual(data.load_selection(path), selection)
        document = data.selection_to_dict(selection)
        self.assertEqual(document['selected'], [[0, 1], [1, 0]])
        document['selected'][0] = [0]
        with self.assertRaises(SchemaError) as cm:
            data.selection_from_dict(document)
        self.assertEqual(cm.exception.path, 'selected[0]')
