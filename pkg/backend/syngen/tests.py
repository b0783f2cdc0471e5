import tempfile

import numpy as np
from django.test import SimpleTestCase

from ingest.records import Corpus
from rmsl.exceptions import ConfigError
from .serializers import SyngenSectionSerializer
from .services import build_generator_spec, generate, generate_from_config, walk


def small_spec(**overrides):
    params = dict(vocab_size=20, num_patterns=3, successors=4, seq_len=(10, 20), anomaly_span=(2, 5),
                  contamination=0.2, num_train=120, num_val=20, num_test=40, seed=7)
    params.update(overrides)
    return build_generator_spec(**params)


class GeneratorSpecTests(SimpleTestCase):

    def test_rows_are_distributions(self):
        spec = small_spec()
        np.testing.assert_allclose(spec.normal_patterns.sum(axis=2), 1.0, atol=1e-9)
        np.testing.assert_allclose(spec.anomaly_pattern.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(spec.pattern_starts.sum(axis=1), 1.0, atol=1e-9)

    def test_anomaly_transitions_are_rare_under_normal_chains(self):
        spec = small_spec()
        aggregate = spec.normal_patterns.mean(axis=0)
        used = spec.anomaly_pattern > 0
        self.assertLessEqual(aggregate[used].max(), 0.1)

    def test_span_longer_than_shortest_sequence_is_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            small_spec(seq_len=(4, 10), anomaly_span=(2, 6))
        self.assertIn('anomaly_span', ctx.exception.details)

    def test_non_stochastic_rows_are_rejected(self):
        spec = small_spec()
        spec.anomaly_pattern[0, :] *= 2
        with self.assertRaises(ConfigError):
            spec.validate()


class WalkTests(SimpleTestCase):

    def test_empirical_transitions_match_chain(self):
        spec = build_generator_spec(vocab_size=8, num_patterns=1, successors=3, seq_len=(10, 20),
                                    anomaly_span=(2, 4), seed=3)
        matrix = spec.normal_patterns[0]
        first = int(np.flatnonzero(spec.pattern_starts[0])[0])
        states = walk(matrix, first, 100_000, np.random.default_rng(11))

        counts = np.zeros_like(matrix)
        np.add.at(counts, (states[:-1], states[1:]), 1)
        visits = counts.sum(axis=1)
        busy = visits >= 5000
        self.assertTrue(busy.any())
        empirical = counts[busy] / visits[busy, None]
        self.assertLessEqual(np.abs(empirical - matrix[busy]).max(), 0.02)

    def test_walk_never_leaves_support(self):
        spec = small_spec()
        matrix = spec.normal_patterns[1]
        states = walk(matrix, 0, 500, np.random.default_rng(0))
        self.assertTrue(all(matrix[a, b] > 0 for a, b in zip(states[:-1], states[1:])))


class GenerateTests(SimpleTestCase):

    def test_same_seed_same_corpus(self):
        first = generate(small_spec())
        second = generate(small_spec())
        self.assertEqual(first.train, second.train)
        self.assertEqual(first.test, second.test)

    def test_different_seed_changes_corpus(self):
        self.assertNotEqual(generate(small_spec(seed=1)).train, generate(small_spec(seed=2)).train)

    def test_zero_contamination_has_no_anomalies(self):
        corpus = generate(small_spec(contamination=0.0))
        for name in ('train', 'val', 'test'):
            self.assertFalse(any(s.weak_label for s in corpus.split(name)))
        self.assertTrue(all(not any(s.behavior_labels) for s in corpus.test))

    def test_labels_are_consistent_and_contiguous(self):
        corpus = generate(small_spec(contamination=0.5))
        anomalous = [s for s in corpus.test if s.weak_label]
        self.assertTrue(anomalous)
        for sequence in corpus.test:
            labels = np.array(sequence.behavior_labels)
            self.assertEqual(int(labels.any()), sequence.weak_label)
            if sequence.weak_label:
                marked = np.flatnonzero(labels)
                self.assertEqual(marked[-1] - marked[0] + 1, marked.size)
                self.assertTrue(2 <= marked.size <= 5)

    def test_split_sizes_and_label_visibility(self):
        corpus = generate(small_spec())
        self.assertEqual((len(corpus.train), len(corpus.val), len(corpus.test)), (120, 20, 40))
        self.assertTrue(all(s.behavior_labels is None for s in corpus.train + corpus.val))
        self.assertTrue(all(10 <= s.length <= 20 for s in corpus.train))
        self.assertEqual(corpus.vocab.size, 22)
        corpus.check_invariants()

    def test_corpus_round_trips_through_directory(self):
        corpus = generate(small_spec())
        with tempfile.TemporaryDirectory() as tmp:
            corpus.save(tmp)
            loaded = Corpus.load(tmp)
        self.assertEqual(loaded.source, 'syngen')
        self.assertEqual(loaded.test, corpus.test)


class SyngenSectionSerializerTests(SimpleTestCase):

    def test_defaults(self):
        serializer = SyngenSectionSerializer(data={})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['num_train'], 2000)

    def test_infeasible_span(self):
        serializer = SyngenSectionSerializer(data={'seq_len_min': 4, 'anomaly_span_max': 6})
        self.assertFalse(serializer.is_valid())
        self.assertIn('anomaly_span_max', serializer.errors)

    def test_generate_from_validated_section(self):
        serializer = SyngenSectionSerializer(data={
            'vocab_size': 12, 'num_patterns': 2, 'successors': 3, 'num_train': 30, 'num_val': 5, 'num_test': 10,
        })
        self.assertTrue(serializer.is_valid(), serializer.errors)
        corpus = generate_from_config(serializer.validated_data)
        self.assertEqual(len(corpus.test), 10)
