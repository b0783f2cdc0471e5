import math
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase
from PIL import Image

from detector.network import RMSLNetwork
from syngen.services import build_generator_spec, generate
from .metrics import auc, behavior_metrics, confusion_at, dr_at_budget, roc_points, select_threshold
from .reports import render_reports
from .services import EvaluationService, load_report, read_roc_table, read_score_dump


def random_case(rng, max_size=50):
    n = int(rng.integers(2, max_size))
    scores = rng.integers(0, 10, size=n) / 10.0
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    return scores, labels


def pairwise_auc(scores, labels):
    positive, negative = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in positive for n in negative)
    return wins / (positive.size * negative.size)


class AucTests(SimpleTestCase):

    def test_examples(self):
        self.assertEqual(auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]), 1.0)
        self.assertEqual(auc([0.3] * 5, [0, 1, 0, 1, 1]), 0.5)
        self.assertEqual(auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]), 0.75)

    def test_single_class_rejected(self):
        with self.assertRaises(ValueError):
            auc([0.1, 0.2], [1, 1])

    def test_matches_pair_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            scores, labels = random_case(rng)
            self.assertAlmostEqual(auc(scores, labels), pairwise_auc(scores, labels), places=12)

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(1)
        scores, labels = rng.random(200), rng.integers(0, 2, 200)
        self.assertAlmostEqual(auc(scores, labels), auc(np.exp(3 * scores) - 7, labels), places=12)


class ConfusionTests(SimpleTestCase):

    def test_everything_flagged(self):
        confusion = confusion_at([0.6, 0.7, 0.8], [0, 1, 1], 0.5)
        self.assertEqual((confusion.dr, confusion.fpr), (1.0, 1.0))

    def test_threshold_one_flags_nothing(self):
        confusion = confusion_at([0.2, 0.99, 1.0], [0, 1, 1], 1.0)
        self.assertEqual((confusion.dr, confusion.fpr), (0.0, 0.0))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            scores, labels = random_case(rng)
            tau = float(rng.integers(0, 11) / 10.0)
            tp = fp = tn = fn = 0
            for score, label in zip(scores, labels):
                if score > tau:
                    tp, fp = tp + (label == 1), fp + (label == 0)
                else:
                    fn, tn = fn + (label == 1), tn + (label == 0)
            confusion = confusion_at(scores, labels, tau)
            self.assertEqual(confusion[:4], (tp, fp, tn, fn))
            self.assertEqual(sum(confusion[:4]), labels.size)
            self.assertEqual(confusion.dr, tp / (tp + fn))
            self.assertEqual(confusion.fpr, fp / (fp + tn))


class BudgetTests(SimpleTestCase):

    def test_full_budget_finds_everything(self):
        self.assertEqual(dr_at_budget([0.1, 0.5, 0.2], [1, 0, 1], 1.0), 1.0)

    def test_anomalies_on_top(self):
        scores = np.linspace(0, 1, 100)
        labels = np.zeros(100, dtype=int)
        labels[-5:] = 1
        self.assertEqual(dr_at_budget(scores, labels, 0.05), 1.0)

    def test_tiny_budget_inspects_one_behavior(self):
        self.assertEqual(dr_at_budget([0.9, 0.1, 0.8], [1, 0, 1], 0.01), 0.5)

    def test_ties_resolved_by_position(self):
        self.assertEqual(dr_at_budget([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 0], 0.25), 0.0)
        self.assertEqual(dr_at_budget([0.5, 0.5, 0.5, 0.5], [1, 0, 0, 0], 0.25), 1.0)

    def test_invalid_budget(self):
        for budget in (0.0, 1.5):
            with self.assertRaises(ValueError):
                dr_at_budget([0.1], [1], budget)

    def test_matches_sort_oracle_and_is_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            scores, labels = random_case(rng)
            ranked = sorted(range(scores.size), key=lambda i: (-scores[i], i))
            values = []
            for budget in (0.05, 0.10, 0.15, 0.5):
                inspected = max(1, math.floor(budget * scores.size + 1e-9))
                expected = sum(labels[i] for i in ranked[:inspected]) / labels.sum()
                values.append(dr_at_budget(scores, labels, budget))
                self.assertEqual(values[-1], expected)
            self.assertEqual(values, sorted(values))


class SelectThresholdTests(SimpleTestCase):

    def test_separated_bags_give_lowest_gap_threshold(self):
        self.assertEqual(select_threshold([0.1, 0.2, 0.7, 0.8], [0, 0, 1, 1]), (0.2, 'validation'))

    def test_identical_bags_fall_back(self):
        with self.assertLogs('evaluation.metrics', level='WARNING'):
            self.assertEqual(select_threshold([0.4] * 4, [0, 1, 0, 1], fallback=0.5), (0.5, 'fallback'))

    def test_single_class_falls_back(self):
        with self.assertLogs('evaluation.metrics', level='WARNING'):
            self.assertEqual(select_threshold([0.4, 0.6], [0, 0], fallback=0.5), (0.5, 'fallback'))

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            scores, labels = random_case(rng)
            best, best_j = None, 0.0
            for tau in sorted(set(scores.tolist())):
                confusion = confusion_at(scores, labels, tau)
                j = confusion.dr - confusion.fpr
                if j > best_j + 1e-12:
                    best, best_j = tau, j
            if best is None:
                with self.assertLogs('evaluation.metrics', level='WARNING'):
                    self.assertEqual(select_threshold(scores, labels, fallback=0.5), (0.5, 'fallback'))
            else:
                self.assertEqual(select_threshold(scores, labels, fallback=0.5), (best, 'validation'))


class RocPointsTests(SimpleTestCase):

    def test_curve_spans_corners(self):
        thresholds, fpr, tpr = roc_points([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        self.assertEqual((fpr[0], tpr[0]), (0.0, 0.0))
        self.assertEqual((fpr[-1], tpr[-1]), (1.0, 1.0))
        self.assertTrue(np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0))
        self.assertAlmostEqual(float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2)), 0.75)

    def test_points_follow_strict_thresholds(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            scores, labels = random_case(rng)
            thresholds, fpr, tpr = roc_points(scores, labels)
            self.assertEqual(thresholds.size, np.unique(scores).size + 1)
            for threshold, x, y in zip(thresholds, fpr, tpr):
                confusion = confusion_at(scores, labels, threshold)
                self.assertAlmostEqual(confusion.fpr, x, places=12)
                self.assertAlmostEqual(confusion.dr, y, places=12)

    def test_single_class_rejected(self):
        with self.assertRaises(ValueError):
            roc_points([0.1, 0.2, 0.3], [0, 0, 0])


class EvaluationServiceTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.corpus = generate(build_generator_spec(
            vocab_size=15, num_patterns=2, successors=3, seq_len=(8, 14), anomaly_span=(2, 4),
            contamination=0.4, num_train=20, num_val=20, num_test=30, seed=2,
        ))
        torch.manual_seed(0)
        cls.model = RMSLNetwork(cls.corpus.vocab.size, embedding_dim=8, hidden_size=8, context_dim=8, num_prototypes=3)

    def test_report_and_artifacts(self):
        with tempfile.TemporaryDirectory() as tmp:
            report = EvaluationService(self.model, self.corpus).evaluate(tmp)
            out = Path(tmp)
            self.assertEqual(load_report(out / 'report.json'), report)
            fused, labels = read_score_dump(out / report.score_dump)
            fpr, tpr = read_roc_table(out / 'roc.tsv')
        total = sum(s.length for s in self.corpus.test)
        self.assertEqual((report.behaviors, report.sequences, fused.size), (total, 30, total))
        self.assertEqual(report.tp + report.fp + report.tn + report.fn, total)
        self.assertEqual(list(report.dr_at_budget), ['5%', '10%', '15%'])
        self.assertAlmostEqual(report.auc, auc(fused, labels), places=12)
        self.assertEqual((fpr[-1], tpr[-1]), (1.0, 1.0))
        self.assertIsNotNone(report.mean_distance_anomalous)

    def test_deterministic(self):
        first = EvaluationService(self.model, self.corpus).evaluate()
        second = EvaluationService(self.model, self.corpus).evaluate()
        self.assertEqual(first, second)


class ReportRenderingTests(SimpleTestCase):

    def test_images_and_pdf(self):
        rng = np.random.default_rng(5)
        scores, labels = rng.random(300), rng.integers(0, 2, 300)
        report = behavior_metrics(scores, labels, 0.5, 'fallback', sequence_auc=0.6,
                                  mean_distance_normal=1.0, mean_distance_anomalous=2.0)
        _, fpr, tpr = roc_points(scores, labels)
        with tempfile.TemporaryDirectory() as tmp:
            paths = render_reports(report, fpr, tpr, scores, labels, tmp)
            with Image.open(paths['roc']) as image:
                self.assertEqual(image.size, (640, 480))
            with Image.open(paths['histogram']) as image:
                self.assertEqual((image.format, image.size), ('PNG', (640, 480)))
                self.assertGreater(len(set(image.convert('RGB').getdata())), 2)
            self.assertTrue(paths['pdf'].read_bytes().startswith(b'%PDF'))
