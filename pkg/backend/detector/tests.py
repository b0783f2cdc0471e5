import math
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase
from torch.autograd import gradcheck
from torch.func import functional_call

from ingest.records import SessionSequence
from rmsl.exceptions import VocabMismatch
from .checkpoints import load_checkpoint, save_checkpoint
from .losses import (
    TopKRule, bag_scores, bce, high_conf_loss, mid_conf_loss, mil_loss, multi_center_loss,
    separability_loss, stage1_loss,
)
from .network import RMSLNetwork, combine_scores, fused_score, pack_codes, sphere_scores, squash_deviation


def seq(*codes, label=0):
    return SessionSequence(user_id='U1', behaviors=tuple(codes), weak_label=label)


def tiny_model(dropout=0.0, **overrides):
    torch.manual_seed(0)
    params = dict(vocab_size=12, embedding_dim=8, hidden_size=8, context_dim=8, num_prototypes=3, dropout=dropout)
    params.update(overrides)
    return RMSLNetwork(**params)


def tensor(rows):
    return torch.tensor(rows, dtype=torch.float64)


class EncodeTests(SimpleTestCase):

    def test_fresh_centers_are_distinct(self):
        for num_prototypes in (2, 3, 40):
            model = tiny_model(num_prototypes=num_prototypes)
            self.assertGreater(torch.pdist(model.prototypes.detach()).min().item(), 0.0)

    def test_single_behavior_shape(self):
        model = tiny_model().eval()
        codes, lengths = pack_codes([seq(3)])
        self.assertEqual(tuple(model.encode(codes, lengths).shape), (1, 1, 8))

    def test_identical_sequences_identical_context(self):
        model = tiny_model(dropout=0.5).eval()
        codes, lengths = pack_codes([seq(1, 2, 3, 4), seq(1, 2, 3, 4)])
        context = model.encode(codes, lengths)
        self.assertTrue(torch.equal(context[0], context[1]))

    def test_permutation_changes_context_around_swap(self):
        model = tiny_model().eval()
        codes, lengths = pack_codes([seq(1, 2, 3, 4, 5, 6), seq(1, 2, 4, 3, 5, 6)])
        context = model.encode(codes, lengths)
        for position in (1, 2, 3, 4):
            self.assertFalse(torch.allclose(context[0, position], context[1, position]))

    def test_padding_does_not_leak_into_shorter_sequence(self):
        model = tiny_model().eval()
        alone = model.encode(*pack_codes([seq(4, 5)]))
        padded = model.encode(*pack_codes([seq(4, 5), seq(1, 2, 3, 4, 5, 6)]))
        torch.testing.assert_close(alone[0], padded[0, :2])

    def test_out_of_range_code_is_vocab_mismatch(self):
        model = tiny_model()
        with self.assertRaises(VocabMismatch):
            model.encode(*pack_codes([seq(1, 12)]))


class SphereScoresTests(SimpleTestCase):

    def test_point_on_center(self):
        prototypes = tensor([[5.0, 5.0], [1.0, 1.0], [2.0, 0.0], [0.5, -1.0]])
        spheres = sphere_scores(tensor([[0.5, -1.0]]), prototypes)
        self.assertEqual(spheres.dist_nearest.item(), 0.0)
        self.assertEqual(spheres.nearest.item(), 3)

    def test_hand_arithmetic(self):
        spheres = sphere_scores(tensor([[0.0, 0.0]]), tensor([[1.0, 0.0], [0.0, 2.0]]))
        self.assertEqual(spheres.distances[0].tolist(), [1.0, 2.0])
        self.assertEqual((spheres.nearest.item(), spheres.second.item()), (0, 1))

    def test_matches_brute_force_distances(self):
        rng = np.random.default_rng(0)
        x, p = rng.normal(size=(100, 8)), rng.normal(size=(40, 8))
        spheres = sphere_scores(torch.from_numpy(x), torch.from_numpy(p))
        oracle = np.sqrt(((x[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1))
        # summation order may differ from numpy in the last bit
        np.testing.assert_allclose(spheres.distances.numpy(), oracle, rtol=1e-12, atol=0)
        np.testing.assert_array_equal(spheres.nearest.numpy(), oracle.argmin(axis=1))
        self.assertTrue((spheres.nearest != spheres.second).all())
        self.assertTrue((spheres.dist_nearest <= spheres.dist_second).all())

    def test_integer_coordinates_match_exactly(self):
        rng = np.random.default_rng(1)
        x, p = rng.integers(-9, 10, size=(60, 6)).astype(np.float64), rng.integers(-9, 10, size=(12, 6)).astype(np.float64)
        spheres = sphere_scores(torch.from_numpy(x), torch.from_numpy(p))
        oracle = np.sqrt(((x[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1))
        np.testing.assert_array_equal(spheres.distances.numpy(), oracle)

    def test_duplicated_center_keeps_distance_and_lowest_index(self):
        generator = torch.Generator().manual_seed(3)
        x = torch.randn(20, 4, generator=generator, dtype=torch.float64)
        p = torch.randn(5, 4, generator=generator, dtype=torch.float64)
        before = sphere_scores(x, p)
        after = sphere_scores(x, torch.cat([p, p]))
        self.assertTrue(torch.equal(before.dist_nearest, after.dist_nearest))
        self.assertTrue(torch.equal(before.nearest, after.nearest))
        self.assertTrue(torch.equal(after.second, after.nearest + 5))

    def test_second_center_needs_two_centers(self):
        with self.assertRaises(ValueError):
            sphere_scores(tensor([[0.0]]), tensor([[1.0]]))
        spheres = sphere_scores(tensor([[0.0]]), tensor([[1.0]]), need_second=False)
        self.assertIsNone(spheres.second)


class ClassifyTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model().double().eval()
        self.context = torch.randn(1, 3, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        self.mask = torch.ones(1, 3, dtype=torch.bool)

    def test_zero_head_scores_half(self):
        with torch.no_grad():
            self.model.classifier.weight.zero_()
            self.model.classifier.bias.zero_()
        self.assertTrue(torch.equal(self.model.classify(self.context, self.mask), torch.full((1, 3), 0.5, dtype=torch.float64)))

    def test_large_bias_saturates(self):
        with torch.no_grad():
            self.model.classifier.bias.fill_(50.0)
        self.assertTrue((self.model.classify(self.context, self.mask) > 1 - 1e-12).all())

    def test_matches_hand_composition(self):
        attention, head = self.model.attention, self.model.classifier
        x = self.context[0]
        with torch.no_grad():
            q = x @ attention.query.weight.T + attention.query.bias
            k = x @ attention.key.weight.T + attention.key.bias
            v = x @ attention.value.weight.T + attention.value.bias
            weights = torch.softmax(q @ k.T / math.sqrt(8), dim=-1)
            expected = torch.sigmoid((x + weights @ v) @ head.weight[0] + head.bias[0])
            actual = self.model.classify(self.context, self.mask)[0]
        torch.testing.assert_close(actual, expected)


class FusedScoreTests(SimpleTestCase):

    def test_squash(self):
        self.assertEqual(squash_deviation(0.0).item(), 0.0)
        self.assertEqual(squash_deviation(1.0).item(), 0.5)
        with self.assertRaises(ValueError):
            squash_deviation(-0.1)

    def test_squash_is_monotone(self):
        values = torch.rand(500, dtype=torch.float64, generator=torch.Generator().manual_seed(2)) * 50
        ordered = torch.sort(values).values
        self.assertTrue((torch.diff(squash_deviation(ordered)) > 0).all())

    def test_combination_boundaries(self):
        cls, sph = torch.tensor(0.8), torch.tensor(0.2)
        self.assertEqual(combine_scores(cls, sph, 1.0), cls)
        self.assertEqual(combine_scores(cls, sph, 0.0), sph)
        self.assertAlmostEqual(combine_scores(cls, sph, 0.5).item(), 0.5, places=7)
        with self.assertRaises(ValueError):
            combine_scores(cls, sph, 1.5)

    def test_fused_scores_lie_in_unit_interval(self):
        model = tiny_model(dropout=0.1, alpha=0.3)
        bundle = fused_score(model, [seq(1, 2, 3), seq(4, 5, 6, 7, 8, 9, 10, 11)])
        fused = bundle.fused[bundle.mask]
        self.assertTrue(((fused >= 0) & (fused < 1)).all())
        torch.testing.assert_close(bundle.fused, 0.3 * bundle.score_cls + 0.7 * bundle.score_sph)
        self.assertTrue(torch.isfinite(bce(fused.mean(), torch.tensor(1.0))))
        self.assertEqual([len(s) for s in bundle.per_sequence()], [3, 8])
        self.assertTrue(model.training)

    def test_gradient_of_fused_score(self):
        model = tiny_model().double().eval()
        codes, lengths = pack_codes([seq(1, 4, 2, 7, 3, 9)])

        def fused_wrt(prototypes, weight):
            params = {'prototypes': prototypes, 'classifier.weight': weight}
            return functional_call(model, params, (codes, lengths)).fused

        inputs = (model.prototypes.detach().clone().requires_grad_(), model.classifier.weight.detach().clone().requires_grad_())
        self.assertTrue(gradcheck(fused_wrt, inputs, eps=1e-4, atol=1e-6, rtol=1e-3))


class CenterLossTests(SimpleTestCase):

    def test_zero_when_behaviors_sit_on_centers(self):
        prototypes = tensor([[1.0, 2.0], [-3.0, 0.5], [0.0, 0.0]])
        self.assertEqual(multi_center_loss(prototypes[[2, 0, 0]], prototypes).item(), 0.0)

    def test_distance_two_gives_four(self):
        loss = multi_center_loss(tensor([[0.0, 0.0]]), tensor([[2.0, 0.0], [0.0, 5.0]]))
        self.assertAlmostEqual(loss.item(), 4.0, places=12)

    def test_matches_min_distance_oracle_with_padding(self):
        rng = np.random.default_rng(4)
        x, p = rng.normal(size=(3, 7, 5)), rng.normal(size=(6, 5))
        lengths = [7, 4, 1]
        mask = torch.tensor([[i < n for i in range(7)] for n in lengths])
        expected = np.mean([
            (((x[b, :n, None, :] - p[None]) ** 2).sum(-1).min(-1)).mean() for b, n in enumerate(lengths)
        ])
        actual = multi_center_loss(torch.from_numpy(x), torch.from_numpy(p), mask)
        self.assertAlmostEqual(actual.item(), expected, places=10)

    def test_empty_sequence_rejected(self):
        with self.assertRaises(ValueError):
            multi_center_loss(torch.zeros(1, 2, 2), tensor([[0.0, 0.0]]), torch.zeros(1, 2, dtype=torch.bool))


class SeparabilityLossTests(SimpleTestCase):

    def test_equal_distances_give_ln2(self):
        loss = separability_loss(tensor([[0.0, 0.0]]), tensor([[1.0, 0.0], [0.0, 1.0]]))
        self.assertLess(abs(loss.item() - math.log(2)), 1e-9)

    def test_hand_evaluation(self):
        loss = separability_loss(tensor([[0.0, 0.0]]), tensor([[1.0, 0.0], [0.0, 3.0]]))
        self.assertAlmostEqual(loss.item(), 0.126928, places=6)

    def test_far_second_center_vanishes(self):
        loss = separability_loss(tensor([[0.0, 0.0]]), tensor([[0.0, 0.0], [0.0, 60.0]]))
        self.assertLess(loss.item(), 1e-6)

    def test_huge_distances_stay_finite(self):
        loss = separability_loss(tensor([[0.0, 0.0]]), tensor([[1e4, 0.0], [0.0, 2e4]]))
        self.assertTrue(math.isfinite(loss.item()))


class Stage1LossTests(SimpleTestCase):

    def test_weighted_sum(self):
        total, parts = stage1_loss(tensor([[0.0, 0.0]]), tensor([[2.0, 0.0], [0.0, 2.0]]), lambda_sep=0.5)
        self.assertAlmostEqual(total.item(), 4.346574, places=6)
        self.assertAlmostEqual(parts['center'].item(), 4.0, places=12)

    def test_zero_weight_is_center_loss(self):
        x = torch.randn(2, 5, 3, dtype=torch.float64)
        p = torch.randn(4, 3, dtype=torch.float64)
        total, _ = stage1_loss(x, p, lambda_sep=0.0)
        self.assertEqual(total.item(), multi_center_loss(x, p).item())

    def test_composition_on_random_inputs(self):
        x = torch.randn(2, 5, 3, dtype=torch.float64)
        p = torch.randn(4, 3, dtype=torch.float64)
        total, _ = stage1_loss(x, p, lambda_sep=0.7)
        expected = multi_center_loss(x, p) + 0.7 * separability_loss(x, p)
        self.assertAlmostEqual(total.item(), expected.item(), places=12)

    def test_single_center_skips_separability(self):
        total, parts = stage1_loss(tensor([[0.0, 1.0]]), tensor([[0.0, 0.0]]))
        self.assertEqual(parts['separation'].item(), 0.0)
        self.assertAlmostEqual(total.item(), 1.0)


class MilLossTests(SimpleTestCase):

    def test_top_one_of_positive_bag(self):
        loss = mil_loss(tensor([[0.1, 0.9, 0.2]]), torch.tensor([1]), rule=TopKRule(k=1))
        self.assertAlmostEqual(loss.item(), 0.105361, places=6)

    def test_half_scores_give_ln2_for_any_k(self):
        for k in (1, 2, 4):
            for label in (0, 1):
                loss = mil_loss(torch.full((1, 4), 0.5, dtype=torch.float64), torch.tensor([label]), rule=TopKRule(k=k))
                self.assertLess(abs(loss.item() - math.log(2)), 1e-9)

    def test_mean_then_bce(self):
        loss = mil_loss(tensor([[0.3, 0.7]]), torch.tensor([0]), rule=TopKRule(k=2))
        self.assertLess(abs(loss.item() - math.log(2)), 1e-9)

    def test_k_is_clamped_and_default_rule(self):
        self.assertEqual(TopKRule(k=3).size(2), 2)
        self.assertEqual(TopKRule().size(10), 1)
        self.assertEqual(TopKRule().size(100), 5)
        self.assertEqual(TopKRule().size(119), 5)

    def test_bag_scores_respect_padding(self):
        fused = tensor([[0.2, 0.4, 0.9, 0.9], [0.6, 0.1, 0.99, 0.99]])
        mask = torch.tensor([[True, True, True, True], [True, True, False, False]])
        scores = bag_scores(fused, mask, TopKRule(k=2))
        torch.testing.assert_close(scores, tensor([0.9, 0.35]))

    def test_permutation_invariant(self):
        scores = torch.rand(1, 30, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
        shuffled = scores[:, torch.randperm(30, generator=torch.Generator().manual_seed(6))]
        labels = torch.tensor([1])
        self.assertEqual(mil_loss(scores, labels, rule=TopKRule(k=4)).item(), mil_loss(shuffled, labels, rule=TopKRule(k=4)).item())


class PseudoLabelLossTests(SimpleTestCase):

    def test_high_confidence_examples(self):
        everything = torch.tensor([True])
        self.assertAlmostEqual(high_conf_loss(tensor([0.9]), tensor([0.9]), 0.5, everything).item(), 0.105361, places=6)
        self.assertAlmostEqual(high_conf_loss(tensor([0.2]), tensor([0.2]), 0.5, everything).item(), 0.223144, places=6)

    def test_high_confidence_matches_elementwise_oracle(self):
        scores = tensor([0.1, 0.8, 0.6, 0.3, 0.95])
        means = tensor([0.7, 0.2, 0.55, 0.4, 0.9])
        selected = torch.tensor([True, True, False, True, True])
        expected = np.mean([
            -math.log(s) if m > 0.5 else -math.log(1 - s)
            for s, m, keep in zip(scores.tolist(), means.tolist(), selected.tolist()) if keep
        ])
        self.assertAlmostEqual(high_conf_loss(scores, means, 0.5, selected).item(), expected, places=12)

    def test_empty_high_confidence_set_contributes_zero(self):
        with self.assertLogs('detector.losses', level='WARNING'):
            loss = high_conf_loss(tensor([0.4]), tensor([0.9]), 0.5, torch.tensor([False]))
        self.assertEqual(loss.item(), 0.0)

    def test_mid_confidence_pure_soft(self):
        scores, teacher = tensor([0.3, 0.7]), tensor([0.4, 0.6])
        loss = mid_conf_loss(scores, tensor([0.99, 0.01]), teacher, 0.8, 0.0, torch.tensor([True, True]))
        self.assertAlmostEqual(loss.item(), bce(scores, teacher).mean().item(), places=12)

    def test_mid_confidence_hard_target_outside_band(self):
        loss = mid_conf_loss(tensor([0.9]), tensor([0.95]), tensor([0.5]), 0.8, 1.0, torch.tensor([True]))
        self.assertAlmostEqual(loss.item(), 0.105361, places=6)

    def test_dead_band_keeps_only_soft_term(self):
        selected = torch.tensor([True])
        self.assertEqual(mid_conf_loss(tensor([0.9]), tensor([0.6]), tensor([0.5]), 0.8, 1.0, selected).item(), 0.0)
        half = mid_conf_loss(tensor([0.9]), tensor([0.6]), tensor([0.5]), 0.8, 0.5, selected)
        self.assertAlmostEqual(half.item(), 0.5 * bce(tensor([0.9]), tensor([0.5])).item(), places=12)

    def test_mid_confidence_rejects_bad_threshold(self):
        with self.assertRaises(ValueError):
            mid_conf_loss(tensor([0.5]), tensor([0.5]), tensor([0.5]), 0.4, 0.5, torch.tensor([True]))


class LossGradientTests(SimpleTestCase):

    def setUp(self):
        generator = torch.Generator().manual_seed(7)
        self.context = torch.randn(2, 6, 8, dtype=torch.float64, generator=generator, requires_grad=True)
        self.prototypes = torch.randn(3, 8, dtype=torch.float64, generator=generator, requires_grad=True)
        self.scores = (0.1 + 0.8 * torch.rand(2, 6, dtype=torch.float64, generator=generator)).requires_grad_()
        self.means = torch.rand(2, 6, dtype=torch.float64, generator=generator)
        self.teacher = 0.1 + 0.8 * torch.rand(2, 6, dtype=torch.float64, generator=generator)
        self.selected = torch.rand(2, 6, generator=generator) > 0.3

    def check(self, function, *inputs):
        self.assertTrue(gradcheck(function, inputs, eps=1e-4, atol=1e-6, rtol=1e-3))

    def test_center_loss(self):
        self.check(multi_center_loss, self.context, self.prototypes)

    def test_separability_loss(self):
        self.check(separability_loss, self.context, self.prototypes)

    def test_mil_loss(self):
        labels = torch.tensor([1, 0])
        self.check(lambda s: mil_loss(s, labels, rule=TopKRule(k=2)), self.scores)

    def test_high_confidence_loss(self):
        self.check(lambda s: high_conf_loss(s, self.means, 0.5, self.selected), self.scores)

    def test_mid_confidence_loss(self):
        self.check(lambda s: mid_conf_loss(s, self.means, self.teacher, 0.7, 0.5, self.selected), self.scores)


class CheckpointTests(SimpleTestCase):

    def test_round_trip_scores_identically(self):
        model = tiny_model(dropout=0.1, alpha=0.4)
        batch = [seq(1, 2, 3, 4), seq(5, 6)]
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / 'stage2.pt', model, stage='12', seed=7)
            restored, manifest = load_checkpoint(path)
        self.assertEqual(manifest['stage'], '12')
        self.assertEqual(manifest['num_prototypes'], 3)
        self.assertEqual(manifest['alpha'], 0.4)
        self.assertTrue(torch.equal(fused_score(model, batch).fused, fused_score(restored, batch).fused))

    def test_vocab_mismatch_on_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / 'model.pt', tiny_model(), stage='1', seed=0)
            with self.assertRaises(VocabMismatch):
                load_checkpoint(path, vocab_size=99)
