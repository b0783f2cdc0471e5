import json
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import torch
import torch.nn as nn
from django.test import SimpleTestCase, tag

from detector.network import RMSLNetwork, fused_score, pack_codes
from evaluation.services import EvaluationService, score_sequences
from ingest.records import SessionSequence
from rmsl.exceptions import ConfigError, DataError, TrainingDivergence
from syngen.services import build_generator_spec, generate
from .confidence import mc_estimate, mc_statistics, partition_confidence, update_ema, update_tau_c
from .sampling import BalancedBatchSampler
from .serializers import TrainSectionSerializer
from .services import ProgressiveTrainer, TrainConfig, mean_top_k, parse_plan

TINY_MODEL = dict(embedding_dim=16, hidden_size=16, context_dim=16, num_prototypes=4, dropout=0.1, alpha=0.5)


def small_corpus(contamination=0.3, seed=1):
    return generate(build_generator_spec(
        vocab_size=15, num_patterns=2, successors=3, seq_len=(8, 14), anomaly_span=(2, 4),
        contamination=contamination, num_train=60, num_val=20, num_test=20, seed=seed,
    ))


def quick_config(**overrides):
    params = dict(lr_stage1=1e-3, lr_stage2=1e-3, lr_stage3=1e-4, batch_normal=16, batch_anomalous=8,
                  epochs=2, mc_passes=3, eval_batch_size=32)
    params.update(overrides)
    return TrainConfig(**params)


class TrainConfigTests(SimpleTestCase):

    def test_defaults_follow_published_settings(self):
        serializer = TrainSectionSerializer(data={})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        config = TrainConfig.from_section(serializer.validated_data)
        self.assertEqual(config, TrainConfig())
        self.assertEqual((config.lr_stage1, config.lr_stage2, config.lr_stage3), (2e-6, 1e-5, 1e-6))
        self.assertEqual(config.topk_rule.size(100), 5)

    def test_ratios_must_fit(self):
        serializer = TrainSectionSerializer(data={'r_hi': 0.8, 'r_mid': 0.3})
        self.assertFalse(serializer.is_valid())
        self.assertIn('r_mid', serializer.errors)

    def test_single_mc_pass_rejected(self):
        serializer = TrainSectionSerializer(data={'mc_passes': 1})
        self.assertFalse(serializer.is_valid())
        self.assertIn('mc_passes', serializer.errors)

    def test_stage_plans(self):
        self.assertEqual(parse_plan('123'), (1, 2, 3))
        self.assertEqual(parse_plan(12), (1, 2))
        with self.assertRaises(ValueError):
            parse_plan('13')


class McEstimateTests(SimpleTestCase):

    def test_three_fixed_outputs(self):
        mean, var = mc_statistics(torch.tensor([[0.2], [0.4], [0.6]], dtype=torch.float64))
        self.assertAlmostEqual(mean.item(), 0.4, places=12)
        self.assertAlmostEqual(var.item(), 0.04, places=12)

    def test_needs_two_passes(self):
        with self.assertRaises(ValueError):
            mc_statistics(torch.ones(1, 3))
        model = RMSLNetwork(vocab_size=6, **TINY_MODEL)
        with self.assertRaises(ValueError):
            mc_estimate(model, *pack_codes([SessionSequence('U1', (1, 2), 0)]), passes=1)

    def test_without_dropout_variance_is_zero(self):
        model = RMSLNetwork(vocab_size=6, **dict(TINY_MODEL, dropout=0.0))
        _, var = mc_estimate(model, *pack_codes([SessionSequence('U1', (1, 2, 3, 4), 0)]), passes=4)
        self.assertTrue(torch.equal(var, torch.zeros_like(var)))

    def test_seeded_estimates_repeat(self):
        model = RMSLNetwork(vocab_size=6, **TINY_MODEL)
        batch = pack_codes([SessionSequence('U1', (1, 2, 3, 4, 5), 0)])
        torch.manual_seed(3)
        first = mc_estimate(model, *batch, passes=5)
        torch.manual_seed(3)
        second = mc_estimate(model, *batch, passes=5)
        self.assertTrue(torch.equal(first[1], second[1]))
        self.assertTrue((first[1] > 0).any())


class PartitionConfidenceTests(SimpleTestCase):

    def test_worked_example(self):
        partition = partition_confidence([0.3, 0.1, 0.2, 0.4], r_hi=0.25, r_mid=0.25)
        self.assertEqual(partition.high.tolist(), [1])
        self.assertEqual(partition.mid.tolist(), [2])
        self.assertEqual(partition.low.tolist(), [0, 3])

    def test_masks_mark_high_and_mid_positions(self):
        partition = partition_confidence([0.3, 0.1, 0.2, 0.4], r_hi=0.25, r_mid=0.25)
        high, mid = partition.masks()
        self.assertEqual(high.tolist(), [False, True, False, False])
        self.assertEqual(mid.tolist(), [False, False, True, False])

    def test_ties_follow_index_order(self):
        partition = partition_confidence([0.5] * 6, r_hi=0.5, r_mid=0.34)
        self.assertEqual(partition.high.tolist(), [0, 1, 2])
        self.assertEqual(partition.mid.tolist(), [3, 4])
        self.assertEqual(partition.low.tolist(), [5])

    def test_small_sequences_keep_one_high_confidence_behavior(self):
        partition = partition_confidence([0.2, 0.1], r_hi=0.3, r_mid=0.3)
        self.assertEqual(partition.high.tolist(), [1])
        self.assertEqual(partition.mid.tolist(), [])

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 60))
            variances = rng.integers(0, 8, size=n) / 8.0
            partition = partition_confidence(variances, 0.5, 0.3)
            ranked = sorted(range(n), key=lambda i: (variances[i], i))
            n_hi = max(1, int(np.floor(0.5 * n + 1e-9)))
            n_mid = min(int(np.floor(0.3 * n + 1e-9)), n - n_hi)
            self.assertEqual(partition.high.tolist(), sorted(ranked[:n_hi]))
            self.assertEqual(partition.mid.tolist(), sorted(ranked[n_hi:n_hi + n_mid]))
            self.assertEqual(sorted(partition.high.tolist() + partition.mid.tolist() + partition.low.tolist()), list(range(n)))
            if partition.mid.size:
                self.assertLessEqual(variances[partition.high].max(), variances[partition.mid].min())


class TauCTests(SimpleTestCase):

    def test_worked_example(self):
        self.assertAlmostEqual(update_tau_c(0.5, [1.0, 1.0 / 0.6], 0.9), 0.53, places=12)

    def test_frozen_with_unit_beta(self):
        self.assertEqual(update_tau_c(0.7, [0.1, 0.3], 1.0), 0.7)

    def test_constant_confidence_moves_up_monotonically(self):
        tau, trajectory = 0.5, []
        for _ in range(50):
            tau = update_tau_c(tau, [0.2, 0.2, 0.2], 0.9)
            trajectory.append(tau)
        self.assertTrue(all(b >= a for a, b in zip(trajectory, trajectory[1:])))
        self.assertLess(trajectory[-1], 1.0)
        self.assertGreater(trajectory[-1], 0.99)

    def test_zero_variance_counts_as_full_confidence(self):
        self.assertAlmostEqual(update_tau_c(0.5, [0.0, 0.5, 1.0], 0.0), (1.0 + 1.0 + 0.5) / 3, places=12)

    def test_empty_batch_keeps_threshold(self):
        self.assertEqual(update_tau_c(0.61, [], 0.9), 0.61)


class EmaTests(SimpleTestCase):

    def pair(self, teacher_value, student_value):
        teacher, student = nn.Linear(1, 1, bias=False), nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            teacher.weight.fill_(teacher_value)
            student.weight.fill_(student_value)
        return teacher, student

    def test_scalar_update(self):
        teacher, student = self.pair(1.0, 0.0)
        update_ema(teacher, student, 0.999)
        self.assertAlmostEqual(teacher.weight.item(), 0.999, places=6)

    def test_boundaries(self):
        teacher, student = self.pair(1.0, 0.25)
        update_ema(teacher, student, 1.0)
        self.assertEqual(teacher.weight.item(), 1.0)
        update_ema(teacher, student, 0.0)
        self.assertEqual(teacher.weight.item(), 0.25)

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            update_ema(nn.Linear(2, 1), nn.Linear(3, 1), 0.5)


class BalancedBatchSamplerTests(SimpleTestCase):

    def test_every_batch_is_balanced(self):
        sampler = BalancedBatchSampler(10, 3, batch_normal=4, batch_anomalous=4, generator=torch.Generator().manual_seed(0))
        batches = list(sampler)
        self.assertEqual(len(batches), len(sampler))
        seen = set()
        for batch in batches:
            normal, anomalous = batch[:4], batch[4:]
            self.assertEqual(len(batch), 8)
            self.assertTrue(all(i < 10 for i in normal))
            self.assertTrue(all(10 <= i < 13 for i in anomalous))
            seen.update(normal)
        self.assertEqual(seen, set(range(10)))

    def test_needs_both_classes(self):
        with self.assertRaises(ValueError):
            BalancedBatchSampler(5, 0)


class ProgressiveTrainerTests(SimpleTestCase):

    def setUp(self):
        self.corpus = small_corpus()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.out = Path(self.tmp.name)

    def trainer(self, config=None, seed=0, corpus=None, model=TINY_MODEL):
        return ProgressiveTrainer(
            corpus or self.corpus, config or quick_config(), model, seed=seed,
            checkpoint_dir=self.out / 'checkpoints', log_path=self.out / 'train_log.jsonl',
        )

    def test_stage1_leaves_head_untouched(self):
        trainer = self.trainer()
        model = trainer.build_model()
        head = [p.detach().clone() for p in model.head_parameters()]
        body = [p.detach().clone() for p in model.body_parameters()]
        trainer.fit('1', model=model)
        for before, after in zip(head, model.head_parameters()):
            self.assertTrue(torch.equal(before, after))
        self.assertFalse(all(torch.equal(b, a) for b, a in zip(body, model.body_parameters())))

    def test_stage1_keeps_centers_apart(self):
        model = self.trainer().fit('1').model
        distances = torch.pdist(model.prototypes.detach())
        self.assertEqual(distances.numel(), TINY_MODEL['num_prototypes'] * (TINY_MODEL['num_prototypes'] - 1) // 2)
        self.assertGreater(distances.min().item(), 0.0)

    def test_confidence_masks_ignore_padding(self):
        trainer = self.trainer(quick_config(r_hi=0.25, r_mid=0.25))
        variances = torch.tensor([[0.3, 0.1, 0.2, 0.4], [0.2, 0.1, 0.0, 0.0]])
        high, mid = trainer.confidence_masks(variances, torch.tensor([4, 2]))
        self.assertEqual(high.tolist(), [[False, True, False, False], [False, True, False, False]])
        self.assertEqual(mid.tolist(), [[False, False, True, False], [False, False, False, False]])

    def test_full_plan_writes_checkpoints_and_log(self):
        result = self.trainer().fit('123')
        self.assertEqual(result.completed, '123')
        self.assertEqual(sorted(p.name for p in result.checkpoints.values()), ['stage1.pt', 'stage12.pt', 'stage123.pt'])
        records = [json.loads(line) for line in (self.out / 'train_log.jsonl').read_text().splitlines()]
        self.assertEqual([r['stage'] for r in records], [1, 1, 2, 2, 3, 3])
        for key in ('epoch', 'loss', 'lr', 'seconds', 'rss_mb', 'memory_percent'):
            self.assertIn(key, records[-1])
        self.assertIn('val_loss', records[0])
        self.assertIn('val_auc', records[2])
        self.assertTrue(0.5 <= records[-1]['tau_c'] < 1.0)

    def test_same_seed_same_model(self):
        first = self.trainer(seed=5).fit('123').model
        second = self.trainer(seed=5).fit('123').model
        batch = self.corpus.test[:8]
        self.assertTrue(torch.equal(fused_score(first, batch).fused, fused_score(second, batch).fused))

    def test_resume_runs_remaining_stages(self):
        self.trainer().fit('12')
        result = self.trainer().fit('3', resume=self.out / 'checkpoints' / 'stage12.pt')
        self.assertEqual(result.completed, '123')
        self.assertEqual([o.stage for o in result.outcomes], [3])

    def test_resume_prefix_of_plan(self):
        self.trainer().fit('1')
        result = self.trainer().fit('123', resume=self.out / 'checkpoints' / 'stage1.pt')
        self.assertEqual([o.stage for o in result.outcomes], [2, 3])

    def test_resume_rejects_checkpoint_outside_plan(self):
        self.trainer().fit('2')
        with self.assertRaises(ConfigError) as ctx:
            self.trainer().fit('123', resume=self.out / 'checkpoints' / 'stage2.pt')
        self.assertEqual(ctx.exception.details['stage'], '2')
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_zero_ratios_skip_stage3(self):
        trainer = self.trainer(quick_config(r_hi=0.0, r_mid=0.0))
        model = trainer.build_model()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        with self.assertLogs('training.services', level='WARNING'):
            result = trainer.fit('3', model=model)
        self.assertTrue(result.outcomes[0].skipped)
        self.assertTrue(all(torch.equal(before[k], v) for k, v in model.state_dict().items()))

    def test_stage3_normal_term(self):
        result = self.trainer(quick_config(stage3_normal_term=True, epochs=1)).fit('3')
        self.assertIn('normal', result.history[-1])

    def test_mil_needs_anomalous_sequences(self):
        trainer = self.trainer(corpus=small_corpus(contamination=0.0))
        with self.assertRaises(DataError):
            trainer.fit('12')

    def test_single_center_warns(self):
        trainer = self.trainer(quick_config(epochs=1), model=dict(TINY_MODEL, num_prototypes=1))
        with self.assertLogs('training.services', level='WARNING') as logs:
            trainer.fit('1')
        self.assertTrue(any('Single center' in line for line in logs.output))

    def test_non_finite_loss_is_divergence(self):
        nan = torch.tensor(float('nan'), requires_grad=True)
        with mock.patch('training.services.stage1_loss', return_value=(nan, {'center': nan.detach()})):
            with self.assertRaises(TrainingDivergence) as ctx:
                self.trainer().fit('1')
        self.assertEqual(ctx.exception.details['stage'], 1)
        self.assertEqual(ctx.exception.exit_code, 4)


@tag('slow')
class SyntheticAcceptanceTests(SimpleTestCase):
    """Desk-scale reproduction on the reference synthetic corpus"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.corpus = generate(build_generator_spec(
            vocab_size=50, num_patterns=5, num_train=2000, num_val=200, num_test=400, contamination=0.1, seed=0,
        ))
        cls.config = TrainConfig(lr_stage1=1e-3, lr_stage2=1e-3, lr_stage3=1e-4)

    def behavior_auc(self, model):
        return EvaluationService(model, self.corpus, self.config.topk_rule).evaluate().auc

    def train(self, plan, **model_options):
        options = dict(num_prototypes=40, alpha=0.6)
        options.update(model_options)
        return ProgressiveTrainer(self.corpus, self.config, options, seed=0).fit(plan)

    def test_stage1_loss_decreases(self):
        config = TrainConfig(lr_stage1=1e-3, epochs=3, patience=3)
        result = ProgressiveTrainer(self.corpus, config, {'num_prototypes': 40}, seed=0).fit('1')
        losses = [r['loss'] for r in result.history]
        self.assertEqual(len(losses), 3)
        self.assertTrue(all(b < a for a, b in zip(losses, losses[1:])))

    def test_warm_up_separates_anomalous_behaviors(self):
        report = EvaluationService(self.train('1').model, self.corpus).evaluate()
        self.assertGreater(report.mean_distance_anomalous, report.mean_distance_normal)

    def test_ablation_ordering(self):
        aucs = {plan: self.behavior_auc(self.train(plan).model) for plan in ('1', '2', '12', '123')}
        self.assertGreaterEqual(aucs['123'], 0.90)
        self.assertGreaterEqual(aucs['123'], aucs['12'])
        self.assertGreater(aucs['12'], max(aucs['1'], aucs['2']))

    def test_mil_ranks_anomalous_bags_higher(self):
        model = self.train('12').model
        rule = self.config.topk_rule
        scores = score_sequences(model, self.corpus.test, rule)
        top = np.array([mean_top_k(s, rule) for s in scores.fused])
        labels = scores.weak_labels
        self.assertGreater(top[labels == 1].mean(), top[labels == 0].mean())

    def test_more_centers_help(self):
        single = self.behavior_auc(self.train('123', num_prototypes=1).model)
        several = self.behavior_auc(self.train('123', num_prototypes=8).model)
        self.assertGreaterEqual(several - single, 0.02)
