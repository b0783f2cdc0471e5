"""
Three-stage progressive training.

Stage 1 warms the encoder and centers up on normal sequences alone, stage 2
adds sequence-level supervision through top-K MIL and stage 3 refines the
anomalous sequences' behaviors with MC-dropout pseudo labels and an EMA
teacher.
"""
import copy
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from torch.optim import AdamW

from detector.checkpoints import load_checkpoint, save_checkpoint
from detector.losses import TopKRule, high_conf_loss, mid_conf_loss, mil_loss, stage1_loss
from detector.network import RMSLNetwork, length_mask
from evaluation.services import score_sequences, sequence_auc
from ingest.records import Corpus
from rmsl.exceptions import ConfigError, DataError, TrainingDivergence
from rmsl.health import resource_snapshot
from rmsl.seeding import seed_everything, torch_generator
from .confidence import TAU_C_MAX, TAU_C_MIN, mc_estimate, partition_confidence, update_ema, update_tau_c
from .sampling import balanced_loader, collate_sequences, sequential_loader

logger = logging.getLogger(__name__)

STAGE_PLANS = {
    '1': (1,),
    '2': (2,),
    '3': (3,),
    '12': (1, 2),
    '123': (1, 2, 3),
}
TRAIN_LOG_FILE = 'train_log.jsonl'


@dataclass
class TrainConfig:
    lr_stage1: float = 2e-6
    lr_stage2: float = 1e-5
    lr_stage3: float = 1e-6
    weight_decay: float = 5e-4
    batch_normal: int = 64
    batch_anomalous: int = 64
    epochs: int = 10
    patience: int = 3
    lambda_sep: float = 0.5
    topk_fraction: float = 0.05
    topk_k: Optional[int] = None
    tau_a: float = 0.5
    r_hi: float = 0.5
    r_mid: float = 0.3
    mc_passes: int = 10
    lambda_pse: float = 0.5
    beta_c: float = 0.9
    beta_ema: float = 0.999
    stage3_normal_term: bool = False
    eval_batch_size: int = 256

    @classmethod
    def from_section(cls, section):
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in section.items() if key in known})

    @property
    def topk_rule(self):
        return TopKRule(fraction=self.topk_fraction, k=self.topk_k)

    def learning_rate(self, stage):
        return getattr(self, f"lr_stage{stage}")


def parse_plan(plan):
    plan = str(plan)
    if plan not in STAGE_PLANS:
        raise ValueError(f"Unknown stage plan '{plan}'; expected one of {sorted(STAGE_PLANS)}")
    return STAGE_PLANS[plan]


@dataclass
class StageOutcome:
    stage: int
    epochs: int = 0
    monitor: str = ''
    best_value: Optional[float] = None
    checkpoint: Optional[Path] = None
    tau_c: Optional[float] = None
    skipped: bool = False


@dataclass
class TrainingResult:
    model: RMSLNetwork
    completed: str
    outcomes: List[StageOutcome] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)

    @property
    def checkpoints(self):
        return {o.stage: o.checkpoint for o in self.outcomes if o.checkpoint is not None}


class EarlyStopping:
    """Tracks the best monitored value and keeps a copy of the matching weights"""

    def __init__(self, patience, mode='max'):
        self.patience = patience
        self.mode = mode
        self.best_value = None
        self.best_epoch = 0
        self.best_state = None
        self.stale_epochs = 0

    def improved(self, value):
        if self.best_value is None:
            return True
        return value > self.best_value if self.mode == 'max' else value < self.best_value

    def step(self, epoch, value, model):
        """Returns True when training should stop"""
        if value is None:
            # nothing to monitor: the latest weights win
            self.best_epoch = epoch
            self.best_state = copy.deepcopy(model.state_dict())
            return False
        if self.improved(value):
            self.best_value, self.best_epoch, self.stale_epochs = value, epoch, 0
            self.best_state = copy.deepcopy(model.state_dict())
            return False
        self.stale_epochs += 1
        return self.stale_epochs >= self.patience

    def restore(self, model):
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


class EpochLog:
    """Per-epoch records, logged and appended as line-delimited JSON"""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []

    def write(self, record):
        record = dict(record, **resource_snapshot())
        self.records.append(record)
        logger.info(
            f"stage {record['stage']} epoch {record['epoch']}: loss={record['loss']:.6f} "
            + ' '.join(f"{key}={record[key]:.4f}" for key in ('val_loss', 'val_auc', 'tau_c') if record.get(key) is not None)
        )
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, 'a', encoding='utf-8') as handle:
                handle.write(json.dumps(record, sort_keys=True) + '\n')
        return record


class ProgressiveTrainer:
    """Owns one detector and runs the requested stages on a corpus"""

    def __init__(self, corpus: Corpus, config: TrainConfig, model_options=None, seed=0,
                 device=None, checkpoint_dir=None, log_path=None):
        self.corpus = corpus
        self.config = config
        self.model_options = dict(model_options or {})
        self.seed = seed
        self.device = torch.device(device or 'cpu')
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.epoch_log = EpochLog(log_path)
        self._warned_single_class_val = False

    def build_model(self):
        seed_everything(self.seed)
        model = RMSLNetwork(vocab_size=self.corpus.vocab.size, **self.model_options)
        return model.to(self.device)

    def fit(self, plan='123', model=None, resume=None) -> TrainingResult:
        """Run the stages of `plan`; `resume` continues from a checkpoint"""
        stages = parse_plan(plan)
        completed = ''
        if resume is not None:
            model, manifest = load_checkpoint(resume, device=self.device, vocab_size=self.corpus.vocab.size)
            completed = manifest['stage']
            if str(plan).startswith(completed):
                stages = stages[len(completed):]
            elif f"{completed}{plan}" not in STAGE_PLANS:
                raise ConfigError(
                    f"Checkpoint stages '{completed}' do not lead into plan '{plan}'",
                    {'resume': str(resume), 'stage': completed, 'plan': str(plan)},
                )
            logger.info(f"Resuming from {resume} (stages '{completed}' done); running {stages or 'nothing'}")
        elif model is None:
            model = self.build_model()

        result = TrainingResult(model=model, completed=completed)
        runners = {1: self.run_stage1, 2: self.run_stage2, 3: self.run_stage3}
        for stage in stages:
            seed_everything(self.seed + stage)
            outcome = runners[stage](model)
            if not outcome.skipped:
                result.completed += str(stage)
                outcome.checkpoint = self._checkpoint(model, result.completed, outcome)
            result.outcomes.append(outcome)
        result.history = list(self.epoch_log.records)
        return result

    def _checkpoint(self, model, label, outcome):
        if self.checkpoint_dir is None:
            return None
        return save_checkpoint(
            self.checkpoint_dir / f"stage{label}.pt", model, stage=label, seed=self.seed,
            epochs=outcome.epochs, best_value=outcome.best_value, tau_c=outcome.tau_c,
        )

    def _batch(self, batch):
        return (batch['codes'].to(self.device), batch['lengths'].to(self.device), batch['labels'].to(self.device))

    def _check_finite(self, loss, stage, epoch, step, parts):
        if not torch.isfinite(loss):
            raise TrainingDivergence(
                "Training loss became non-finite",
                dict({'stage': stage, 'epoch': epoch, 'batch': step}, **{k: float(v) for k, v in parts.items()}),
            )

    def _log_epoch(self, stage, epoch, totals, batches, started, lr, **extra):
        record = {
            'stage': stage,
            'epoch': epoch,
            'loss': totals.pop('loss') / max(batches, 1),
            'lr': lr,
            'seconds': round(time.monotonic() - started, 3),
        }
        record.update({key: value / max(batches, 1) for key, value in totals.items()})
        record.update(extra)
        return self.epoch_log.write(record)

    def validation_auc(self, model):
        """Sequence-level AUC of bag scores on the validation split, or None without both classes"""
        if not self.corpus.val:
            return None
        scores = score_sequences(model, self.corpus.val, self.config.topk_rule, self.config.eval_batch_size, self.device)
        value = sequence_auc(scores)
        if value is None and not self._warned_single_class_val:
            logger.warning("Validation split holds a single class; early stopping disabled")
            self._warned_single_class_val = True
        return value

    def validation_stage1_loss(self, model):
        normal = [s for s in self.corpus.val if not s.is_anomalous]
        if not normal:
            return None
        was_training = model.training
        model.eval()
        total = 0.0
        with torch.no_grad():
            for batch in sequential_loader(normal, self.config.eval_batch_size):
                codes, lengths, _ = self._batch(batch)
                context = model.encode(codes, lengths)
                loss, _ = stage1_loss(context, model.prototypes, self.config.lambda_sep, length_mask(lengths, codes.size(1)))
                total += float(loss) * codes.size(0)
        model.train(was_training)
        return total / len(normal)

    def run_stage1(self, model) -> StageOutcome:
        """Zero-positive warm-up: L_cen + lambda_sep * L_sep on normal sequences; the head is left untouched"""
        config = self.config
        normal = self.corpus.normal_train()
        if not normal:
            raise DataError("Stage 1 needs normal training sequences")
        if model.num_prototypes < 2:
            logger.warning("Single center: separability loss disabled")
        lr = config.learning_rate(1)
        optimizer = AdamW(model.body_parameters(), lr=lr, weight_decay=config.weight_decay)
        stopper = EarlyStopping(config.patience, mode='min')
        generator = torch_generator(self.seed + 1)

        epoch = 0
        for epoch in range(1, config.epochs + 1):
            model.train()
            started, totals, batches = time.monotonic(), defaultdict(float), 0
            for step, batch in enumerate(sequential_loader(normal, config.batch_normal, shuffle=True, generator=generator)):
                codes, lengths, _ = self._batch(batch)
                context = model.encode(codes, lengths)
                loss, parts = stage1_loss(context, model.prototypes, config.lambda_sep, length_mask(lengths, codes.size(1)))
                self._check_finite(loss, 1, epoch, step, parts)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                totals['loss'] += float(loss)
                for key, value in parts.items():
                    totals[key] += float(value)
                batches += 1
            val_loss = self.validation_stage1_loss(model)
            self._log_epoch(1, epoch, totals, batches, started, lr, val_loss=val_loss)
            if stopper.step(epoch, val_loss, model):
                logger.info(f"Stage 1 stopped early after epoch {epoch}")
                break
        stopper.restore(model)
        return StageOutcome(stage=1, epochs=epoch, monitor='val_loss', best_value=stopper.best_value)

    def run_stage2(self, model) -> StageOutcome:
        """Top-K MIL on balanced batches of normal and anomalous sequences"""
        config = self.config
        normal, anomalous = self.corpus.normal_train(), self.corpus.anomalous_train()
        if not anomalous:
            raise DataError("Stage 2 needs anomalous training sequences")
        if not normal:
            raise DataError("Stage 2 needs normal training sequences")
        lr = config.learning_rate(2)
        optimizer = AdamW(model.parameters(), lr=lr, weight_decay=config.weight_decay)
        stopper = EarlyStopping(config.patience, mode='max')
        generator = torch_generator(self.seed + 2)
        rule = config.topk_rule

        epoch = 0
        for epoch in range(1, config.epochs + 1):
            model.train()
            started, totals, batches = time.monotonic(), defaultdict(float), 0
            loader = balanced_loader(normal, anomalous, config.batch_normal, config.batch_anomalous, generator=generator)
            for step, batch in enumerate(loader):
                codes, lengths, labels = self._batch(batch)
                bundle = model(codes, lengths)
                loss = mil_loss(bundle.fused, labels, bundle.mask, rule)
                self._check_finite(loss, 2, epoch, step, {'mil': loss.detach()})
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                totals['loss'] += float(loss)
                batches += 1
            val_auc = self.validation_auc(model)
            self._log_epoch(2, epoch, totals, batches, started, lr, val_auc=val_auc)
            if stopper.step(epoch, val_auc, model):
                logger.info(f"Stage 2 stopped early after epoch {epoch}")
                break
        stopper.restore(model)
        return StageOutcome(stage=2, epochs=epoch, monitor='val_auc', best_value=stopper.best_value)

    def confidence_masks(self, variances, lengths):
        """High and mid confidence masks (B, L) from per-sequence variance partitions"""
        high = torch.zeros_like(variances, dtype=torch.bool)
        mid = torch.zeros_like(variances, dtype=torch.bool)
        rows = variances.detach().cpu().numpy()
        for row, length in enumerate(lengths.tolist()):
            row_high, row_mid = partition_confidence(rows[row, :length], self.config.r_hi, self.config.r_mid).masks()
            high[row, :length] = torch.from_numpy(row_high).to(high.device)
            mid[row, :length] = torch.from_numpy(row_mid).to(mid.device)
        return high, mid

    def _normal_batch(self, normal, generator):
        picks = torch.randint(len(normal), (self.config.batch_normal,), generator=generator).tolist()
        return self._batch(collate_sequences([normal[i] for i in picks]))

    def run_stage3(self, model) -> StageOutcome:
        """MC-dropout pseudo labels on anomalous sequences with an EMA teacher"""
        config = self.config
        if config.r_hi == 0 and config.r_mid == 0:
            logger.warning("r_hi = r_mid = 0 leaves no pseudo-labeled behaviors; stage 3 skipped")
            return StageOutcome(stage=3, skipped=True)
        anomalous, normal = self.corpus.anomalous_train(), self.corpus.normal_train()
        if not anomalous:
            raise DataError("Stage 3 needs anomalous training sequences")
        if config.stage3_normal_term and not normal:
            raise DataError("The stage 3 normal term needs normal training sequences")

        teacher = copy.deepcopy(model).eval()
        teacher.requires_grad_(False)
        tau_c = min(max(config.tau_a, TAU_C_MIN), TAU_C_MAX)
        lr = config.learning_rate(3)
        optimizer = AdamW(model.parameters(), lr=lr, weight_decay=config.weight_decay)
        stopper = EarlyStopping(config.patience, mode='max')
        generator = torch_generator(self.seed + 3)

        epoch = 0
        for epoch in range(1, config.epochs + 1):
            started, totals, batches = time.monotonic(), defaultdict(float), 0
            loader = sequential_loader(anomalous, config.batch_anomalous, shuffle=True, generator=generator)
            for step, batch in enumerate(loader):
                codes, lengths, _ = self._batch(batch)
                means, variances = mc_estimate(model, codes, lengths, config.mc_passes)
                high, mid = self.confidence_masks(variances, lengths)

                model.train()
                bundle = model(codes, lengths)
                with torch.no_grad():
                    teacher_scores = teacher(codes, lengths).fused
                parts = {
                    'high': high_conf_loss(bundle.fused, means, config.tau_a, high) if config.r_hi > 0 else bundle.fused.sum() * 0.0,
                    'mid': mid_conf_loss(bundle.fused, means, teacher_scores, tau_c, config.lambda_pse, mid),
                }
                if config.stage3_normal_term:
                    normal_codes, normal_lengths, normal_labels = self._normal_batch(normal, generator)
                    normal_bundle = model(normal_codes, normal_lengths)
                    parts['normal'] = mil_loss(normal_bundle.fused, normal_labels, normal_bundle.mask, config.topk_rule)
                loss = sum(parts.values())
                self._check_finite(loss, 3, epoch, step, parts)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                update_ema(teacher, model, config.beta_ema)
                tau_c = update_tau_c(tau_c, variances[bundle.mask].cpu().numpy(), config.beta_c)
                totals['loss'] += float(loss)
                for key, value in parts.items():
                    totals[key] += float(value)
                batches += 1
            val_auc = self.validation_auc(model)
            self._log_epoch(3, epoch, totals, batches, started, lr, val_auc=val_auc, tau_c=tau_c)
            if stopper.step(epoch, val_auc, model):
                logger.info(f"Stage 3 stopped early after epoch {epoch}")
                break
        stopper.restore(model)
        return StageOutcome(stage=3, epochs=epoch, monitor='val_auc', best_value=stopper.best_value, tau_c=tau_c)


def mean_top_k(scores, rule: TopKRule):
    """Mean of the K highest scores of one sequence"""
    scores = np.sort(np.asarray(scores))[::-1]
    return float(scores[:rule.size(scores.size)].mean())
