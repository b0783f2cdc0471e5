"""
Synthetic weakly labeled corpora with behavior-level ground truth.

Normal sequences are walks on one of several sparse Markov chains, each
living on its own subset of behaviors, so the normal data is genuinely
multimodal. Anomalous sequences are normal walks with one contiguous span
resampled from an anomaly chain whose transitions are rare under every
normal chain.
"""
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Tuple

import numpy as np

from ingest.records import BehaviorVocab, Corpus, SessionSequence
from rmsl.exceptions import ConfigError

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-9
EPOCH = datetime(2020, 1, 1, tzinfo=timezone.utc)


def behavior_name(state):
    return f"b{state:03d}"


@dataclass
class GeneratorSpec:
    """Everything the generator needs; `generate` is a pure function of it"""

    normal_patterns: np.ndarray  # K x V x V
    pattern_starts: np.ndarray  # K x V
    anomaly_pattern: np.ndarray  # V x V
    seq_len: Tuple[int, int] = (20, 60)
    anomaly_span: Tuple[int, int] = (3, 8)
    contamination: float = 0.1
    num_train: int = 2000
    num_val: int = 200
    num_test: int = 400
    seed: int = 0

    @property
    def vocab_size(self):
        return self.anomaly_pattern.shape[0]

    @property
    def num_patterns(self):
        return self.normal_patterns.shape[0]

    def validate(self):
        errors = {}
        v = self.vocab_size
        if self.anomaly_pattern.shape != (v, v):
            errors['anomaly_pattern'] = f"expected {v}x{v}, got {self.anomaly_pattern.shape}"
        if self.normal_patterns.ndim != 3 or self.normal_patterns.shape[1:] != (v, v):
            errors['normal_patterns'] = f"expected Kx{v}x{v}, got {self.normal_patterns.shape}"
        if self.pattern_starts.shape != (self.num_patterns, v):
            errors['pattern_starts'] = f"expected {self.num_patterns}x{v}"
        for name, matrix in (('normal_patterns', self.normal_patterns),
                             ('pattern_starts', self.pattern_starts),
                             ('anomaly_pattern', self.anomaly_pattern)):
            if name in errors:
                continue
            if (matrix < 0).any():
                errors[name] = 'negative probabilities'
            elif np.abs(matrix.sum(axis=-1) - 1.0).max() > ROW_SUM_TOLERANCE:
                errors[name] = 'rows must sum to 1'
        lo, hi = self.seq_len
        span_lo, span_hi = self.anomaly_span
        if not 1 <= lo <= hi:
            errors['seq_len'] = f"invalid range {self.seq_len}"
        if not 1 <= span_lo <= span_hi:
            errors['anomaly_span'] = f"invalid range {self.anomaly_span}"
        elif span_hi > lo:
            errors['anomaly_span'] = f"span up to {span_hi} cannot fit sequences of length {lo}"
        if not 0.0 <= self.contamination <= 1.0:
            errors['contamination'] = 'must lie in [0, 1]'
        if min(self.num_train, self.num_test) < 1 or self.num_val < 0:
            errors['split_sizes'] = 'train and test need at least one sequence'
        if errors:
            raise ConfigError("Infeasible generator spec", errors)
        return self

    def summary(self):
        return {
            'vocab_size': self.vocab_size,
            'num_patterns': self.num_patterns,
            'seq_len': list(self.seq_len),
            'anomaly_span': list(self.anomaly_span),
            'contamination': self.contamination,
            'seed': self.seed,
        }


def build_generator_spec(vocab_size=50, num_patterns=5, successors=5, seq_len=(20, 60), anomaly_span=(3, 8),
                         contamination=0.1, num_train=2000, num_val=200, num_test=400, seed=0,
                         anomaly_mass_limit=0.1) -> GeneratorSpec:
    """Random sparse normal chains plus an anomaly chain on rare transitions"""
    if successors > vocab_size:
        raise ConfigError("More successors than behaviors", {'successors': successors, 'vocab_size': vocab_size})
    rng = np.random.default_rng(seed)
    home_size = max(successors, min(vocab_size, 2 * vocab_size // num_patterns))

    patterns = np.zeros((num_patterns, vocab_size, vocab_size))
    starts = np.zeros((num_patterns, vocab_size))
    for k in range(num_patterns):
        home = rng.choice(vocab_size, size=home_size, replace=False)
        starts[k, home] = 1.0 / home_size
        for state in range(vocab_size):
            chosen = rng.choice(home, size=successors, replace=False)
            patterns[k, state, chosen] = rng.dirichlet(np.ones(successors))

    aggregate = patterns.mean(axis=0)
    anomaly = np.zeros((vocab_size, vocab_size))
    for state in range(vocab_size):
        rare = np.flatnonzero(aggregate[state] <= anomaly_mass_limit)
        if rare.size == 0:
            rare = np.argsort(aggregate[state], kind='stable')[:successors]
        chosen = rng.choice(rare, size=min(successors, rare.size), replace=False)
        anomaly[state, chosen] = rng.dirichlet(np.ones(chosen.size))

    spec = GeneratorSpec(
        normal_patterns=patterns,
        pattern_starts=starts,
        anomaly_pattern=anomaly,
        seq_len=tuple(seq_len),
        anomaly_span=tuple(anomaly_span),
        contamination=contamination,
        num_train=num_train,
        num_val=num_val,
        num_test=num_test,
        seed=seed,
    )
    return spec.validate()


def walk(matrix, first, steps, rng):
    """`steps` states of a Markov walk starting at `first`"""
    cdf = np.cumsum(matrix, axis=1)
    last = matrix.shape[1] - 1
    states = np.empty(steps, dtype=np.int64)
    states[0] = first
    draws = rng.random(steps)
    for t in range(1, steps):
        states[t] = min(int(np.searchsorted(cdf[states[t - 1]], draws[t], side='right')), last)
    return states


def _draw(distribution, rng):
    return min(int(np.searchsorted(np.cumsum(distribution), rng.random(), side='right')), distribution.size - 1)


def sample_sequence(spec: GeneratorSpec, rng):
    """One (states, labels) pair; labels mark the resampled anomaly span"""
    pattern = int(rng.integers(spec.num_patterns))
    length = int(rng.integers(spec.seq_len[0], spec.seq_len[1] + 1))
    first = _draw(spec.pattern_starts[pattern], rng)
    states = walk(spec.normal_patterns[pattern], first, length, rng)
    labels = np.zeros(length, dtype=np.int64)
    if rng.random() < spec.contamination:
        span = int(rng.integers(spec.anomaly_span[0], spec.anomaly_span[1] + 1))
        position = int(rng.integers(0, length - span + 1))
        previous = states[position - 1] if position > 0 else int(rng.integers(spec.vocab_size))
        entry = _draw(spec.anomaly_pattern[previous], rng)
        states[position:position + span] = walk(spec.anomaly_pattern, entry, span, rng)
        labels[position:position + span] = 1
    return states, labels


def generate(spec: GeneratorSpec) -> Corpus:
    """Seeded corpus; each sequence draws from its own child seed"""
    spec.validate()
    vocab = BehaviorVocab(behavior_name(state) for state in range(spec.vocab_size))
    total = spec.num_train + spec.num_val + spec.num_test
    children = np.random.SeedSequence(spec.seed).spawn(total)

    sequences = []
    for index, child in enumerate(children):
        states, labels = sample_sequence(spec, np.random.default_rng(child))
        sequences.append(SessionSequence(
            user_id=f"U{index % 100:03d}",
            behaviors=tuple(vocab.encode(behavior_name(s)) for s in states),
            weak_label=int(labels.any()),
            behavior_labels=tuple(int(y) for y in labels),
            start=EPOCH + timedelta(minutes=index),
        ))

    train = [s.without_behavior_labels() for s in sequences[:spec.num_train]]
    val = [s.without_behavior_labels() for s in sequences[spec.num_train:spec.num_train + spec.num_val]]
    test = sequences[spec.num_train + spec.num_val:]
    corpus = Corpus(train=train, val=val, test=test, vocab=vocab, source='syngen', extra={'generator': spec.summary()})
    logger.info(
        f"Generated synthetic corpus: {sum(s.weak_label for s in train)} of {len(train)} training "
        f"sequences anomalous, {sum(s.weak_label for s in test)} of {len(test)} test"
    )
    return corpus


def generate_from_config(section) -> Corpus:
    """Corpus for a validated [syngen] config section"""
    spec = build_generator_spec(
        vocab_size=section['vocab_size'],
        num_patterns=section['num_patterns'],
        successors=section['successors'],
        seq_len=(section['seq_len_min'], section['seq_len_max']),
        anomaly_span=(section['anomaly_span_min'], section['anomaly_span_max']),
        contamination=section['contamination'],
        num_train=section['num_train'],
        num_val=section['num_val'],
        num_test=section['num_test'],
        seed=section['seed'],
        anomaly_mass_limit=section['anomaly_mass_limit'],
    )
    return generate(spec)
