"""
Scoring a trained detector on a corpus and writing the evaluation artifacts.
"""
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from detector.losses import TopKRule, bag_scores
from detector.network import RMSLNetwork, fused_score
from ingest.records import Corpus, SessionSequence
from rmsl.exceptions import DataError
from .metrics import DEFAULT_BUDGETS, MetricsReport, auc, behavior_metrics, roc_points, select_threshold

logger = logging.getLogger(__name__)

REPORT_FILE = 'report.json'
ROC_FILE = 'roc.tsv'
SCORES_FILE = 'scores.tsv'


@dataclass
class SplitScores:
    """Inference-mode scores for one split, in corpus order"""

    sequences: List[SessionSequence]
    fused: List[np.ndarray]
    score_cls: List[np.ndarray]
    score_sph: List[np.ndarray]
    dist_nearest: List[np.ndarray]
    bag: np.ndarray

    @property
    def weak_labels(self):
        return np.array([s.weak_label for s in self.sequences], dtype=np.int64)

    def behavior_labels(self):
        missing = [i for i, s in enumerate(self.sequences) if s.behavior_labels is None]
        if missing:
            raise DataError("Behavior-level labels missing", {'sequences': len(missing)})
        return np.concatenate([np.asarray(s.behavior_labels, dtype=np.int64) for s in self.sequences])

    def flat(self, field='fused'):
        return np.concatenate(getattr(self, field))


def score_sequences(model: RMSLNetwork, sequences: Sequence[SessionSequence], rule=TopKRule(),
                    batch_size=256, device=None, alpha=None) -> SplitScores:
    if not sequences:
        raise DataError("Nothing to score")
    parts = {'fused': [], 'score_cls': [], 'score_sph': [], 'dist_nearest': []}
    bags = []
    for start in range(0, len(sequences), batch_size):
        bundle = fused_score(model, sequences[start:start + batch_size], alpha=alpha, device=device)
        for name, values in parts.items():
            values.extend(bundle.per_sequence(name))
        bags.append(bag_scores(bundle.fused, bundle.mask, rule).cpu().numpy())
    return SplitScores(sequences=list(sequences), bag=np.concatenate(bags), **parts)


def sequence_auc(scores: SplitScores) -> Optional[float]:
    labels = scores.weak_labels
    if labels.min() == labels.max():
        return None
    return auc(scores.bag, labels)


def write_roc_table(path, scores, labels):
    thresholds, fpr, tpr = roc_points(scores, labels)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, delimiter='\t', lineterminator='\n')
        writer.writerow(['threshold', 'fpr', 'tpr'])
        for row in zip(thresholds, fpr, tpr):
            writer.writerow([repr(float(value)) for value in row])
    return path


def read_roc_table(path):
    with open(path, encoding='utf-8') as handle:
        rows = list(csv.DictReader(handle, delimiter='\t'))
    return np.array([float(r['fpr']) for r in rows]), np.array([float(r['tpr']) for r in rows])


def write_score_dump(path, scores: SplitScores):
    """One line per test behavior with its three scores"""
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, delimiter='\t', lineterminator='\n')
        writer.writerow(['sequence', 'user_id', 'position', 'code', 'label', 'score_cls', 'dist_nearest', 'score_sph', 'fused'])
        for index, sequence in enumerate(scores.sequences):
            labels = sequence.behavior_labels or (None,) * sequence.length
            for position, code in enumerate(sequence.behaviors):
                writer.writerow([
                    index, sequence.user_id, position, code, '' if labels[position] is None else labels[position],
                    repr(float(scores.score_cls[index][position])),
                    repr(float(scores.dist_nearest[index][position])),
                    repr(float(scores.score_sph[index][position])),
                    repr(float(scores.fused[index][position])),
                ])
    return path


def read_score_dump(path):
    """(fused scores, labels) of a score dump"""
    with open(path, encoding='utf-8') as handle:
        rows = list(csv.DictReader(handle, delimiter='\t'))
    return np.array([float(r['fused']) for r in rows]), np.array([int(r['label'] or 0) for r in rows])


class EvaluationService:
    """Threshold selection on validation bags, behavior-level metrics on test"""

    def __init__(self, model: RMSLNetwork, corpus: Corpus, rule=TopKRule(), fallback_threshold=0.5,
                 budgets=DEFAULT_BUDGETS, batch_size=256, device=None):
        self.model = model
        self.corpus = corpus
        self.rule = rule
        self.fallback_threshold = fallback_threshold
        self.budgets = budgets
        self.batch_size = batch_size
        self.device = device

    def score(self, sequences):
        return score_sequences(self.model, sequences, self.rule, self.batch_size, self.device)

    def choose_threshold(self):
        if not self.corpus.val:
            logger.warning(f"Empty validation split; using threshold {self.fallback_threshold}")
            return self.fallback_threshold, 'fallback'
        val = self.score(self.corpus.val)
        return select_threshold(val.bag, val.weak_labels, fallback=self.fallback_threshold)

    def evaluate(self, output_dir=None) -> MetricsReport:
        self.corpus.check_invariants()
        threshold, source = self.choose_threshold()
        test = self.score(self.corpus.test)
        fused, labels = test.flat('fused'), test.behavior_labels()
        if labels.min() == labels.max():
            raise DataError("Test split needs both normal and anomalous behaviors")
        distances = test.flat('dist_nearest')
        report = behavior_metrics(
            fused, labels, threshold, source, budgets=self.budgets,
            sequence_auc=sequence_auc(test),
            mean_distance_normal=float(distances[labels == 0].mean()),
            mean_distance_anomalous=float(distances[labels == 1].mean()),
            sequences=len(test.sequences),
        )
        logger.info(
            f"Evaluation: AUC={report.auc:.4f} DR={report.dr:.4f} FPR={report.fpr:.4f} "
            f"threshold={threshold:.4f} ({source})"
        )
        if output_dir is not None:
            self.write(Path(output_dir), report, test, fused, labels)
        return report

    def write(self, output_dir: Path, report, test, fused, labels):
        output_dir.mkdir(parents=True, exist_ok=True)
        write_score_dump(output_dir / SCORES_FILE, test)
        report.score_dump = SCORES_FILE
        write_roc_table(output_dir / ROC_FILE, fused, labels)
        save_report(report, output_dir / REPORT_FILE)
        logger.info(f"Evaluation artifacts written to {output_dir}")


def save_report(report: MetricsReport, path):
    Path(path).write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def load_report(path) -> MetricsReport:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Report not found: {path}")
    return MetricsReport.from_dict(json.loads(path.read_text(encoding='utf-8')))
