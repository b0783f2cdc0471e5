"""
Behavior log records, vocabulary and the weakly labeled corpus.

A corpus on disk is a directory holding one line-delimited JSON file per
split (one session per line), the vocabulary as `descriptor<TAB>code`
lines, and a stats report.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from rmsl.exceptions import DataError

logger = logging.getLogger(__name__)

LOG_SOURCES = ('logon', 'device', 'email', 'file', 'http')

PAD_CODE = 0
UNK_DESCRIPTOR = '<unk>'

SPLITS = ('train', 'val', 'test')
VOCAB_FILE = 'vocab.tsv'
STATS_FILE = 'stats.json'


def dump_line(record):
    """Canonical JSON encoding; identical inputs give identical bytes"""
    return json.dumps(record, sort_keys=True, separators=(',', ':'), ensure_ascii=True)


@dataclass(frozen=True, slots=True)
class RawEvent:
    """One parsed log row"""

    user_id: str
    timestamp: datetime
    source: str
    activity: str
    is_malicious: Optional[bool] = None
    event_id: str = ''

    def __post_init__(self):
        if self.source not in LOG_SOURCES:
            raise DataError(f"Unknown log source '{self.source}'", {'user_id': self.user_id})

    @property
    def descriptor(self):
        return f"{self.source}:{self.activity}"

    @property
    def opens_session(self):
        return self.source == 'logon' and self.activity == 'logon'

    @property
    def closes_session(self):
        return self.source == 'logon' and self.activity == 'logoff'


@dataclass(frozen=True)
class RawSession:
    """A session before vocabulary encoding: behaviors are still descriptors"""

    user_id: str
    start: datetime
    descriptors: Tuple[str, ...]
    behavior_labels: Optional[Tuple[int, ...]] = None
    weak_label: int = 0

    def __len__(self):
        return len(self.descriptors)


@dataclass(frozen=True)
class SessionSequence:
    """One encoded user session: the MIL bag"""

    user_id: str
    behaviors: Tuple[int, ...]
    weak_label: int
    behavior_labels: Optional[Tuple[int, ...]] = None
    start: Optional[datetime] = None

    def __post_init__(self):
        if len(self.behaviors) < 1:
            raise DataError("Session sequences must contain at least one behavior", {'user_id': self.user_id})
        if self.weak_label not in (0, 1):
            raise DataError(f"Weak label must be 0 or 1, got {self.weak_label}")
        if self.behavior_labels is not None:
            if len(self.behavior_labels) != len(self.behaviors):
                raise DataError(
                    "Behavior labels must align with behaviors",
                    {'behaviors': len(self.behaviors), 'labels': len(self.behavior_labels)}
                )
            if int(any(self.behavior_labels)) != self.weak_label:
                raise DataError(
                    "Weak label disagrees with behavior labels",
                    {'user_id': self.user_id, 'weak_label': self.weak_label}
                )

    @property
    def length(self):
        return len(self.behaviors)

    @property
    def is_anomalous(self):
        return self.weak_label == 1

    def without_behavior_labels(self):
        return replace(self, behavior_labels=None)

    def to_record(self):
        record = {
            'user_id': self.user_id,
            'Y': self.weak_label,
            'codes': list(self.behaviors),
        }
        if self.behavior_labels is not None:
            record['labels'] = list(self.behavior_labels)
        if self.start is not None:
            record['start'] = self.start.isoformat()
        return record

    @classmethod
    def from_record(cls, record):
        labels = record.get('labels')
        start = record.get('start')
        return cls(
            user_id=record['user_id'],
            behaviors=tuple(int(code) for code in record['codes']),
            weak_label=int(record['Y']),
            behavior_labels=tuple(int(y) for y in labels) if labels is not None else None,
            start=datetime.fromisoformat(start) if start else None,
        )


class BehaviorVocab:
    """
    Bijection between behavior descriptors and integer codes.

    Codes are assigned to the sorted descriptors starting at 1; 0 is the
    padding code and the last code is reserved for descriptors never seen
    during the training period.
    """

    pad_code = PAD_CODE

    def __init__(self, descriptors: Iterable[str]):
        ordered = sorted(set(descriptors) - {UNK_DESCRIPTOR})
        if not ordered:
            raise DataError("Cannot build a vocabulary from an empty training set")
        self.code_of: Dict[str, int] = {descriptor: code for code, descriptor in enumerate(ordered, start=1)}
        self.descriptor_of: Dict[int, str] = {code: descriptor for descriptor, code in self.code_of.items()}
        self.unk_code = len(ordered) + 1

    def __len__(self):
        return len(self.code_of)

    def __eq__(self, other):
        return isinstance(other, BehaviorVocab) and self.code_of == other.code_of

    def __repr__(self):
        return f"BehaviorVocab({len(self)} descriptors, unk={self.unk_code})"

    @property
    def size(self):
        """Number of embedding rows: padding, every descriptor and UNK"""
        return self.unk_code + 1

    def encode(self, descriptor):
        return self.code_of.get(descriptor, self.unk_code)

    def encode_many(self, descriptors):
        return tuple(self.encode(descriptor) for descriptor in descriptors)

    def decode(self, code):
        if code == self.unk_code:
            return UNK_DESCRIPTOR
        return self.descriptor_of[code]

    def save(self, path):
        lines = [f"{descriptor}\t{code}" for descriptor, code in self.code_of.items()]
        lines.append(f"{UNK_DESCRIPTOR}\t{self.unk_code}")
        Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')

    @classmethod
    def load(cls, path):
        descriptors = []
        for line in Path(path).read_text(encoding='utf-8').splitlines():
            if not line.strip():
                continue
            descriptor, _, code = line.rpartition('\t')
            if descriptor != UNK_DESCRIPTOR:
                descriptors.append(descriptor)
        vocab = cls(descriptors)
        logger.debug(f"Loaded {vocab!r} from {path}")
        return vocab


def split_stats(sequences: List[SessionSequence]):
    """Sequence and behavior counts per class for one split"""
    normal = [s for s in sequences if not s.is_anomalous]
    abnormal = [s for s in sequences if s.is_anomalous]
    stats = {
        'normal_sequences': len(normal),
        'abnormal_sequences': len(abnormal),
        'behaviors': sum(s.length for s in sequences),
    }
    if sequences and all(s.behavior_labels is not None for s in sequences):
        abnormal_behaviors = sum(sum(s.behavior_labels) for s in sequences)
        stats['abnormal_behaviors'] = abnormal_behaviors
        stats['normal_behaviors'] = stats['behaviors'] - abnormal_behaviors
        if abnormal_behaviors:
            stats['behavior_imbalance_ratio'] = round(stats['normal_behaviors'] / abnormal_behaviors, 1)
    if abnormal:
        stats['sequence_imbalance_ratio'] = round(len(normal) / len(abnormal), 1)
    return stats


@dataclass
class Corpus:
    """Temporally split, weakly labeled corpus"""

    train: List[SessionSequence]
    val: List[SessionSequence]
    test: List[SessionSequence]
    vocab: BehaviorVocab
    source: str = 'unknown'
    extra: dict = field(default_factory=dict)

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"Unknown split '{name}'")
        return getattr(self, name)

    @property
    def stats(self):
        stats = {name: split_stats(self.split(name)) for name in SPLITS}
        stats['vocab_size'] = len(self.vocab)
        stats['source'] = self.source
        return stats

    def normal_train(self):
        return [s for s in self.train if not s.is_anomalous]

    def anomalous_train(self):
        return [s for s in self.train if s.is_anomalous]

    def check_invariants(self):
        """Test sessions carry behavior labels; the training period precedes the test period"""
        missing = [s for s in self.test if s.behavior_labels is None]
        if missing:
            raise DataError("Every test sequence needs behavior-level labels", {'missing': len(missing)})
        period = [s.start for s in self.train + self.val if s.start is not None]
        tested = [s.start for s in self.test if s.start is not None]
        if period and tested and max(period) > min(tested):
            raise DataError("Training sessions must precede test sessions")

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in SPLITS:
            with open(directory / f"{name}.jsonl", 'w', encoding='utf-8') as handle:
                for sequence in self.split(name):
                    handle.write(dump_line(sequence.to_record()) + '\n')
        self.vocab.save(directory / VOCAB_FILE)
        report = dict(self.stats, **self.extra)
        (directory / STATS_FILE).write_text(json.dumps(report, indent=2, sort_keys=True) + '\n', encoding='utf-8')
        logger.info(f"Corpus written to {directory}")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        if not (directory / VOCAB_FILE).exists():
            raise DataError(f"No corpus found at {directory}", {'missing': VOCAB_FILE})
        splits = {}
        for name in SPLITS:
            path = directory / f"{name}.jsonl"
            if not path.exists():
                raise DataError(f"Corpus split file missing: {path}")
            with open(path, encoding='utf-8') as handle:
                splits[name] = [SessionSequence.from_record(json.loads(line)) for line in handle if line.strip()]
        source = 'unknown'
        stats_path = directory / STATS_FILE
        if stats_path.exists():
            source = json.loads(stats_path.read_text(encoding='utf-8')).get('source', source)
        corpus = cls(vocab=BehaviorVocab.load(directory / VOCAB_FILE), source=source, **splits)
        logger.info(
            f"Loaded corpus from {directory}: "
            f"{len(corpus.train)} train / {len(corpus.val)} val / {len(corpus.test)} test"
        )
        return corpus
