"""
CERT log ingestion: parsing, sessionization, vocabulary and temporal split
"""
import csv
import math
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional

import pandas as pd

from rmsl.exceptions import DataError
from .records import (
    LOG_SOURCES, BehaviorVocab, Corpus, RawEvent, RawSession, SessionSequence,
)

logger = logging.getLogger(__name__)

CERT_DATE_FORMAT = '%m/%d/%Y %H:%M:%S'

# Action used when a CERT release has no `activity` column for the source
DEFAULT_ACTIONS = {
    'logon': 'logon',
    'device': 'connect',
    'email': 'send',
    'file': 'open',
    'http': 'visit',
}

CERT_FILE_NAMES = {source: f"{source}.csv" for source in LOG_SOURCES}

MAX_SKIPPED_FRACTION = 0.01
DEFAULT_MAX_LEN = 1024


@dataclass
class ParseReport:
    """Row accounting for one parse_cert_logs call"""

    rows_total: int = 0
    rows_skipped: int = 0
    per_source: Dict[str, Dict[str, int]] = field(default_factory=dict)

    @property
    def skipped_fraction(self):
        return self.rows_skipped / self.rows_total if self.rows_total else 0.0

    def as_dict(self):
        return {
            'rows_total': self.rows_total,
            'rows_skipped': self.rows_skipped,
            'skipped_fraction': round(self.skipped_fraction, 6),
            'per_source': self.per_source,
        }


@dataclass
class ParsedLogs:
    events: List[RawEvent]
    report: ParseReport


def as_utc(value):
    """Datetime-like (or ISO string) as an aware UTC datetime"""
    stamp = pd.Timestamp(value)
    stamp = stamp.tz_localize('UTC') if stamp.tzinfo is None else stamp.tz_convert('UTC')
    return stamp.to_pydatetime()


def load_answer_ids(answer_paths: Iterable) -> set:
    """
    Collect malicious event ids from insider answer files.

    Answer rows are raw log lines prefixed with their source
    (`logon,{id},date,user,...`) and have ragged widths, so they are read
    row by row rather than as a frame.
    """
    malicious = set()
    for path in answer_paths:
        path = Path(path)
        if not path.exists():
            raise DataError(f"Answer file not found: {path}")
        with open(path, newline='', encoding='utf-8', errors='replace') as handle:
            for row in csv.reader(handle):
                if len(row) >= 2 and row[0].strip() in LOG_SOURCES:
                    malicious.add(row[1].strip())
    logger.info(f"Loaded {len(malicious)} malicious event ids from answer files")
    return malicious


def normalise_actions(source, frame):
    """`source:action` granularity: last word of the activity column, lower-cased"""
    if 'activity' not in frame.columns:
        return pd.Series(DEFAULT_ACTIONS[source], index=frame.index)
    actions = frame['activity'].str.strip().str.lower().str.split().str[-1]
    return actions.fillna(DEFAULT_ACTIONS[source]).replace('', DEFAULT_ACTIONS[source])


def _parse_source(source, path, answer_ids, chunksize):
    wanted = {'id', 'date', 'user', 'activity'}
    events = []
    total = skipped = 0
    try:
        chunks = pd.read_csv(
            path,
            dtype=str,
            keep_default_na=False,
            usecols=lambda column: column.strip().lower() in wanted,
            chunksize=chunksize,
        )
        for chunk in chunks:
            chunk.columns = [column.strip().lower() for column in chunk.columns]
            if 'date' not in chunk.columns or 'user' not in chunk.columns:
                raise DataError(f"{path} lacks the date/user columns", {'columns': list(chunk.columns)})
            total += len(chunk)
            timestamps = pd.to_datetime(chunk['date'].str.strip(), format=CERT_DATE_FORMAT, errors='coerce', utc=True)
            users = chunk['user'].str.strip()
            valid = timestamps.notna() & (users != '')
            skipped += int((~valid).sum())
            actions = normalise_actions(source, chunk)
            ids = chunk['id'].str.strip() if 'id' in chunk.columns else pd.Series('', index=chunk.index)
            for event_id, user, stamp, action in zip(ids[valid], users[valid], timestamps[valid], actions[valid]):
                events.append(RawEvent(
                    user_id=user,
                    timestamp=stamp.to_pydatetime(),
                    source=source,
                    activity=action,
                    is_malicious=(event_id in answer_ids) if answer_ids is not None else None,
                    event_id=event_id,
                ))
    except pd.errors.EmptyDataError:
        logger.warning(f"{path} is empty")
    return events, total, skipped


def parse_cert_logs(paths: Mapping[str, object], answer_paths: Iterable = (),
                    chunksize=500_000, max_skipped_fraction=MAX_SKIPPED_FRACTION) -> ParsedLogs:
    """
    Parse per-source CERT CSV files into per-user chronological events.

    Rows with an unparseable timestamp or an empty user are skipped and
    counted; more than `max_skipped_fraction` skipped rows is fatal.
    """
    unknown = set(paths) - set(LOG_SOURCES)
    if unknown:
        raise DataError("Unknown log sources in path map", {'sources': sorted(unknown)})
    for source, path in paths.items():
        if not Path(path).exists():
            raise DataError(f"Log file not found: {path}", {'source': source})

    answer_paths = list(answer_paths)
    answer_ids = load_answer_ids(answer_paths) if answer_paths else None

    report = ParseReport()
    events: List[RawEvent] = []
    # fixed source order keeps same-timestamp ties deterministic
    for source in LOG_SOURCES:
        if source not in paths:
            continue
        parsed, total, skipped = _parse_source(source, paths[source], answer_ids, chunksize)
        events.extend(parsed)
        report.rows_total += total
        report.rows_skipped += skipped
        report.per_source[source] = {'rows': total, 'skipped': skipped}
        if skipped:
            logger.warning(f"Skipped {skipped} malformed rows in {paths[source]}")
        logger.info(f"Parsed {total - skipped} {source} events")

    if report.skipped_fraction > max_skipped_fraction:
        raise DataError("Too many malformed rows", report.as_dict())

    events.sort(key=lambda event: (event.user_id, event.timestamp))
    return ParsedLogs(events=events, report=report)


def _cut_user_stream(user_events: List[RawEvent]):
    """
    Cut one user's chronological stream at logon/logoff delimiters.

    Events outside any logon..logoff pair join the nearest following
    session, or the last session when nothing follows.
    """
    sessions = []
    current: Optional[list] = None
    pending = []
    for event in user_events:
        if event.opens_session:
            if current is not None:
                sessions.append(current)
            current = pending + [event]
            pending = []
        elif current is None:
            pending.append(event)
        else:
            current.append(event)
            if event.closes_session:
                sessions.append(current)
                current = None
    if current is not None:
        sessions.append(current)
    if pending:
        sessions[-1].extend(pending)
    return sessions


def _to_raw_session(user_id, chunk, max_len, include_delimiters):
    kept = [e for e in chunk if include_delimiters or not (e.opens_session or e.closes_session)]
    if not kept:
        return None
    labelled = any(e.is_malicious is not None for e in kept)
    labels = tuple(int(bool(e.is_malicious)) for e in kept) if labelled else None
    descriptors = tuple(e.descriptor for e in kept)
    if len(descriptors) > max_len:
        # keep the most recent behaviors
        descriptors = descriptors[-max_len:]
        labels = labels[-max_len:] if labels is not None else None
    return RawSession(
        user_id=user_id,
        start=next((e.timestamp for e in chunk if e.opens_session), chunk[0].timestamp),
        descriptors=descriptors,
        behavior_labels=labels,
        weak_label=int(any(labels)) if labels is not None else 0,
    )


def sessionize(events: Iterable[RawEvent], max_len=DEFAULT_MAX_LEN, include_delimiters=True) -> List[RawSession]:
    """Split per-user behavior streams into logon..logoff sessions"""
    if max_len < 1:
        raise ValueError("max_len must be positive")
    streams: Dict[str, List[RawEvent]] = OrderedDict()
    for event in events:
        streams.setdefault(event.user_id, []).append(event)

    sessions = []
    for user_id, user_events in streams.items():
        if not any(e.opens_session for e in user_events):
            logger.warning(f"User {user_id} has no logon events; using one fallback session")
            chunks = [user_events]
        else:
            chunks = _cut_user_stream(user_events)
        for chunk in chunks:
            session = _to_raw_session(user_id, chunk, max_len, include_delimiters)
            if session is not None:
                sessions.append(session)

    sessions.sort(key=_chronological)
    logger.info(f"Sessionized {len(streams)} users into {len(sessions)} sessions")
    return sessions


def build_vocab(train_sessions: Iterable[RawSession]) -> BehaviorVocab:
    """Deterministic vocabulary over the training period's descriptors"""
    descriptors = set()
    for session in train_sessions:
        descriptors.update(session.descriptors)
    return BehaviorVocab(descriptors)


def _encode(session: RawSession, vocab: BehaviorVocab, keep_labels: bool):
    return SessionSequence(
        user_id=session.user_id,
        behaviors=vocab.encode_many(session.descriptors),
        weak_label=session.weak_label,
        behavior_labels=session.behavior_labels if keep_labels else None,
        start=session.start,
    )


def _chronological(session):
    return session.start, session.user_id


def _stratify_validation(train_part, val_part):
    """Make sure validation holds at least one anomalous sequence when the period has any"""
    if any(s.weak_label for s in val_part):
        return train_part, val_part
    anomalous = [i for i, s in enumerate(train_part) if s.weak_label]
    normal = [i for i, s in enumerate(val_part) if not s.weak_label]
    if not anomalous or not normal:
        logger.warning("Validation split has no anomalous sequence")
        return train_part, val_part
    moved_in, moved_out = anomalous[-1], normal[0]
    train_part, val_part = list(train_part), list(val_part)
    train_part[moved_in], val_part[moved_out] = val_part[moved_out], train_part[moved_in]
    return sorted(train_part, key=_chronological), sorted(val_part, key=_chronological)


def temporal_split(sessions: Iterable[RawSession], cut_fraction: Optional[float] = None,
                   cut_date=None, val_fraction=0.1) -> Corpus:
    """
    Split sessions by start time into train/val (training period) and test.

    The cut is either a fraction of the covered time span or an explicit
    date. Validation is the trailing `val_fraction` of the training period.
    """
    ordered = sorted(sessions, key=_chronological)
    if not ordered:
        raise DataError("No sessions to split")
    if (cut_fraction is None) == (cut_date is None):
        raise DataError("Exactly one of cut_fraction and cut_date must be given")
    if cut_date is None:
        if not 0.0 < cut_fraction < 1.0:
            raise DataError(
                "cut_fraction must lie strictly between 0 and 1",
                {'cut_fraction': cut_fraction, 'consequence': 'empty test or training split'}
            )
        first, last = ordered[0].start, ordered[-1].start
        cut = first + (last - first) * cut_fraction
    else:
        cut = as_utc(cut_date)

    period = [s for s in ordered if s.start < cut]
    test = [s for s in ordered if s.start >= cut]
    if not period or not test:
        raise DataError("Temporal split leaves a side empty", {'train_period': len(period), 'test': len(test)})

    n_val = int(math.floor(val_fraction * len(period) + 1e-9))
    if val_fraction > 0 and n_val == 0:
        n_val = 1
    if n_val >= len(period):
        raise DataError("Validation slice would consume the whole training period", {'n_val': n_val})
    train_part, val_part = period[:len(period) - n_val], period[len(period) - n_val:]
    train_part, val_part = _stratify_validation(train_part, val_part)

    unlabelled = sum(1 for s in test if s.behavior_labels is None)
    if unlabelled:
        raise DataError("Test sessions need behavior-level ground truth", {'unlabelled': unlabelled})

    vocab = build_vocab(train_part + val_part)
    corpus = Corpus(
        train=[_encode(s, vocab, keep_labels=False) for s in train_part],
        val=[_encode(s, vocab, keep_labels=False) for s in val_part],
        test=[_encode(s, vocab, keep_labels=True) for s in test],
        vocab=vocab,
    )
    logger.info(f"Temporal split at {cut.isoformat()}: {len(corpus.train)}/{len(corpus.val)}/{len(corpus.test)}")
    return corpus


class CertIngestionService:
    """Builds a corpus directory from a CERT release following the [ingest] config section"""

    def __init__(self, ingest_config: Mapping):
        self.config = ingest_config

    def source_paths(self):
        data_dir = Path(self.config['data_dir'])
        return {
            source: data_dir / CERT_FILE_NAMES[source]
            for source in self.config.get('sources', LOG_SOURCES)
        }

    def answer_paths(self):
        pattern = self.config.get('answer_glob')
        if not pattern:
            return []
        answers_dir = Path(self.config.get('answers_dir') or self.config['data_dir'])
        return sorted(p for p in answers_dir.glob(pattern) if p.name != 'insiders.csv')

    def build_corpus(self) -> Corpus:
        parsed = parse_cert_logs(self.source_paths(), self.answer_paths(), chunksize=self.config.get('chunksize', 500_000))
        sessions = sessionize(
            parsed.events,
            max_len=self.config.get('max_len', DEFAULT_MAX_LEN),
            include_delimiters=self.config.get('include_delimiters', True),
        )
        corpus = temporal_split(
            sessions,
            cut_fraction=self.config.get('cut_fraction'),
            cut_date=self.config.get('cut_date'),
            val_fraction=self.config.get('val_fraction', 0.1),
        )
        corpus.source = 'cert'
        corpus.extra['parse_report'] = parsed.report.as_dict()
        return corpus

    def run(self, output_dir) -> Corpus:
        corpus = self.build_corpus()
        corpus.save(output_dir)
        return corpus
