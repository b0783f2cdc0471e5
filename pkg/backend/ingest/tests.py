import random
import tempfile
from datetime import datetime, timedelta, timezone
from pathlib import Path

from django.test import SimpleTestCase

from rmsl.exceptions import DataError
from .records import BehaviorVocab, Corpus, RawEvent, RawSession, SessionSequence, UNK_DESCRIPTOR
from .services import build_vocab, parse_cert_logs, sessionize, temporal_split

BASE = datetime(2010, 1, 4, 8, 0, tzinfo=timezone.utc)


def event(user, minute, source, activity, malicious=None):
    return RawEvent(
        user_id=user,
        timestamp=BASE + timedelta(minutes=minute),
        source=source,
        activity=activity,
        is_malicious=malicious,
    )


def write_csv(directory, name, rows):
    path = Path(directory) / name
    path.write_text('\n'.join(rows) + '\n', encoding='utf-8')
    return path


class ParseCertLogsTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_rows_become_chronological_events(self):
        logon = write_csv(self.tmp.name, 'logon.csv', [
            'id,date,user,pc,activity',
            '{L2},01/04/2010 17:00:00,U1,PC-1,Logoff',
            '{L1},01/04/2010 08:00:00,U1,PC-1,Logon',
        ])
        http = write_csv(self.tmp.name, 'http.csv', [
            'id,date,user,pc,url',
            '{H1},01/04/2010 09:30:00,U1,PC-1,http://example.com',
        ])
        parsed = parse_cert_logs({'logon': logon, 'http': http})

        self.assertEqual(len(parsed.events), 3)
        self.assertEqual(
            [e.descriptor for e in parsed.events],
            ['logon:logon', 'http:visit', 'logon:logoff'],
        )
        self.assertEqual(parsed.report.rows_skipped, 0)
        self.assertIsNone(parsed.events[0].is_malicious)

    def test_empty_file_set(self):
        parsed = parse_cert_logs({})
        self.assertEqual(parsed.events, [])
        self.assertEqual(parsed.report.rows_total, 0)
        self.assertEqual(parsed.report.rows_skipped, 0)

    def test_missing_file_is_fatal(self):
        with self.assertRaises(DataError):
            parse_cert_logs({'logon': Path(self.tmp.name) / 'absent.csv'})

    def test_malformed_rows_are_counted_and_bounded(self):
        logon = write_csv(self.tmp.name, 'logon.csv', [
            'id,date,user,pc,activity',
            '{L1},01/04/2010 08:00:00,U1,PC-1,Logon',
            '{L2},not a date,U1,PC-1,Logoff',
            '{L3},01/04/2010 18:00:00,U1,PC-1,Logoff',
        ])
        with self.assertRaises(DataError):
            parse_cert_logs({'logon': logon})

        parsed = parse_cert_logs({'logon': logon}, max_skipped_fraction=0.5)
        self.assertEqual(parsed.report.rows_skipped, 1)
        self.assertEqual(len(parsed.events), 2)

    def test_answer_files_mark_malicious_events(self):
        device = write_csv(self.tmp.name, 'device.csv', [
            'id,date,user,pc,activity',
            '{D1},01/04/2010 10:00:00,U1,PC-1,Connect',
            '{D2},01/04/2010 10:05:00,U1,PC-1,Disconnect',
        ])
        answer = write_csv(self.tmp.name, 'answer.csv', [
            'device,{D1},01/04/2010 10:00:00,U1,PC-1,Connect',
        ])
        parsed = parse_cert_logs({'device': device}, answer_paths=[answer])
        self.assertEqual([e.is_malicious for e in parsed.events], [True, False])
        self.assertEqual(parsed.events[1].descriptor, 'device:disconnect')

    def test_multi_word_activities_keep_the_action(self):
        http = write_csv(self.tmp.name, 'http.csv', [
            'id,date,user,pc,url,activity',
            '{H1},01/04/2010 09:30:00,U1,PC-1,http://a.com,WWW Download',
        ])
        parsed = parse_cert_logs({'http': http})
        self.assertEqual(parsed.events[0].descriptor, 'http:download')


class SessionizeTests(SimpleTestCase):

    def stream(self, activities, user='U1', malicious_at=None):
        events = []
        for minute, descriptor in enumerate(activities):
            source, activity = descriptor.split(':')
            malicious = None if malicious_at is None else minute == malicious_at
            events.append(event(user, minute, source, activity, malicious))
        return events

    def test_logon_logoff_delimit_sessions(self):
        events = self.stream([
            'logon:logon', 'http:visit', 'file:open', 'logon:logoff',
            'logon:logon', 'email:send', 'logon:logoff',
        ])
        sessions = sessionize(events)
        self.assertEqual([len(s) for s in sessions], [4, 3])

    def test_weak_label_follows_malicious_behavior(self):
        events = self.stream([
            'logon:logon', 'http:visit', 'logon:logoff',
            'logon:logon', 'file:open', 'logon:logoff',
        ], malicious_at=4)
        first, second = sessionize(events)
        self.assertEqual(first.weak_label, 0)
        self.assertEqual(second.weak_label, 1)
        self.assertEqual(second.behavior_labels, (0, 1, 0))

    def test_user_without_logon_gets_one_fallback_session(self):
        events = self.stream(['http:visit', 'file:open', 'email:send'])
        with self.assertLogs('ingest.services', level='WARNING'):
            sessions = sessionize(events)
        self.assertEqual(len(sessions), 1)
        self.assertEqual(len(sessions[0]), 3)

    def test_orphans_attach_to_following_then_preceding_session(self):
        events = self.stream([
            'http:visit', 'logon:logon', 'file:open', 'logon:logoff',
            'email:send', 'logon:logon', 'logon:logoff', 'device:connect',
        ])
        first, second = sessionize(events)
        self.assertEqual(first.descriptors, ('http:visit', 'logon:logon', 'file:open', 'logon:logoff'))
        self.assertEqual(second.descriptors, ('email:send', 'logon:logon', 'logon:logoff', 'device:connect'))

    def test_session_starts_at_its_logon(self):
        events = self.stream([
            'http:visit', 'file:open', 'logon:logon', 'email:send', 'logon:logoff',
            'device:connect', 'logon:logon', 'logon:logoff',
        ])
        first, second = sessionize(events)
        self.assertEqual(first.start, BASE + timedelta(minutes=2))
        self.assertEqual(second.start, BASE + timedelta(minutes=6))
        self.assertEqual(first.descriptors[0], 'http:visit')

    def test_fallback_session_starts_at_first_event(self):
        with self.assertLogs('ingest.services', level='WARNING'):
            session, = sessionize(self.stream(['http:visit', 'file:open']))
        self.assertEqual(session.start, BASE)

    def test_partition_conserves_every_event(self):
        rng = random.Random(11)
        activities = ['http:visit', 'file:open', 'email:send', 'device:connect', 'logon:logon', 'logon:logoff']
        events = []
        for user in ('U1', 'U2', 'U3', 'U4'):
            for minute in range(2500):
                source, activity = rng.choice(activities).split(':')
                events.append(event(user, minute, source, activity))
        sessions = sessionize(events, max_len=10_000)
        self.assertEqual(sum(len(s) for s in sessions), 10_000)

    def test_truncation_keeps_most_recent_behaviors(self):
        events = self.stream(
            ['logon:logon', 'file:open', 'http:visit', 'email:send', 'logon:logoff'],
            malicious_at=1,
        )
        session, = sessionize(events, max_len=3)
        self.assertEqual(session.descriptors, ('http:visit', 'email:send', 'logon:logoff'))
        self.assertEqual(session.weak_label, 0)

    def test_delimiters_can_be_excluded(self):
        events = self.stream(['logon:logon', 'http:visit', 'logon:logoff'])
        session, = sessionize(events, include_delimiters=False)
        self.assertEqual(session.descriptors, ('http:visit',))


class BuildVocabTests(SimpleTestCase):

    def session(self, *descriptors):
        return RawSession(user_id='U1', start=BASE, descriptors=descriptors)

    def test_codes_follow_sorted_descriptors(self):
        vocab = build_vocab([self.session('b', 'a')])
        self.assertEqual(vocab.code_of, {'a': 1, 'b': 2})
        self.assertEqual(vocab.unk_code, 3)
        self.assertEqual(vocab.size, 4)

    def test_repeated_descriptors_share_a_code(self):
        vocab = build_vocab([self.session('a', 'a'), self.session('a')])
        self.assertEqual(len(vocab), 1)

    def test_unseen_descriptor_maps_to_unk(self):
        vocab = build_vocab([self.session('a', 'b')])
        self.assertEqual(vocab.encode('x'), vocab.unk_code)
        self.assertEqual(vocab.decode(vocab.unk_code), UNK_DESCRIPTOR)

    def test_empty_training_set_is_fatal(self):
        with self.assertRaises(DataError):
            build_vocab([])

    def test_vocab_file_round_trip(self):
        vocab = build_vocab([self.session('http:visit', 'logon:logon')])
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'vocab.tsv'
            vocab.save(path)
            self.assertEqual(path.read_text().splitlines()[0], 'http:visit\t1')
            self.assertEqual(BehaviorVocab.load(path), vocab)


def evenly_spaced_sessions(count, anomalous_every=7):
    sessions = []
    for i in range(count):
        label = int(i % anomalous_every == 3)
        sessions.append(RawSession(
            user_id=f"U{i % 5}",
            start=BASE + timedelta(minutes=i),
            descriptors=('logon:logon', f"http:site{i % 3}", 'logon:logoff'),
            behavior_labels=(0, label, 0),
            weak_label=label,
        ))
    return sessions


class TemporalSplitTests(SimpleTestCase):

    def test_fraction_cut_counts(self):
        corpus = temporal_split(evenly_spaced_sessions(100), cut_fraction=0.8)
        self.assertEqual((len(corpus.train), len(corpus.val), len(corpus.test)), (72, 8, 20))

    def test_full_fraction_is_fatal(self):
        with self.assertRaises(DataError):
            temporal_split(evenly_spaced_sessions(100), cut_fraction=1.0)

    def test_labels_stripped_outside_test(self):
        corpus = temporal_split(evenly_spaced_sessions(100), cut_fraction=0.8)
        self.assertTrue(all(s.behavior_labels is None for s in corpus.train + corpus.val))
        self.assertTrue(all(s.behavior_labels is not None for s in corpus.test))
        for sequence in corpus.test:
            self.assertEqual(sequence.weak_label, int(any(sequence.behavior_labels)))
        corpus.check_invariants()

    def test_training_period_precedes_test(self):
        corpus = temporal_split(evenly_spaced_sessions(100), cut_fraction=0.5)
        latest_train = max(s.start for s in corpus.train + corpus.val)
        self.assertLess(latest_train, min(s.start for s in corpus.test))

    def test_validation_is_stratified(self):
        sessions = evenly_spaced_sessions(100, anomalous_every=1000)
        flagged = sessions[10]
        sessions[10] = RawSession(
            user_id=flagged.user_id, start=flagged.start, descriptors=flagged.descriptors,
            behavior_labels=(0, 1, 0), weak_label=1,
        )
        corpus = temporal_split(sessions, cut_fraction=0.8)
        self.assertEqual(sum(s.weak_label for s in corpus.val), 1)
        self.assertEqual(len(corpus.val), 8)

    def test_cut_by_date(self):
        corpus = temporal_split(evenly_spaced_sessions(100), cut_date=BASE + timedelta(minutes=50))
        self.assertEqual(len(corpus.test), 50)

    def test_vocab_built_from_training_period_only(self):
        sessions = evenly_spaced_sessions(100)
        last = sessions[-1]
        sessions[-1] = RawSession(
            user_id=last.user_id, start=last.start, descriptors=('file:never-seen',),
            behavior_labels=(0,), weak_label=0,
        )
        corpus = temporal_split(sessions, cut_fraction=0.8)
        self.assertNotIn('file:never-seen', corpus.vocab.code_of)
        self.assertEqual(corpus.test[-1].behaviors, (corpus.vocab.unk_code,))


class CorpusSerializationTests(SimpleTestCase):

    def test_saving_is_byte_identical(self):
        corpus = temporal_split(evenly_spaced_sessions(60), cut_fraction=0.7)
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            corpus.save(first)
            temporal_split(evenly_spaced_sessions(60), cut_fraction=0.7).save(second)
            for name in ('train.jsonl', 'val.jsonl', 'test.jsonl', 'vocab.tsv', 'stats.json'):
                self.assertEqual((Path(first) / name).read_bytes(), (Path(second) / name).read_bytes())
            reloaded = Corpus.load(first)
        self.assertEqual(reloaded.test, corpus.test)
        self.assertEqual(reloaded.vocab, corpus.vocab)

    def test_weak_label_must_match_behavior_labels(self):
        with self.assertRaises(DataError):
            SessionSequence(user_id='U1', behaviors=(1, 2), weak_label=0, behavior_labels=(0, 1))

    def test_stats_report_imbalance(self):
        stats = temporal_split(evenly_spaced_sessions(100), cut_fraction=0.8).stats
        test = stats['test']
        self.assertEqual((test['normal_sequences'], test['abnormal_sequences']), (17, 3))
        self.assertEqual((test['behaviors'], test['abnormal_behaviors']), (60, 3))
        self.assertEqual(test['sequence_imbalance_ratio'], 5.7)
        self.assertEqual(test['behavior_imbalance_ratio'], 19.0)
        self.assertNotIn('abnormal_behaviors', stats['train'])
