"""
Batching for the three training stages.

Stage 1 walks the normal sequences; stage 2 pairs every chunk of normal
sequences with anomalous sequences drawn with replacement so that each batch
holds exactly `batch_normal` + `batch_anomalous` sequences; stage 3 walks the
anomalous sequences.
"""
import math
from typing import List, Sequence

import torch
from django.conf import settings
from torch.utils.data import DataLoader, Dataset, Sampler

from ingest.records import SessionSequence
from detector.network import pack_codes


class SequenceDataset(Dataset):

    def __init__(self, sequences: Sequence[SessionSequence]):
        self.sequences = list(sequences)

    def __len__(self):
        return len(self.sequences)

    def __getitem__(self, index):
        return self.sequences[index]


def collate_sequences(batch: List[SessionSequence]):
    codes, lengths = pack_codes(batch)
    labels = torch.tensor([s.weak_label for s in batch], dtype=torch.long)
    return {'codes': codes, 'lengths': lengths, 'labels': labels}


class BalancedBatchSampler(Sampler):
    """
    Index batches over a dataset laid out as [normal..., anomalous...].

    Every normal index is visited once per epoch in shuffled chunks; short
    chunks are topped up by resampling normal indices. Anomalous indices are
    always drawn with replacement.
    """

    def __init__(self, num_normal, num_anomalous, batch_normal=64, batch_anomalous=64, generator=None):
        if num_normal < 1 or num_anomalous < 1:
            raise ValueError("Balanced batches need both classes")
        self.num_normal = num_normal
        self.num_anomalous = num_anomalous
        self.batch_normal = batch_normal
        self.batch_anomalous = batch_anomalous
        self.generator = generator

    def __len__(self):
        return math.ceil(self.num_normal / self.batch_normal)

    def __iter__(self):
        order = torch.randperm(self.num_normal, generator=self.generator)
        for start in range(0, self.num_normal, self.batch_normal):
            normal = order[start:start + self.batch_normal]
            missing = self.batch_normal - normal.numel()
            if missing:
                normal = torch.cat([normal, torch.randint(self.num_normal, (missing,), generator=self.generator)])
            anomalous = self.num_normal + torch.randint(
                self.num_anomalous, (self.batch_anomalous,), generator=self.generator
            )
            yield torch.cat([normal, anomalous]).tolist()


def _loader_options():
    workers = settings.RMSL_NUM_WORKERS
    options = {'num_workers': workers, 'collate_fn': collate_sequences}
    if workers > 0:
        options['prefetch_factor'] = settings.RMSL_PREFETCH_FACTOR
    return options


def sequential_loader(sequences, batch_size, shuffle=False, generator=None):
    return DataLoader(
        SequenceDataset(sequences), batch_size=batch_size, shuffle=shuffle, generator=generator, **_loader_options()
    )


def balanced_loader(normal, anomalous, batch_normal, batch_anomalous, generator=None):
    sampler = BalancedBatchSampler(len(normal), len(anomalous), batch_normal, batch_anomalous, generator=generator)
    return DataLoader(SequenceDataset(list(normal) + list(anomalous)), batch_sampler=sampler, **_loader_options())
