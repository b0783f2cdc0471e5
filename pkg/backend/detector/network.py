"""
Multi-sphere detector network.

Behavior codes are embedded, encoded by a two-layer bidirectional GRU and
projected into the space where the M hypersphere centers live. Each behavior
gets two scores: a discriminative one from an attention + linear head and a
deviation one from its distance to the nearest center. The fused score is
their convex combination.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from ingest.records import PAD_CODE, SessionSequence
from rmsl.exceptions import VocabMismatch

logger = logging.getLogger(__name__)


def pack_codes(sequences: Sequence[SessionSequence], device=None):
    """Right-padded code matrix and lengths for a list of sequences"""
    if not sequences:
        raise ValueError("Cannot pack an empty batch")
    lengths = torch.tensor([s.length for s in sequences], dtype=torch.long)
    codes = torch.full((len(sequences), int(lengths.max())), PAD_CODE, dtype=torch.long)
    for row, sequence in enumerate(sequences):
        codes[row, :sequence.length] = torch.tensor(sequence.behaviors, dtype=torch.long)
    if device is not None:
        codes, lengths = codes.to(device), lengths.to(device)
    return codes, lengths


def length_mask(lengths, max_len):
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


@dataclass
class SphereScores:
    distances: torch.Tensor  # (..., M)
    nearest: torch.Tensor
    second: Optional[torch.Tensor]
    dist_nearest: torch.Tensor
    dist_second: Optional[torch.Tensor]


def sphere_scores(context, prototypes, need_second=True) -> SphereScores:
    """
    Euclidean distance of every behavior vector to every center.

    Nearest and second-nearest centers are chosen with lowest-index tie
    breaking.
    """
    num_centers = prototypes.size(0)
    if need_second and num_centers < 2:
        raise ValueError("Second-nearest center requested with a single center")
    flat = context.reshape(-1, context.size(-1))
    distances = torch.cdist(flat, prototypes, compute_mode='donot_use_mm_for_euclid_dist')
    distances = distances.reshape(*context.shape[:-1], num_centers)

    nearest = torch.argmin(distances, dim=-1, keepdim=True)
    dist_nearest = distances.gather(-1, nearest)
    second = dist_second = None
    if need_second:
        excluded = distances.detach().scatter(-1, nearest, float('inf'))
        second = torch.argmin(excluded, dim=-1, keepdim=True)
        dist_second = distances.gather(-1, second).squeeze(-1)
        second = second.squeeze(-1)
    return SphereScores(
        distances=distances,
        nearest=nearest.squeeze(-1),
        second=second,
        dist_nearest=dist_nearest.squeeze(-1),
        dist_second=dist_second,
    )


def squash_deviation(dist):
    """Map a distance in [0, inf) to [0, 1) with d / (1 + d)"""
    dist = torch.as_tensor(dist)
    if (dist < 0).any():
        raise ValueError("Distances must be non-negative")
    return dist / (1.0 + dist)


def combine_scores(score_cls, score_sph, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * score_cls + (1.0 - alpha) * score_sph


@dataclass
class ScoreBundle:
    """Per-behavior scores for a padded batch; `mask` marks real behaviors"""

    context: torch.Tensor
    mask: torch.Tensor
    score_cls: torch.Tensor
    dist_nearest: torch.Tensor
    score_sph: torch.Tensor
    fused: torch.Tensor
    nearest: torch.Tensor
    second: Optional[torch.Tensor]

    def per_sequence(self, field='fused'):
        """Unpadded numpy arrays, one per sequence"""
        values = getattr(self, field).detach().cpu()
        lengths = self.mask.sum(dim=1).cpu().tolist()
        return [values[row, :length].numpy() for row, length in enumerate(lengths)]


class SelfAttention(nn.Module):
    """Single-head scaled dot-product self-attention with a residual connection"""

    def __init__(self, dim):
        super().__init__()
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x, mask):
        scores = torch.matmul(self.query(x), self.key(x).transpose(1, 2)) * self.scale
        scores = scores.masked_fill(~mask[:, None, :], float('-inf'))
        weights = torch.softmax(scores, dim=-1)
        return x + torch.matmul(weights, self.value(x))


class RMSLNetwork(nn.Module):
    """Embedding, bidirectional GRU encoder, M centers and the attention classifier head"""

    HEAD_PREFIXES = ('attention.', 'classifier.')

    def __init__(
        self,
        vocab_size: int,
        embedding_dim: int = 128,
        hidden_size: int = 128,
        context_dim: int = 128,
        num_prototypes: int = 40,
        dropout: float = 0.1,
        alpha: float = 0.6,
    ):
        super().__init__()
        if num_prototypes < 1 or context_dim < 1:
            raise ValueError("Need at least one center and a positive context dimension")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
        self.vocab_size = vocab_size
        self.embedding_dim = embedding_dim
        self.hidden_size = hidden_size
        self.context_dim = context_dim
        self.num_prototypes = num_prototypes
        self.dropout_rate = dropout
        self.alpha = alpha

        self.embedding = nn.Embedding(vocab_size, embedding_dim, padding_idx=PAD_CODE)
        self.encoder = nn.GRU(embedding_dim, hidden_size, num_layers=2, batch_first=True, bidirectional=True)
        self.projection = nn.Linear(2 * hidden_size, context_dim)
        self.prototypes = nn.Parameter(torch.randn(num_prototypes, context_dim) / math.sqrt(context_dim))
        self.attention = SelfAttention(context_dim)
        self.classifier = nn.Linear(context_dim, 1)
        self.dropout = nn.Dropout(dropout)

        logger.debug(
            f"Detector built: vocab={vocab_size} d={context_dim} M={num_prototypes} "
            f"dropout={dropout} alpha={alpha}"
        )

    def hyperparameters(self):
        return {
            'vocab_size': self.vocab_size,
            'embedding_dim': self.embedding_dim,
            'hidden_size': self.hidden_size,
            'context_dim': self.context_dim,
            'num_prototypes': self.num_prototypes,
            'dropout': self.dropout_rate,
            'alpha': self.alpha,
        }

    def head_parameters(self):
        return [p for name, p in self.named_parameters() if name.startswith(self.HEAD_PREFIXES)]

    def body_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith(self.HEAD_PREFIXES)]

    def check_codes(self, codes):
        low, high = int(codes.min()), int(codes.max())
        if low < 0 or high >= self.vocab_size:
            raise VocabMismatch(
                "Behavior code outside the model vocabulary",
                {'vocab_size': self.vocab_size, 'min_code': low, 'max_code': high},
            )

    def encode(self, codes, lengths):
        """Contextual vectors (B, L, d); rows past each length are padding"""
        self.check_codes(codes)
        if (lengths < 1).any():
            raise ValueError("Sequences must hold at least one behavior")
        embedded = self.embedding(codes)
        packed = pack_padded_sequence(embedded, lengths.cpu(), batch_first=True, enforce_sorted=False)
        encoded, _ = self.encoder(packed)
        encoded, _ = pad_packed_sequence(encoded, batch_first=True, total_length=codes.size(1))
        return self.dropout(self.projection(encoded))

    def classify(self, context, mask):
        attended = self.dropout(self.attention(context, mask))
        return torch.sigmoid(self.classifier(attended).squeeze(-1))

    def forward(self, codes, lengths, alpha=None) -> ScoreBundle:
        alpha = self.alpha if alpha is None else alpha
        mask = length_mask(lengths, codes.size(1))
        context = self.encode(codes, lengths)
        spheres = sphere_scores(context, self.prototypes, need_second=self.num_prototypes >= 2)
        score_cls = self.classify(context, mask)
        score_sph = squash_deviation(spheres.dist_nearest)
        return ScoreBundle(
            context=context,
            mask=mask,
            score_cls=score_cls,
            dist_nearest=spheres.dist_nearest,
            score_sph=score_sph,
            fused=combine_scores(score_cls, score_sph, alpha),
            nearest=spheres.nearest,
            second=spheres.second,
        )


def fused_score(model: RMSLNetwork, sequences: Sequence[SessionSequence], alpha=None, device=None) -> ScoreBundle:
    """Inference-mode scores (dropout off) for a list of sequences"""
    was_training = model.training
    model.eval()
    try:
        codes, lengths = pack_codes(sequences, device=device)
        with torch.no_grad():
            bundle = model(codes, lengths, alpha=alpha)
    finally:
        model.train(was_training)
    if not torch.isfinite(bundle.fused[bundle.mask]).all():
        raise FloatingPointError("Non-finite fused scores")
    return bundle
