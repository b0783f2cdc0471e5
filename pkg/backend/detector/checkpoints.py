import logging
from pathlib import Path

import torch

from rmsl.exceptions import DataError, VocabMismatch
from .network import RMSLNetwork

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


def save_checkpoint(path, model: RMSLNetwork, stage, seed, **extra):
    """Parameters keyed by their module names plus a manifest describing the model"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(model.hyperparameters(), stage=str(stage), seed=int(seed), format=CHECKPOINT_FORMAT, **extra)
    state = {name: tensor.detach().cpu().clone() for name, tensor in model.state_dict().items()}
    torch.save({'manifest': manifest, 'state_dict': state}, path)
    logger.info(f"Checkpoint for stage {stage} written to {path}")
    return path


def read_manifest(path):
    return _load_archive(path)['manifest']


def _load_archive(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    archive = torch.load(path, map_location='cpu', weights_only=True)
    if 'manifest' not in archive or 'state_dict' not in archive:
        raise DataError(f"Not a detector checkpoint: {path}")
    return archive


def load_checkpoint(path, device=None, vocab_size=None):
    """Rebuild the network from a checkpoint; returns (model, manifest)"""
    archive = _load_archive(path)
    manifest = archive['manifest']
    if vocab_size is not None and vocab_size != manifest['vocab_size']:
        raise VocabMismatch(
            "Corpus vocabulary does not match the checkpoint",
            {'corpus_vocab_size': vocab_size, 'checkpoint_vocab_size': manifest['vocab_size']},
        )
    model = RMSLNetwork(
        vocab_size=manifest['vocab_size'],
        embedding_dim=manifest['embedding_dim'],
        hidden_size=manifest['hidden_size'],
        context_dim=manifest['context_dim'],
        num_prototypes=manifest['num_prototypes'],
        dropout=manifest['dropout'],
        alpha=manifest['alpha'],
    )
    model.load_state_dict(archive['state_dict'])
    if device is not None:
        model.to(device)
    model.eval()
    return model, manifest
