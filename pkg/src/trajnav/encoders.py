"""Orientation / panorama encoding, the edge-feature extractor, the instruction
encoder and the masked-token prediction head."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .env import VocabError
from .graph import ContractError
from .nn import DecoderLayer, EncoderLayer, LayerNorm, Linear, Module, sinusoidal_positions, trunc_normal
from .tensor import ShapeError, Tensor


def orientation_raw(headings, elevations):
    """[sin h, cos h, sin e, cos e] rows for arrays of relative angles."""
    h = np.asarray(headings, dtype=np.float64)
    e = np.asarray(elevations, dtype=np.float64)
    return np.stack([np.sin(h), np.cos(h), np.sin(e), np.cos(e)], axis=-1)


def _run_decoder(layers, x, memory, mask=None):
    for layer in layers:
        x, _ = layer(x, mask, layer.memory_kv(memory))
    return x


class OrientationPanoramaEncoder(Module):
    """Edge features: orientation queries cross-attending panorama view tokens."""

    def __init__(self, d, heads, raw_dim, layers, rng):
        self.raw_dim = raw_dim
        self.w_orient = Linear(4, d, rng, bias=False)
        self.w_pano = Linear(raw_dim + 4, d, rng, bias=False)
        self.layers = [DecoderLayer(d, heads, rng) for _ in range(layers)]
        self.ln_f = LayerNorm(d)

    def encode_orientation(self, orients):
        orients = np.atleast_2d(orients)
        raw = orientation_raw(orients[:, 0], orients[:, 1]).astype(self.w_orient.weight.dtype)
        return self.w_orient(Tensor(raw))

    def encode_panorama(self, views, view_orients):
        views = np.asarray(views)
        if views.ndim != 2 or views.shape[1] != self.raw_dim:
            raise ShapeError(f"view features {views.shape} do not match raw dim {self.raw_dim}")
        raw = np.concatenate([views, orientation_raw(view_orients[:, 0], view_orients[:, 1])], axis=1)
        return self.w_pano(Tensor(raw.astype(self.w_pano.weight.dtype)))

    def __call__(self, query_orients, views, view_orients):
        if len(query_orients) == 0:
            raise ContractError("need at least one orientation query")
        x = self.encode_orientation(query_orients)
        pano = self.encode_panorama(views, view_orients)
        return self.ln_f(_run_decoder(self.layers, x, pano))

    def extract(self, obs):
        q = np.array([(nb.heading, nb.elevation) for nb in obs.neighbors])
        return self(q, obs.view_features, obs.view_orients)


class TextEncoder(Module):
    PAD = 0

    def __init__(self, vocab_size, d, heads, layers, rng, max_positions=256):
        self.vocab_size = vocab_size
        self.embed = T.parameter(trunc_normal(rng, (vocab_size, d), std=1.0))
        self.layers = [EncoderLayer(d, heads, rng) for _ in range(layers)]
        self.ln_f = LayerNorm(d)
        self.positions = sinusoidal_positions(max_positions, d)

    def __call__(self, token_ids):
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise ContractError("expected a non-empty 1-d token sequence")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise VocabError(f"token id outside [0, {self.vocab_size})")
        pos = self.positions[: len(ids)].astype(self.embed.dtype)
        x = T.take(self.embed, ids) + Tensor(pos)
        keep = ids != self.PAD
        mask = np.broadcast_to(keep, (len(ids), len(ids))) if not keep.all() else None
        if mask is not None and not keep.any():
            raise ContractError("sequence contains only padding")
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln_f(x)


class MaskedTokenHead(Module):
    """Text tokens cross-attend a path's edge features; predicts the vocabulary."""

    def __init__(self, vocab_size, d, heads, layers, rng, max_positions=256):
        self.layers = [DecoderLayer(d, heads, rng) for _ in range(layers)]
        self.ln_f = LayerNorm(d)
        self.out = Linear(d, vocab_size, rng, std=0.02)  # near-uniform initial predictions
        self.positions = sinusoidal_positions(max_positions, d)

    def __call__(self, text, path_edges):
        if path_edges.shape[0] == 0:
            raise ContractError("empty path")
        mem = path_edges + Tensor(self.positions[: path_edges.shape[0]].astype(path_edges.dtype))
        return self.out(self.ln_f(_run_decoder(self.layers, text, mem)))


def mask_tokens(token_ids, rate, rng, mask_id=1):
    """Replace ceil(rate * L) uniformly chosen positions with ``mask_id``."""
    ids = np.array(token_ids, dtype=np.int64)
    n = int(np.ceil(rate * len(ids) - 1e-9)) if rate > 0 else 0
    pos = np.sort(rng.choice(len(ids), size=n, replace=False)) if n else np.zeros(0, dtype=np.int64)
    targets = ids[pos].copy()
    ids[pos] = mask_id
    return ids, pos, targets


def mlm_loss(head, text_encoder, masked_ids, positions, targets, path_edges):
    """Mean cross entropy at masked positions; a zero tensor if none are masked."""
    if len(positions) == 0:
        return Tensor(np.zeros((), dtype=head.out.weight.dtype))
    logits = head(text_encoder(masked_ids), path_edges)
    return T.cross_entropy(T.take(logits, positions), targets)
