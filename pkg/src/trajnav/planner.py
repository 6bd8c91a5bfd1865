"""Path scoring with a shared-prefix KV cache, candidate comparison, and the
per-step navigation loop."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import MaskedTokenHead, OrientationPanoramaEncoder, TextEncoder
from .env import observe, bearing
from .graph import STOP, ContractError, ExploreGraph
from .nn import (CacheError, DecoderLayer, EncoderLayer, LayerNorm, Linear, Module,
                 sinusoidal_positions, trunc_normal)
from .tensor import Tensor


def build_merged_mask(prefix_len, suffix_lens):
    """Causal mask over prefix ++ suffixes where suffixes never see each other."""
    if prefix_len < 1:
        raise ContractError("prefix must hold at least the start token")
    if any(n < 1 for n in suffix_lens):
        raise ContractError("suffix lengths must be >= 1")
    total = prefix_len + sum(suffix_lens)
    mask = np.zeros((total, total), dtype=bool)
    mask[:prefix_len, :prefix_len] = np.tril(np.ones((prefix_len, prefix_len), dtype=bool))
    start = prefix_len
    for n in suffix_lens:
        mask[start:start + n, :prefix_len] = True
        mask[start:start + n, start:start + n] = np.tril(np.ones((n, n), dtype=bool))
        start += n
    return mask


@dataclass
class KVCache:
    """Per-layer self-attention keys/values of the committed path prefix plus
    the instruction's cross-attention keys/values."""
    memory_kv: list
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    committed_len: int = 0
    owner: object = None

    def layer_past(self, i):
        if self.committed_len == 0:
            return None
        return self.keys[i], self.values[i]


class MatchingAssessor(Module):
    """Causal cross-modal decoder; a path's embedding is its last output row."""

    def __init__(self, d, heads, layers, rng, max_positions=256):
        self.start_token = T.parameter(trunc_normal(rng, (1, d), std=1.0))
        self.stop_token = T.parameter(trunc_normal(rng, (1, d), std=1.0))
        self.layers = [DecoderLayer(d, heads, rng) for _ in range(layers)]
        self.ln_f = LayerNorm(d)
        self.positions = sinusoidal_positions(max_positions, d)

    def _pos(self, idx, dtype):
        return Tensor(self.positions[np.asarray(idx)].astype(dtype))

    def memory(self, text):
        return [layer.memory_kv(text) for layer in self.layers]

    def new_cache(self, text, owner=None):
        cache = KVCache(self.memory(text), owner=owner)
        self.commit(cache, self.start_token)
        return cache

    def commit(self, cache, token):
        """Append one token (shape [1, d]) to the committed prefix."""
        if token.shape != self.start_token.shape:
            raise CacheError(f"token shape {token.shape} != {self.start_token.shape}")
        return self.commit_many(cache, token)

    def commit_many(self, cache, tokens):
        """Append [n, d] tokens in one causal pass."""
        n, d = tokens.shape
        if d != self.start_token.shape[1]:
            raise CacheError(f"token width {d} != {self.start_token.shape[1]}")
        p = cache.committed_len
        x = tokens + self._pos(np.arange(p, p + n), tokens.dtype)
        mask = None
        if n > 1:
            mask = np.ones((n, p + n), dtype=bool)
            mask[:, p:] = np.tril(np.ones((n, n), dtype=bool))
        for i, layer in enumerate(self.layers):
            x, (k, v) = layer(x, mask, cache.memory_kv[i], cache.layer_past(i))
            if cache.committed_len == 0:
                cache.keys.append(k)
                cache.values.append(v)
            else:
                cache.keys[i] = T.concat([cache.keys[i], k])
                cache.values[i] = T.concat([cache.values[i], v])
        cache.committed_len += n
        return cache

    def truncate(self, cache, new_len):
        if not 1 <= new_len <= cache.committed_len:
            raise ContractError(f"cannot truncate cache of length {cache.committed_len} to {new_len}")
        if new_len < cache.committed_len:
            cache.keys = [T.take(k, slice(0, new_len)) for k in cache.keys]
            cache.values = [T.take(v, slice(0, new_len)) for v in cache.values]
            cache.committed_len = new_len
        return cache

    def embed_batch(self, cache, suffixes):
        """Terminal outputs for prefix ++ suffix_i, all suffixes in one pass.

        ``suffixes`` is a list of [n_i, d] tensors; returns an [len(suffixes), d]
        tensor. The cache is left unchanged.
        """
        if cache.committed_len < 1:
            raise ContractError("cache holds no committed prefix")
        if not suffixes:
            raise ContractError("no suffixes to embed")
        p = cache.committed_len
        lens = [s.shape[0] for s in suffixes]
        mask = build_merged_mask(p, lens)[p:]
        pos = np.concatenate([np.arange(p, p + n) for n in lens])
        x = T.concat(list(suffixes)) + self._pos(pos, suffixes[0].dtype)
        for i, layer in enumerate(self.layers):
            x, _ = layer(x, mask, cache.memory_kv[i], cache.layer_past(i))
        ends = np.cumsum(lens) - 1
        return self.ln_f(T.take(x, ends))

    def forward_full(self, tokens, memory_kv):
        """Uncached causal forward over a whole token sequence [n, d]."""
        n = tokens.shape[0]
        x = tokens + self._pos(np.arange(n), tokens.dtype)
        mask = np.tril(np.ones((n, n), dtype=bool))
        for i, layer in enumerate(self.layers):
            x, _ = layer(x, mask, memory_kv[i])
        return self.ln_f(x)

    def path_tokens(self, edge_features, stop=False):
        toks = [self.start_token] + list(edge_features)
        if stop:
            toks.append(self.stop_token)
        return T.concat(toks)

    def embed_path_naive(self, edge_features, memory_kv, stop=False):
        out = self.forward_full(self.path_tokens(edge_features, stop), memory_kv)
        return T.take(out, slice(out.shape[0] - 1, out.shape[0]))


class CandidateComparator(Module):
    """Set encoder over candidate path embeddings followed by a scoring MLP."""

    def __init__(self, d, heads, layers, rng, mode="compare"):
        self.mode = mode
        self.layers = [EncoderLayer(d, heads, rng) for _ in range(layers)] if mode == "compare" else []
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, 1, rng)

    def __call__(self, embeddings):
        if embeddings.shape[0] == 0:
            raise ContractError("empty candidate set")
        x = embeddings
        for layer in self.layers:
            x = layer(x)
        scores = T.reshape(self.fc2(T.gelu(self.fc1(x))), (x.shape[0],))
        return scores, T.softmax(scores)


class NavModel(Module):
    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 7])
        d, h = cfg.d, cfg.heads
        self.ope = OrientationPanoramaEncoder(d, h, cfg.raw_dim, cfg.ope_layers, rng)
        self.text = TextEncoder(cfg.vocab_size, d, h, cfg.text_layers, rng, cfg.max_positions)
        self.mam = MatchingAssessor(d, h, cfg.mam_layers, rng, cfg.max_positions)
        self.ccm = CandidateComparator(d, h, cfg.ccm_layers, rng, cfg.ccm_mode)
        self.mlm = MaskedTokenHead(cfg.vocab_size, d, h, cfg.mlm_layers, rng, cfg.max_positions)

    def navigation_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("mlm.")]


# ---------------------------------------------------------------------------


def obs_digest(obs):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(obs.view_features).tobytes())
    h.update(np.ascontiguousarray(obs.view_orients, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class StepView:
    candidates: list  # node ids and STOP
    scores: Tensor
    probs: Tensor
    digest: str

    def greedy(self):
        # lowest index wins ties
        return int(np.argmax(self.scores.data))


class NavigationRun:
    """State of one episode: map, fidelity stack, path cache and trace."""

    def __init__(self, model, episode, step_budget=None, instruction_ids=None, vocab=None):
        self.model = model
        self.episode = episode
        self.env = episode.env
        if instruction_ids is None:
            instruction_ids = vocab.encode(episode.instruction)
        self.text = model.text(instruction_ids)
        self.cache = model.mam.new_cache(self.text, owner=episode.episode_id)
        self.graph = ExploreGraph(episode.start, self.env.coords[episode.start])
        self.heading = episode.start_heading
        self.walk = [episode.start]
        self.trajectory_length = 0.0
        self.steps = 0
        self.done = False
        self.truncated = False
        self.budget = step_budget if step_budget else 2 * len(episode.gt_path) + 6
        self.records = []
        self.pending = None

    @property
    def current(self):
        return self.graph.current

    def prepare(self):
        """Observe, extend the map, embed new paths and score all candidates."""
        if self.done:
            raise ContractError("episode already finished")
        g, mam = self.graph, self.model.mam
        obs = observe(self.env, g.current, self.heading)
        with T.flop_scope("ope"):
            feats = self.model.ope.extract(obs)
        rows = [T.take(feats, slice(i, i + 1)) for i in range(feats.shape[0])]
        fresh = g.update(obs, rows)
        suffixes = [g.edges[(g.current, n)].feature for n in fresh] + [mam.stop_token]
        with T.flop_scope("mam"):
            emb = mam.embed_batch(self.cache, suffixes)
        for i, n in enumerate(fresh):
            g.set_embedding(n, T.take(emb, slice(i, i + 1)))
        g.set_stop_embedding(T.take(emb, slice(len(fresh), len(fresh) + 1)))
        cands = g.candidates()
        with T.flop_scope("ccm"):
            scores, probs = self.model.ccm(T.concat([e for _, e in cands]))
        self.pending = StepView([c for c, _ in cands], scores, probs, obs_digest(obs))
        return self.pending

    def act(self, index):
        """Execute the candidate at ``index`` of the last prepared step."""
        view = self.pending
        if view is None:
            raise ContractError("act() before prepare()")
        self.pending = None
        choice = view.candidates[index]
        route = []
        if choice == STOP:
            self.done = True
        else:
            route = self.graph.route(self.graph.current, choice, visited_only=True)
            for u, v in zip(route, route[1:]):
                self._hop(u, v)
        self.steps += 1
        if not self.done and self.steps >= self.budget:
            self.done = True
            self.truncated = True
        self.records.append({
            "step": self.steps - 1,
            "node": route[0] if route else self.graph.current,
            "obs": view.digest,
            "candidates": [c if c == STOP else int(c) for c in view.candidates],
            "scores": [float(s) for s in view.scores.data],
            "action": choice if choice == STOP else int(choice),
            "route": [int(n) for n in route],
            "stack": [int(n) for n in self.graph.stack],
            "truncated": self.truncated,
        })
        return choice

    def _hop(self, u, v):
        g = self.graph
        before = len(g.stack)
        edge = g.edges[(u, v)].feature
        stack = g.move(v)
        mam = self.model.mam
        with T.flop_scope("mam"):
            if len(stack) > before:
                mam.commit(self.cache, edge)
            else:
                mam.truncate(self.cache, len(stack))
        self.trajectory_length += self.env.edge_length(u, v)
        self.heading = bearing(self.env.coords[u], self.env.coords[v])[0]
        self.walk.append(v)


def uniform_choice(view, rng):
    return int(rng.integers(len(view.candidates)))


def sample_choice(view, rng, temperature=1.0):
    s = view.scores.data.astype(np.float64) / temperature
    p = np.exp(s - s.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def run_episode(model, episode, policy, rng=None, step_budget=None, vocab=None, instruction_ids=None):
    """Roll out ``policy(view, run, rng) -> index`` until STOP or budget."""
    run = NavigationRun(model, episode, step_budget, instruction_ids=instruction_ids, vocab=vocab)
    while not run.done:
        view = run.prepare()
        run.act(policy(view, run, rng))
    return run
