"""Analytic matmul FLOP accounting for the planner, and a concrete executor that
runs the same scenario through the real modules under the runtime counter.

Conventions: only matrix products count, at 2*m*k*n. Attention contributes
4*n*m*d (scores + weighted sum over all heads). Instruction keys/values for the
path scorer are computed once per episode and reported as ``setup``; text and
raw visual feature extraction are excluded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import OrientationPanoramaEncoder
from .planner import CandidateComparator, KVCache, MatchingAssessor
from .tensor import Tensor

MODES = ("incremental", "nocache", "naive")


@dataclass(frozen=True)
class FlopsScenario:
    steps: int = 20
    degree: int = 4
    new_nodes_per_step: int = 3
    instruction_len: int = 40

    def frontier_count(self, t):
        # every step adds new_nodes and consumes one frontier by moving onto it
        return self.new_nodes_per_step * t - (t - 1)


def linear(n, d_in, d_out):
    return 2 * n * d_in * d_out


def ffn(n, d):
    return linear(n, d, 4 * d) + linear(n, 4 * d, d)


def self_attention(n, keys, d):
    """Queries n new tokens against ``keys`` total keys (cached + new)."""
    return linear(n, d, d) * 4 + 4 * n * keys * d


def cross_attention(n, mem, d, project_memory):
    kv = 2 * linear(mem, d, d) if project_memory else 0
    return 2 * linear(n, d, d) + kv + 4 * n * mem * d


def encoder_layer(n, d):
    return self_attention(n, n, d) + ffn(n, d)


def decoder_layer(n, keys, d, mem, project_memory):
    return self_attention(n, keys, d) + cross_attention(n, mem, d, project_memory) + ffn(n, d)


def ope_flops(n_queries, k_views, raw_dim, d, layers):
    return (linear(n_queries, 4, d) + linear(k_views, raw_dim + 4, d)
            + layers * decoder_layer(n_queries, n_queries, d, k_views, True))


def mam_setup_flops(text_len, d, layers):
    return layers * 2 * linear(text_len, d, d)


def mam_tokens_flops(n, keys, d, text_len, layers):
    return layers * decoder_layer(n, keys, d, text_len, False)


def ccm_flops(n, d, layers, mode="compare"):
    enc = layers * encoder_layer(n, d) if mode == "compare" else 0
    return enc + linear(n, d, d) + linear(n, d, 1)


@dataclass
class FlopsReport:
    mode: str
    per_step: list = field(default_factory=list)  # total per step
    breakdown: list = field(default_factory=list)  # dict per step
    setup: int = 0

    @property
    def cumulative(self):
        return list(np.cumsum(self.per_step))


def analytic(cfg, scenario, mode):
    """Per-step counts for OPE + MAM + CCM under the scenario."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    d, L = cfg.d, scenario.instruction_len
    k_views = cfg_k_views(cfg)
    new = scenario.new_nodes_per_step
    rep = FlopsReport(mode, setup=mam_setup_flops(L, d, cfg.mam_layers))
    for t in range(1, scenario.steps + 1):
        ope = ope_flops(scenario.degree, k_views, cfg.raw_dim, d, cfg.ope_layers)
        if mode == "incremental":
            prefix = t  # START + t-1 committed edges
            mam = mam_tokens_flops(1, prefix, d, L, cfg.mam_layers)  # commit
            mam += mam_tokens_flops(new + 1, prefix + new + 1, d, L, cfg.mam_layers)
        elif mode == "nocache":
            # the prefix cache is rebuilt from scratch each step
            mam = mam_tokens_flops(t, t, d, L, cfg.mam_layers)
            mam += mam_tokens_flops(new + 1, t + new + 1, d, L, cfg.mam_layers)
        else:
            mam = 0
            for s, count in naive_paths(scenario, t):
                mam += count * mam_tokens_flops(s, s, d, L, cfg.mam_layers)
        ccm = ccm_flops(scenario.frontier_count(t) + 1, d, cfg.ccm_layers, cfg.ccm_mode)
        rep.breakdown.append({"ope": ope, "mam": mam, "ccm": ccm})
        rep.per_step.append(ope + mam + ccm)
    return rep


def naive_paths(scenario, t):
    """(token count, number of paths) recomputed from scratch at step t."""
    new = scenario.new_nodes_per_step
    out = [(t + 1, new)]  # observed this step: START + t-1 edges + new edge
    for s in range(1, t):
        out.append((s + 1, new - 1))  # survivors of step s
    out.append((t + 1, 1))  # STOP path: START + t-1 edges + STOP
    return out


def cfg_k_views(cfg):
    return getattr(cfg, "k_views", None) or 12


@dataclass
class BenchModelConfig:
    """Just the planner-side dimensions (no text encoder / MLM head)."""
    d: int
    heads: int
    raw_dim: int
    ope_layers: int
    mam_layers: int
    ccm_layers: int
    k_views: int
    ccm_mode: str = "compare"

    @classmethod
    def from_config(cls, cfg):
        m = cfg.model
        return cls(m.d, m.heads, m.raw_dim, m.ope_layers, m.mam_layers, m.ccm_layers,
                   cfg.env.k_heading * cfg.env.k_elevation, m.ccm_mode)


def parameter_counts(cfg):
    d = cfg.d

    def lin(i, o, bias=True):
        return i * o + (o if bias else 0)

    ln = 2 * d
    mha = 4 * lin(d, d)
    ff = lin(d, 4 * d) + lin(4 * d, d)
    enc = 2 * ln + mha + ff
    dec = 3 * ln + 2 * mha + ff
    return {
        "ope": lin(4, d, False) + lin(cfg.raw_dim + 4, d, False) + cfg.ope_layers * dec + ln,
        "mam": 2 * d + cfg.mam_layers * dec + ln,
        "ccm": (cfg.ccm_layers * enc if cfg.ccm_mode == "compare" else 0) + lin(d, d) + lin(d, 1),
    }


class ConcreteScenario:
    """Drives OPE / MAM / CCM with synthetic inputs along the scenario."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        rng = np.random.default_rng([seed, 23])
        self.cfg = cfg
        self.ope = OrientationPanoramaEncoder(cfg.d, cfg.heads, cfg.raw_dim, cfg.ope_layers, rng)
        self.mam = MatchingAssessor(cfg.d, cfg.heads, cfg.mam_layers, rng)
        self.ccm = CandidateComparator(cfg.d, cfg.heads, cfg.ccm_layers, rng, cfg.ccm_mode)
        self.rng = rng
        self.dtype = dtype

    def _vec(self, *shape):
        return Tensor(self.rng.standard_normal(shape).astype(self.dtype))

    def run(self, scenario, mode):
        cfg = self.cfg
        rep = FlopsReport(mode)
        text = self._vec(scenario.instruction_len, cfg.d)
        new = scenario.new_nodes_per_step
        views = self.rng.standard_normal((cfg.k_views, cfg.raw_dim))
        view_orients = self.rng.uniform(-np.pi, np.pi, (cfg.k_views, 2))
        with T.no_grad():
            with T.count_flops() as c:
                memory = self.mam.memory(text)
            rep.setup = c.total
            cache = None
            committed = []  # edge tokens along the walk
            frontiers = []  # (edge-token list of the full path)
            for t in range(1, scenario.steps + 1):
                with T.count_flops() as c:
                    with T.flop_scope("ope"):
                        q = self.rng.uniform(-np.pi, np.pi, (scenario.degree, 2))
                        edges = self.ope(q, views, view_orients)
                    fresh = [T.take(edges, slice(i, i + 1)) for i in range(new)]
                    with T.flop_scope("mam"):
                        if mode == "incremental":
                            if cache is None:
                                cache = KVCache(memory)
                                self.mam.commit(cache, self.mam.start_token)
                            else:
                                self.mam.commit(cache, committed[-1])
                            self.mam.embed_batch(cache, fresh + [self.mam.stop_token])
                        elif mode == "nocache":
                            cache = KVCache(memory)
                            self.mam.commit_many(cache, T.concat([self.mam.start_token] + committed))
                            self.mam.embed_batch(cache, fresh + [self.mam.stop_token])
                        else:
                            frontiers.extend(committed + [f] for f in fresh)
                            for path in frontiers:
                                self.mam.embed_path_naive(path, memory)
                            self.mam.embed_path_naive(committed, memory, stop=True)
                    if mode != "naive":
                        frontiers.extend(committed + [f] for f in fresh)
                    cands = self._vec(len(frontiers) + 1, cfg.d)
                    with T.flop_scope("ccm"):
                        self.ccm(cands)
                rep.per_step.append(c.total)
                rep.breakdown.append({k: c.by_scope.get(k, 0) for k in ("ope", "mam", "ccm")})
                # move onto the first frontier seen this step
                committed = frontiers.pop(len(frontiers) - new)
        return rep
