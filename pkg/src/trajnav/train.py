"""Supervision labels, rollout losses, pretraining / fine-tuning loops and
navigation metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .encoders import mask_tokens, mlm_loss
from .env import bearing, generate_environment, observe, sample_episode
from .graph import STOP, ContractError
from .nn import AdamW, ConfigError
from .planner import NavigationRun, sample_choice, uniform_choice

log = logging.getLogger(__name__)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class StepSupervision:
    index: int
    source: str  # "teacher" | "pseudo"


def teacher_action(run, view, episode):
    gt = episode.gt_path
    cur = run.current
    if cur not in gt:
        raise ContractError(f"teacher undefined off the ground-truth path (at {cur})")
    if cur == episode.target:
        return StepSupervision(view.candidates.index(STOP), "teacher")
    nxt = gt[gt.index(cur) + 1]
    if nxt not in view.candidates:
        raise ContractError(f"next ground-truth node {nxt} is not a candidate")
    return StepSupervision(view.candidates.index(nxt), "teacher")


def pseudo_label(run, view, episode, metric="metric"):
    env = episode.env
    if metric == "metric":
        dist = env.distances()
    elif metric == "hops":
        dist = env.hop_distances()
    else:
        raise ConfigError(f"unknown pseudo-label metric {metric!r}")
    metric_dist = env.distances()
    cur, target = run.current, episode.target
    stop_idx = view.candidates.index(STOP)
    target_info = run.graph.nodes.get(target)
    if target_info is not None and target_info.visited and metric_dist[cur, target] < episode.success_radius:
        return StepSupervision(stop_idx, "pseudo")
    frontier = [(i, c) for i, c in enumerate(view.candidates) if c != STOP]
    gt_order = {n: k for k, n in enumerate(episode.gt_path)}
    on_gt = [(dist[cur, c], gt_order[c], c, i) for i, c in frontier if c in gt_order]
    if on_gt:
        return StepSupervision(min(on_gt)[3], "pseudo")
    if not frontier:
        return StepSupervision(stop_idx, "pseudo")
    # nodes lying on some shortest route from the agent to the target
    total = metric_dist[cur, target]
    on_route = np.flatnonzero(np.abs(metric_dist[cur] + metric_dist[:, target] - total) <= 1e-9)
    scored = [(dist[c, on_route].min(), dist[cur, c], c, i) for i, c in frontier]
    return StepSupervision(min(scored)[3], "pseudo")


def rollout_loss(model, episode, mode, rng=None, vocab=None, step_budget=None, pseudo_metric="metric",
                 instruction_ids=None):
    """Mean cross entropy over the steps of one rollout. Returns (loss, run)."""
    if mode not in ("teacher", "student"):
        raise ConfigError(f"unknown rollout mode {mode!r}")
    run = NavigationRun(model, episode, step_budget, instruction_ids=instruction_ids, vocab=vocab)
    terms = []
    while not run.done:
        view = run.prepare()
        if mode == "teacher":
            sup = teacher_action(run, view, episode)
            choice = sup.index
        else:
            sup = pseudo_label(run, view, episode, pseudo_metric)
            choice = sample_choice(view, rng)
        terms.append(T.cross_entropy(view.scores, sup.index))
        run.act(choice)
    return T.mean(T.stack_scalars(terms)), run


def total_loss(l_tf, l_sf, lam=0.2):
    if not 0.0 < lam < 1.0:
        raise ConfigError(f"loss weight must lie in (0, 1), got {lam}")
    return l_tf * lam + l_sf * (1.0 - lam)


# ---------------------------------------------------------------------------
# pretraining


def teacher_path_edges(model, episode):
    """Edge features along the ground-truth path, observed with teacher poses."""
    env, gt = episode.env, episode.gt_path
    heading = episode.start_heading
    rows = []
    for u, v in zip(gt, gt[1:]):
        obs = observe(env, u, heading)
        feats = model.ope.extract(obs)
        j = [nb.node for nb in obs.neighbors].index(v)
        rows.append(T.take(feats, slice(j, j + 1)))
        heading = bearing(env.coords[u], env.coords[v])[0]
    return T.concat(rows)


def mlm_pretrain_step(model, batch, rng, vocab, rate=0.15):
    """Mean masked-token loss over a batch of episodes."""
    losses = []
    for ep in batch:
        ids = vocab.encode(ep.instruction)
        if not ids:
            continue
        masked, pos, targets = mask_tokens(ids, rate, rng, vocab.MASK)
        if len(pos) == 0:
            continue
        losses.append(mlm_loss(model.mlm, model.text, masked, pos, targets, teacher_path_edges(model, ep)))
    if not losses:
        return T.Tensor(np.zeros((), dtype=model.mlm.out.weight.dtype))
    return T.mean(T.stack_scalars(losses))


def pretrain_parameters(model):
    return model.text.parameters() + model.ope.parameters() + model.mlm.parameters()


def pretrain(model, episodes, steps, batch, lr, seed, vocab, rate=0.15, weight_decay=0.01,
             log_fh=None, progress_every=50):
    rng = np.random.default_rng([seed, 11])
    opt = AdamW(pretrain_parameters(model), lr=lr, weight_decay=weight_decay)
    history = []
    for step in range(steps):
        idx = rng.choice(len(episodes), size=batch, replace=False)
        loss = mlm_pretrain_step(model, [episodes[i] for i in idx], rng, vocab, rate)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_fh is not None:
            log_fh.write(json.dumps({"stage": "pretrain", "step": step, "loss": round(loss.item(), 6)}) + "\n")
        if progress_every and step % progress_every == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    return history


# ---------------------------------------------------------------------------
# fine-tuning


def train_step(model, opt, batch, rng, vocab, lam=0.2, pseudo_metric="metric", step_budget=None):
    opt.zero_grad()
    total = 0.0
    for ep in batch:
        ids = vocab.encode(ep.instruction)
        l_tf, _ = rollout_loss(model, ep, "teacher", rng, step_budget=step_budget,
                               pseudo_metric=pseudo_metric, instruction_ids=ids)
        l_sf, _ = rollout_loss(model, ep, "student", rng, step_budget=step_budget,
                               pseudo_metric=pseudo_metric, instruction_ids=ids)
        loss = total_loss(l_tf, l_sf, lam) * (1.0 / len(batch))
        loss.backward()
        total += loss.item()
    opt.step()
    return total


def finetune(model, episodes, iterations, batch, lr, seed, vocab, lam=0.2, weight_decay=0.01,
             pseudo_metric="metric", step_budget=None, log_fh=None, eval_fn=None, eval_every=0):
    rng = np.random.default_rng([seed, 13])
    opt = AdamW(model.navigation_parameters(), lr=lr, weight_decay=weight_decay)
    order = rng.permutation(len(episodes))
    cursor = 0
    history = []
    for it in range(iterations):
        if cursor + batch > len(order):
            order, cursor = rng.permutation(len(episodes)), 0
        chosen = [episodes[i] for i in order[cursor:cursor + batch]]
        cursor += batch
        loss = train_step(model, opt, chosen, rng, vocab, lam, pseudo_metric, step_budget)
        history.append(loss)
        rec = {"stage": "finetune", "step": it, "loss": round(loss, 6)}
        if eval_fn is not None and eval_every and (it + 1) % eval_every == 0:
            rec["eval"] = eval_fn()
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
        if it % 25 == 0:
            log.info("finetune iter %d loss %.4f", it, loss)
    return history


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    TL: float
    NE: float
    SR: float
    SPL: float
    nDTW: float
    sDTW: float
    episodes: int = 1

    def as_dict(self):
        return asdict(self)


def dtw_distance(path_a, path_b, coords, use_numba=None):
    a = coords[list(path_a)]
    b = coords[list(path_b)]
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return float(kernels.dtw_table(cost, use_numba)[-1, -1])


def compute_metrics(walk, episode):
    """Metrics for the agent's executed node sequence ``walk``."""
    if not walk:
        raise MetricsError("empty trajectory")
    env = episode.env
    dist = env.distances()
    tl = sum(env.edge_length(u, v) for u, v in zip(walk, walk[1:]))
    ne = float(dist[walk[-1], episode.target])
    sr = float(ne < episode.success_radius)
    shortest = float(dist[episode.start, episode.target])
    spl = sr * shortest / max(tl, shortest) if max(tl, shortest) > 0 else sr
    ndtw = math.exp(-dtw_distance(walk, episode.gt_path, env.coords)
                    / (len(episode.gt_path) * episode.success_radius))
    return MetricsReport(tl, ne, sr, spl, ndtw, sr * ndtw)


def average_metrics(reports):
    if not reports:
        raise MetricsError("no episodes to average")
    keys = ("TL", "NE", "SR", "SPL", "nDTW", "sDTW")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return MetricsReport(**means, episodes=sum(r.episodes for r in reports))


def make_policy(kind, episode=None):
    if kind == "greedy":
        return lambda view, run, rng: view.greedy()
    if kind == "sample":
        return lambda view, run, rng: sample_choice(view, rng)
    if kind == "random":
        return lambda view, run, rng: uniform_choice(view, rng)
    if kind == "oracle":
        return lambda view, run, rng: teacher_action(run, view, episode).index
    raise ConfigError(f"unknown policy {kind!r}")


def evaluate(model, episodes, vocab, policy="greedy", seed=0, step_budget=None, return_runs=False):
    if not episodes:
        raise MetricsError("empty episode set")
    reports, runs = [], []
    with T.no_grad():
        for i, ep in enumerate(episodes):
            rng = np.random.default_rng([seed, 17, i])
            run = NavigationRun(model, ep, step_budget, vocab=vocab)
            pol = make_policy(policy, ep)
            while not run.done:
                view = run.prepare()
                run.act(pol(view, run, rng))
            reports.append(compute_metrics(run.walk, ep))
            runs.append(run)
    agg = average_metrics(reports)
    return (agg, reports, runs) if return_runs else agg


# ---------------------------------------------------------------------------
# datasets


def build_episodes(env_cfg, env_seeds, count, seed, success_radius=None):
    envs = [generate_environment(s, n_nodes=env_cfg.n_nodes, layout=env_cfg.layout,
                                 spacing=env_cfg.spacing, landmark_count=env_cfg.landmark_count,
                                 stair_rise=env_cfg.stair_rise, k_heading=env_cfg.k_heading,
                                 k_elevation=env_cfg.k_elevation)
            for s in env_seeds]
    episodes = []
    for i in range(count):
        env = envs[i % len(envs)]
        episodes.append(sample_episode(env, seed * 1_000_003 + i, env_cfg.min_len, env_cfg.max_len,
                                       env_cfg.fidelity, success_radius or None,
                                       episode_id=f"{env.seed}-{seed}-{i}"))
    return envs, episodes


def train_split(cfg):
    seed = cfg.train.seed
    seeds = range(seed * 10_000, seed * 10_000 + cfg.env.train_envs)
    return build_episodes(cfg.env, seeds, cfg.train.train_episodes, seed * 2 + 1, cfg.eval.success_radius or None)


def eval_split(cfg):
    """Held-out environments, disjoint from ``train_split`` for the same seed."""
    seed = cfg.train.seed
    seeds = range(seed * 10_000 + 5_000, seed * 10_000 + 5_000 + cfg.env.eval_envs)
    return build_episodes(cfg.env, seeds, cfg.eval.episodes, seed * 2 + 2, cfg.eval.success_radius or None)


def standard_splits(cfg):
    return train_split(cfg), eval_split(cfg)
