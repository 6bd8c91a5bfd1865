"""Line-delimited episode traces and a replay check against a model."""
from __future__ import annotations

import hashlib
import json

import numpy as np

from . import tensor as T
from .env import Episode
from .graph import STOP, ContractError
from .planner import NavigationRun

TRACE_SCHEMA = "trajnav.trace/1"


def env_digest(env):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(env.coords, dtype=np.float64).tobytes())
    h.update(json.dumps([list(e) for e in env.edges]).encode())
    h.update(json.dumps(list(env.landmarks)).encode())
    return h.hexdigest()[:16]


def trace_header(run, config_hash=None):
    ep = run.episode
    return {
        "record": "header",
        "schema": TRACE_SCHEMA,
        "episode_id": ep.episode_id,
        "env": {"seed": ep.env.seed, "digest": env_digest(ep.env), "n_nodes": ep.env.n_nodes},
        "instruction": list(ep.instruction),
        "gt_path": [int(n) for n in ep.gt_path],
        "start": int(ep.start),
        "target": int(ep.target),
        "start_heading": float(ep.start_heading),
        "success_radius": float(ep.success_radius),
        "step_budget": run.budget,
        "config_hash": config_hash,
    }


def trace_lines(run, config_hash=None):
    if not run.done:
        raise ContractError("trace export needs a finished episode")
    lines = [json.dumps(trace_header(run, config_hash), sort_keys=True)]
    lines += [json.dumps({"record": "step", **rec}, sort_keys=True) for rec in run.records]
    return lines


def export_trace(path, run, config_hash=None):
    lines = trace_lines(run, config_hash)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(lines)


def read_trace(path):
    with open(path) as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    if not recs or recs[0].get("schema") != TRACE_SCHEMA:
        raise ValueError(f"{path}: not a {TRACE_SCHEMA} file")
    return recs[0], recs[1:]


def episode_from_header(header, env):
    if env_digest(env) != header["env"]["digest"]:
        raise ContractError("trace was recorded in a different environment")
    return Episode(header["episode_id"], env, header["start"], header["target"], tuple(header["gt_path"]),
                   tuple(header["instruction"]), header["success_radius"], header["start_heading"])


def replay(model, header, steps, env, vocab):
    """Re-drive the recorded actions; returns the largest score difference seen."""
    ep = episode_from_header(header, env)
    worst = 0.0
    with T.no_grad():
        run = NavigationRun(model, ep, header["step_budget"], vocab=vocab)
        for rec in steps:
            view = run.prepare()
            cands = [c if c == STOP else int(c) for c in view.candidates]
            if cands != rec["candidates"]:
                raise ContractError(f"step {rec['step']}: candidate sets differ")
            diff = np.abs(np.asarray(rec["scores"]) - view.scores.data.astype(np.float64))
            worst = max(worst, float(diff.max()))
            run.act(cands.index(rec["action"]))
    if not run.done:
        raise ContractError("trace ended before the episode did")
    return worst
