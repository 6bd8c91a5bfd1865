"""Procedural navigation environments, panoramic observations, episodes and a
template instruction speaker."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

LANDMARKS = (
    "sofa", "table", "chair", "bed", "lamp", "plant", "door", "stairs",
    "window", "sink", "mirror", "rug", "shelf", "piano", "fireplace", "painting",
    "tv", "desk", "oven", "bathtub", "clock", "vase", "statue", "fridge",
)
MOTION_WORDS = ("go", "forward", "turn", "left", "right", "around", "to", "stop", "at", ".")
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[CLS]", "[SEP]")

FEATURE_SEED = 20240917
ENV_SCHEMA = "trajnav.env/1"
EPISODE_SCHEMA = "trajnav.episodes/1"


class GenerationError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


class SpeakerError(ValueError):
    pass


class VocabError(ValueError):
    pass


def wrap_angle(a):
    """Wrap into [-pi, pi)."""
    return (a + math.pi) % (2 * math.pi) - math.pi


# ---------------------------------------------------------------------------


class Vocab:
    def __init__(self, words):
        self.itos = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise VocabError("duplicate vocabulary entries")

    PAD, MASK, CLS, SEP = 0, 1, 2, 3

    def __len__(self):
        return len(self.itos)

    def encode(self, words):
        try:
            return [self.stoi[w] for w in words]
        except KeyError as exc:
            raise VocabError(f"unknown word {exc.args[0]!r}") from None

    def decode(self, ids):
        for i in ids:
            if not 0 <= i < len(self.itos):
                raise VocabError(f"unknown token id {i}")
        return [self.itos[i] for i in ids]


def default_vocab(landmark_count=len(LANDMARKS)):
    return Vocab(list(MOTION_WORDS) + list(LANDMARKS[:landmark_count]))


# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EnvGraph:
    seed: int
    coords: np.ndarray  # [n, 3] metres
    edges: tuple  # sorted (u, v) pairs with u < v
    landmarks: tuple  # landmark label index per node
    layout: str = "grid"
    spacing: float = 2.0
    k_heading: int = 12
    k_elevation: int = 1
    feature_dim: int = 64
    _adj: dict = field(init=False, repr=False)
    _dist: np.ndarray = field(init=False, repr=False, default=None)
    _views: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        adj = {i: [] for i in range(len(self.coords))}
        for u, v in self.edges:
            if u == v:
                raise GenerationError(f"self-loop at node {u}")
            adj[u].append(v)
            adj[v].append(u)
        self._adj = {k: tuple(sorted(v)) for k, v in adj.items()}

    @property
    def n_nodes(self):
        return len(self.coords)

    @property
    def k_views(self):
        return self.k_heading * self.k_elevation

    def neighbors(self, node):
        try:
            return self._adj[node]
        except KeyError:
            raise KeyError(f"unknown node {node}") from None

    def edge_length(self, u, v):
        return float(np.linalg.norm(self.coords[u] - self.coords[v]))

    def same_as(self, other):
        return (self.seed == other.seed and self.edges == other.edges
                and self.landmarks == other.landmarks
                and np.array_equal(self.coords, other.coords)
                and (self.layout, self.spacing, self.k_heading, self.k_elevation, self.feature_dim)
                == (other.layout, other.spacing, other.k_heading, other.k_elevation, other.feature_dim))

    def weight_matrix(self):
        n = self.n_nodes
        w = np.full((n, n), np.inf)
        for u, v in self.edges:
            w[u, v] = w[v, u] = self.edge_length(u, v)
        return w

    def distances(self):
        """All-pairs metric shortest-path distances over the navigation graph."""
        if self._dist is None:
            self._dist = kernels.floyd_warshall(self.weight_matrix())
        return self._dist

    def hop_distances(self):
        w = self.weight_matrix()
        w[np.isfinite(w)] = 1.0
        return kernels.floyd_warshall(w)

    def is_connected(self):
        return bool(np.isfinite(self.distances()[0]).all())

    # --- views -------------------------------------------------------------

    def view_orientation(self, view_index):
        """World (heading, elevation) of a panorama view."""
        e, h = divmod(view_index, self.k_heading)
        return 2 * math.pi * h / self.k_heading, _elevation_levels(self.k_elevation)[e]

    def view_features(self, node):
        if self._views is None:
            self._views = np.stack([
                np.stack([synth_view_feature(self, n, i) for i in range(self.k_views)])
                for n in range(self.n_nodes)
            ]).astype(np.float32)
        return self._views[node]


def _elevation_levels(k):
    if k == 1:
        return (0.0,)
    return tuple(np.linspace(-math.pi / 6, math.pi / 6, k))


def _unit(rng, dim):
    x = rng.standard_normal(dim)
    return x / np.linalg.norm(x)


def landmark_embedding(label, dim):
    return _unit(np.random.default_rng([FEATURE_SEED, 1, label, dim]), dim)


def direction_embedding(view_index, dim):
    return 0.5 * _unit(np.random.default_rng([FEATURE_SEED, 2, view_index, dim]), dim)


def bearing(src, dst):
    d = dst - src
    return math.atan2(d[1], d[0]), math.atan2(d[2], math.hypot(d[0], d[1]))


def synth_view_feature(env, node, view_index):
    """Unit-norm feature: inverse-distance-weighted landmark embeddings of every
    node inside the view cone, plus a per-direction embedding."""
    if not 0 <= view_index < env.k_views:
        raise IndexError(f"view index {view_index} out of range")
    heading, elev = env.view_orientation(view_index)
    levels = _elevation_levels(env.k_elevation)
    half = math.pi / env.k_heading
    feat = direction_embedding(view_index, env.feature_dim).copy()
    src = env.coords[node]
    for m in range(env.n_nodes):
        if m == node:
            continue
        b, el = bearing(src, env.coords[m])
        off = wrap_angle(b - heading)
        if not -half <= off < half:
            continue
        nearest = min(range(len(levels)), key=lambda i: abs(levels[i] - el))
        if levels[nearest] != elev:
            continue
        dist = float(np.linalg.norm(env.coords[m] - src))
        feat += landmark_embedding(env.landmarks[m], env.feature_dim) / dist
    return feat / np.linalg.norm(feat)


# ---------------------------------------------------------------------------


def generate_environment(seed, n_nodes=25, layout="grid", spacing=2.0, landmark_count=24,
                         radius=None, stair_rise=0.0, k_heading=12, k_elevation=1,
                         feature_dim=64, max_retries=20):
    if n_nodes < 2:
        raise GenerationError("need at least 2 nodes")
    if not 1 <= landmark_count <= len(LANDMARKS):
        raise GenerationError(f"landmark_count must be in [1, {len(LANDMARKS)}]")
    common = dict(layout=layout, spacing=spacing, k_heading=k_heading,
                  k_elevation=k_elevation, feature_dim=feature_dim)
    if layout == "grid":
        rng = np.random.default_rng([seed, 0])
        cols = math.isqrt(n_nodes)
        coords, edges = [], []
        for i in range(n_nodes):
            r, c = divmod(i, cols)
            coords.append((c * spacing, r * spacing, c * stair_rise))
            if c > 0:
                edges.append((i - 1, i))
            if r > 0:
                edges.append((i - cols, i))
        landmarks = tuple(int(x) for x in rng.integers(0, landmark_count, n_nodes))
        return EnvGraph(seed, np.array(coords, dtype=np.float64), tuple(sorted(edges)), landmarks, **common)
    if layout == "random-geometric":
        radius = 1.6 * spacing if radius is None else radius
        side = spacing * math.sqrt(n_nodes)
        for attempt in range(max_retries):
            rng = np.random.default_rng([seed, attempt])
            xy = rng.uniform(0.0, side, size=(n_nodes, 2))
            coords = np.column_stack([xy, stair_rise * np.round(xy[:, 0] / spacing)])
            edges = tuple((i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)
                          if np.linalg.norm(coords[i] - coords[j]) <= radius)
            landmarks = tuple(int(x) for x in rng.integers(0, landmark_count, n_nodes))
            env = EnvGraph(seed, coords, edges, landmarks, **common)
            if env.is_connected():
                return env
        raise GenerationError(f"no connected draw after {max_retries} attempts (radius {radius})")
    raise GenerationError(f"unknown layout {layout!r}")


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Neighbor:
    node: int
    heading: float  # relative, [-pi, pi)
    elevation: float
    distance: float


@dataclass(frozen=True)
class Observation:
    node: int
    agent_heading: float
    view_features: np.ndarray  # [K, F]
    view_orients: np.ndarray  # [K, 2] relative (heading, elevation)
    neighbors: tuple
    coord: np.ndarray
    neighbor_coords: tuple


def observe(env, node, agent_heading):
    nbrs = env.neighbors(node)
    src = env.coords[node]
    out = []
    for m in nbrs:
        b, el = bearing(src, env.coords[m])
        out.append(Neighbor(m, wrap_angle(b - agent_heading), el, env.edge_length(node, m)))
    orients = np.array([
        (wrap_angle(h - agent_heading), e)
        for h, e in (env.view_orientation(i) for i in range(env.k_views))
    ])
    return Observation(node, agent_heading, env.view_features(node), orients, tuple(out),
                       src.copy(), tuple(env.coords[m].copy() for m in nbrs))


# ---------------------------------------------------------------------------


def motion_words(turn):
    a = abs(turn)
    if a <= math.pi / 4 + 1e-9:
        return ["go", "forward"]
    if a >= 3 * math.pi / 4 - 1e-9:
        return ["turn", "around"]
    return ["turn", "left"] if turn > 0 else ["turn", "right"]


def speak(env, path, start_heading=None):
    """Template instruction for ``path``; returns a list of words."""
    if len(path) < 2:
        raise SpeakerError("path needs at least two nodes")
    for u, v in zip(path, path[1:]):
        if v not in env.neighbors(u):
            raise SpeakerError(f"{u} -> {v} is not an edge")
    heading = bearing(env.coords[path[0]], env.coords[path[1]])[0] if start_heading is None else start_heading
    words = []
    for u, v in zip(path, path[1:]):
        b = bearing(env.coords[u], env.coords[v])[0]
        words += motion_words(wrap_angle(b - heading))
        words += ["to", LANDMARKS[env.landmarks[v]], "."]
        heading = b
    words += ["stop", "at", LANDMARKS[env.landmarks[path[-1]]]]
    return words


@dataclass(frozen=True)
class Episode:
    episode_id: str
    env: EnvGraph
    start: int
    target: int
    gt_path: tuple
    instruction: tuple  # words
    success_radius: float
    start_heading: float = 0.0

    def __post_init__(self):
        if self.gt_path[0] != self.start or self.gt_path[-1] != self.target:
            raise SamplingError("gt_path must run from start to target")
        for u, v in zip(self.gt_path, self.gt_path[1:]):
            if v not in self.env.neighbors(u):
                raise SamplingError(f"gt_path hop {u}->{v} is not an edge")

    def path_length(self):
        return sum(self.env.edge_length(u, v) for u, v in zip(self.gt_path, self.gt_path[1:]))


def _random_shortest_path(env, src, dst, rng):
    dist = env.distances()
    path = [src]
    u = src
    while u != dst:
        nxt = [v for v in env.neighbors(u)
               if abs(env.edge_length(u, v) + dist[v, dst] - dist[u, dst]) <= 1e-9]
        u = nxt[int(rng.integers(len(nxt)))]
        path.append(u)
    return path


def sample_episode(env, seed, min_len=2, max_len=6, fidelity="shortest", success_radius=None,
                   max_tries=500, episode_id=None):
    """Draw start/target and a ground-truth route; lengths count edges."""
    if fidelity not in ("shortest", "waypoint"):
        raise SamplingError(f"unknown fidelity mode {fidelity!r}")
    rng = np.random.default_rng([seed, 1])
    radius = 1.5 * env.spacing if success_radius is None else success_radius
    n = env.n_nodes
    for _ in range(max_tries):
        start, target = (int(x) for x in rng.integers(0, n, 2))
        if start == target:
            continue
        if fidelity == "shortest":
            path = _random_shortest_path(env, start, target, rng)
        else:
            mid = int(rng.integers(0, n))
            if mid in (start, target):
                continue
            path = _random_shortest_path(env, start, mid, rng)
            path += _random_shortest_path(env, mid, target, rng)[1:]
            if len(set(path)) != len(path):
                continue
        if not min_len <= len(path) - 1 <= max_len:
            continue
        heading = float(rng.integers(0, 4)) * math.pi / 2
        return Episode(episode_id or f"{env.seed}-{seed}", env, start, target, tuple(path),
                       tuple(speak(env, path, heading)), radius, heading)
    raise SamplingError(f"no {fidelity} path with {min_len}..{max_len} edges after {max_tries} tries")


# ---------------------------------------------------------------------------
# line-delimited JSON files


def env_records(env):
    yield {"record": "env", "schema": ENV_SCHEMA, "seed": env.seed, "layout": env.layout,
           "spacing": env.spacing, "k_heading": env.k_heading, "k_elevation": env.k_elevation,
           "feature_dim": env.feature_dim, "n_nodes": env.n_nodes}
    for i, c in enumerate(env.coords):
        yield {"record": "node", "id": i, "coord": [float(x) for x in c],
               "landmark": LANDMARKS[env.landmarks[i]]}
    for u, v in env.edges:
        yield {"record": "edge", "u": u, "v": v}


def episode_record(ep):
    return {"record": "episode", "id": ep.episode_id, "env_seed": ep.env.seed, "start": ep.start,
            "target": ep.target, "gt_path": list(ep.gt_path), "instruction": list(ep.instruction),
            "success_radius": ep.success_radius, "start_heading": ep.start_heading}


def dump_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_env(path, env):
    dump_jsonl(path, env_records(env))


def load_env(path):
    recs = read_jsonl(path)
    head = recs[0]
    if head.get("record") != "env" or head.get("schema") != ENV_SCHEMA:
        raise ValueError(f"{path}: not a {ENV_SCHEMA} file")
    nodes = sorted((r for r in recs if r["record"] == "node"), key=lambda r: r["id"])
    coords = np.array([r["coord"] for r in nodes], dtype=np.float64)
    landmarks = tuple(LANDMARKS.index(r["landmark"]) for r in nodes)
    edges = tuple(sorted((r["u"], r["v"]) for r in recs if r["record"] == "edge"))
    return EnvGraph(head["seed"], coords, edges, landmarks, layout=head["layout"],
                    spacing=head["spacing"], k_heading=head["k_heading"],
                    k_elevation=head["k_elevation"], feature_dim=head["feature_dim"])


def save_episodes(path, episodes):
    header = {"record": "episodes", "schema": EPISODE_SCHEMA, "count": len(episodes)}
    dump_jsonl(path, [header] + [episode_record(e) for e in episodes])


def load_episodes(path, envs):
    """``envs`` maps env seed to EnvGraph."""
    recs = read_jsonl(path)
    if recs[0].get("schema") != EPISODE_SCHEMA:
        raise ValueError(f"{path}: not a {EPISODE_SCHEMA} file")
    return [Episode(r["id"], envs[r["env_seed"]], r["start"], r["target"], tuple(r["gt_path"]),
                    tuple(r["instruction"]), r["success_radius"], r["start_heading"])
            for r in recs[1:]]
