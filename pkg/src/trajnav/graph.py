"""Incrementally built directed exploration graph, fidelity stack and routing."""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

STOP = "STOP"


class ContractError(ValueError):
    pass


class IntegrityError(RuntimeError):
    pass


class RoutingError(RuntimeError):
    pass


@dataclass
class NodeInfo:
    coord: np.ndarray
    visited: bool = False
    path_embedding: object = None
    fidelity: tuple = None
    stop_embedding: object = None


@dataclass
class EdgeInfo:
    feature: object
    length: float


class ExploreGraph:
    """The agent's map: directed edges carry features extracted at their tail."""

    def __init__(self, start, coord):
        self.start = start
        self.current = start
        self.nodes = {start: NodeInfo(np.asarray(coord, dtype=np.float64), visited=True, fidelity=(start,))}
        self.edges = {}
        self.stack = [start]

    def update(self, obs, edge_features):
        """Insert the current node's outgoing edges; return newly observed frontiers."""
        if obs.node != self.current:
            raise ContractError(f"observation at {obs.node} but agent is at {self.current}")
        if len(edge_features) != len(obs.neighbors):
            raise ContractError(f"{len(edge_features)} edge features for {len(obs.neighbors)} neighbours")
        fresh = []
        for nb, coord, feat in zip(obs.neighbors, obs.neighbor_coords, edge_features):
            info = self.nodes.get(nb.node)
            if info is None:
                info = self.nodes[nb.node] = NodeInfo(np.asarray(coord, dtype=np.float64))
            self.edges[(self.current, nb.node)] = EdgeInfo(feat, nb.distance)
            if not info.visited and info.path_embedding is None:
                info.fidelity = tuple(self.stack) + (nb.node,)
                fresh.append(nb.node)
        return fresh

    def adjacent(self, u, v):
        return (u, v) in self.edges or (v, u) in self.edges

    def move(self, to):
        """Step one hop; marks ``to`` visited and advances the fidelity stack.
        Returns the new stack."""
        self.stack = advance_stack(self.stack, to, self)
        self.current = to
        self.nodes[to].visited = True
        return self.stack

    def set_embedding(self, node, emb):
        self.nodes[node].path_embedding = emb

    def set_stop_embedding(self, emb):
        self.nodes[self.current].stop_embedding = emb

    def frontiers(self):
        return [n for n, info in self.nodes.items() if not info.visited]

    def candidates(self):
        out = []
        for n in self.frontiers():
            emb = self.nodes[n].path_embedding
            if emb is None:
                raise IntegrityError(f"frontier {n} has no path embedding")
            out.append((n, emb))
        stop = self.nodes[self.current].stop_embedding
        if stop is None:
            raise IntegrityError(f"no stop embedding stored on current node {self.current}")
        out.append((STOP, stop))
        return out

    def fidelity_edges(self, frontier):
        info = self.nodes.get(frontier)
        if info is None or info.fidelity is None:
            raise IntegrityError(f"node {frontier} has no recorded fidelity path")
        return path_edges(self, info.fidelity)

    def route(self, src, dst, visited_only=False):
        return route(self, src, dst, visited_only)


def path_edges(g, nodes):
    feats = []
    for u, v in zip(nodes, nodes[1:]):
        e = g.edges.get((u, v))
        if e is None:
            raise IntegrityError(f"missing edge {u}->{v} on recorded path")
        feats.append(e.feature)
    return feats


def advance_stack(stack, moved_to, g=None):
    """Push a new node, or pop back to it if it is already on the stack."""
    if moved_to == STOP:
        raise ContractError("the stop sentinel cannot enter the stack")
    if g is not None and not g.adjacent(stack[-1], moved_to):
        raise ContractError(f"{moved_to} is not adjacent to stack top {stack[-1]}")
    if moved_to in stack:
        return stack[: stack.index(moved_to) + 1]
    return stack + [moved_to]


def _symmetric_adjacency(g, visited_only, src, dst):
    adj = {}
    for (u, v), e in g.edges.items():
        adj.setdefault(u, {})[v] = e.length
        adj.setdefault(v, {})[u] = e.length
    if visited_only:
        ok = {n for n, info in g.nodes.items() if info.visited} | {src, dst}
        adj = {u: {v: w for v, w in nb.items() if v in ok} for u, nb in adj.items() if u in ok}
    return adj


def route(g, src, dst, visited_only=False):
    """Shortest metric path over g's edges (direction ignored).

    Ties within 1e-9 go to the lexicographically smallest node sequence. With
    ``visited_only`` every intermediate node must already be visited.
    """
    if dst == STOP or src == STOP:
        raise ContractError("cannot route to the stop sentinel")
    if src not in g.nodes or dst not in g.nodes:
        raise RoutingError(f"unknown endpoint {src} or {dst}")
    if src == dst:
        return [src]
    adj = _symmetric_adjacency(g, visited_only, src, dst)
    best = {src: (0.0, (src,))}
    heap = [(0.0, (src,))]
    done = set()
    while heap:
        d, path = heapq.heappop(heap)
        u = path[-1]
        if u in done or best[u][1] != path:
            continue
        done.add(u)
        if u == dst:
            return list(path)
        if visited_only and u != src and not g.nodes[u].visited:
            continue
        for v, w in adj.get(u, {}).items():
            if v in done:
                continue
            nd, np_ = d + w, path + (v,)
            cur = best.get(v)
            if cur is None or nd < cur[0] - 1e-9 or (abs(nd - cur[0]) <= 1e-9 and np_ < cur[1]):
                best[v] = (nd, np_)
                heapq.heappush(heap, (nd, np_))
    raise RoutingError(f"{dst} unreachable from {src}")

