import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajnav.env import (EnvGraph, GenerationError, LANDMARKS, SamplingError, SpeakerError, bearing,
                         direction_embedding, generate_environment, landmark_embedding, load_env,
                         load_episodes, observe, sample_episode, save_env, save_episodes, speak,
                         synth_view_feature, wrap_angle)


def bfs_hops(env, src):
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in env.neighbors(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def test_generation_is_deterministic():
    a, b = generate_environment(7), generate_environment(7)
    assert a.same_as(b)
    assert not a.same_as(generate_environment(8))


def test_grid_structure():
    env = generate_environment(0, n_nodes=25)
    assert env.n_nodes == 25
    degrees = [len(env.neighbors(i)) for i in range(25)]
    interior = [i for i in range(25) if 0 < i % 5 < 4 and 0 < i // 5 < 4]
    assert all(degrees[i] == 4 for i in interior)
    assert len({tuple(c) for c in env.coords}) == 25
    for u, v in env.edges:
        assert u in env.neighbors(v) and v in env.neighbors(u) and u != v
    assert len(bfs_hops(env, 0)) == 25


def test_random_geometric_connected_or_errors():
    env = generate_environment(3, n_nodes=30, layout="random-geometric")
    assert len(bfs_hops(env, 0)) == 30
    with pytest.raises(GenerationError):
        generate_environment(3, n_nodes=30, layout="random-geometric", radius=0.3, max_retries=5)


def test_observe_geometry():
    env = generate_environment(0)
    # node 6 sits at (2, 2); neighbour 7 lies along +x
    obs = observe(env, 6, 0.0)
    assert [nb.node for nb in obs.neighbors] == list(env.neighbors(6))
    by_id = {nb.node: nb for nb in obs.neighbors}
    assert by_id[7].heading == 0.0 and by_id[7].elevation == 0.0
    assert by_id[5].heading == pytest.approx(-math.pi)
    assert by_id[11].heading == pytest.approx(math.pi / 2)
    rotated = observe(env, 6, 0.4)
    for nb, nb2 in zip(obs.neighbors, rotated.neighbors):
        assert wrap_angle(nb2.heading - (nb.heading - 0.4)) == pytest.approx(0.0, abs=1e-12)
    assert obs.view_features.shape == (env.k_views, env.feature_dim)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 50), st.floats(-10, 10))
def test_relative_orientation_recovers_world_bearing(seed, heading):
    env = generate_environment(seed, n_nodes=16, layout="random-geometric", stair_rise=0.3)
    node = seed % env.n_nodes
    obs = observe(env, node, heading)
    for nb in obs.neighbors:
        world = bearing(env.coords[node], env.coords[nb.node])[0]
        assert abs(wrap_angle(heading + nb.heading - world)) < 1e-9
        assert -math.pi <= nb.heading < math.pi
        assert -math.pi / 2 <= nb.elevation <= math.pi / 2


def test_stairs_produce_elevation():
    env = generate_environment(0, stair_rise=0.5)
    obs = observe(env, 6, 0.0)
    assert any(abs(nb.elevation) > 0 for nb in obs.neighbors)


def test_view_features():
    env = generate_environment(1)
    f = synth_view_feature(env, 12, 0)
    assert np.array_equal(f, synth_view_feature(env, 12, 0))
    assert abs(np.linalg.norm(f) - 1) < 1e-12
    # corner node 0 looking along -x (view 6 of 12) sees nothing
    empty = synth_view_feature(env, 0, 6)
    d = direction_embedding(6, env.feature_dim)
    assert np.allclose(empty, d / np.linalg.norm(d))


def test_view_feature_depends_on_landmarks():
    coords = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    a = EnvGraph(0, coords, ((0, 1),), (0, 1))
    b = EnvGraph(0, coords, ((0, 1),), (0, 2))
    fa, fb = synth_view_feature(a, 0, 0), synth_view_feature(b, 0, 0)
    expect = direction_embedding(0, 64) + landmark_embedding(1, 64) / 2.0
    assert np.allclose(fa, expect / np.linalg.norm(expect))
    assert not np.allclose(fa, fb)


def test_speaker_template():
    env = generate_environment(2)
    path = [0, 1, 2]
    words = speak(env, path, start_heading=0.0)
    l1, l2 = LANDMARKS[env.landmarks[1]], LANDMARKS[env.landmarks[2]]
    assert words == ["go", "forward", "to", l1, ".", "go", "forward", "to", l2, ".", "stop", "at", l2]
    assert speak(env, path[::-1], start_heading=math.pi) != words
    assert speak(env, [0, 1, 6], 0.0)[5:7] == ["turn", "left"]
    assert speak(env, [0, 1, 6], math.pi / 2)[:2] == ["turn", "right"]
    assert speak(env, path, 0.0) == words
    with pytest.raises(SpeakerError):
        speak(env, [0])


def test_sample_episode_shortest_matches_bfs():
    env = generate_environment(4)
    for s in range(20):
        ep = sample_episode(env, s, min_len=2, max_len=6)
        assert len(ep.gt_path) - 1 == bfs_hops(env, ep.start)[ep.target]
        assert ep.instruction == tuple(speak(env, ep.gt_path, ep.start_heading))
        assert sample_episode(env, s, min_len=2, max_len=6) == ep


def test_waypoint_mode_can_exceed_shortest():
    n = 10
    coords = np.array([[math.cos(2 * math.pi * i / n) * 3, math.sin(2 * math.pi * i / n) * 3, 0] for i in range(n)])
    ring = EnvGraph(0, coords, tuple(sorted((i, (i + 1) % n) if i < (i + 1) % n else ((i + 1) % n, i)
                                      for i in range(n))), tuple(range(n)))
    longer = 0
    for s in range(30):
        ep = sample_episode(ring, s, min_len=2, max_len=9, fidelity="waypoint")
        longer += len(ep.gt_path) - 1 > bfs_hops(ring, ep.start)[ep.target]
        assert len(set(ep.gt_path)) == len(ep.gt_path)
    assert longer > 0


def test_sampling_error():
    env = generate_environment(0, n_nodes=4)
    with pytest.raises(SamplingError):
        sample_episode(env, 0, min_len=5, max_len=6, max_tries=50)


def test_round_trip_files(tmp_path):
    env = generate_environment(9, stair_rise=0.25)
    save_env(tmp_path / "env.jsonl", env)
    back = load_env(tmp_path / "env.jsonl")
    assert back.same_as(env)
    eps = [sample_episode(env, s) for s in range(3)]
    save_episodes(tmp_path / "eps.jsonl", eps)
    loaded = load_episodes(tmp_path / "eps.jsonl", {env.seed: back})
    for a, b in zip(eps, loaded):
        assert (a.episode_id, a.start, a.target, a.gt_path, a.instruction, a.success_radius, a.start_heading) == \
               (b.episode_id, b.start, b.target, b.gt_path, b.instruction, b.success_radius, b.start_heading)
