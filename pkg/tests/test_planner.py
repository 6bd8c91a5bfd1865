import numpy as np
import pytest

from trajnav import tensor as T
from trajnav.env import generate_environment, sample_episode
from trajnav.graph import STOP, ContractError, route
from trajnav.planner import NavigationRun, NavModel, build_merged_mask
from trajnav.tensor import Tensor
from test_graph import remove_detours


def rand_tokens(rng, n, d):
    return Tensor(rng.standard_normal((n, d)).astype(np.float32))


def test_merged_mask_examples(rng):
    m = build_merged_mask(3, [1, 1, 1])
    for r in (3, 4, 5):
        assert set(np.flatnonzero(m[r])) == {0, 1, 2, r}
    assert np.array_equal(build_merged_mask(1, [2]), np.tril(np.ones((3, 3), dtype=bool)))
    for _ in range(50):
        p = int(rng.integers(1, 6))
        lens = [int(x) for x in rng.integers(1, 4, size=rng.integers(1, 5))]
        m = build_merged_mask(p, lens)
        assert np.array_equal(m[:p, :p], np.tril(np.ones((p, p), dtype=bool)))
        assert not m[:p, p:].any()
        bounds = np.cumsum([p] + lens)
        for a, b in zip(bounds, bounds[1:]):
            assert m[a:b, :p].all()
            assert not m[a:b, p:a].any() and not m[a:b, b:].any()
    with pytest.raises(ContractError):
        build_merged_mask(2, [1, 0])


def fresh_cache(model, rng, text_len=7):
    text = rand_tokens(rng, text_len, model.cfg.d)
    return model.mam.new_cache(text), text


def test_batch_matches_naive_and_degenerate_cases(model, rng):
    mam, d = model.mam, model.cfg.d
    with T.no_grad():
        cache, _ = fresh_cache(model, rng)
        prefix = [rand_tokens(rng, 1, d) for _ in range(4)]
        for tok in prefix:
            mam.commit(cache, tok)
        suffixes = [rand_tokens(rng, 1, d) for _ in range(3)] + [mam.stop_token, rand_tokens(rng, 2, d)]
        batch = mam.embed_batch(cache, suffixes).data
        for i, s in enumerate(suffixes):
            rows = [T.take(s, slice(j, j + 1)) for j in range(s.shape[0])]
            naive = mam.embed_path_naive(prefix + rows, cache.memory_kv).data[0]
            assert np.abs(batch[i] - naive).max() <= 1e-5
        dup = mam.embed_batch(cache, [suffixes[0], suffixes[0]]).data
        assert np.array_equal(dup[0], dup[1])
        single = mam.embed_batch(cache, [suffixes[1]]).data[0]
        assert np.abs(single - batch[1]).max() <= 1e-6
        assert cache.committed_len == 5


def test_commit_one_by_one_equals_bulk(model, rng):
    mam, d = model.mam, model.cfg.d
    with T.no_grad():
        text = rand_tokens(rng, 5, d)
        toks = rand_tokens(rng, 4, d)
        a = mam.new_cache(text)
        for i in range(4):
            before = a.committed_len
            mam.commit(a, T.take(toks, slice(i, i + 1)))
            assert a.committed_len == before + 1
        b = mam.new_cache(text)
        mam.commit_many(b, toks)
        for ka, kb in zip(a.keys, b.keys):
            assert np.abs(ka.data - kb.data).max() <= 1e-5
        probe = [rand_tokens(rng, 1, d)]
        assert np.abs(mam.embed_batch(a, probe).data - mam.embed_batch(b, probe).data).max() <= 1e-5


def test_truncate(model, rng):
    mam, d = model.mam, model.cfg.d
    with T.no_grad():
        cache, text = fresh_cache(model, rng)
        toks = [rand_tokens(rng, 1, d) for _ in range(5)]
        for t in toks:
            mam.commit(cache, t)
        keys_before = [k.data.copy() for k in cache.keys]
        mam.truncate(cache, cache.committed_len)
        assert all(np.array_equal(k.data, kb) for k, kb in zip(cache.keys, keys_before))
        mam.truncate(cache, 3)
        rebuilt = mam.new_cache(text)
        for t in toks[:2]:
            mam.commit(rebuilt, t)
        probe = [rand_tokens(rng, 1, d), mam.stop_token]
        assert np.abs(mam.embed_batch(cache, probe).data - mam.embed_batch(rebuilt, probe).data).max() <= 1e-5
        mam.truncate(cache, 1)
        assert cache.committed_len == 1 and cache.keys[0].shape[0] == 1
        with pytest.raises(ContractError):
            mam.truncate(cache, 2)
        with pytest.raises(ContractError):
            mam.truncate(cache, 0)


def test_cache_width_mismatch(model, rng):
    from trajnav.nn import CacheError
    cache, _ = fresh_cache(model, rng)
    with pytest.raises(CacheError):
        model.mam.commit(cache, rand_tokens(rng, 1, model.cfg.d + 2))


def test_ccm_properties(model, rng):
    d = model.cfg.d
    with T.no_grad():
        s, p = model.ccm(rand_tokens(rng, 1, d))
        assert p.data.tolist() == [1.0]
        x = rng.standard_normal((6, d)).astype(np.float32)
        x[4] = x[1]
        s, p = model.ccm(Tensor(x))
        assert abs(p.data.sum() - 1) < 1e-6
        assert int(np.argmax(p.data)) == int(np.argmax(s.data))
        assert abs(s.data[4] - s.data[1]) < 1e-6
        perm = rng.permutation(6)
        s2, _ = model.ccm(Tensor(x[perm]))
        assert np.abs(s2.data - s.data[perm]).max() < 1e-5
    with pytest.raises(ContractError):
        model.ccm(Tensor(np.zeros((0, d), dtype=np.float32)))


def test_independent_ccm_mode(rng):
    from trajnav.config import ModelConfig
    m = NavModel(ModelConfig(d=16, heads=2, ccm_mode="independent"))
    assert m.ccm.layers == []
    x = Tensor(rng.standard_normal((3, 16)).astype(np.float32))
    s_all, _ = m.ccm(x)
    s_one, _ = m.ccm(T.take(x, slice(1, 2)))
    assert abs(s_all.data[1] - s_one.data[0]) < 1e-6


def check_step_against_naive(run):
    """Compare every embedding stored this step against from-scratch recomputation."""
    g, mam = run.graph, run.model.mam
    memory = mam.memory(run.model.text(run.episode_ids))
    worst = 0.0
    for n, info in g.nodes.items():
        if info.visited or info.fidelity[:-1] != tuple(g.stack):
            continue
        naive = mam.embed_path_naive(g.fidelity_edges(n), memory).data
        worst = max(worst, float(np.abs(naive - info.path_embedding.data).max()))
    stack_edges = [g.edges[(u, v)].feature for u, v in zip(g.stack, g.stack[1:])]
    naive_stop = mam.embed_path_naive(stack_edges, memory, stop=True).data
    worst = max(worst, float(np.abs(naive_stop - g.nodes[g.current].stop_embedding.data).max()))
    return worst


def test_navigation_equivalence_random_states(model, vocab, rng):
    env = generate_environment(21)
    with T.no_grad():
        for k in range(5):
            ep = sample_episode(env, k, min_len=3, max_len=6)
            run = NavigationRun(model, ep, step_budget=100, vocab=vocab)
            run.episode_ids = vocab.encode(ep.instruction)
            for _ in range(int(rng.integers(1, 8))):
                view = run.prepare()
                assert run.cache.committed_len == len(run.graph.stack)
                assert check_step_against_naive(run) <= 1e-5
                frontier = [i for i, c in enumerate(view.candidates) if c != STOP]
                if not frontier:
                    break
                run.act(int(rng.choice(frontier)))


def test_step_semantics(model, vocab, rng):
    env = generate_environment(2)
    ep = sample_episode(env, 4, min_len=3, max_len=5)
    with T.no_grad():
        run = NavigationRun(model, ep, vocab=vocab)
        view = run.prepare()
        run.act(view.candidates.index(STOP))
        assert run.done and run.trajectory_length == 0.0 and run.walk == [ep.start]

        run = NavigationRun(model, ep, step_budget=50, vocab=vocab)
        view = run.prepare()
        first = view.candidates[0]
        run.act(0)
        assert run.records[-1]["route"] == [ep.start, first]
        assert run.trajectory_length == pytest.approx(env.edge_length(ep.start, first))
        # walk far, then pick the frontier furthest away
        for _ in range(4):
            view = run.prepare()
            run.act(0)
        view = run.prepare()
        remote = max((i for i, c in enumerate(view.candidates) if c != STOP),
                     key=lambda i: len(route(run.graph, run.current, view.candidates[i], True)))
        expect = route(run.graph, run.current, view.candidates[remote], visited_only=True)
        run.act(remote)
        assert run.records[-1]["route"] == expect
        assert run.graph.stack == remove_detours(run.walk)
        assert run.cache.committed_len == len(run.graph.stack)


def test_step_budget_forces_stop(model, vocab):
    env = generate_environment(2)
    ep = sample_episode(env, 4, min_len=3, max_len=5)
    with T.no_grad():
        run = NavigationRun(model, ep, step_budget=2, vocab=vocab)
        while not run.done:
            view = run.prepare()
            run.act(0 if view.candidates[0] != STOP else len(view.candidates) - 1)
    assert run.truncated and run.steps == 2 and run.records[-1]["truncated"]
    with pytest.raises(ContractError):
        run.prepare()


def test_candidate_order_stable(model, vocab):
    env = generate_environment(3)
    ep = sample_episode(env, 1)
    outs = []
    for _ in range(2):
        with T.no_grad():
            run = NavigationRun(model, ep, vocab=vocab)
            rec = []
            for _ in range(3):
                view = run.prepare()
                rec.append((view.candidates, view.scores.data.tolist()))
                run.act(0)
        outs.append(rec)
    assert outs[0] == outs[1]
