import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajnav import tensor as T
from trajnav.encoders import (MaskedTokenHead, OrientationPanoramaEncoder, TextEncoder, mask_tokens,
                              mlm_loss, orientation_raw)
from trajnav.graph import ContractError
from trajnav.env import VocabError
from trajnav.tensor import ShapeError, Tensor
from trajnav.train import teacher_path_edges


@pytest.fixture
def ope(rng):
    return OrientationPanoramaEncoder(16, 2, 8, 2, rng)


def test_orientation_raw_values():
    assert np.allclose(orientation_raw(0.0, 0.0), [0, 1, 0, 1])
    assert np.allclose(orientation_raw(math.pi / 2, 0.0), [1, 0, 0, 1])


@settings(max_examples=40, deadline=None)
@given(st.floats(-20, 20), st.floats(-1.5, 1.5))
def test_orientation_periodic(phi, theta):
    enc = OrientationPanoramaEncoder(8, 2, 4, 1, np.random.default_rng(0))
    a = enc.encode_orientation([(phi, theta)]).data
    b = enc.encode_orientation([(phi + 2 * math.pi, theta)]).data
    assert np.allclose(a, b, atol=1e-5)


def test_orientation_raw_injective_on_grid():
    phis = np.linspace(-math.pi, math.pi, 36, endpoint=False)
    thetas = np.linspace(-math.pi / 2, math.pi / 2, 7)
    raws = {tuple(np.round(orientation_raw(p, t), 9)) for p in phis for t in thetas}
    assert len(raws) == len(phis) * len(thetas)


def test_panorama(ope, rng):
    orients = rng.uniform(-math.pi, math.pi, (5, 2))
    zero = ope.encode_panorama(np.zeros((5, 8)), orients).data
    expect = orientation_raw(orients[:, 0], orients[:, 1]) @ ope.w_pano.weight.data[8:]
    assert np.allclose(zero, expect, atol=1e-5)
    views = rng.standard_normal((5, 8))
    perm = rng.permutation(5)
    a = ope.encode_panorama(views, orients).data
    b = ope.encode_panorama(views[perm], orients[perm]).data
    assert a.shape == (5, 16) and np.allclose(a[perm], b)
    with pytest.raises(ShapeError):
        ope.encode_panorama(np.zeros((5, 9)), orients)


def test_ope_extract(ope, rng):
    views = rng.standard_normal((4, 8))
    view_orients = np.array([[0.0, 0], [math.pi / 2, 0], [-math.pi, 0], [-math.pi / 2, 0]])
    with T.no_grad():
        out = ope(np.array([[0.0, 0], [-math.pi, 0], [0.0, 0]]), views, view_orients).data
        assert out.shape == (3, 16)
        assert np.abs(out[0] - out[1]).max() > 1e-3
        assert np.allclose(out[0], out[2], atol=1e-6)
        one = ope(np.array([[0.3, 0.0]]), views[:1], view_orients[:1]).data
        assert np.array_equal(one, ope(np.array([[0.3, 0.0]]), views[:1], view_orients[:1]).data)
    with pytest.raises(ContractError):
        ope(np.zeros((0, 2)), views, view_orients)


def test_text_encoder(rng):
    enc = TextEncoder(20, 16, 2, 2, rng)
    ids = [5, 7, 0, 9, 0]
    with T.no_grad():
        out = enc(ids).data
        assert out.shape == (5, 16)
        enc.embed.data[0] += 3.0
        out2 = enc(ids).data
    real = [0, 1, 3]
    assert np.allclose(out[real], out2[real], atol=1e-6)
    with pytest.raises(VocabError):
        enc([3, 20])
    with pytest.raises(ContractError):
        enc([])


def test_mask_tokens(rng):
    ids = list(range(4, 24))
    masked, pos, targets = mask_tokens(ids, 0.15, rng)
    assert len(pos) == 3 and all(masked[p] == 1 for p in pos)
    assert list(targets) == [ids[p] for p in pos]
    assert len(mask_tokens(ids, 0.0, rng)[1]) == 0


def test_mlm_loss_at_init(model, vocab, episode, rng):
    ids = vocab.encode(episode.instruction)
    masked, pos, targets = mask_tokens(ids, 0.15, rng, vocab.MASK)
    with T.no_grad():
        edges = teacher_path_edges(model, episode)
        loss = mlm_loss(model.mlm, model.text, masked, pos, targets, edges).item()
        logits = model.mlm(model.text(masked), edges)
        manual = np.mean([T.cross_entropy(T.take(logits, [p]), np.array([t])).item()
                          for p, t in zip(pos, targets)])
        zero = mlm_loss(model.mlm, model.text, ids, np.zeros(0, dtype=int), np.zeros(0, dtype=int), edges)
    assert abs(loss - math.log(len(vocab))) <= 0.1 * math.log(len(vocab))
    assert loss == pytest.approx(manual, rel=1e-5)
    assert zero.item() == 0.0
    with pytest.raises(ContractError):
        model.mlm(model.text(ids), Tensor(np.zeros((0, model.cfg.d), dtype=np.float32)))


def test_outputs_finite_over_random_trials(rng):
    ope = OrientationPanoramaEncoder(8, 2, 6, 1, rng)
    text = TextEncoder(12, 8, 2, 1, rng)
    head = MaskedTokenHead(12, 8, 2, 1, rng)
    with T.no_grad():
        for _ in range(1000):
            k, q = int(rng.integers(1, 6)), int(rng.integers(1, 5))
            scale = 10.0 ** rng.uniform(-3, 3)
            e = ope(rng.uniform(-10, 10, (q, 2)), rng.standard_normal((k, 6)) * scale,
                    rng.uniform(-10, 10, (k, 2)))
            ids = rng.integers(0, 12, size=int(rng.integers(1, 8)))
            ids[0] = 3
            logits = head(text(ids), e)
            assert e.shape[0] == q
            assert np.isfinite(e.data).all() and np.isfinite(logits.data).all()
