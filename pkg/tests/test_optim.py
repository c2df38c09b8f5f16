import math

import numpy as np
import pytest

from cribriform.core import N_LABELS, Geometry, Label
from cribriform.network import Network, NetworkConfig, NumericalInstability, load_weights, save_weights
from cribriform.optim import (
    LabelUnrepresented,
    LossWeights,
    OptimizerState,
    TrainingSample,
    TrainRunConfig,
    compose_batch,
    dice_loss,
    make_samples,
    select_snapshots,
    sgd_step,
    specificity_loss,
    train,
    validation_metric,
)
from cribriform.preprocess import Patch
from oracles import central_difference, relative_error

EPS = 1e-6


def _one_hot(labels, n=N_LABELS):
    return np.eye(n)[labels]


def test_loss_weights_defaults():
    w = LossWeights().weights
    assert w[Label.G4_CRIBRIFORM] == 0.4 and all(v == 0.1 for i, v in enumerate(w) if i != 6)
    with pytest.raises(ValueError):
        LossWeights((0.5,) * 7)
    with pytest.raises(ValueError):
        LossWeights((-0.1, 0.3, 0.2, 0.2, 0.2, 0.1, 0.1))


def test_dice_perfect_prediction(rng):
    y = _one_hot(rng.integers(0, 7, (3, 8, 8)))
    y[0, 0, :7] = np.eye(7)  # every class present in every patch
    y[1, 0, :7] = np.eye(7)
    y[2, 0, :7] = np.eye(7)
    loss, _ = dice_loss(y, y, eps=EPS)
    assert abs(loss + 1.0) < 1e-4
    s = y.sum(axis=(1, 2))
    closed = -(LossWeights().array() * 2 * s / (2 * s + EPS)).sum(axis=1).mean()
    assert math.isclose(loss, closed, rel_tol=1e-12)


def test_specificity_perfect_prediction(rng):
    y = _one_hot(rng.integers(0, 7, (2, 8, 8)))
    y[:, 0, :7] = np.eye(7)
    assert abs(specificity_loss(y, y, eps=EPS)[0] + 1.0) < 1e-4


def test_dice_hand_case():
    y = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
    p = np.array([0.5, 0.5]).reshape(1, 1, 1, 2)
    loss, _ = dice_loss(y, p, weights=[0.5, 0.5], eps=EPS)
    assert math.isclose(loss, -0.5 * 1.0 / (1.5 + EPS), rel_tol=1e-12)
    assert round(loss, 4) == -0.3333


def test_dice_disjoint_class_contributes_zero():
    y = np.zeros((1, 2, 2, 2))
    y[0, 0, 0, 0] = 1
    y[0, 1, 1, 1] = 1
    p = np.zeros_like(y)
    p[0, 1, 1, 0] = 1
    p[0, 1, 1, 1] = 1
    loss, _ = dice_loss(y, p, weights=[0.5, 0.5], eps=EPS)
    assert math.isclose(loss, -0.5 * 2 / (2 + EPS), rel_tol=1e-12)


def test_specificity_degenerate_cases():
    y = _one_hot(np.zeros((1, 4, 4), int))
    assert abs(specificity_loss(y, np.ones_like(y), eps=EPS)[0]) < 1e-12
    zeros = np.zeros((1, 4, 4, 7))
    assert abs(specificity_loss(zeros, np.full_like(zeros, 0.5), eps=EPS)[0] + 1.0) < 1e-4


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(np.zeros((1, 2, 2, 7)), np.zeros((1, 2, 3, 7)))
    with pytest.raises(ValueError):
        specificity_loss(np.zeros((1, 2, 2, 7)), np.zeros((2, 2, 2, 7)))


@pytest.mark.parametrize("loss_fn", [dice_loss, specificity_loss])
def test_loss_gradient_float32(loss_fn):
    """Random y and predictions in (0, 1) stored as float32; central differences on float32 inputs."""
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        y = rng.uniform(0.01, 0.99, (2, 3, 3, 7)).astype(np.float32)
        p = rng.uniform(0.01, 0.99, (2, 3, 3, 7)).astype(np.float32)
        _, g = loss_fn(y, p)
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        num = central_difference(lambda: loss_fn(y, p)[0], p, idx, np.float32(1e-2))
        worst = max(worst, relative_error(g[idx], num, 1e-3))
    assert worst < 1e-3


@pytest.mark.parametrize("loss_fn", [dice_loss, specificity_loss])
def test_loss_bounds(loss_fn, rng):
    for _ in range(30):
        y = (rng.random((2, 4, 4, 7)) > 0.6).astype(float)
        p = rng.random((2, 4, 4, 7))
        loss, _ = loss_fn(y, p)
        assert -1.0 - 1e-9 <= loss <= 0.0


def test_dice_batch_permutation(rng):
    y = rng.random((5, 4, 4, 7))
    p = rng.random((5, 4, 4, 7))
    perm = rng.permutation(5)
    a, ga = dice_loss(y, p)
    b, gb = dice_loss(y[perm], p[perm])
    assert math.isclose(a, b, rel_tol=1e-12)
    np.testing.assert_allclose(ga[perm], gb, rtol=1e-12)


def test_validation_metric():
    assert validation_metric(-0.8, -0.9, 0.3) == 0.3 * -0.8 + 0.7 * -0.9
    assert math.isclose(validation_metric(-0.8, -0.9, 0.3), -0.87, abs_tol=1e-15)
    assert validation_metric(-0.8, -0.9, 1.0) == -0.8
    assert validation_metric(-0.8, -0.9, 0.0) == -0.9
    for a in np.linspace(0, 1, 11):
        assert validation_metric(-0.2, -0.6, a) == a * -0.2 + (1 - a) * -0.6
    with pytest.raises(ValueError):
        validation_metric(0, 0, 1.2)


# -- optimizer -----------------------------------------------------------------

def test_sgd_first_step():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, 0.25, -4.0])}
    before = p["w"].copy()
    st = OptimizerState()
    sgd_step(st, p, g)
    np.testing.assert_array_equal(st.velocity["w"], -0.01 * g["w"])
    np.testing.assert_array_equal(p["w"], before + -0.01 * g["w"])


def test_sgd_zero_gradient():
    p = {"w": np.array([1.0, 2.0])}
    sgd_step(OptimizerState(), p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])


def test_effective_lr():
    st = OptimizerState()
    assert abs(st.effective_lr(1000) - 0.006667) < 1e-6
    assert abs(st.effective_lr(1000) - 0.01 / 1.5) < 1e-15
    p = {"w": np.zeros(1)}
    for _ in range(3):
        sgd_step(st, p, {"w": np.ones(1)})
    assert st.iterations == 3
    # v1 = -lr0, v2 = mu*v1 - lr1, v3 = mu*v2 - lr2; p is their sum
    lr = [0.01 / (1 + 5e-4 * t) for t in range(3)]
    v1 = -lr[0]
    v2 = 0.99 * v1 - lr[1]
    v3 = 0.99 * v2 - lr[2]
    assert math.isclose(p["w"][0], v1 + v2 + v3, rel_tol=1e-12)


def test_sgd_convex_quadratic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))
    q = a @ a.T + np.eye(5)
    x = {"x": rng.normal(size=5)}
    st = OptimizerState(learning_rate=0.5 / np.linalg.eigvalsh(q).max(), decay=0.0, momentum=0.0)
    f = lambda v: 0.5 * v @ q @ v
    prev = f(x["x"])
    for _ in range(100):
        sgd_step(st, x, {"x": q @ x["x"]})
        cur = f(x["x"])
        assert cur <= prev
        prev = cur


def test_sgd_refuses_non_finite():
    p = {"w": np.ones(2)}
    st = OptimizerState()
    with pytest.raises(NumericalInstability):
        sgd_step(st, p, {"w": np.array([1.0, np.nan])})
    np.testing.assert_array_equal(p["w"], 1.0)
    assert st.iterations == 0
    with pytest.raises(ValueError):
        sgd_step(st, p, {"w": np.ones(3)})


# -- batching and training -----------------------------------------------------

GEOM = Geometry(16, 8, 4)
NET = NetworkConfig(widths=(4, 8), se_reduction=2, input_size=16, downsample=(2,))


def _sample(labels, rng, tag=""):
    """A 16x16 patch whose label map holds each label in ``labels`` as a 4x4 block."""
    lm = np.zeros((16, 16), np.uint8)
    for k, l in enumerate(labels):
        r, c = divmod(k, 4)
        lm[4 * r : 4 * r + 4, 4 * c : 4 * c + 4] = l
    px = rng.random((16, 16, 3)).astype(np.float32)
    px[lm == 6] *= 0.3
    return make_samples([Patch(f"b{tag}", (0, 0), px, 0.0)], [lm], GEOM)[0]


def _corpus(rng, n_per_label=2):
    return [_sample([l], rng, f"{l}_{i}") for l in range(7) for i in range(n_per_label)]


def test_labels_present_threshold(rng):
    s = _sample([0, 3], rng)
    assert s.labels_present == {0, 3}
    lm = np.zeros((16, 16), np.uint8)
    lm[0:2, 0:4] = 5  # half of one output cell
    lm[4:5, 4:8] = 4  # a quarter
    s = make_samples([Patch("b", (0, 0), np.zeros((16, 16, 3), np.float32), 0.0)], [lm], GEOM)[0]
    assert s.labels_present == {0, 5}


def _pure(label, rng):
    lm = np.full((16, 16), label, np.uint8)
    px = rng.random((16, 16, 3)).astype(np.float32)
    return make_samples([Patch(f"p{label}", (0, 0), px, 0.0)], [lm], GEOM)[0]


def test_compose_batch_one_per_label(rng):
    corpus = [_pure(l, rng) for l in range(7)]
    batch = compose_batch(corpus, np.random.default_rng(0))
    assert len(batch) == 7
    assert sorted(id(s) for s in batch) == sorted(id(s) for s in corpus)
    covered = set().union(*(s.labels_present for s in batch))
    assert covered == set(range(7))


def test_compose_batch_covers_all_labels(rng):
    corpus = _corpus(rng, 3) + [_sample([1, 2, 6], rng, "mix")]
    g = np.random.default_rng(5)
    for _ in range(50):
        batch = compose_batch(corpus, g)
        assert len(batch) == 7
        assert set().union(*(s.labels_present for s in batch)) == set(range(7))


def test_compose_batch_missing_label(rng):
    corpus = [s for s in _corpus(rng) if Label.G4_COMPLEX_FUSED not in s.labels_present]
    with pytest.raises(LabelUnrepresented) as err:
        compose_batch(corpus, np.random.default_rng(0))
    assert err.value.labels == (Label.G4_COMPLEX_FUSED,)
    assert "G4_COMPLEX_FUSED" in str(err.value)


def test_compose_batch_seeded(rng):
    corpus = _corpus(rng, 4)
    seq = lambda seed: [[id(s) for s in compose_batch(corpus, g)] for g in [np.random.default_rng(seed)] for _ in range(20)]
    assert seq(3) == seq(3)
    assert seq(3) != seq(4)


def test_train_run_config_validation():
    with pytest.raises(ValueError):
        TrainRunConfig(batch_size=8)
    with pytest.raises(ValueError):
        TrainRunConfig(alphas=(0.2, 1.5))


def test_train_zero_iterations(rng):
    corpus = _corpus(rng)
    net = Network(NET, seed=0)
    init = {k: v.copy() for k, v in net.state().items()}
    res = train(net, TrainRunConfig(iterations=0, snapshot_every=1), corpus, corpus[:7], GEOM)
    assert len(res.snapshots) == 1 and res.snapshots[0].iteration == 0
    assert set(res.selected.values()) == {0}
    chosen = load_weights(res.selected_weights(0.2)).state()
    for k, v in init.items():
        np.testing.assert_array_equal(chosen[k], v)


def test_train_snapshots_and_selection(rng):
    corpus = _corpus(rng)
    net = Network(NET, seed=0)
    run = TrainRunConfig(iterations=20, snapshot_every=5, seed=1)
    res = train(net, run, corpus, corpus, GEOM)
    assert [s.iteration for s in res.snapshots] == [0, 5, 10, 15, 20]
    for a in run.alphas:
        scores = [s.scores[a] for s in res.snapshots]
        assert res.selected[a] == int(np.argmin(scores))
        for s in res.snapshots:
            assert math.isclose(s.scores[a], a * s.dice + (1 - a) * s.specificity, rel_tol=1e-12)
    assert res.snapshots[-1].dice < res.snapshots[0].dice
    m = res.manifest()
    assert len(m["snapshots"]) == 5 and set(m["selected"]) == {str(a) for a in run.alphas}

    again = train(Network(NET, seed=0), run, corpus, corpus, GEOM)
    assert [s.weights for s in again.snapshots] == [s.weights for s in res.snapshots]


def test_select_snapshots_tie_earliest():
    from cribriform.optim import Snapshot

    snaps = [Snapshot(i, b"", 0, 0, {1.0: v}) for i, v in enumerate([-0.5, -0.7, -0.7, -0.6])]
    assert select_snapshots(snaps, [1.0]) == {1.0: 1}


def test_train_aborts_on_instability(rng):
    corpus = _corpus(rng)
    bad = corpus[0]
    corpus[0] = TrainingSample(bad.biopsy_id, bad.origin, np.full_like(bad.pixels, np.nan),
                               bad.label_map, bad.reference)
    net = Network(NET, seed=0)
    res = train(net, TrainRunConfig(iterations=50, snapshot_every=1, seed=0, augment=False),
                corpus, corpus[1:], GEOM)
    assert res.aborted
    last = res.snapshots[-1]
    restored = load_weights(last.weights).state()
    for k, v in net.state().items():
        np.testing.assert_array_equal(restored[k], v)
    assert all(np.isfinite(p).all() for p in net.parameters().values())


def test_train_requires_label_coverage(rng):
    corpus = [s for s in _corpus(rng) if 4 not in s.labels_present]
    with pytest.raises(LabelUnrepresented):
        train(Network(NET), TrainRunConfig(iterations=1), corpus, corpus, GEOM)
