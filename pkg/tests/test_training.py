import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from graph_metamers.errors import ConfigError
from graph_metamers.models import build_model, config_for_graph
from graph_metamers.training import AdamState, TrainConfig, accuracy, adam_step, pgd_features, train


def scalar_adam(w, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Elementwise reference written out with Python floats."""
    w = [float(x) for x in w]
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t in range(1, steps + 1):
        g = [gi + wd * wi for gi, wi in zip(grad_fn(w), w)]
        for i in range(len(w)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            w[i] -= lr * (m[i] / (1 - b1**t)) / ((v[i] / (1 - b2**t)) ** 0.5 + eps)
    return w


def test_adam_matches_scalar_reference():
    target = np.array([1.0, -2.0, 0.5])
    w = {"w": np.zeros((1, 3))}
    state = AdamState()
    for _ in range(25):
        adam_step(state, w, {"w": 2 * (w["w"] - target)}, lr=0.05, weight_decay=0.01)
    ref = scalar_adam([0, 0, 0], lambda x: [2 * (a - b) for a, b in zip(x, target)], 0.05, 25, wd=0.01)
    assert np.allclose(w["w"].ravel(), ref, atol=1e-12)


def test_adam_converges_on_quadratic():
    target = np.array([[0.3, -0.7]])
    w = {"w": np.array([[1.0, 1.0]])}
    state = AdamState()
    for _ in range(500):
        adam_step(state, w, {"w": 2 * (w["w"] - target)}, lr=0.05)
    assert np.abs(w["w"] - target).max() < 1e-3


def test_first_adam_step_is_signed_lr():
    w = {"w": np.array([[0.0, 0.0]])}
    adam_step(AdamState(), w, {"w": np.array([[3.0, -0.2]])}, lr=0.01)
    assert np.allclose(w["w"], [[-0.01, 0.01]], atol=1e-8)


def test_accuracy():
    assert accuracy(np.array([0, 1, 1]), np.array([0, 1, 0]), np.array([1, 1, 1], bool)) == pytest.approx(2 / 3)
    assert np.isnan(accuracy(np.array([0]), np.array([0]), np.array([False])))


def test_training_reduces_loss_and_is_deterministic(small_graph):
    cfg = config_for_graph(small_graph, arch="gcn", hidden_dim=8)
    tc = TrainConfig(epochs=60, lr=0.01)
    a = train(build_model(cfg), small_graph, tc)
    b = train(build_model(cfg), small_graph, tc)
    assert a.loss_curve[-1] < a.loss_curve[0]
    assert a.loss_curve == b.loss_curve
    assert len(a.log) == 60


def test_training_does_not_mutate_input_model(small_graph):
    m = build_model(config_for_graph(small_graph, arch="gcn", hidden_dim=8))
    before = {k: v.copy() for k, v in m.params.items()}
    train(m, small_graph, TrainConfig(epochs=5, lr=0.01))
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_zero_epochs_is_near_chance(sbm_graph):
    accs = [train(build_model(config_for_graph(sbm_graph, arch="gcn", seed=s)), sbm_graph,
                  TrainConfig(epochs=0)).test_acc for s in range(5)]
    assert abs(np.mean(accs) - 0.25) < 0.15


def test_zero_radius_adversarial_training_is_clean_training(small_graph):
    cfg = config_for_graph(small_graph, arch="sage", hidden_dim=8)
    clean = train(build_model(cfg), small_graph, TrainConfig(epochs=10, lr=0.01))
    adv = train(build_model(cfg), small_graph, TrainConfig(epochs=10, lr=0.01, adversarial=True, adv_epsilon=0.0))
    assert clean.loss_curve == adv.loss_curve


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 0.5), st.integers(1, 6), st.integers(0, 100))
def test_pgd_stays_in_ball_and_unit_box(small_graph, eps, steps, seed):
    m = build_model(config_for_graph(small_graph, arch="gcn", hidden_dim=8, seed=seed))
    x = pgd_features(m, small_graph, small_graph.labels, small_graph.train_mask, eps, steps, eps / 2)
    assert np.abs(x - small_graph.features).max() <= eps + 1e-12
    assert x.min() >= 0 and x.max() <= 1


def test_pgd_increases_loss(small_graph):
    from graph_metamers import tensor as T

    m = train(build_model(config_for_graph(small_graph, arch="gcn", hidden_dim=8)), small_graph,
              TrainConfig(epochs=50, lr=0.01)).model

    def loss(x):
        return T.log_softmax_nll(m.forward(small_graph, x).logits, small_graph.labels, small_graph.train_mask).item()

    x = pgd_features(m, small_graph, small_graph.labels, small_graph.train_mask, 0.3, 5, 0.1)
    assert loss(x) > loss(small_graph.features)


def test_write_log(tmp_path, small_graph):
    res = train(build_model(config_for_graph(small_graph, arch="gcn", hidden_dim=8)), small_graph,
                TrainConfig(epochs=3))
    res.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,train_acc,test_acc" and len(lines) == 4


def test_config_errors(small_graph):
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(adversarial=True, adv_steps=0)
    empty = small_graph.replace(train_mask=np.zeros(small_graph.n, bool))
    with pytest.raises(ConfigError):
        train(build_model(config_for_graph(small_graph)), empty, TrainConfig(epochs=1))
