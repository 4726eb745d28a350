import numpy as np
import pytest

from effectstream import autodiff as ad
from effectstream.autodiff import Tensor
from effectstream.errors import GroupImbalanceError
from effectstream.model import (
    ObjectiveParts,
    RepresentationModel,
    TrainConfig,
    baseline_objective,
    build_model,
    elastic_net_penalty,
    factual_loss,
    train_baseline,
)
from effectstream.networks import DenseNetwork
from effectstream.transport import IPMConfig

FAST_IPM = IPMConfig(epsilon=0.05, relative_epsilon=True, max_iterations=100,
                     tolerance=1e-6, check_interval=5)


def tiny_model(seed=0, n_features=6, **kwargs):
    defaults = dict(rep_hidden=(8,), rep_dim=4, head_hidden=(8,), seed=seed)
    defaults.update(kwargs)
    return build_model(n_features, **defaults)


# --- representation ------------------------------------------------------

def test_duplicate_rows_get_identical_representations():
    model = tiny_model()
    x = np.random.default_rng(0).standard_normal((1, 6))
    reps = model.represent(np.vstack([x, x]))
    np.testing.assert_array_equal(reps[0], reps[1])


def test_representation_preactivations_bounded():
    model = tiny_model()
    x = np.random.default_rng(1).standard_normal((1000, 6)) * 50
    pre = model.rep_net.pre_activations(x)
    assert np.abs(pre).max() <= 1.0 + 1e-12


def test_represent_matches_layerwise_forward():
    model = tiny_model(seed=3)
    x = np.random.default_rng(2).standard_normal((5, 6))
    h = Tensor(x)
    h = ad.elu(ad.add(ad.matmul(h, model.rep_net.weights[0]), model.rep_net.biases[0]))
    h = ad.elu(ad.cosine_similarity(h, model.rep_net.weights[1]))
    np.testing.assert_allclose(model.represent(x), h.data, rtol=1e-12)


def test_scale_invariance_of_cosine_layer():
    # scaling the whole layer input never moves a cosine pre-activation;
    # scaling one column that a weight vector ignores preserves signs and
    # cross-unit pre-activation ratios
    x = np.random.default_rng(3).standard_normal((20, 6))
    single = DenseNetwork([6, 3], final_mode="cosine", rng=np.random.default_rng(4))
    pre = single.pre_activations(x)
    np.testing.assert_allclose(single.pre_activations(10.0 * x), pre, atol=1e-12)

    single.weights[0].data[5, :] = 0.0  # no mass on the scaled column
    scaled = x.copy()
    scaled[:, 5] *= 10.0
    a = single.pre_activations(x)
    b = single.pre_activations(scaled)
    assert np.all(np.sign(a) == np.sign(b))
    np.testing.assert_allclose(a[:, 0] * b[:, 1], b[:, 0] * a[:, 1], atol=1e-12)


# --- elastic net ----------------------------------------------------------

def test_elastic_net_zero_weights():
    model = tiny_model()
    for w in model.rep_net.weights:
        w.data[:] = 0.0
    assert elastic_net_penalty(model).item() == 0.0


def test_elastic_net_hand_computed():
    model = build_model(2, rep_hidden=(), rep_dim=1, head_hidden=(), cosine_output=False)
    model.rep_net.weights[0].data = np.array([[1.0], [-2.0]])
    assert elastic_net_penalty(model).item() == pytest.approx(8.0)  # 1+4 + 1+2


def test_elastic_net_excludes_heads_and_biases():
    model = tiny_model()
    before = elastic_net_penalty(model).item()
    for net in (model.head0, model.head1):
        for w in net.weights:
            w.data += 5.0
    for b in model.rep_net.biases:
        if b is not None:
            b.data += 7.0
    assert elastic_net_penalty(model).item() == pytest.approx(before)


def test_elastic_net_decreases_when_weight_shrinks():
    model = tiny_model(seed=9)
    before = elastic_net_penalty(model).item()
    model.rep_net.weights[0].data *= 0.5
    assert elastic_net_penalty(model).item() < before


# --- outcome heads --------------------------------------------------------

def test_heads_are_independent():
    model = tiny_model(seed=5)
    r = model.represent(np.random.default_rng(0).standard_normal((4, 6)))
    y0 = model.predict_outcome(r, np.zeros(4))
    y1 = model.predict_outcome(r, np.ones(4))
    assert not np.allclose(y0, y1)


def test_constant_heads_give_bias():
    model = tiny_model()
    for net, bias in ((model.head0, 2.5), (model.head1, -1.0)):
        for w in net.weights:
            w.data[:] = 0.0
        for b in net.biases:
            b.data[:] = 0.0
        net.biases[-1].data[:] = bias
    r = np.random.default_rng(1).standard_normal((6, 4))
    np.testing.assert_allclose(model.predict_outcome(r, np.zeros(6)), 2.5)
    np.testing.assert_allclose(model.predict_outcome(r, np.ones(6)), -1.0)
    ite, ate = model.estimate_effects(np.random.default_rng(2).standard_normal((5, 6)))
    np.testing.assert_allclose(ite, -3.5)
    assert ate == pytest.approx(-3.5)


def test_predict_outcome_matches_per_head_forward():
    model = tiny_model(seed=8)
    r = np.random.default_rng(3).standard_normal((7, 4))
    t = np.array([0, 1, 1, 0, 1, 0, 0], dtype=float)
    pred = model.predict_outcome(r, t)
    for i in range(7):
        head = model.head1 if t[i] else model.head0
        assert pred[i] == pytest.approx(head.predict(r[i:i + 1])[0, 0], rel=1e-12)


def test_predict_outcome_rejects_nonbinary():
    model = tiny_model()
    with pytest.raises(ValueError):
        model.predict_outcome(np.zeros((2, 4)), np.array([0.0, 2.0]))


def test_identical_heads_zero_effect():
    model = tiny_model(seed=6)
    model.head1 = model.head0.copy()
    ite, ate = model.estimate_effects(np.random.default_rng(0).standard_normal((10, 6)))
    np.testing.assert_array_equal(ite, np.zeros(10))
    assert ate == 0.0


def test_ate_is_mean_of_ite():
    model = tiny_model(seed=7)
    ite, ate = model.estimate_effects(np.random.default_rng(1).standard_normal((13, 6)))
    assert ate == pytest.approx(ite.mean(), rel=1e-15)


# --- factual loss ---------------------------------------------------------

def test_factual_loss_values():
    y = np.array([1.0, 0.0])
    assert factual_loss(Tensor(y.copy()), y).item() == 0.0
    assert factual_loss(Tensor(y + 1.0), y).item() == pytest.approx(1.0)
    assert factual_loss(Tensor(np.array([0.0, 2.0])), y).item() == pytest.approx(2.5)
    with pytest.raises(ValueError):
        factual_loss(Tensor(np.zeros(0)), np.zeros(0))


# --- composite objective ---------------------------------------------------

def _batch(seed=0, n=12, p=6):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    t = (rng.uniform(size=n) < 0.5).astype(float)
    t[0], t[1] = 0.0, 1.0  # both arms present
    y = rng.standard_normal(n)
    return X, t, y


def test_objective_reduces_to_factual_when_weights_zero():
    model = tiny_model(alpha=0.0, lam=0.0)
    X, t, y = _batch()
    parts = baseline_objective(model, X, t, y, FAST_IPM)
    reps = model.represent(X)
    expected = np.mean((model.predict_outcome(reps, t) - y) ** 2)
    assert parts.total.item() == pytest.approx(expected, rel=1e-12)


def test_objective_decomposition_machine_precision():
    model = tiny_model(alpha=0.7, lam=0.01)
    X, t, y = _batch(seed=4)
    parts = baseline_objective(model, X, t, y, FAST_IPM)
    recomposed = parts.factual + model.alpha * parts.balance + model.lam * parts.penalty
    assert parts.total.item() == pytest.approx(recomposed, abs=1e-12)


def test_objective_linear_in_lambda():
    X, t, y = _batch(seed=5)
    m1 = tiny_model(alpha=0.3, lam=0.1, seed=2)
    m2 = tiny_model(alpha=0.3, lam=0.5, seed=2)
    p1 = baseline_objective(m1, X, t, y, FAST_IPM)
    p2 = baseline_objective(m2, X, t, y, FAST_IPM)
    assert p2.total.item() - p1.total.item() == pytest.approx(0.4 * p1.penalty, rel=1e-9)


def test_objective_single_group_rejected():
    model = tiny_model()
    X, _, y = _batch()
    with pytest.raises(GroupImbalanceError):
        baseline_objective(model, X, np.ones(12), y, FAST_IPM)


def test_objective_gradient_matches_finite_differences():
    model = tiny_model(alpha=0.5, lam=0.01, seed=1)
    X, t, y = _batch(seed=6, n=10)
    ipm = IPMConfig(epsilon=0.05, relative_epsilon=False, max_iterations=500,
                    tolerance=1e-9, check_interval=1)

    def loss():
        return baseline_objective(model, X, t, y, ipm).total

    err = ad.relative_gradient_error(loss, model.named_parameters())
    assert err < 1e-6


# --- head routing firewall --------------------------------------------------

def test_perturbing_one_head_leaves_other_arm_unchanged():
    model = tiny_model(seed=11)
    r = np.random.default_rng(4).standard_normal((8, 4))
    t = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=float)
    before = model.predict_outcome(r, t)
    for w in model.head1.weights:
        w.data += 3.0
    after = model.predict_outcome(r, t)
    np.testing.assert_array_equal(before[:4], after[:4])
    assert not np.allclose(before[4:], after[4:])


# --- training ---------------------------------------------------------------

def _toy_linear_problem(n=500, seed=0):
    # constant effect, linear baseline response, no outcome noise
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 4))
    t = (rng.uniform(size=n) < 0.5).astype(float)
    g = 0.5 * X[:, 0] - 0.25 * X[:, 1] + 0.1
    y = 0.8 * t + g
    return X, t, y


def test_train_baseline_fits_linear_toy():
    X, t, y = _toy_linear_problem()
    model = build_model(4, rep_hidden=(16,), rep_dim=8, head_hidden=(8,),
                        alpha=0.1, lam=1e-5, seed=0)
    cfg = TrainConfig(epochs=200, batch_size=128, learning_rate=3e-3,
                      patience=200, ipm=FAST_IPM)
    model, hist = train_baseline(X[:400], t[:400], y[:400],
                                 (X[400:], t[400:], y[400:]), cfg, model, seed=0)
    assert min(hist.val_losses) < 0.05
    assert hist.train_losses[-1] <= hist.train_losses[0]


def test_train_baseline_deterministic():
    X, t, y = _toy_linear_problem(n=120, seed=3)
    cfg = TrainConfig(epochs=5, batch_size=64, learning_rate=1e-3,
                      patience=10, ipm=FAST_IPM)

    def run():
        model = build_model(4, rep_hidden=(8,), rep_dim=4, head_hidden=(4,), seed=1)
        model, _ = train_baseline(X[:90], t[:90], y[:90],
                                  (X[90:], t[90:], y[90:]), cfg, model, seed=5)
        return model.state_arrays()

    s1, s2 = run(), run()
    for k in s1:
        np.testing.assert_array_equal(s1[k], s2[k])


def test_train_baseline_requires_both_arms():
    X, t, y = _toy_linear_problem(n=60, seed=4)
    cfg = TrainConfig(epochs=2, batch_size=32, ipm=FAST_IPM)
    model = build_model(4, rep_hidden=(4,), rep_dim=2, head_hidden=(2,), seed=0)
    with pytest.raises(GroupImbalanceError):
        train_baseline(X, np.zeros(60), y, (X, t, y), cfg, model, seed=0)
