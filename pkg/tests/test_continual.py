import numpy as np
import pytest

from effectstream import autodiff as ad
from effectstream.autodiff import Tensor
from effectstream.continual import (
    ContinualHyper,
    build_transform,
    continual_objective,
    distill_loss,
    global_factual_loss,
    train_continual,
    transform_loss,
    update_memory,
)
from effectstream.errors import EmptyMemoryError
from effectstream.memory import MemorySet, build_memory, memory_from_representations
from effectstream.model import TrainConfig, baseline_objective, build_model
from effectstream.networks import DenseNetwork
from effectstream.optim import AdamState, adam_update
from effectstream.transport import IPMConfig

FAST_IPM = IPMConfig(epsilon=0.05, relative_epsilon=True, max_iterations=100,
                     tolerance=1e-6, check_interval=5)


def tiny_model(seed=0, n_features=6, **kwargs):
    defaults = dict(rep_hidden=(8,), rep_dim=4, head_hidden=(8,), seed=seed)
    defaults.update(kwargs)
    return build_model(n_features, **defaults)


def identity_transform(dim):
    phi = DenseNetwork([dim, dim], final_mode="affine", activation="elu")
    phi.weights[0].data = np.eye(dim)
    phi.biases[0].data = np.zeros(dim)
    return phi


def _batch(seed=0, n=12, p=6):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    t = (rng.uniform(size=n) < 0.5).astype(float)
    t[0], t[1] = 0.0, 1.0
    y = rng.standard_normal(n)
    return X, t, y


# --- distillation -----------------------------------------------------------

def test_distill_zero_for_copied_model():
    old = tiny_model(seed=1)
    X, _, _ = _batch()
    assert distill_loss(old, old.copy(), X).item() == pytest.approx(0.0, abs=1e-15)


def test_distill_antipodal_representations():
    a = np.random.default_rng(0).standard_normal((5, 4))
    loss = ad.tmean(Tensor(1.0) - ad.row_cosine(Tensor(a), Tensor(-a)))
    assert loss.item() == pytest.approx(2.0)


def test_unit_vector_distance_cosine_identity():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((50, 6))
    b = rng.standard_normal((50, 6))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    cos = (a * b).sum(axis=1)
    np.testing.assert_allclose(((a - b) ** 2).sum(axis=1), 2 * (1 - cos), atol=1e-12)


def test_distill_never_touches_teacher_gradients():
    old, new = tiny_model(seed=2), tiny_model(seed=3)
    X, _, _ = _batch(seed=4)
    loss = distill_loss(old, new, X)
    ad.zero_grads(old.parameters() + new.parameters())
    ad.backward(loss)
    assert all(p.grad is None for p in old.parameters())
    assert any(p.grad is not None and p.grad.any() for p in new.parameters())


# --- transformation -----------------------------------------------------------

def test_transform_identity_on_same_model_is_zero():
    model = tiny_model(seed=5)
    X, _, _ = _batch(seed=6)
    phi = identity_transform(model.rep_dim)
    assert transform_loss(phi, model, model.copy(), X).item() == pytest.approx(0.0, abs=1e-15)


def test_transform_orthogonal_outputs_give_one():
    # both representation maps are linear; phi = identity; new space is the
    # old space rotated by 90 degrees, so every pair is orthogonal
    old = tiny_model(seed=0, n_features=2, rep_hidden=(), rep_dim=2,
                     head_hidden=(), cosine_output=False)
    old.rep_net.weights[0].data = np.eye(2)
    old.rep_net.biases[0].data = np.zeros(2)
    new = old.copy()
    new.rep_net.weights[0].data = np.array([[0.0, -1.0], [1.0, 0.0]])
    X = np.random.default_rng(3).standard_normal((20, 2))
    phi = identity_transform(2)
    assert transform_loss(phi, old, new, X).item() == pytest.approx(1.0, abs=1e-12)


def test_transform_trains_down_monotonically():
    old, new = tiny_model(seed=7), tiny_model(seed=8)
    X, _, _ = _batch(seed=9, n=40)
    phi = build_transform(old.rep_dim, new.rep_dim, hidden=(16,), seed=1)
    params = phi.named_parameters("phi.")
    opt = AdamState(learning_rate=5e-4)
    losses = []
    for _ in range(500):
        loss = transform_loss(phi, old, new, X, stop_gradient_new=True)
        losses.append(loss.item())
        ad.zero_grads(p for _, p in params)
        ad.backward(loss)
        grads, _ = ad.grad_report(params)
        adam_update(params, grads, opt)
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops / (len(losses) - 1) >= 0.95
    assert losses[-1] < losses[0]


# --- global factual loss -------------------------------------------------------

def _memory_for(model, seed=0, n=20, capacity=10):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 6))
    y = rng.standard_normal(n)
    t = (rng.uniform(size=n) < 0.5).astype(float)
    t[:2] = [0.0, 1.0]
    return build_memory(model, X, y, t, capacity=capacity)


def test_global_factual_loss_zero_for_perfect_heads():
    model = tiny_model(seed=10)
    phi = identity_transform(model.rep_dim)
    mem = _memory_for(model, seed=11)
    mem.y = model.predict_outcome(phi.predict(mem.representations), mem.t)
    X, t, _ = _batch(seed=12)
    y = model.predict_outcome(model.represent(X), t)
    loss = global_factual_loss(model, phi, mem, X, t, y)
    assert loss.item() == pytest.approx(0.0, abs=1e-20)


def test_global_factual_loss_single_exemplar():
    model = tiny_model(seed=13)
    phi = identity_transform(model.rep_dim)
    rng = np.random.default_rng(14)
    rep = rng.standard_normal((1, model.rep_dim))
    pred = model.predict_outcome(phi.predict(rep), np.array([1.0]))
    mem = MemorySet(
        representations=rep, y=pred - 2.0, t=np.array([1.0]),
        capacity=4, source_tags=np.zeros(1, dtype=np.int64),
    )
    X, t, _ = _batch(seed=15)
    y = model.predict_outcome(model.represent(X), t)  # new part perfect
    loss = global_factual_loss(model, phi, mem, X, t, y)
    assert loss.item() == pytest.approx(4.0, rel=1e-12)


def test_global_factual_loss_decomposes():
    model = tiny_model(seed=16)
    phi = identity_transform(model.rep_dim)
    mem = _memory_for(model, seed=17)
    X, t, y = _batch(seed=18)
    total = global_factual_loss(model, phi, mem, X, t, y).item()
    mem_part = np.mean(
        (model.predict_outcome(phi.predict(mem.representations), mem.t) - mem.y) ** 2
    )
    new_part = np.mean((model.predict_outcome(model.represent(X), t) - y) ** 2)
    assert total == pytest.approx(mem_part + new_part, rel=1e-12)


def test_global_factual_loss_requires_memory():
    model = tiny_model()
    X, t, y = _batch()
    with pytest.raises(EmptyMemoryError):
        global_factual_loss(model, identity_transform(model.rep_dim), None, X, t, y)


# --- composite objective ---------------------------------------------------

def test_objective_weights_zero_reduces_to_global_loss():
    prev, model = tiny_model(seed=19), tiny_model(seed=20)
    phi = build_transform(prev.rep_dim, model.rep_dim, hidden=(8,), seed=2)
    mem = _memory_for(prev, seed=21)
    X, t, y = _batch(seed=22)
    hyper = ContinualHyper(alpha=0.0, lam=0.0, beta=0.0, delta=0.0)
    parts = continual_objective(prev, model, phi, mem, X, t, y, hyper, FAST_IPM)
    expected = global_factual_loss(model, phi, mem, X, t, y).item()
    assert parts.total.item() == pytest.approx(expected, rel=1e-12)


def test_objective_additive_in_terms():
    prev, model = tiny_model(seed=23), tiny_model(seed=24)
    phi = build_transform(prev.rep_dim, model.rep_dim, hidden=(8,), seed=3)
    mem = _memory_for(prev, seed=25)
    X, t, y = _batch(seed=26)
    hyper = ContinualHyper(alpha=0.8, lam=0.05, beta=1.3, delta=0.6)
    parts = continual_objective(prev, model, phi, mem, X, t, y, hyper, FAST_IPM)
    recomposed = (
        parts.global_factual
        + hyper.alpha * parts.balance
        + hyper.lam * parts.penalty
        + hyper.beta * parts.distill
        + hyper.delta * parts.transform
    )
    assert parts.total.item() == pytest.approx(recomposed, abs=1e-12)


def test_objective_reduces_to_baseline_form():
    prev = tiny_model(seed=27)
    model = tiny_model(seed=28, alpha=0.5, lam=0.01)
    X, t, y = _batch(seed=29)
    hyper = ContinualHyper(alpha=0.5, lam=0.01, beta=0.0, delta=0.0)
    cont = continual_objective(prev, model, None, None, X, t, y, hyper, FAST_IPM)
    base = baseline_objective(model, X, t, y, FAST_IPM)
    assert cont.total.item() == base.total.item()


def test_objective_gradients_match_finite_differences():
    prev, model = tiny_model(seed=30), tiny_model(seed=31)
    phi = build_transform(prev.rep_dim, model.rep_dim, hidden=(6,), seed=4)
    mem = _memory_for(prev, seed=32, n=15, capacity=10)
    X, t, y = _batch(seed=33, n=10)
    hyper = ContinualHyper(alpha=0.5, lam=0.01, beta=1.0, delta=1.0)
    ipm = IPMConfig(epsilon=0.05, relative_epsilon=False, max_iterations=500,
                    tolerance=1e-9, check_interval=1)
    params = model.named_parameters() + phi.named_parameters("phi.")

    def loss():
        return continual_objective(prev, model, phi, mem, X, t, y, hyper, ipm).total

    assert ad.relative_gradient_error(loss, params) < 1e-6


def test_balance_gradient_reaches_transform():
    # the pooled balance term must push gradient into phi even with all
    # factual contributions switched off
    prev, model = tiny_model(seed=34), tiny_model(seed=35)
    phi = build_transform(prev.rep_dim, model.rep_dim, hidden=(6,), seed=5)
    mem = _memory_for(prev, seed=36)
    X, t, y = _batch(seed=37)
    hyper = ContinualHyper(alpha=1.0, lam=0.0, beta=0.0, delta=0.0)
    parts = continual_objective(prev, model, phi, mem, X, t, y, hyper, FAST_IPM)
    phi_params = [p for _, p in phi.named_parameters()]
    ad.zero_grads(phi_params + model.parameters())
    ad.backward(parts.total)
    assert any(p.grad is not None and np.abs(p.grad).max() > 0 for p in phi_params)


def test_distillation_bounded():
    for seed in range(5):
        old, new = tiny_model(seed=seed), tiny_model(seed=seed + 50)
        X, _, _ = _batch(seed=seed, n=30)
        val = distill_loss(old, new, X).item()
        assert 0.0 <= val <= 2.0


# --- stage training -----------------------------------------------------------

def _stage_data(seed, n=160, p=6):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    t = (rng.uniform(size=n) < 0.5).astype(float)
    t[:2] = [0.0, 1.0]
    y = 0.5 * X[:, 0] + 0.7 * t + rng.standard_normal(n) * 0.1
    return X, t, y


def test_train_continual_freezes_teacher_and_is_deterministic():
    X1, t1, y1 = _stage_data(0)
    prev = tiny_model(seed=40)
    mem = build_memory(prev, X1, y1, t1, capacity=20)
    X2, t2, y2 = _stage_data(1)
    cfg = TrainConfig(epochs=4, batch_size=64, learning_rate=1e-3, patience=10,
                      ipm=FAST_IPM)
    hyper = ContinualHyper()
    before = {k: v.copy() for k, v in prev.state_arrays().items()}

    def run():
        model, phi, _ = train_continual(
            prev, mem, X2[:120], t2[:120], y2[:120],
            (X2[120:], t2[120:], y2[120:]), cfg, hyper, seed=9,
        )
        state = model.state_arrays()
        state.update({f"phi.{k}": v for k, v in phi.state_arrays().items()})
        return state

    s1, s2 = run(), run()
    for k in s1:
        np.testing.assert_array_equal(s1[k], s2[k])
    after = prev.state_arrays()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_train_continual_without_transform_ignores_memory():
    X1, t1, y1 = _stage_data(2)
    prev = tiny_model(seed=41)
    mem = build_memory(prev, X1, y1, t1, capacity=16)
    X2, t2, y2 = _stage_data(3)
    cfg = TrainConfig(epochs=3, batch_size=64, learning_rate=1e-3, patience=10,
                      ipm=FAST_IPM)
    model, phi, _ = train_continual(
        prev, mem, X2[:120], t2[:120], y2[:120],
        (X2[120:], t2[120:], y2[120:]), cfg, ContinualHyper(), seed=3,
        use_transform=False,
    )
    assert phi is None


# --- memory update -------------------------------------------------------------

def test_update_memory_identity_keeps_union_when_capacity_allows():
    model = tiny_model(seed=42)
    X1, t1, y1 = _stage_data(4, n=30)
    mem = build_memory(model, X1, y1, t1, capacity=30, source_tag=0)
    phi = identity_transform(model.rep_dim)
    X2, t2, y2 = _stage_data(5, n=20)
    updated = update_memory(mem, phi, model, X2, y2, t2, capacity=200, source_tag=1)
    assert updated.n == mem.n + 20
    reps2 = model.represent(X2)
    for row in reps2:
        assert any(np.array_equal(row, r) for r in updated.representations)
    for row in mem.representations:
        assert any(np.allclose(row, r, atol=1e-12) for r in updated.representations)


def test_update_memory_respects_capacity_and_balance():
    model = tiny_model(seed=43)
    X1, t1, y1 = _stage_data(6, n=60)
    mem = build_memory(model, X1, y1, t1, capacity=20, source_tag=0)
    phi = build_transform(model.rep_dim, model.rep_dim, hidden=(6,), seed=6)
    X2, t2, y2 = _stage_data(7, n=60)
    updated = update_memory(mem, phi, model, X2, y2, t2, capacity=20, source_tag=1)
    assert updated.n <= 20
    assert abs(updated.n_treated - updated.n_control) <= 1
    assert set(updated.source_tags) <= {0, 1}


def test_update_memory_labels_survive_transformation():
    model = tiny_model(seed=44)
    rng = np.random.default_rng(45)
    n = 30
    reps = rng.standard_normal((n, model.rep_dim))
    y = np.arange(n, dtype=float)  # unique outcome doubles as unit id
    t = (rng.uniform(size=n) < 0.5).astype(float)
    t[:2] = [0.0, 1.0]
    mem = memory_from_representations(reps, y, t, capacity=n,
                                      source_tags=np.arange(n))
    phi = identity_transform(model.rep_dim)
    X2, t2, y2 = _stage_data(8, n=10)
    updated = update_memory(mem, phi, model, X2, y2, t2, capacity=200, source_tag=99)
    for rep, yy, tt, tag in zip(updated.representations, updated.y,
                                updated.t, updated.source_tags):
        if tag == 99:
            continue
        np.testing.assert_allclose(rep, reps[tag], atol=1e-12)
        assert yy == y[tag]
        assert tt == t[tag]
