import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effectstream import autodiff as ad
from effectstream.autodiff import Tensor
from effectstream.errors import DimensionMismatchError, GroupImbalanceError
from effectstream.transport import IPMConfig, exact_ot_small, wasserstein_ipm

TIGHT = IPMConfig(
    epsilon=0.01, relative_epsilon=True, max_iterations=3000,
    tolerance=1e-7, check_interval=10,
)


def _cloud(seed, n=6, d=3, offset=0.0):
    return np.random.default_rng(seed).standard_normal((n, d)) + offset


def test_identical_multisets_near_zero():
    pts = _cloud(0)
    res = wasserstein_ipm(pts, pts.copy(), TIGHT)
    sq = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    assert res.cost.item() < 1e-3 * sq.mean()
    assert res.cost.item() >= 0.0


def test_single_atoms_exact_distance():
    p = np.array([[1.0, 2.0, -1.0]])
    q = np.array([[0.5, 0.0, 3.0]])
    res = wasserstein_ipm(p, q, IPMConfig(epsilon=0.3, relative_epsilon=False))
    assert res.cost.item() == pytest.approx(((p - q) ** 2).sum(), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_matches_enumeration_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    exact = exact_ot_small(a, b)
    res = wasserstein_ipm(a, b, TIGHT)
    assert res.cost.item() == pytest.approx(exact, rel=0.05)


def test_symmetry():
    cfg = IPMConfig(epsilon=0.05, relative_epsilon=True, max_iterations=5000,
                    tolerance=1e-10, check_interval=1)
    a, b = _cloud(3), _cloud(4, offset=0.5)
    r1 = wasserstein_ipm(a, b, cfg)
    r2 = wasserstein_ipm(b, a, cfg)
    assert r1.converged and r2.converged
    assert r1.cost.item() == pytest.approx(r2.cost.item(), rel=1e-6)


def test_nonnegative_on_random_instances():
    for seed in range(10):
        a, b = _cloud(seed, n=5), _cloud(seed + 100, n=9)
        assert wasserstein_ipm(a, b, TIGHT).cost.item() >= 0.0


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    a = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    cfg = IPMConfig(
        epsilon=0.05, relative_epsilon=False, max_iterations=2000,
        tolerance=1e-10, check_interval=1,
    )

    def loss():
        return wasserstein_ipm(a, b, cfg).cost

    err = ad.relative_gradient_error(loss, [("a", a), ("b", b)])
    assert err < 1e-5


def test_shift_increases_cost_monotonically():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((10, 4))
    b = rng.standard_normal((10, 4))
    direction = rng.standard_normal(4)
    direction /= np.linalg.norm(direction)
    costs = [
        wasserstein_ipm(a, b + s * direction, TIGHT).cost.item()
        for s in (0.0, 0.5, 1.0, 2.0)
    ]
    assert costs == sorted(costs)


def test_unconverged_flag_still_returns_value():
    a, b = _cloud(1), _cloud(2)
    res = wasserstein_ipm(
        a, b, IPMConfig(epsilon=0.001, relative_epsilon=True,
                        max_iterations=2, tolerance=1e-12, check_interval=1)
    )
    assert not res.converged
    assert np.isfinite(res.cost.item())


def test_empty_group_rejected():
    with pytest.raises(GroupImbalanceError):
        wasserstein_ipm(np.zeros((0, 3)), np.zeros((4, 3)))
    with pytest.raises(DimensionMismatchError):
        wasserstein_ipm(np.zeros((2, 3)), np.zeros((4, 2)))


def test_unequal_group_sizes_supported():
    cfg = IPMConfig(epsilon=0.05, relative_epsilon=True, max_iterations=2000,
                    tolerance=1e-8, check_interval=5)
    res = wasserstein_ipm(_cloud(5, n=3), _cloud(6, n=11), cfg)
    assert res.converged
    assert res.plan.shape == (3, 11)
    np.testing.assert_allclose(res.plan.sum(axis=1), np.full(3, 1 / 3), atol=1e-6)


def test_identical_points_degenerate_scale():
    pts = np.ones((4, 2))
    res = wasserstein_ipm(pts, pts.copy())
    assert res.cost.item() == 0.0
    assert res.converged


# --- enumeration oracle -------------------------------------------------

def test_exact_ot_identical_sets_zero():
    pts = _cloud(12)
    assert exact_ot_small(pts, pts.copy()) == pytest.approx(0.0, abs=1e-12)


def test_exact_ot_crossing_pair():
    # {0, 1} vs {1, 0}: the swap assignment matches points exactly
    a = np.array([[0.0], [1.0]])
    b = np.array([[1.0], [0.0]])
    assert exact_ot_small(a, b) == 0.0


def test_exact_ot_rejects_bad_sizes():
    with pytest.raises(ValueError):
        exact_ot_small(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        exact_ot_small(np.zeros((9, 2)), np.zeros((9, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_exact_ot_translation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, 3))
    b = rng.standard_normal((n, 3))
    shift = rng.standard_normal(3)
    base = exact_ot_small(a, b)
    moved = exact_ot_small(a + shift, b + shift)
    assert moved == pytest.approx(base, rel=1e-9, abs=1e-12)
