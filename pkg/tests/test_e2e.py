import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seslease.admm import run_mode1
from seslease.e2e import (DecisionProblem, Surrogate, TrainingDiverged, affine_law_dataset, centralized_mode2,
                          decision_loss, fit_least_squares, loss_and_grad, mean_decision_loss, predict,
                          prepare_mode2, run_mode2, train)
from seslease.lp import ProgramBuilder
from seslease.market import HistoryDataset, MarketConfig
from seslease.uncertainty import PriceBox


def unit_interval_problem():
    b = ProgramBuilder()
    x = b.var("x", 1, lb=0.0, ub=1.0, cost=1.0)
    return DecisionProblem(b.build(), x, 1.0)


def quadratic_problem(T=2, weight=1.0):
    b = ProgramBuilder()
    q = b.var("q", T, lb=-100.0, ub=100.0)
    b.add_diag_quad(q, 0.5 * weight)
    return DecisionProblem(b.build(), q, 1.0)


def test_predict_constant_model():
    s = Surrogate.constant([10.0, 20.0])
    for q in ([0.0, 0.0], [5.0, -3.0]):
        assert np.array_equal(predict(s, q, [1.0, 2.0]), [10.0, 20.0])


def test_predict_affine():
    s = Surrogate(np.array([[10.0], [-2.0], [0.0]]))
    assert predict(s, [1.0], [0.0])[0] == 8.0
    assert np.array_equal(predict(s, [1.0], [0.0]), predict(s, [1.0], [0.0]))


def test_predict_dimension_mismatch():
    with pytest.raises(ValueError):
        predict(Surrogate.constant([1.0, 2.0]), [1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        Surrogate(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Surrogate(np.full((3, 2), np.nan))


def test_decision_loss_by_hand():
    loss, x = decision_loss([0.5], [3.0], unit_interval_problem())
    assert x[0] == pytest.approx(0.0, abs=1e-8)
    assert unit_interval_problem().optimum([3.0])[1] == pytest.approx(-2.0, abs=1e-8)
    assert loss == pytest.approx(2.0, abs=1e-8)


def test_loss_zero_at_truth(desk2):
    prob = DecisionProblem.from_scenario(desk2)
    lam = desk2.prices.lambda_ex
    assert abs(decision_loss(lam, lam, prob)[0]) <= 1e-7


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    prob = DESK_PROBLEM
    lam_t = rng.uniform(0, 80, prob.price_cols.size)
    lam_h = rng.uniform(0, 80, prob.price_cols.size)
    assert decision_loss(lam_h, lam_t, prob)[0] >= -1e-9 * max(1.0, abs(prob.optimum(lam_t)[1]))


def _desk_problem():
    from seslease.config import load_scenario
    return DecisionProblem.from_scenario(load_scenario("desk2"))


DESK_PROBLEM = _desk_problem()


def fd_check(s, data, idx, prob, eps, h=1e-4):
    f_star = np.array([prob.optimum(data.prices[i])[1] for i in range(data.n)])
    _, g = loss_and_grad(s, data, idx, prob, eps, f_star)
    fd = np.zeros_like(g)
    for j in np.ndindex(g.shape):
        tp, tm = s.theta.copy(), s.theta.copy()
        tp[j] += h
        tm[j] -= h
        fd[j] = (loss_and_grad(Surrogate(tp), data, idx, prob, eps, f_star)[0]
                 - loss_and_grad(Surrogate(tm), data, idx, prob, eps, f_star)[0]) / (2 * h)
    return np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)


def test_gradient_matches_finite_differences(desk2):
    T = desk2.T
    th = np.stack([desk2.prices.lambda_ex, np.full(T, -3.0), np.full(T, 0.2)])
    data = affine_law_dataset(th, 8, seed=3, noise=4.0)
    s = Surrogate(th + np.random.default_rng(0).normal(scale=[[4.0], [0.5], [0.05]], size=th.shape))
    assert fd_check(s, data, np.arange(8), DESK_PROBLEM, eps=1e-2) <= 1e-3


def test_zero_learning_rate_keeps_theta():
    prob = quadratic_problem()
    th = np.array([[20.0, 30.0], [-1.0, -2.0], [0.1, 0.0]])
    data = affine_law_dataset(th, 16, seed=0, noise=1.0)
    init = Surrogate(th + 1.0)
    out = train(data, prob, epochs=2, batch=8, learning_rate=0.0, eps=1e-2, init=init)
    assert np.allclose(out.surrogate.theta, init.theta, rtol=1e-12, atol=1e-12)


def test_trace_non_increasing_on_quadratic_task():
    # with an interior quadratic decision the regret is a convex quadratic in theta
    prob = quadratic_problem()
    th = np.array([[20.0, 30.0], [-1.0, -2.0], [0.1, 0.0]])
    data = affine_law_dataset(th, 32, seed=1, noise=1.0)
    start = Surrogate(np.array([[10.0, 10.0], [0.0, 0.0], [0.0, 0.0]]))
    out = train(data, prob, epochs=15, batch=32, learning_rate=0.05, eps=1e-2, init=start)
    losses = [l for _, l, _ in out.trace]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_divergence_aborts_with_trace():
    prob = quadratic_problem()
    th = np.array([[20.0, 30.0], [-1.0, -2.0], [0.1, 0.0]])
    data = affine_law_dataset(th, 16, seed=1, noise=1.0)
    with pytest.raises(TrainingDiverged) as err:
        train(data, prob, epochs=20, batch=16, learning_rate=50.0, eps=1e-2, init=Surrogate(th + 1.0))
    assert len(err.value.trace) >= 1


def test_checkpoint_round_trip(tmp_path):
    s = Surrogate(np.array([[1.5, 2.0], [-0.1, -0.2], [0.3, 1e-17]]))
    s.save(tmp_path / "th.txt")
    assert np.array_equal(Surrogate.load(tmp_path / "th.txt").theta, s.theta)
    text = (tmp_path / "th.txt").read_text().replace("schema ", "schema 0", 1)
    (tmp_path / "bad.txt").write_text(text)
    with pytest.raises(ValueError):
        Surrogate.load(tmp_path / "bad.txt")


def test_trace_csv(tmp_path):
    prob = quadratic_problem()
    data = affine_law_dataset(np.array([[20.0, 30.0], [-1.0, -2.0], [0.1, 0.0]]), 8, seed=0, noise=1.0)
    out = train(data, prob, epochs=2, batch=8, learning_rate=0.01, eps=1e-2)
    out.write_trace(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,grad_norm" and len(lines) == 3


def test_least_squares_recovers_noise_free_law():
    th = np.array([[20.0, 30.0], [-1.0, -2.0], [0.1, 0.3]])
    s = fit_least_squares(affine_law_dataset(th, 40, seed=0))
    assert np.allclose(s.theta, th, atol=1e-5)


def test_beats_least_squares_on_affine_law(desk2):
    """Held-out decision loss of the trained surrogate is at most 5% of least squares."""
    T = desk2.T
    th = np.stack([desk2.prices.lambda_ex, np.full(T, -3.0), np.full(T, 0.2)])
    train_set = affine_law_dataset(th, 64, seed=1, noise=3.0)
    test_set = affine_law_dataset(th, 200, seed=2, noise=3.0)
    ls = fit_least_squares(train_set)
    out = train(train_set, DESK_PROBLEM, epochs=20, batch=32, learning_rate=0.01, eps=1e-2, init=ls)
    base = mean_decision_loss(ls, test_set, DESK_PROBLEM)
    ours = mean_decision_loss(out.surrogate, test_set, DESK_PROBLEM)
    assert ours <= 0.05 * base, f"trained {ours:.4f} vs least squares {base:.4f}"


def test_perfect_surrogate_without_uncertainty(desk2):
    sc = desk2.with_prices(PriceBox(desk2.prices.lambda_ex, 0.0))
    s = Surrogate.constant(sc.prices.lambda_ex)
    r1 = run_mode1(sc)
    r2 = run_mode2(sc, s, np.zeros(sc.T))
    assert abs(r2.objective - r1.objective) <= 1e-3 * abs(r1.objective)


def test_mode2_matches_same_surrogate_centralized(desk2):
    mk = MarketConfig.ladder(desk2.T, demand_noise=0.05, price_noise=2.0)
    st_ = prepare_mode2(desk2, mk, seed=0, n_days=32, epochs=2)
    r2 = run_mode2(st_.scenario, st_.surrogate, st_.prev)
    central, _ = centralized_mode2(st_.scenario, st_.surrogate, st_.prev)
    assert r2.converged
    assert abs(r2.objective - central.objective) <= 1e-4 * abs(central.objective)
    # the reported decision is feasible for the exact constraint set (eps = 0)
    off = r2.outcome.agg_meta["offer_range"]
    award = r2.outcome.award
    assert np.all(award >= off[:, 0] - 1e-7) and np.all(award <= off[:, 1] + 1e-7)
    nsor = r2.outcome.nsor
    assert np.all(award >= nsor[:, 0] - 1e-7) and np.all(award <= nsor[:, 1] + 1e-7)
