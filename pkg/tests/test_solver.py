import cvxpy as cp
import numpy as np
import pytest

from sgnep.errors import OracleFailure, RunFailed
from sgnep.game import player_streams
from sgnep.games.quadratic import random_quadratic_game
from sgnep.operators import StackState, assumption6_step_sizes, build_phi, kkt_fixed_point
from sgnep.solver import (
    Context,
    Schedules,
    consensus_metric,
    edge_backward,
    edge_forward,
    forward_player_phase,
    initial_state,
    iterate,
    kappa,
    km_update,
    run,
)

HALF_T20 = Schedules(gamma_kind="constant", gamma=0.5, T_kind="constant", T=20)


def test_kappa_values():
    assert kappa(1.0, 0) == 1.0
    assert kappa(0.5, 2) == 0.25
    assert kappa(0.3, 8) == pytest.approx(0.06)


def test_schedules():
    s = Schedules(gamma_kind="power", a=0.8, T_kind="power", scale=1.0, b=0.9, floor=0)
    assert s.gamma_at(32) == pytest.approx(32**-0.8)
    assert s.T_at(1) == 1 and s.T_at(10) == 8  # ceil(10^0.9) = ceil(7.94)
    assert s.summable and s.exponents == (0.8, 0.9)
    paper = Schedules()
    assert paper.T_at(1) == 21 and paper.T_at(100) == 20 + int(np.ceil(1e-4 * 100**2.1))
    assert paper.summable  # b / 2 = 1.05
    assert not HALF_T20.summable
    for bad in (dict(gamma=1.0), dict(T_kind="constant", T=0), dict(gamma_kind="power", a=1.5), dict(T_kind="bogus")):
        with pytest.raises(ValueError):
            Schedules(**bad)


def test_edge_forward_plug_in():
    M, M_hat, Z, Z_hat = edge_forward(np.zeros((1, 1)), np.ones((1, 1)), np.full((1, 1), 4.0), np.full((1, 1), 2.0), 0.5, 1.0)
    assert M[0, 0] == 1.0 and M_hat[0, 0] == 2.0
    assert Z[0, 0] == 2.0 and Z_hat[0, 0] == 3.0


def test_edge_backward_plug_in():
    M_bar, Z_bar = edge_backward(np.ones((1, 2)), np.zeros((1, 1)), np.full((1, 2), 3.0), np.full((1, 2), 2.0),
                                 np.full((1, 1), 1.0), np.full((1, 1), 4.0), 0.5, 2.0)
    assert np.allclose(M_bar, 1 + 0.5 * (3 - 1)) and np.allclose(Z_bar, 2.0 * (1 - 2))


def test_km_update():
    one = StackState(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)))
    out = km_update(one, 3.0 * one, 2.0 * one, 0.25)
    assert np.allclose(out.flat(), 1.5)
    assert np.allclose(km_update(one, 3.0 * one, 2.0 * one, 0.0).flat(), 1.0)
    with pytest.raises(ValueError):
        km_update(one, one, one, 1.5)


def test_consensus_metric():
    assert consensus_metric(np.array([[0.0, 0.0], [2.0, 4.0]])) == pytest.approx(3.0)
    assert consensus_metric(np.ones((5, 3))) == 0.0


@pytest.fixture
def setup(quad_game, ring4):
    cfg = assumption6_step_sizes(ring4, quad_game, 5.0, 1.0)
    return quad_game, ring4, cfg, build_phi(ring4, quad_game, cfg)


def test_reflection_identities(setup):
    game, graph, cfg, _ = setup
    rng = np.random.default_rng(0)
    st = StackState.from_flat(rng.standard_normal(StackState.zeros(4, game.n, game.m, graph.E).size), 4, game.n, game.m, graph.E)
    snap = iterate(Context(game, graph, cfg), st, 3, HALF_T20, player_streams(0, 4))
    assert np.allclose(snap.psi_hat.flat(), 2 * snap.psi.flat() - st.flat())
    assert np.allclose(snap.psi_tilde_next.flat(), st.flat() + 2 * 0.5 * (snap.psi_bar.flat() - snap.psi.flat()))
    assert np.all(snap.psi_bar.Lam >= 0)
    for i in range(4):
        assert game.players[i].local_set.contains(snap.psi_bar.Y[i, game.sl(i)])


def test_exact_forward_phase_matches_qp(setup):
    game, graph, cfg, _ = setup
    rng = np.random.default_rng(4)
    st = StackState.from_flat(rng.standard_normal(StackState.zeros(4, game.n, game.m, graph.E).size), 4, game.n, game.m, graph.E)
    ctx = Context(game, graph, cfg)
    Y, *_ = forward_player_phase(ctx, st, [1] * 4, None, exact=True)
    L, B = graph.L.astype(float), graph.B.astype(float)
    LY, BM = L @ st.Y, B @ st.M
    for i, p in enumerate(game.players):
        s = game.sl(i)
        tau = cfg.tau1[i]
        phi = 0.5 * (p.A.T @ st.Lam[i] + BM[i, s] + cfg.rho_mu * LY[i, s])
        # others' blocks enter at their freshly updated estimates
        y_other = st.Y[i] - 0.5 * tau * (cfg.rho_mu * LY[i] + BM[i])
        y_other[s] = 0
        h = game.M[s] @ y_other - game.r[s]
        v = cp.Variable(p.dim)
        obj = 0.5 * cp.quad_form(v, game.P(i)) + (h + phi) @ v + cp.sum_squares(v - st.Y[i, s]) / (2 * tau)
        cp.Problem(cp.Minimize(obj), [v >= p.bbox_lo, v <= p.bbox_hi]).solve(
            solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
        assert np.allclose(Y[i, s], v.value, atol=1e-7)
        # non-own coordinates take the plain gradient step on the consensus terms
        mask = np.ones(game.n, bool)
        mask[s] = False
        assert np.allclose(Y[i, mask], (st.Y[i] - 0.5 * tau * (cfg.rho_mu * LY[i] + BM[i]))[mask])


def test_fixed_point_is_stationary(setup, quad_solution):
    game, graph, cfg, phi = setup
    _, psi_tilde = kkt_fixed_point(game, graph, cfg, phi, *quad_solution)
    snap = iterate(Context(game, graph, cfg), psi_tilde, 1, HALF_T20, player_streams(0, 4), exact=True)
    assert phi.norm(snap.psi_tilde_next - psi_tilde) < 1e-9


def test_exact_mode_converges(setup, quad_solution):
    game, graph, cfg, phi = setup
    x = quad_solution[0]
    res = run(game, graph, cfg, HALF_T20, 1000, 0, x_ref=x, exact=True, phi=phi)
    assert res.records[-1]["dist_rel_ref"] < 1e-4
    assert np.allclose(res.decisions(), x, atol=1e-3)
    assert res.column("inner_steps").sum() == 0


def test_run_is_deterministic_given_seed(setup, quad_solution):
    game, graph, cfg, phi = setup
    noisy = random_quadratic_game(seed=1, noise=0.5)
    a = run(noisy, graph, cfg, HALF_T20, 30, 5, x_ref=quad_solution[0], phi=phi)
    b = run(noisy, graph, cfg, HALF_T20, 30, 5, x_ref=quad_solution[0], phi=phi)
    c = run(noisy, graph, cfg, HALF_T20, 30, 6, x_ref=quad_solution[0], phi=phi)
    assert a.records == b.records
    assert a.records != c.records


def test_golden_run(setup, quad_solution):
    # frozen from a reference run; guards against silent changes to the iteration
    game, graph, cfg, phi = setup
    noisy = random_quadratic_game(seed=1, noise=0.5)
    rec = run(noisy, graph, cfg, HALF_T20, 25, 3, x_ref=quad_solution[0], phi=phi).records[-1]
    assert rec["k"] == 25 and rec["inner_steps"] == 80
    for key, value in GOLDEN.items():
        assert rec[key] == pytest.approx(value, rel=1e-9), key


GOLDEN = {
    "dist_rel_ref": 0.657598433077183,
    "step": 0.06347867733422372,
    "step_phi": 0.22937975677314787,
    "consensus_y": 0.014257824702926622,
    "consensus_lam": 0.0066445295702735625,
    "violation": 0.14372386922503502,
}


def test_early_stop(setup, quad_solution):
    game, graph, cfg, phi = setup
    res = run(game, graph, cfg, HALF_T20, 5000, 0, exact=True, phi=phi, early_stop_tol=1e-10, patience=5)
    assert res.stopped_early and len(res.records) < 5000


def test_run_failure_keeps_partial_result(setup):
    game, graph, cfg, phi = setup

    class Flaky(type(game)):
        calls = 0

        def projected_subgradient(self, sub, T, rng):
            Flaky.calls += 1
            if Flaky.calls > 8:
                raise OracleFailure("sensor offline")
            return super().projected_subgradient(sub, T, rng)

    flaky = Flaky(game.M, game.r, game.players, game.c)
    with pytest.raises(RunFailed) as info:
        run(flaky, graph, cfg, HALF_T20, 10, 0, phi=phi)
    assert len(info.value.partial.records) == 2


def test_player_count_must_match(setup):
    game, graph, cfg, phi = setup
    with pytest.raises(ValueError):
        run(random_quadratic_game(N=3), graph, cfg, HALF_T20, 1, 0)


def test_initial_state_broadcasts_x0(setup):
    game, graph, *_ = setup
    st = initial_state(game, graph, np.arange(game.n))
    assert np.all(st.Y == np.arange(game.n)) and not st.M.any()
