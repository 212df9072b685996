import cvxpy as cp
import numpy as np
import pytest

from sgnep.errors import MaxIterations
from sgnep.games.assembly import build_paper_assembly
from sgnep.games.quadratic import quadratic_nash_oracle, random_quadratic_game
from sgnep.reference import (
    game_hash,
    kkt_residual,
    natural_residual,
    reference_solution,
    solve_potential,
    solve_vi_extragradient,
)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_extragradient_agrees_with_oracle(seed):
    g = random_quadratic_game(seed=seed)
    x, lam = quadratic_nash_oracle(g)
    sol = solve_vi_extragradient(g, tol=1e-10)
    assert np.allclose(sol.x, x, atol=1e-6)
    assert np.allclose(sol.lam, lam, atol=1e-6)
    slack = g.c - g.A_full @ sol.x
    assert np.all(slack >= -1e-8) and np.all(sol.lam >= 0)
    assert np.abs(sol.lam @ slack) < 1e-7


def test_extragradient_unique_from_two_starts(quad_game):
    a = solve_vi_extragradient(quad_game, tol=1e-10)
    b = solve_vi_extragradient(quad_game, tol=1e-10, x0=np.full(quad_game.n, 2.0), lam0=np.full(quad_game.m, 5.0))
    assert np.allclose(a.x, b.x, atol=1e-7)


def test_extragradient_reports_best_on_stall(quad_game):
    with pytest.raises(MaxIterations) as info:
        solve_vi_extragradient(quad_game, tol=1e-14, max_iter=20)
    assert info.value.best is not None and info.value.best.residual > 0


def test_residuals_vanish_only_at_solution(quad_game, quad_solution):
    x, lam = quad_solution
    assert kkt_residual(quad_game, x, lam) < 1e-9
    assert natural_residual(quad_game, x, lam) < 1e-9
    assert kkt_residual(quad_game, x + 0.01, lam) > 1e-3
    assert natural_residual(quad_game, x, lam + 0.1) > 1e-3


def test_reference_cache_roundtrip(tmp_path, quad_game):
    a = reference_solution(quad_game, cache_dir=tmp_path)
    assert a.method == "oracle" and len(list(tmp_path.iterdir())) == 1
    b = reference_solution(quad_game, cache_dir=tmp_path)
    assert np.array_equal(a.x, b.x) and b.method == "oracle"
    assert game_hash(quad_game, 1e-8) != game_hash(random_quadratic_game(seed=2), 1e-8)
    assert game_hash(quad_game, 1e-8) != game_hash(quad_game, 1e-6)
    with pytest.raises(ValueError):
        reference_solution(quad_game, method="bisection")


def test_potential_route_on_symmetric_quadratic():
    g = random_quadratic_game(seed=3, coupling=0.0)
    g.potential_problem = lambda x: (0.5 * cp.quad_form(x, g.M) - g.r @ x, [])
    sol = solve_potential(g)
    assert np.allclose(sol.x, quadratic_nash_oracle(g)[0], atol=1e-6)
    assert sol.meta["residual_kind"] == "gradient"


def test_assembly_potential_certified_by_subdifferential():
    g = build_paper_assembly(0)
    sol = solve_potential(g)
    assert sol.meta["residual_kind"] == "subdifferential"
    assert sol.residual < 1e-4
    assert np.all(g.A_full @ sol.x <= g.c + 1e-6)
    moved = np.clip(sol.x + 0.05 * np.random.default_rng(0).standard_normal(g.n), 0, 15)
    assert g.subdifferential_residual(moved, sol.lam) > 100 * sol.residual
