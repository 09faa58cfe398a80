import numpy as np

from openfeat._oracle import (
    brute_force_ieer, finite_diff_grad, grad_check, random_setup, rel_err, run_verification,
)
from openfeat.embedcore import ScoringConfig
from openfeat.losses import LossConfig, episode_loss, loss_gradients


def test_quadratic_toy():
    x = np.array([3.0])
    g = finite_diff_grad(lambda: 0.5 * float(x[0] ** 2), {"x": x})
    assert abs(g["x"][0] - 3.0) < 1e-8
    assert x[0] == 3.0


def test_linear_exact_any_step():
    w = np.array([1.5, -2.0, 0.25])
    x = np.array([0.3, 0.1, -0.7])
    for step in (1e-1, 1e-3, 1e-6):
        g = finite_diff_grad(lambda: float(w @ x), {"x": x}, step=step)
        assert np.allclose(g["x"], w, rtol=1e-9, atol=1e-9)


def test_rel_err_floor():
    assert rel_err(0.0, 0.0) == 0.0
    assert rel_err(1e-13, 0.0) == 1e-13 / 1e-12


def test_openfeat_tiny_episode():
    params, ep = random_setup(77)
    sc, lc = ScoringConfig(0.5), LossConfig()
    _, g = loss_gradients(ep, params, sc, lc, mask_seed=3)
    num = finite_diff_grad(lambda: episode_loss(ep, params, sc, lc, mask_seed=3), params.arrays())
    rep = grad_check(g, num)
    assert rep.passed and set(rep.max_rel_err) == set(params.arrays())


def test_brute_force_examples():
    # FAR and FNIR are both 0.5 on a whole threshold interval
    assert brute_force_ieer([0.3, 0.7], [0.2, 0.8], [True, True]) == 0.5
    assert brute_force_ieer([0.01, 0.02], [0.9, 0.95], [True, True]) == 0.0


def test_run_verification_all_pass():
    rows = run_verification(configs=2, seed=1)
    assert rows and all(ok for _, ok, _ in rows)
