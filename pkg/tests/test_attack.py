import numpy as np
import pytest

from conftest import central_diff, rel_err
from ntkrecon.attack import (Adam, AttackConfig, AttackDiverged, ReconstructionSet, init_reconstruction,
                             recon_loss, run_attack, run_attack_batched, tangent_sum, temperature_at)
from ntkrecon.network import ActivationError, Architecture, init_params, param_vjp


def _planted(seed, n, d=8, w=64, c=1):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((n, d))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    arch = Architecture(d, w, c)
    th = init_params(arch, seed)
    alpha = rng.choice([-1, 1], size=(n, c)) * rng.uniform(0.5, 1.5, (n, c))
    return arch, th, P, alpha, param_vjp(arch, th, P, alpha)


def _small(seed=0, d=5, w=6, c=2, m=3, tau=7.0):
    rng = np.random.default_rng(seed)
    arch = Architecture(d, w, c, "softplus", tau)
    th = init_params(arch, seed, bias_std=0.1)
    delta = 0.1 * rng.standard_normal(arch.num_params)
    recon = ReconstructionSet(rng.standard_normal((m, d)), rng.standard_normal((m, c)))
    return arch, th, delta, recon


# ---------------------------------------------------------------- loss

def test_zero_duals_give_norm_of_delta():
    arch, th, delta, recon = _small()
    recon.duals[:] = 0
    assert recon_loss(delta, recon, arch, th).value == pytest.approx(delta @ delta, rel=1e-14)


def test_planted_witness_has_zero_loss():
    arch, th, P, alpha, _ = _planted(3, 4, w=16)
    arch = arch.with_temperature(30.0)
    delta = param_vjp(arch, th, P, alpha)
    ev = recon_loss(delta, ReconstructionSet(P, alpha), arch, th)
    assert ev.value <= 1e-16 * (delta @ delta)


def test_relu_loss_rejected():
    arch, th, delta, recon = _small()
    with pytest.raises(ActivationError):
        recon_loss(delta, recon, arch.with_activation("relu"), th)


@pytest.mark.parametrize("c", [1, 3])
def test_loss_gradients_match_finite_differences(c):
    arch, th, delta, recon = _small(seed=c, c=c, m=4)
    ev = recon_loss(delta, recon, arch, th)

    def f_img(X):
        return recon_loss(delta, ReconstructionSet(X, recon.duals), arch, th).value

    def f_dual(U):
        return recon_loss(delta, ReconstructionSet(recon.images, U), arch, th).value

    assert rel_err(ev.grad_images, central_diff(f_img, recon.images)) <= 1e-4
    assert rel_err(ev.grad_duals[0], central_diff(f_dual, recon.duals)) <= 1e-4


def test_single_pixel_gradient():
    arch, th, delta, recon = _small(seed=9)
    ev = recon_loss(delta, recon, arch, th)
    eps = 1e-6
    Xp, Xm = recon.images.copy(), recon.images.copy()
    Xp[1, 2] += eps
    Xm[1, 2] -= eps
    num = (recon_loss(delta, ReconstructionSet(Xp, recon.duals), arch, th).value
           - recon_loss(delta, ReconstructionSet(Xm, recon.duals), arch, th).value) / (2 * eps)
    assert abs(ev.grad_images[1, 2] - num) <= 1e-4 * abs(num)


def test_hybrid_gradients_and_bank_structure():
    arch, th_f, delta, recon = _small(seed=4, c=2, m=3)
    th_0 = init_params(arch, 11, bias_std=0.1)
    rng = np.random.default_rng(5)
    hyb = ReconstructionSet(recon.images, recon.duals, rng.standard_normal(recon.duals.shape))
    ev = recon_loss(delta, hyb, arch, (th_f, th_0), "hybrid")

    def f_d0(U):
        return recon_loss(delta, ReconstructionSet(hyb.images, hyb.duals, U), arch, (th_f, th_0), "hybrid").value

    assert rel_err(ev.grad_duals[1], central_diff(f_d0, hyb.duals_initial)) <= 1e-4

    zero_f = ReconstructionSet(hyb.images, np.zeros_like(hyb.duals), hyb.duals_initial)
    only_0 = ReconstructionSet(hyb.images, hyb.duals_initial)
    assert recon_loss(delta, zero_f, arch, (th_f, th_0), "hybrid").value == pytest.approx(
        recon_loss(delta, only_0, arch, th_0, "initial").value, rel=1e-12)
    zero_0 = ReconstructionSet(hyb.images, hyb.duals, np.zeros_like(hyb.duals))
    assert recon_loss(delta, zero_0, arch, (th_f, th_0), "hybrid").value == pytest.approx(
        recon_loss(delta, recon, arch, th_f, "final").value, rel=1e-12)


def test_tangent_sum_is_vjp():
    arch, th, _, recon = _small(seed=2)
    assert rel_err(tangent_sum(arch, recon, th), param_vjp(arch, th, recon.images, recon.duals)) <= 1e-12


# ---------------------------------------------------------------- schedule and optimiser

def test_temperature_schedule():
    cfg = AttackConfig(m=1, iters=1000)
    assert temperature_at(0, cfg) == 10
    assert temperature_at(1000, cfg) == 200
    assert temperature_at(500, cfg) == 105


def test_temperature_holds_between_updates():
    cfg = AttackConfig(m=1, iters=100, temp_update_every=10)
    assert temperature_at(19, cfg) == temperature_at(10, cfg) < temperature_at(20, cfg)


def test_adam_first_step_moves_by_lr():
    p = {"x": np.array([1.0, -2.0, 0.5])}
    Adam(p, 0.1).step(p, {"x": np.array([3.0, -0.01, 0.0])})
    np.testing.assert_allclose(p["x"], [0.9, -1.9, 0.5], atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(m=0)
    with pytest.raises(ValueError):
        AttackConfig(m=2, batch_size=3)
    with pytest.raises(ValueError):
        AttackConfig(m=2, kernel_choice="middle")


def test_init_distribution():
    arch = Architecture(50, 4, 2)
    r = init_reconstruction(arch, AttackConfig(m=400, seed=1))
    assert r.images.shape == (400, 50) and r.duals.shape == (400, 2)
    assert abs(r.images.std() - 0.2) < 0.005
    assert r.duals.min() >= -0.5 and r.duals.max() <= 0.5


# ---------------------------------------------------------------- drivers

def test_zero_iterations_returns_init():
    arch, th, _, _, delta = _planted(0, 2)
    cfg = AttackConfig(m=4, iters=0, seed=3)
    tr = run_attack(delta, arch, th, cfg)
    init = init_reconstruction(arch, cfg)
    np.testing.assert_array_equal(tr.final.images, init.images)
    np.testing.assert_array_equal(tr.final.duals, init.duals)
    assert len(tr.loss_history) == 0


def test_runs_are_deterministic_and_best_not_worse_than_init():
    arch, th, _, _, delta = _planted(1, 2, w=16)
    cfg = AttackConfig(m=4, iters=60, seed=2)
    a, b = run_attack(delta, arch, th, cfg), run_attack(delta, arch, th, cfg)
    np.testing.assert_array_equal(a.loss_history, b.loss_history)
    np.testing.assert_array_equal(a.best.images, b.best.images)
    assert a.best_loss <= a.loss_history[0]
    assert a.best_loss <= a.final_loss


def test_batched_full_batch_equals_standard():
    arch, th, _, _, delta = _planted(2, 3, w=16)
    cfg = AttackConfig(m=6, iters=150, seed=4, batch_size=6)
    a = run_attack(delta, arch, th, cfg)
    b = run_attack_batched(delta, arch, th, cfg, audit_every=10)
    assert np.max(np.abs(a.loss_history - b.loss_history) / a.loss_history) <= 1e-12
    assert max(e for _, e in b.audits) <= 1e-8


def test_batched_buffer_invariant_small_batches():
    arch, th, _, _, delta = _planted(5, 3, w=16, c=2)
    cfg = AttackConfig(m=6, iters=120, seed=1, batch_size=2, temp_update_every=40, kernel_choice="hybrid")
    tr = run_attack_batched(delta, arch, (th, th), cfg, audit_every=7)
    assert len(tr.audits) == 120 // 7
    assert max(e for _, e in tr.audits) <= 1e-8


def test_non_finite_loss_aborts_with_trace():
    arch, th, _, _, delta = _planted(0, 1)
    bad = delta.copy()
    bad[0] = np.nan
    with pytest.raises(AttackDiverged) as exc:
        run_attack(bad, arch, th, AttackConfig(m=2, iters=5))
    assert exc.value.trace is not None


def _per_pixel(P, R):
    return ((P[:, None, :] - R[None]) ** 2).mean(-1).min(1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_single_point_recovered(seed):
    arch, th, P, alpha, delta = _planted(seed, 1)
    tr = run_attack(delta, arch, th, AttackConfig(m=1, iters=3000, kernel_choice="initial", seed=seed))
    assert _per_pixel(P, tr.best.images)[0] <= 1e-2
    assert tr.best.duals[0, 0] == pytest.approx(alpha[0, 0], rel=0.05)


def test_planted_single_point_mass_is_conserved_with_spare_reconstructions():
    # with M = 2N the plant may be shared by two nearby reconstructions; the
    # dual mass they carry still adds up to the planted coefficient
    arch, th, P, alpha, delta = _planted(0, 1)
    tr = run_attack(delta, arch, th, AttackConfig(m=2, iters=3000, kernel_choice="initial", seed=0))
    assert np.all(_per_pixel(P, tr.best.images) <= 5e-2)
    assert tr.best.duals.sum() == pytest.approx(alpha.sum(), rel=0.05)


@pytest.mark.parametrize("seed", [0, 1])
def test_planted_pair_recovered_with_batch_of_one(seed):
    arch, th, P, alpha, delta = _planted(seed, 2)
    cfg = AttackConfig(m=2, iters=6000, kernel_choice="initial", seed=seed, batch_size=1)
    tr = run_attack_batched(delta, arch, th, cfg)
    assert np.all(_per_pixel(P, tr.best.images) <= 1e-2)
