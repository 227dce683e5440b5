"""Deterministic sampler: update rule, schedules, guidance, trajectories."""

import math

import pytest
import torch

from subswap.errors import (
    ContractError,
    CorruptionError,
    DomainError,
    NonFiniteError,
    ScheduleError,
    ShapeError,
)
from subswap.sampling import (
    DIRECTION_INVERSION,
    DIRECTION_SAMPLING,
    NoiseSchedule,
    Trajectory,
    active_branches,
    cfg_predict,
    constant_uncond,
    ddim_invert,
    ddim_step,
    load_trajectory,
    reconstruct,
    relative_error,
    sample_trajectory,
    save_trajectory,
)

# One update computed by hand with plain floats, in the equivalent ratio form
#   z_prev = sqrt(ab_prev / ab_t) * z + (sqrt(1 - ab_prev)
#            - sqrt(ab_prev / ab_t) * sqrt(1 - ab_t)) * eps
# for ab_t = 0.4, ab_prev = 0.7, z = 1.25, eps = -0.5.
HAND_X0_HAT = 2.5887959733010315
HAND_Z_PREV = 1.892080828960766


def ratio_form_step(z, eps, ab_t, ab_prev):
    r = math.sqrt(ab_prev / ab_t)
    return r * z + (math.sqrt(1 - ab_prev) - r * math.sqrt(1 - ab_t)) * eps


def test_ddim_step_matches_hand_computed_value():
    sched = NoiseSchedule(alpha_bar=torch.tensor([1.0, 0.7, 0.4], dtype=torch.float64))
    z = torch.tensor([1.25], dtype=torch.float64)
    eps = torch.tensor([-0.5], dtype=torch.float64)
    out = ddim_step(z, eps, t=2, t_prev=1, sched=sched)
    assert abs(float(out[0]) - HAND_Z_PREV) < 1e-12


def test_ddim_step_matches_ratio_form_on_random_tensors():
    g = torch.Generator().manual_seed(21)
    ab = torch.tensor([1.0, 0.9, 0.62, 0.4, 0.15], dtype=torch.float64)
    sched = NoiseSchedule(alpha_bar=ab)
    for t in range(2, 5):
        for t_prev in range(0, t):
            z = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
            eps = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
            expected = ratio_form_step(z, eps, float(ab[t]), float(ab[t_prev]))
            out = ddim_step(z, eps, t, t_prev, sched)
            assert torch.allclose(out, expected, atol=1e-12)


def test_ddim_step_with_zero_noise_prediction_rescales_signal():
    # eps = 0 collapses the update to sqrt(ab_prev / ab_t) * z
    sched = NoiseSchedule.linear(4)
    z = torch.full((2, 2), 3.0, dtype=torch.float64)
    out = ddim_step(z, torch.zeros_like(z), 3, 1, sched)
    r = math.sqrt(float(sched.alpha_bar[1]) / float(sched.alpha_bar[3]))
    assert torch.allclose(out, z * r, atol=1e-14)


def test_ddim_step_rejects_bad_times():
    sched = NoiseSchedule.linear(4)
    z = torch.zeros(2, 2, dtype=torch.float64)
    for t, t_prev in [(1, 1), (1, 2), (0, 0), (5, 4), (2, -1)]:
        with pytest.raises(DomainError):
            ddim_step(z, z, t, t_prev, sched)


def test_ddim_step_rejects_bad_inputs():
    sched = NoiseSchedule.linear(4)
    z = torch.zeros(2, 2, dtype=torch.float64)
    with pytest.raises(ShapeError):
        ddim_step(z, torch.zeros(3, 2, dtype=torch.float64), 2, 1, sched)
    with pytest.raises(NonFiniteError):
        ddim_step(torch.full((2, 2), float("nan")), z, 2, 1, sched)
    with pytest.raises(NonFiniteError):
        ddim_step(z, torch.full((2, 2), float("inf")), 2, 1, sched)


# ---- schedules --------------------------------------------------------------


def test_linear_schedule_matches_formula():
    sched = NoiseSchedule.linear(5, final_alpha_bar=0.2)
    expected = [1.0 - i * (1.0 - 0.2) / 5 for i in range(6)]
    assert sched.total_steps == 5
    for got, want in zip(sched.alpha_bar.tolist(), expected):
        assert math.isclose(got, want, rel_tol=1e-12)


def test_linear_schedule_rejects_bad_arguments():
    with pytest.raises(ScheduleError):
        NoiseSchedule.linear(0)
    with pytest.raises(ScheduleError):
        NoiseSchedule.linear(10, final_alpha_bar=0.0)
    with pytest.raises(ScheduleError):
        NoiseSchedule.linear(10, final_alpha_bar=1.0)


@pytest.mark.parametrize(
    "alpha_bar",
    [
        [0.9, 0.5, 0.2],           # does not start at 1
        [1.0, 0.5, 0.5],           # not strictly decreasing
        [1.0, 0.6, 0.7],           # increases
        [1.0, 0.5, 0.0],           # hits zero
        [1.0, 0.5, -0.1],          # negative
        [1.0],                     # too short
        [1.0, float("nan"), 0.2],  # non-finite
    ],
)
def test_noise_schedule_validation(alpha_bar):
    with pytest.raises(ScheduleError):
        NoiseSchedule(alpha_bar=torch.tensor(alpha_bar, dtype=torch.float64))


# ---- guidance ---------------------------------------------------------------


def test_cfg_weight_one_returns_conditional_prediction_exactly(backend):
    g = torch.Generator().manual_seed(2)
    z = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    cond = backend.encode_prompt("a cat sitting in a basket")
    uncond = backend.default_uncond()
    guided = cfg_predict(backend, z, 3, cond, uncond, w=1.0)
    assert torch.equal(guided, backend.predict(z, 3, cond))


def test_cfg_weight_zero_returns_unconditional_prediction_exactly(backend):
    g = torch.Generator().manual_seed(2)
    z = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    cond = backend.encode_prompt("a cat sitting in a basket")
    uncond = backend.default_uncond()
    guided = cfg_predict(backend, z, 3, cond, uncond, w=0.0)
    assert torch.equal(guided, backend.predict(z, 3, uncond))


def test_cfg_combines_branches(backend):
    g = torch.Generator().manual_seed(2)
    z = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    cond = backend.encode_prompt("a cat sitting in a basket")
    uncond = backend.default_uncond()
    w = 7.5
    eps_u = backend.predict(z, 3, uncond)
    eps_c = backend.predict(z, 3, cond)
    assert torch.equal(cfg_predict(backend, z, 3, cond, uncond, w), eps_u + w * (eps_c - eps_u))


def test_cfg_rejects_negative_weight(backend):
    z = torch.zeros(4, 8, 8, dtype=torch.float64)
    cond = backend.default_uncond()
    with pytest.raises(DomainError):
        cfg_predict(backend, z, 1, cond, cond, w=-0.5)


def test_active_branches():
    assert active_branches(1.0) == ("cond",)
    assert active_branches(0.0) == ("uncond",)
    assert active_branches(7.5) == ("uncond", "cond")


# ---- trajectories -----------------------------------------------------------


def _small_trajectory(backend, steps=4, w=7.5, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    sched = NoiseSchedule.linear(steps)
    cond = backend.encode_prompt("a cat sitting in a basket")
    return sample_trajectory(backend, z, cond, sched, w, constant_uncond(backend.default_uncond()))


def test_sample_trajectory_shape_and_determinism(backend):
    traj = _small_trajectory(backend)
    assert traj.direction == DIRECTION_SAMPLING
    assert traj.total_steps == 4
    assert len(traj.latents) == 5
    again = _small_trajectory(backend)
    for a, b in zip(traj.latents, again.latents):
        assert torch.equal(a, b)


def test_sample_trajectory_rejects_nondeterministic_backend():
    class Wobbly:
        deterministic = False

    sched = NoiseSchedule.linear(2)
    with pytest.raises(ContractError):
        sample_trajectory(
            Wobbly(), torch.zeros(1), torch.zeros(1), sched, 1.0, constant_uncond(torch.zeros(1))
        )


def test_trajectory_indexing(backend):
    traj = _small_trajectory(backend)
    assert torch.equal(traj.initial, traj.latents[0])
    assert torch.equal(traj.final, traj.latents[-1])
    assert torch.equal(traj.at_time(4), traj.latents[0])
    assert torch.equal(traj.at_time(0), traj.latents[-1])
    with pytest.raises(DomainError):
        traj.at_time(5)
    with pytest.raises(DomainError):
        traj.at_time(-1)


def test_trajectory_validation():
    z = torch.zeros(2, 2)
    with pytest.raises(DomainError):
        Trajectory(latents=[z, z], direction="sideways")
    with pytest.raises(ShapeError):
        Trajectory(latents=[z], direction=DIRECTION_SAMPLING)
    with pytest.raises(ShapeError):
        Trajectory(latents=[z, torch.zeros(3, 2)], direction=DIRECTION_SAMPLING)


def test_trajectory_round_trips_through_disk(backend, tmp_path):
    traj = _small_trajectory(backend)
    save_trajectory(traj, tmp_path / "traj")
    loaded = load_trajectory(tmp_path / "traj")
    assert loaded.direction == traj.direction
    assert loaded.total_steps == traj.total_steps
    for a, b in zip(traj.latents, loaded.latents):
        assert a.dtype == b.dtype
        assert torch.equal(a, b)


def test_trajectory_load_fails_closed_on_corruption(backend, tmp_path):
    traj = _small_trajectory(backend)
    save_trajectory(traj, tmp_path / "traj")
    blob = tmp_path / "traj" / "t2.bin"
    data = bytearray(blob.read_bytes())
    data[11] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(CorruptionError):
        load_trajectory(tmp_path / "traj")


def test_trajectory_load_rejects_missing_directory(tmp_path):
    with pytest.raises(CorruptionError):
        load_trajectory(tmp_path / "nothing-here")


# ---- inversion --------------------------------------------------------------


def test_ddim_invert_direction_and_endpoints(backend):
    g = torch.Generator().manual_seed(4)
    z0 = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    sched = NoiseSchedule.linear(4)
    cond = backend.encode_prompt("a cat sitting in a basket")
    inv = ddim_invert(z0, cond, backend, sched)
    assert inv.direction == DIRECTION_INVERSION
    assert inv.total_steps == 4
    # the clean input sits at time 0, the noised endpoint at time T
    assert torch.equal(inv.final, z0)
    assert not torch.equal(inv.initial, z0)


def test_ddim_invert_rejects_nondeterministic_backend():
    class Wobbly:
        deterministic = False

    with pytest.raises(ContractError):
        ddim_invert(torch.zeros(1), torch.zeros(1), Wobbly(), NoiseSchedule.linear(2))


def test_invert_then_sample_approximates_identity(backend):
    """Short-schedule round trip lands near the starting latent."""
    cfgless = torch.Generator().manual_seed(0)
    z_init = torch.randn(4, 8, 8, generator=cfgless, dtype=torch.float64)
    sched = NoiseSchedule.linear(20)
    cond = backend.encode_prompt("a cat sitting in a basket")
    uncond = constant_uncond(backend.default_uncond())
    z0 = sample_trajectory(backend, z_init, cond, sched, 1.0, uncond).final
    inv = ddim_invert(z0, cond, backend, sched)
    recon = reconstruct(inv.initial, cond, uncond, backend, sched, 1.0)
    assert relative_error(recon.final, z0) < 5e-2


def test_reconstruct_is_sampling(backend):
    traj = _small_trajectory(backend, seed=8)
    cond = backend.encode_prompt("a cat sitting in a basket")
    sched = NoiseSchedule.linear(4)
    again = reconstruct(
        traj.initial, cond, constant_uncond(backend.default_uncond()), backend, sched, 7.5
    )
    for a, b in zip(traj.latents, again.latents):
        assert torch.equal(a, b)


def test_relative_error_basics():
    a = torch.tensor([3.0, 4.0])
    assert relative_error(a, a) == 0.0
    assert math.isclose(relative_error(torch.zeros(2), a), 1.0)
    assert relative_error(a, torch.zeros(2)) > 1e10  # tiny-denominator floor keeps it finite
