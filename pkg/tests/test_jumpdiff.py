import numpy as np
import pytest

from siglearn import tensor_algebra as ta
from siglearn.errors import DivergenceError, DomainError
from siglearn.jumpdiff import (
    JumpDiffusionParams,
    draw_path_noise,
    empirical_mean_signature,
    env_step,
    generate_ensemble,
    prefix_mean_signatures,
    simulate_history,
)
from siglearn.kernelspace import build_nystrom
from siglearn.signature import SignatureConfig, path_signature

CFG = SignatureConfig(degree=3, time_scale=1.0)


def make_params(d=2, vol=0.2, lam=0.0, memory=None, **kw):
    return JumpDiffusionParams(
        drift_base=kw.get("drift_base", np.zeros(d)),
        vol=vol * np.eye(d),
        jump_intensity=lam,
        jump_mean=kw.get("jump_mean", np.zeros(d)),
        jump_scale=kw.get("jump_scale", np.zeros(d)),
        action_exposure=kw.get("action_exposure", np.zeros(d)),
        drift_memory_gain=memory,
        reward_coeffs=kw.get("reward_coeffs"),
    )


def unit_grid(n_steps, dt=0.05):
    return dt * np.arange(n_steps + 1)


class TestEnvStep:
    def test_pure_drift_is_exact(self):
        params = make_params(vol=0.0, drift_base=np.array([0.3, -0.2]))
        state = np.zeros(2)
        rng = np.random.default_rng(0)
        nxt, reward, jumped = env_step(params, state, None, 0.0, 0.5, rng)
        assert np.allclose(nxt, [0.15, -0.1], atol=0)
        assert not jumped
        assert reward == pytest.approx(0.15 - 0.1, abs=0)

    def test_action_bounds(self):
        params = make_params()
        with pytest.raises(DomainError):
            env_step(params, np.zeros(2), None, 1.5, 0.1, np.random.default_rng(0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self):
        params = make_params(vol=0.0, drift_base=np.array([1e308, 0.0]))
        with pytest.raises(DivergenceError):
            env_step(params, np.full(2, 1e308), None, 0.0, 1e4, np.random.default_rng(0))

    def test_jump_count_moment(self):
        lam, dt, n_steps, n_paths = 0.8, 0.02, 50, 10_000
        params = make_params(vol=0.0, lam=lam, jump_mean=np.array([0.1, 0.0]))
        grid = unit_grid(n_steps, dt)
        ens = generate_ensemble(
            params, (0.0, np.zeros(2), None), None, grid, n_paths, 7, CFG
        )
        tau = n_steps * dt
        counts = ens.jump_flags.sum(axis=1)
        # flags undercount multiple jumps per step by O((lam*dt)^2)
        sigma = counts.std(ddof=1) / np.sqrt(n_paths)
        assert abs(counts.mean() - lam * tau) < 3 * sigma + lam * tau * lam * dt


class TestEnsemble:
    def test_n1_reproduces_env_step_fold(self):
        params = make_params(vol=0.3, lam=1.0, jump_mean=np.array([0.0, 0.2]),
                             jump_scale=np.array([0.1, 0.1]))
        grid = unit_grid(8)
        seed = 11
        ens = generate_ensemble(params, (0.0, np.ones(2), None), None, grid, 1, seed, CFG)
        xi, counts, eta = draw_path_noise(
            seed, 0, 8, 2, params.jump_intensity * np.diff(grid)
        )
        state = np.ones(2)
        for j in range(8):
            state, reward, jumped = env_step(
                params, state, None, 0.0, grid[j + 1] - grid[j],
                (xi[j], counts[j], eta[j]),
            )
            assert np.array_equal(state, ens.values[0, j + 1, :2])
            assert reward == ens.rewards[0, j]
            assert jumped == ens.jump_flags[0, j + 1]

    def test_same_seed_bit_identical(self):
        params = make_params(vol=0.4, lam=0.5, jump_scale=np.array([0.2, 0.2]))
        grid = unit_grid(10)
        a = generate_ensemble(params, (0.0, np.zeros(2), None), None, grid, 16, 3, CFG)
        b = generate_ensemble(params, (0.0, np.zeros(2), None), None, grid, 16, 3, CFG)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.jump_flags, b.jump_flags)
        assert np.array_equal(a.rewards, b.rewards)

    def test_stream_stability_under_doubling(self):
        params = make_params(vol=0.4, lam=0.5, jump_scale=np.array([0.2, 0.2]))
        grid = unit_grid(10)
        small = generate_ensemble(params, (0.0, np.zeros(2), None), None, grid, 8, 5, CFG)
        big = generate_ensemble(params, (0.0, np.zeros(2), None), None, grid, 16, 5, CFG)
        assert np.array_equal(small.values, big.values[:8])

    def test_action_zero_matches_zero_exposure(self):
        grid = unit_grid(6)
        with_exposure = make_params(vol=0.3, action_exposure=np.array([1.0, -1.0]))
        without = make_params(vol=0.3)
        a = generate_ensemble(with_exposure, (0.0, np.zeros(2), None), None, grid, 4, 9, CFG)
        b = generate_ensemble(without, (0.0, np.zeros(2), None), None, grid, 4, 9, CFG)
        assert np.array_equal(a.values, b.values)

    def test_zero_noise_collapse(self):
        params = make_params(vol=0.0, drift_base=np.array([0.2, 0.1]))
        grid = unit_grid(6)
        ens = generate_ensemble(params, (0.0, np.zeros(2), None), None, grid, 12, 1, CFG)
        means, full = prefix_mean_signatures(ens, keep_paths=True)
        assert np.max(np.ptp(full, axis=1)) == 0.0

    def test_memory_coupling_changes_paths_deterministically(self):
        rng = np.random.default_rng(13)
        lms = []
        for _ in range(6):
            v = ta.zero(4, 3)
            v.data[1:] = rng.normal(scale=0.3, size=v.data.size - 1)
            lms.append(ta.trunc_exp(v))
        nmap = build_nystrom(lms)
        gain = 0.5 * rng.normal(size=(2, 6))
        params = make_params(vol=0.2, memory=gain)
        grid = unit_grid(6)
        junction = (0.0, np.zeros(2), ta.identity(4, 3))
        a = generate_ensemble(params, junction, None, grid, 4, 21, CFG, nmap=nmap)
        b = generate_ensemble(params, junction, None, grid, 4, 21, CFG, nmap=nmap)
        plain = generate_ensemble(make_params(vol=0.2), (0.0, np.zeros(2), None), None,
                                  grid, 4, 21, CFG)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, plain.values)

    def test_memory_requires_map(self):
        params = make_params(memory=np.ones((2, 3)))
        with pytest.raises(DomainError):
            generate_ensemble(params, (0.0, np.zeros(2), None), None, unit_grid(4), 2, 0, CFG)


class TestMeanSignature:
    def test_deterministic_ensemble_equals_single_path(self):
        params = make_params(vol=0.0, drift_base=np.array([0.4, -0.3]))
        grid = unit_grid(8)
        ens = generate_ensemble(params, (0.0, np.zeros(2), None), None, grid, 5, 2, CFG)
        sbar = empirical_mean_signature(ens, grid[0], grid[-1])
        single = path_signature(CFG, ens.path(0), grid[0], grid[-1])
        assert np.max(np.abs(sbar.data - single.data)) < 1e-12

    def test_level_one_is_mean_increment(self):
        params = make_params(vol=0.3, lam=0.7, jump_scale=np.array([0.2, 0.2]))
        grid = unit_grid(10)
        ens = generate_ensemble(params, (0.0, np.zeros(2), None), None, grid, 64, 4, CFG)
        sbar = empirical_mean_signature(ens, grid[0], grid[-1])
        mean_inc = (ens.values[:, -1] - ens.values[:, 0]).mean(axis=0)
        expected = np.concatenate([[grid[-1] - grid[0]], mean_inc])
        assert np.allclose(sbar.level(1), expected, atol=1e-12)

    def test_monte_carlo_rate(self):
        params = make_params(vol=0.4)
        grid = unit_grid(8)
        junction = (0.0, np.zeros(2), None)
        ref = empirical_mean_signature(
            generate_ensemble(params, junction, None, grid, 16384, 100, CFG),
            grid[0], grid[-1],
        )

        def err(n, seed):
            ens = generate_ensemble(params, junction, None, grid, n, seed, CFG)
            sbar = empirical_mean_signature(ens, grid[0], grid[-1])
            return np.linalg.norm(sbar.data - ref.data)

        e_small = np.mean([err(64, s) for s in range(1, 9)])
        e_big = np.mean([err(256, s) for s in range(11, 19)])
        assert 1.3 < e_small / e_big < 3.1

    def test_martingale_sanity(self):
        params = make_params(vol=0.5)
        grid = unit_grid(10)
        ens = generate_ensemble(params, (0.0, np.zeros(2), None), None, grid, 256, 8, CFG)
        sbar = empirical_mean_signature(ens, grid[0], grid[-1])
        finals = ens.values[:, -1, :2]
        stderr = finals.std(axis=0, ddof=1) / np.sqrt(ens.n_paths)
        spatial_mean = sbar.level(1)[1:3]
        assert np.all(np.abs(spatial_mean) <= 3 * stderr)


class TestHistory:
    def test_history_signature_matches_path(self):
        params = make_params(vol=0.3, lam=0.6, jump_scale=np.array([0.15, 0.15]))
        path, sig = simulate_history(params, 0.0, np.zeros(2), 12, 0.05, 31, CFG)
        recomputed = path_signature(CFG, path, path.times[0], path.times[-1])
        assert np.max(np.abs(sig.data - recomputed.data)) < 1e-12
        assert sig.is_group_like()


class TestGridValidation:
    def test_empty_grid_rejected(self):
        params = make_params()
        with pytest.raises(DomainError):
            generate_ensemble(params, (0.0, np.zeros(2), None), None,
                              np.array([0.0]), 2, 0, CFG)
