import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_net
from dfm import kernels
from dfm.datagen import DatasetSpec, make_dataset
from dfm.errors import InputDomainError, TrajectoryDivergence
from dfm.net import NetConfig, NetParams, VelocityDistribution, forward
from dfm.rng import Stream
from dfm.sampler import (
    SamplerConfig,
    Trajectory,
    draw_x0,
    gaussian_log_density,
    generate,
    generate_trajectory,
    integrate,
    mean_completion,
    mean_completion_rows,
    replay,
    sample_velocity,
    temperature,
)
from dfm.train import TrainConfig, train

# 0.01 * sqrt(2 ln 9), mpmath at 40 digits
TAU_8 = 0.020962941479364098930
# e^32 - 1, where tau0 * sqrt(2 ln(N + 1)) reaches tau_max = 8 * tau0
CROSSOVER = 78962960182679.695


def constant_field_net(u, log_var=0.0, d=None):
    u = np.asarray(u, dtype=np.float64)
    p = NetParams.init(NetConfig(d=len(u), hidden=4, depth=1), 0)
    p.tensors["mu_w"][:] = 0.0
    p.tensors["mu_b"][:] = u
    p.tensors["logvar_b"][:] = log_var
    return p


def linear_field_net(a, d=2):
    """depth 0, identity input layer: mu(x) = a * x."""
    p = NetParams.init(NetConfig(d=d, hidden=d, depth=0), 0)
    p.tensors["in_w"][:] = np.eye(d)
    p.tensors["in_b"][:] = 0.0
    p.tensors["mu_w"][:] = a * np.eye(d)
    p.tensors["mu_b"][:] = 0.0
    return p


class TestTemperature:
    def test_zero(self):
        assert temperature(0) == 0.0

    def test_eight_against_high_precision(self):
        mpmath.mp.dps = 40
        ref = mpmath.mpf("0.01") * mpmath.sqrt(2 * mpmath.log(9))
        assert abs(float(ref) - TAU_8) < 1e-18
        assert abs(temperature(8, 0.01, 0.08) - TAU_8) < 1e-9

    def test_cap(self):
        assert temperature(int(CROSSOVER) + 1) == 0.08
        assert temperature(10**15) == 0.08
        assert temperature(int(CROSSOVER) - 10**11) < 0.08

    def test_crossover_oracle(self):
        mpmath.mp.dps = 40
        assert abs(float(mpmath.exp(32) - 1) - CROSSOVER) < 1e-2

    def test_monotone_log_grid(self):
        ns = np.unique(np.concatenate([[0], np.logspace(0, 6, 2000).astype(int)]))
        taus = [temperature(int(n)) for n in ns]
        assert all(b >= a for a, b in zip(taus, taus[1:]))
        for n in ns[:200]:
            assert temperature(int(n) + 1) >= temperature(int(n))

    def test_bad_args(self):
        with pytest.raises(InputDomainError):
            temperature(-1)
        with pytest.raises(InputDomainError):
            temperature(3, 0.0, 0.08)


class TestSampleVelocity:
    def test_zero_tau_is_mean(self):
        dist = VelocityDistribution(np.array([0.3, -1.2]), 0.4)
        for seed in range(5):
            v, _, _ = sample_velocity(dist, 0.0, np.random.default_rng(seed))
            np.testing.assert_array_equal(v, dist.mu)

    def test_pinned_eps(self):
        dist = VelocityDistribution(np.array([0.5, 1.5, -2.0]), 0.0)
        v, eps, _ = sample_velocity(dist, 1.0, eps=np.ones(3))
        np.testing.assert_array_equal(v, dist.mu + 1.0)
        np.testing.assert_array_equal(eps, 1.0)

    def test_scale_monte_carlo(self):
        dist = VelocityDistribution(np.array([0.7]), math.log(4.0))
        rng = np.random.default_rng(123)
        draws = np.array([sample_velocity(dist, 0.5, rng)[0][0] for _ in range(100_000)])
        assert abs((draws - 0.7).std() - 1.0) < 0.02

    def test_log_density(self):
        dist = VelocityDistribution(np.array([1.0, 2.0]), math.log(0.25))
        v, _, lp = sample_velocity(dist, 1.0, eps=np.array([1.0, -1.0]))
        # v - mu = 0.5 * (1, -1); hand-evaluated isotropic log-pdf
        expect = -math.log(2 * math.pi * 0.25) - 0.5 * 0.5 / 0.25
        assert lp == pytest.approx(expect, rel=1e-14)
        assert gaussian_log_density(v, dist.mu, dist.log_var) == lp

    def test_needs_rng_or_eps(self):
        with pytest.raises(InputDomainError):
            sample_velocity(VelocityDistribution(np.zeros(1), 0.0), 0.1)


class TestIntegrate:
    @pytest.mark.parametrize("solver", ["euler", "midpoint", "rk4"])
    @pytest.mark.parametrize("steps", [1, 2, 4, 16, 64])
    def test_constant_field_exact(self, solver, steps):
        u = np.array([0.5, -1.25])
        x0 = np.array([0.25, 1.0])
        traj = integrate(constant_field_net(u), x0, (0, 0, 0), SamplerConfig(steps, solver))
        np.testing.assert_array_equal(traj.final, x0 + u)

    def test_linear_field_euler_closed_form(self):
        x0 = np.array([1.3, -0.7])
        traj = integrate(linear_field_net(-1.0), x0, (0, 0, 0), SamplerConfig(16, "euler"))
        np.testing.assert_allclose(traj.final, x0 * (15 / 16) ** 16, rtol=0, atol=1e-10)

    def test_rk4_beats_euler(self):
        x0 = np.array([1.3, -0.7])
        exact = x0 * math.exp(-1.0)
        p = linear_field_net(-1.0)
        err = {s: np.abs(integrate(p, x0, (0, 0, 0), SamplerConfig(16, s)).final - exact).max()
               for s in ("euler", "rk4")}
        assert err["rk4"] * 10 <= err["euler"]

    def test_single_step(self):
        p = small_net(3)
        x0 = np.array([0.4, -0.3])
        traj = integrate(p, x0, (1, 2, 1), SamplerConfig(1, "euler"))
        np.testing.assert_array_equal(traj.final, x0 + 1.0 * forward(p, x0, 0.0, (1, 2, 1)).mu)

    def test_zero_tau_rng_independent(self):
        p = small_net(1)
        x0 = np.array([0.2, 0.9])
        cfg = SamplerConfig(16, "rk4", 0.0)
        a = integrate(p, x0, (0, 1, 1), cfg, np.random.default_rng(0))
        b = integrate(p, x0, (0, 1, 1), cfg, np.random.default_rng(999))
        c = integrate(p, x0, (0, 1, 1), cfg, None)
        assert a.to_json() == b.to_json() == c.to_json()

    @pytest.mark.parametrize("solver", ["euler", "midpoint", "rk4"])
    def test_replay_bit_exact(self, solver):
        p = small_net(2)
        cfg = SamplerConfig(12, solver, 0.3)
        traj = generate_trajectory(p, (1, 0, 1), cfg, Stream(5).generator())
        again = replay(p, traj, (1, 0, 1), cfg)
        assert again.to_json() == traj.to_json()

    def test_replay_through_json(self):
        p = small_net(2)
        cfg = SamplerConfig(8, "rk4", 0.05)
        traj = generate_trajectory(p, (0, 0, 0), cfg, Stream(1).generator())
        loaded = Trajectory.from_dict(json.loads(traj.to_json()))
        assert replay(p, loaded, (0, 0, 0), cfg).to_json() == traj.to_json()

    def test_bookkeeping_shapes(self):
        p = small_net(0)
        traj = integrate(p, np.zeros(2), (0, 0, 0), SamplerConfig(5, "midpoint", 0.1), np.random.default_rng(0))
        assert traj.times == [k / 5 for k in range(6)]
        assert len(traj.states) == 6 and len(traj.sampled_velocities) == 5 and len(traj.noise_draws) == 5
        assert all(s.shape == (2,) for s in traj.states)
        assert math.isfinite(traj.cum_log_confidence)

    def test_confidence_decreases_with_tau(self):
        p = constant_field_net([0.5, -0.5], log_var=math.log(0.3))
        noise = [np.full(2, 0.8) for _ in range(16)]
        confs = [integrate(p, np.zeros(2), (0, 0, 0), SamplerConfig(16, "rk4", tau), noise=noise).cum_log_confidence
                 for tau in (0.0, 0.01, 0.05, 0.2, 1.0)]
        assert all(b < a for a, b in zip(confs, confs[1:]))

    def test_divergence_names_step(self):
        p = linear_field_net(1e200)
        with pytest.raises(TrajectoryDivergence) as exc:
            integrate(p, np.ones(2), (0, 0, 0), SamplerConfig(16, "euler"))
        assert exc.value.step == 1

    def test_noise_length_checked(self):
        with pytest.raises(InputDomainError):
            integrate(small_net(), np.zeros(2), (0, 0, 0), SamplerConfig(4, tau=0.1), noise=[np.zeros(2)])

    def test_stochastic_needs_rng(self):
        with pytest.raises(InputDomainError):
            integrate(small_net(), np.zeros(2), (0, 0, 0), SamplerConfig(4, tau=0.1))

    def test_config_validation(self):
        with pytest.raises(InputDomainError):
            SamplerConfig(num_steps=0)
        with pytest.raises(InputDomainError):
            SamplerConfig(solver="dopri5")
        with pytest.raises(InputDomainError):
            SamplerConfig(tau=-0.1)


class TestGenerate:
    def test_injected_x0_matches_integrate(self):
        p = small_net(4)
        cfg = SamplerConfig(16, "rk4", 0.0)
        rng = Stream(3).generator()
        out = generate(p, (1, 1, 0), cfg, rng)
        x0 = draw_x0(2, Stream(3).generator())
        np.testing.assert_array_equal(out, integrate(p, x0, (1, 1, 0), cfg).final)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.sampled_from(["euler", "midpoint", "rk4"]))
    def test_mean_completion_rows(self, seed, start, solver):
        p = small_net(seed % 7, hidden=8)
        cfg = SamplerConfig(16, solver)
        rng = np.random.default_rng(seed)
        xs = rng.standard_normal((5, 2))
        rows = mean_completion_rows(p, xs, start, (1, 2, 1), cfg)
        serial = np.stack([mean_completion(p, x, start, (1, 2, 1), cfg) for x in xs])
        if kernels.BACKEND == "cython":
            np.testing.assert_array_equal(rows, serial)
        else:
            np.testing.assert_allclose(rows, serial, rtol=1e-12, atol=1e-12)

    def test_single_gaussian_mean(self):
        """1000 generations from a net trained on N(1.5, 0.5^2) land within
        three standard errors of the target mean."""
        spec = DatasetSpec(d=1, n_classes=1, n_pitches=1, n_velocities=1, sigma_data=0.5, centroids=[[1.5]])
        data = make_dataset(spec, 2000)
        res = train(data, TrainConfig(lr=1e-3, steps=3000, batch_size=128, seed=0),
                    net_config=NetConfig(d=1, hidden=32, depth=2))
        cfg = SamplerConfig(16, "rk4")
        x0 = np.stack([draw_x0(1, Stream(11).child(i).generator()) for i in range(1000)])
        gen = mean_completion_rows(res.params, x0, 0, (0, 0, 0), cfg)[:, 0]
        se = gen.std(ddof=1) / math.sqrt(len(gen))
        assert abs(gen.mean() - 1.5) < 3 * se
