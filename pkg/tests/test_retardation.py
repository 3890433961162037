import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retnbody import retardation as ret
from retnbody import worldline as wl


def static_history(x3, sigma=1.0, q=1.0, t0=-20.0, t1=2.0, n=12, c=1.0):
    spec = wl.ParticleSpec(m0=1.0, q=q, sigma=sigma, label="s")
    return wl.inertial_history(spec, np.asarray(x3, dtype=float),
                               np.zeros(3), t0, t1, n, c=c)


def uniform_history(x3, v3, sigma=1.0, q=1.0, t0=-40.0, t1=2.0, n=24, c=1.0):
    spec = wl.ParticleSpec(m0=1.0, q=q, sigma=sigma, label="u")
    return wl.inertial_history(spec, np.asarray(x3, dtype=float),
                               np.asarray(v3, dtype=float), t0, t1, n, c=c)


def bisect_oracle(obs_x3, src_pos_fn, t_obs, sigma, c=1.0, lo=0.0, hi=64.0):
    """Independent bracketing bisection on the squared delay equation."""
    def F(tau):
        dx = obs_x3 - src_pos_fn(t_obs - tau)
        return (c * tau) ** 2 - float(dx @ dx) - sigma**2

    assert F(lo) <= 0.0 < F(hi)
    for _ in range(220):
        mid = 0.5 * (lo + hi)
        if F(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestSelfDelay:
    def test_static_sigma_one(self):
        h = static_history([0.0, 0.0, 0.0], sigma=1.0)
        root = ret.self_delay(h, 0.5)
        assert root.t_ret == pytest.approx(1.0, abs=1e-13)
        assert root.s_ret == pytest.approx(1.0, abs=1e-12)
        assert root.residual <= ret.root_tolerance(0.0, 1.0)

    def test_static_sigma_zero_degenerate(self):
        h = static_history([0.0, 0.0, 0.0], sigma=1.0)
        root = ret.self_delay(h, 0.5, sigma=0.0)
        assert root.t_ret == 0.0

    def test_uniform_motion_gamma_sigma(self):
        # emission shell of a uniformly moving particle: c tau = gamma sigma
        beta = 0.5
        g = 1.0 / np.sqrt(1.0 - beta**2)
        h = uniform_history([0.0, 0.0, 0.0], [beta, 0.0, 0.0], sigma=1.0)
        root = ret.self_delay(h, 1.0)
        assert root.t_ret == pytest.approx(g, abs=1e-11)

    def test_uniform_motion_vs_bisection_oracle(self):
        beta = np.array([0.3, -0.45, 0.1])
        x0 = np.array([0.2, -0.1, 0.4])
        h = uniform_history(x0, beta, sigma=0.7)
        t_obs = 1.2
        root = ret.self_delay(h, t_obs)
        obs_x = h.state_at_time(t_obs).r[1:]
        # the helper anchors the position at its start time t0 = -40
        oracle = bisect_oracle(obs_x, lambda t: x0 + beta * (t + 40.0),
                               t_obs, 0.7)
        assert root.t_ret == pytest.approx(oracle, abs=1e-12)

    def test_strict_coverage_raises(self):
        h = static_history([0.0, 0.0, 0.0], sigma=1.0, t0=0.4, t1=2.0)
        with pytest.raises(ret.HistoryTooShort):
            ret.self_delay(h, 0.5, strict_coverage=True)

    def test_no_convergence_on_superluminal_stub(self):
        # a chasing source that outruns its own emission shell never
        # produces a causal root; the solver must fail loudly
        class Chasing:
            c = 1.0
            t_first = -1e9
            spec = wl.ParticleSpec(1.0, 1.0, 0.5)

            def state_at_time(self, t):
                x = np.array([1.2 * t, 0.0, 0.0])
                return wl.WorldlineSample(t=t, s=t, r=np.concatenate(([t], x)),
                                          u=np.array([1.0, 0, 0, 0]),
                                          a=np.zeros(4))

            def proper_time_of(self, t):
                return t

        with pytest.raises(ret.NoConvergence):
            ret.self_delay(Chasing(), 0.0, sigma=0.5)


class TestPairDelay:
    def test_three_four_five(self):
        h = static_history([3.0, 0.0, 0.0], sigma=1.0)
        obs = np.array([0.6, 0.0, 0.0, 0.0])
        root = ret.pair_delay(h, obs, sigma_shift=4.0)
        assert root.t_ret == pytest.approx(5.0, abs=1e-12)

    def test_light_cone_limit(self):
        h = static_history([2.5, 0.0, 0.0], sigma=1.0)
        obs = np.array([0.0, 0.0, 0.0, 0.0])
        root = ret.pair_delay(h, obs, sigma_shift=0.0)
        assert root.t_ret == pytest.approx(2.5, abs=1e-12)

    def test_moving_source_vs_bisection_oracle(self):
        x0 = np.array([1.5, 0.3, -0.2])
        v = np.array([-0.2, 0.55, 0.15])
        h = uniform_history(x0, v, sigma=0.9)
        t_obs = 0.8
        obs = np.array([t_obs, -0.4, 0.1, 0.0])
        root = ret.pair_delay(h, obs, sigma_shift=0.9)
        oracle = bisect_oracle(obs[1:], lambda t: x0 + v * (t + 40.0), t_obs, 0.9)
        assert root.t_ret == pytest.approx(oracle, abs=1e-12)
        # residual satisfies the defining equation
        src = root.source_event
        dx = obs[1:] - src.r[1:]
        assert abs(root.t_ret**2 - float(dx @ dx) - 0.81) <= \
            ret.root_tolerance(float(dx @ dx), 0.9)


class TestDeltaLineIntegral:
    def test_static_time_component(self):
        d, sigma, q = 2.0, 0.8, 1.7
        h = static_history([d, 0.0, 0.0], sigma=sigma, q=q)
        obs = np.array([0.0, 0.0, 0.0, 0.0])
        pot = ret.delta_line_integral(h, obs, sigma)
        assert pot[0] == pytest.approx(q / np.sqrt(d**2 + sigma**2), rel=1e-12)
        assert np.max(np.abs(pot[1:])) == 0.0

    def test_zero_charge(self):
        h = static_history([2.0, 0.0, 0.0], sigma=0.5, q=0.0)
        pot = ret.delta_line_integral(h, np.array([0.0, 0, 0, 0]), 0.5)
        assert np.array_equal(pot, np.zeros(4))

    def test_point_limit_is_coulomb(self):
        d, q = 3.0, 2.0
        h = static_history([d, 0.0, 0.0], sigma=1.0, q=q)
        pot = ret.delta_line_integral(h, np.array([0.0, 0, 0, 0]), 1e-6 * d)
        assert pot[0] == pytest.approx(q / d, abs=1e-10)

    def test_degenerate_jacobian_guard(self):
        h = static_history([2.0, 0.0, 0.0], sigma=0.5)
        with pytest.raises(ret.DegenerateJacobian):
            ret.delta_line_integral(h, np.array([0.0, 0, 0, 0]), 0.5,
                                    jac_tol_factor=1e10)

    def test_custom_integrand(self):
        d, sigma = 2.0, 0.8
        h = static_history([d, 0.0, 0.0], sigma=sigma, q=1.0)
        ones = ret.delta_line_integral(h, np.array([0.0, 0, 0, 0]), sigma,
                                       integrand=lambda smp: np.ones(4))
        assert np.allclose(ones, 1.0 / np.sqrt(d**2 + sigma**2))


class TestMaxDelay:
    def test_single_static(self):
        h = static_history([0.0, 0.0, 0.0], sigma=1.0)
        assert ret.max_delay([h], 0.0) == pytest.approx(1.0, abs=1e-12)

    def test_two_static_pair_dominates(self):
        ha = static_history([0.0, 0.0, 0.0], sigma=4.0)
        hb = static_history([3.0, 0.0, 0.0], sigma=4.0)
        assert ret.max_delay([ha, hb], 0.0) == pytest.approx(5.0, abs=1e-12)

    def test_three_static_matches_brute_force(self):
        rng = np.random.default_rng(7)
        xs = rng.uniform(-2, 2, size=(3, 3))
        sigmas = rng.uniform(0.3, 1.4, size=3)
        hs = [static_history(xs[k], sigma=float(sigmas[k])) for k in range(3)]
        roots = []
        for i in range(3):
            roots.append(ret.self_delay(hs[i], 0.0).t_ret)
            obs = hs[i].state_at_time(0.0).r
            for j in range(3):
                if j == i:
                    continue
                for shift in (sigmas[i], sigmas[j]):
                    roots.append(ret.pair_delay(hs[j], obs, float(shift)).t_ret)
        assert ret.max_delay(hs, 0.0) == pytest.approx(max(roots), abs=1e-13)


sigmas = st.floats(min_value=0.05, max_value=3.0, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(sigmas, sigmas)
def test_delay_monotone_in_sigma(s1, s2):
    if abs(s1 - s2) < 1e-6:
        return
    lo, hi = min(s1, s2), max(s1, s2)
    h = uniform_history([0.5, -0.3, 0.2], [0.25, 0.3, -0.1], sigma=1.0)
    r_lo = ret.self_delay(h, 0.0, sigma=lo)
    r_hi = ret.self_delay(h, 0.0, sigma=hi)
    assert r_hi.t_ret > r_lo.t_ret


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=-0.8, max_value=0.8), sigmas)
def test_dual_seed_uniqueness(beta, sigma):
    h = uniform_history([1.0, 0.0, 0.0], [beta, 0.0, 0.0], sigma=sigma)
    static_est = ret.self_delay(h, 0.0, sigma=sigma, seed=None).t_ret
    from_zero = ret.self_delay(h, 0.0, sigma=sigma, seed=0.0).t_ret
    from_ten = ret.self_delay(h, 0.0, sigma=sigma, seed=10.0 * static_est).t_ret
    assert abs(from_zero - from_ten) < 1e-11 * (1.0 + static_est)
