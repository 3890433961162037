import math

import numpy as np
import pytest

from retnbody.dynamics import (
    InsufficientPrehistory,
    SystemState,
    copy_state,
    demo_globally_isolated,
    demo_locally_isolated,
    flow_non_bijectivity_check,
    run,
    seed,
    step,
)
from retnbody.fields import ExternalFieldModel, SelfForceMode, total_faraday
from retnbody.minkowski import dot, raise_index
from retnbody.worldline import (
    ConstraintViolation,
    ParticleSpec,
    history_from_kinematics,
    inertial_history,
)


def static_pair(d=2.0, q1=0.5, q2=-0.3, s1=0.5, s2=0.5, m0=1.0, dt=0.02):
    specs = [ParticleSpec(m0, q1, s1, "one"), ParticleSpec(m0, q2, s2, "two")]
    return seed(specs, [[-d / 2, 0, 0], [d / 2, 0, 0]],
                [[0, 0, 0], [0, 0, 0]], dt=dt)


# -- seeding -------------------------------------------------------------------


def test_seed_coverage_single_static():
    st = seed([ParticleSpec(1.0, 1.0, 1.0, "a")], [[0, 0, 0]], [[0, 0, 0]])
    h = st.histories[0]
    assert st.t_now - h.t_first >= 1.0
    for t in (-0.3, -0.7, h.t_first - 5.0):
        smp = h.state_at_time(t)
        assert np.array_equal(smp.a, np.zeros(4))
        assert np.array_equal(smp.u, np.array([1.0, 0.0, 0.0, 0.0]))


def test_seed_coverage_static_pair():
    specs = [ParticleSpec(1.0, 1.0, 4.0, "a"), ParticleSpec(1.0, 1.0, 4.0, "b")]
    st = seed(specs, [[0, 0, 0], [3.0, 0, 0]], [[0, 0, 0], [0, 0, 0]])
    for h in st.histories:
        assert st.t_now - h.t_first >= 5.0


def test_seed_rejects_short_prehistory():
    specs = [ParticleSpec(1.0, 1.0, 4.0, "a"), ParticleSpec(1.0, 1.0, 4.0, "b")]
    pre = [inertial_history(specs[0], [-2.0 * 0, 0, 0], [0, 0, 0], -2.0, 0.0, 8),
           inertial_history(specs[1], [3.0, 0, 0], [0, 0, 0], -2.0, 0.0, 8)]
    with pytest.raises(InsufficientPrehistory) as err:
        seed(prehistories=pre)
    assert err.value.required > 2.0
    bad_end = [inertial_history(specs[0], [0, 0, 0], [0, 0, 0], -8.0, -1.0, 8),
               inertial_history(specs[1], [3, 0, 0], [0, 0, 0], -8.0, -1.0, 8)]
    with pytest.raises(ValueError):
        seed(prehistories=bad_end)


def test_seed_accepts_covering_prehistory():
    spec = ParticleSpec(1.0, 0.5, 1.0, "a")
    pre = [inertial_history(spec, [0, 0, 0], [0, 0, 0], -4.0, 0.0, 32)]
    st = seed(prehistories=pre)
    assert st.n == 1
    assert st.t_now == 0.0


# -- stepping ------------------------------------------------------------------


def test_free_motion_single_step():
    spec = ParticleSpec(1.0, 0.0, 0.5, "free")
    v = np.array([0.6, 0.0, 0.0])
    st = seed([spec], [[0, 0, 0]], [v], dt=0.05)
    u_before = st.histories[0].state_at_time(0.0).u.copy()
    step(st)
    smp = st.histories[0].state_at_time(st.t_now)
    assert np.max(np.abs(smp.u - u_before)) < 1e-14
    assert np.max(np.abs(smp.r[1:] - v * st.t_now)) < 1e-14
    assert smp.r[0] == st.c * st.t_now


def test_free_motion_long_run():
    spec = ParticleSpec(1.0, 0.0, 0.5, "free")
    v = np.array([0.3, -0.2, 0.1])
    st = seed([spec], [[1.0, 0.5, -0.2]], [v], dt=0.01)
    run(st, 10.0)
    assert len(st.diagnostics) == 1000
    smp = st.histories[0].state_at_time(st.t_now)
    want = np.array([1.0, 0.5, -0.2]) + v * st.t_now
    assert np.max(np.abs(smp.r[1:] - want)) < 1e-12
    assert abs(dot(smp.u, smp.u) - 1.0) < 1e-13


def test_magnetic_orbit_speed_and_constraint():
    spec = ParticleSpec(1.0, 1.0, 0.5, "orb")
    B = 0.5
    v0 = 0.3
    st = seed([spec], [[0, 0, 0]], [[v0, 0, 0]], dt=0.01,
              external=ExternalFieldModel.uniform(B=(0.0, 0.0, B)),
              include_self=False, include_binary=False)
    run(st, 10.0)
    assert len(st.diagnostics) == 1000
    h = st.histories[0]
    t_chk = st.t_now
    u_end = h.state_at_time(t_chk).u
    g0 = 1.0 / math.sqrt(1.0 - v0 * v0)
    speed0 = g0 * v0
    assert abs(np.linalg.norm(u_end[1:]) - speed0) < 1e-10
    assert abs(u_end[0] - g0) < 1e-10
    drift = max(np.max(r.constraint_err) for r in st.diagnostics.records)
    assert drift < 1e-9
    # gyration oracle: x(t) = R sin(w t), y(t) = R (cos(w t) - 1)
    w = B * spec.q / (g0 * spec.m0)
    R = v0 / w
    want = np.array([R * math.sin(w * t_chk), R * (math.cos(w * t_chk) - 1.0), 0.0])
    assert np.max(np.abs(h.state_at_time(t_chk).r[1:] - want)) < 1e-6


def test_static_pair_initial_force_matches_closed_form():
    d, q1, q2, s1, s2, m0 = 2.0, 1.0, -0.6, 0.5, 0.7, 1.3
    specs = [ParticleSpec(m0, q1, s1, "one"), ParticleSpec(m0, q2, s2, "two")]
    st = seed(specs, [[-d / 2, 0, 0], [d / 2, 0, 0]], [[0, 0, 0], [0, 0, 0]])
    mag = d * ((d * d + s1 * s1) ** -1.5 + (d * d + s2 * s2) ** -1.5)
    for i, sgn in ((0, -1.0), (1, 1.0)):
        h = st.histories[i]
        smp = h.state_at_time(0.0)
        F, g = total_faraday(st.histories, i, 0.0, st.external)
        assert g is None
        dudt = raise_index((h.spec.q / st.c) * (F.matrix @ smp.u)) / (smp.u[0] * m0)
        want_x = q1 * q2 * sgn * mag / m0
        assert dudt[1] == pytest.approx(want_x, rel=1e-8)
        assert abs(dudt[0]) < 1e-12
        assert abs(dudt[2]) < 1e-12 and abs(dudt[3]) < 1e-12


def test_rk4_order():
    def final_state(dt):
        st = static_pair(d=2.0, q1=0.5, q2=-0.5, s1=0.6, s2=0.6, dt=dt)
        run(st, 0.4)
        out = []
        for h in st.histories:
            smp = h.state_at_time(st.t_now)
            out.append(np.concatenate([smp.r[1:], smp.u]))
        return np.concatenate(out)

    ref = final_state(0.05 / 8)
    e1 = np.max(np.abs(final_state(0.05) - ref))
    e2 = np.max(np.abs(final_state(0.025) - ref))
    assert 12.0 < e1 / e2 < 20.0


def test_line_element_consistency():
    st = static_pair(d=3.0, q1=0.2, q2=-0.2, s1=1.0, s2=1.0, m0=2.0, dt=0.02)
    run(st, 0.8)
    for h in st.histories:
        smps = h.samples
        k0 = next(k for k, s in enumerate(smps) if s.t >= 0.0)
        for k in range(k0, len(smps) - 1):
            a, b = smps[k], smps[k + 1]
            dr = b.r - a.r
            chord = math.sqrt(dot(dr, dr))
            ds = b.s - a.s
            assert ds == pytest.approx(chord, rel=1e-8)


def test_determinism_bit_identical_csv(tmp_path):
    outs = []
    for tag in ("x", "y"):
        st = static_pair(dt=0.05)
        d = tmp_path / tag
        run(st, 0.25, trajectory_dir=str(d), diagnostics_path=str(d / "diag.csv"))
        outs.append(d)
    for name in ("trajectory_one.csv", "trajectory_two.csv", "diag.csv"):
        a = (outs[0] / name).read_bytes()
        b = (outs[1] / name).read_bytes()
        assert a == b, name


def test_diagnostics_rows_and_header():
    st = static_pair(dt=0.05)
    run(st, 0.25)
    assert len(st.diagnostics) == 5
    hdr = st.diagnostics.header(["one", "two"])
    rec = st.diagnostics.records[0]
    flat = ([rec.step, rec.t] + list(rec.constraint_err)
            + list(rec.h_eff) + list(rec.p_hat) + list(rec.m_hat)
            + list(rec.self_delays) + list(rec.pair_delays))
    assert len(hdr) == len(flat)
    assert rec.self_delays[0] > 0.0
    assert rec.wall_time >= 0.0


def test_partial_output_preserved_on_failure(tmp_path):
    spec = ParticleSpec(0.05, 5.0, 0.4, "hot")
    st = seed([spec], [[0, 0, 0]], [[0, 0, 0]], dt=0.5,
              external=ExternalFieldModel.uniform(E=(50.0, 0.0, 0.0)),
              include_self=False, include_binary=False)
    with pytest.raises(ConstraintViolation):
        run(st, 5.0, trajectory_dir=str(tmp_path),
            diagnostics_path=str(tmp_path / "diag.csv"))
    assert (tmp_path / "trajectory_hot.csv").exists()
    assert (tmp_path / "diag.csv").exists()


def test_exact_vs_asymptotic_divergence_shrinks_with_sigma():
    def divergence(sigma):
        finals = []
        for mode in (SelfForceMode.EXACT, SelfForceMode.ASYMPTOTIC):
            specs = [ParticleSpec(2.0, 0.3, sigma, "a"),
                     ParticleSpec(2.0, 0.3, sigma, "b")]
            st = seed(specs, [[-1.5, 0, 0], [1.5, 0, 0]],
                      [[0, 0, 0], [0, 0, 0]], dt=0.02, mode=mode)
            run(st, 0.6)
            finals.append(np.concatenate(
                [h.state_at_time(st.t_now).r[1:] for h in st.histories]))
        return float(np.max(np.abs(finals[0] - finals[1])))

    d_big = divergence(1.0)
    d_small = divergence(0.5)
    assert d_small < d_big
    assert d_big < 1e-2


# -- demos ----------------------------------------------------------------------


def test_demo_locally_isolated_pulse():
    rep = demo_locally_isolated(t_switch=1.5, t_end=3.0, dt=0.05)
    assert rep["post_switch_max_self_force"] > 1e-12
    f1, f2 = rep["force_pair"]
    assert np.array_equal(4.0 * f1, f2)
    assert rep["q_doubling_ratio"] == 4.0


def test_demo_locally_isolated_no_pulse_control():
    rep = demo_locally_isolated(e_amp=0.0, t_switch=1.5, t_end=3.0, dt=0.05)
    assert rep["post_switch_max_self_force"] < 1e-12


def test_demo_globally_isolated():
    rep = demo_globally_isolated(d=3.0, q=0.5, sigma=0.8, t_end=1.0, dt=0.05)
    assert rep["mirror_residual"] < 1e-9
    assert rep["p_hat_drift"].shape == (4,)
    assert np.all(np.isfinite(rep["comm_p0_pl"]))


def test_demo_globally_isolated_neutral():
    rep = demo_globally_isolated(d=3.0, q=0.0, sigma=0.8, t_end=1.0, dt=0.05)
    assert rep["mirror_residual"] < 1e-14
    assert np.max(np.abs(rep["p_hat_drift"])) < 1e-14
    assert np.max(np.abs(rep["comm_p0_pl"])) < 1e-12


# -- flow non-bijectivity ---------------------------------------------------------


def curved_prehistory(spec, x0, span, c=1.0):
    A, w = 0.4, 1.2

    def x_fn(t):
        return np.array([x0[0] + A * (math.cos(w * t) - 1.0), x0[1], x0[2]])

    def v_fn(t):
        return np.array([-A * w * math.sin(w * t), 0.0, 0.0])

    def a_fn(t):
        return np.array([-A * w * w * math.cos(w * t), 0.0, 0.0])

    nodes = np.linspace(-span, 0.0, 160)
    return history_from_kinematics(spec, nodes, x_fn, v_fn, a_fn, c=c)


def test_flow_non_bijectivity_inertial_vs_curved():
    # the curved prehistory hands over a discontinuous acceleration at
    # t=0, so the run keeps u on shell by renormalization
    d, sigma, q = 2.5, 0.6, 0.5
    specs = [ParticleSpec(1.0, q, sigma, "a"), ParticleSpec(1.0, -q, sigma, "b")]
    pos = [np.array([-d / 2, 0.0, 0.0]), np.array([d / 2, 0.0, 0.0])]
    st_a = seed(specs, pos, [[0, 0, 0], [0, 0, 0]], dt=0.05,
                renormalize_u=True)
    pre_b = [curved_prehistory(specs[0], pos[0], 6.0),
             inertial_history(specs[1], pos[1], [0, 0, 0], -6.0, 0.0, 160)]
    st_b = seed(prehistories=pre_b, dt=0.05, renormalize_u=True)
    rep = flow_non_bijectivity_check(st_a, st_b, 1.5)
    assert rep["initial_agreement"] < 1e-14
    assert rep["passes"]
    assert rep["max_divergence"] > 10.0 * rep["tolerance"]


def test_flow_identical_prehistories_zero_divergence():
    st_a = static_pair(dt=0.05)
    st_b = static_pair(dt=0.05)
    rep = flow_non_bijectivity_check(st_a, st_b, 0.5)
    assert rep["max_divergence"] == 0.0
    assert not rep["passes"]


def test_flow_neutral_zero_divergence():
    d, sigma = 2.5, 0.6
    specs = [ParticleSpec(1.0, 0.0, sigma, "a"), ParticleSpec(1.0, 0.0, sigma, "b")]
    pos = [np.array([-d / 2, 0.0, 0.0]), np.array([d / 2, 0.0, 0.0])]
    st_a = seed(specs, pos, [[0, 0, 0], [0, 0, 0]], dt=0.05)
    pre_b = [curved_prehistory(specs[0], pos[0], 6.0),
             inertial_history(specs[1], pos[1], [0, 0, 0], -6.0, 0.0, 160)]
    st_b = seed(prehistories=pre_b, dt=0.05)
    rep = flow_non_bijectivity_check(st_a, st_b, 0.5)
    assert rep["max_divergence"] == 0.0


def test_copy_state_independent():
    st = static_pair(dt=0.05)
    dup = copy_state(st)
    step(st)
    assert dup.t_now == 0.0
    assert dup.histories[0].t_latest == 0.0
    assert st.histories[0].t_latest > 0.0
