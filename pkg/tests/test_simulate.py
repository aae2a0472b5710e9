import math
from dataclasses import replace

import numpy as np
import pytest

from nanodeloc.dynamics import hold, loop_protocol, one_pulse, run_protocol, thermal_state, two_pulse
from nanodeloc.dynamics import PulseProtocol, PulseSegment
from nanodeloc.params import PhysicalParams
from nanodeloc.simulate import (
    MeasurementEnsemble,
    SimConfig,
    export_csv,
    load_ensemble,
    save_ensemble,
    simulate_ensemble,
    simulate_repetition,
    transition_plan,
)


@pytest.fixture
def short(nominal):
    return SimConfig(nominal, two_pulse(2.0), duration=1e-4, repetitions=6, seed=5)


def test_config_validation(nominal):
    with pytest.raises(ValueError):
        SimConfig(nominal, dt=1e-6)  # dt * omega_m = 0.35
    with pytest.raises(ValueError):
        SimConfig(nominal, dt=-1e-7)
    with pytest.raises(ValueError):
        SimConfig(nominal, repetitions=0)
    with pytest.raises(ValueError):
        SimConfig(nominal, gain=0.0)


def test_config_round_trip(short):
    again = SimConfig.from_dict(short.to_dict())
    assert again == short
    assert again.digest() == short.digest()
    assert replace(short, seed=6).digest() != short.digest()


def test_marker_and_shape(short):
    ens = simulate_ensemble(short)
    t_p = short.protocol.duration(short.params.omega_m)
    assert ens.records.shape == (6, short.n_samples)
    assert ens.truths.shape == (6, short.n_samples, 2)
    assert ens.time_axis[ens.marker] == pytest.approx(0.0, abs=1e-15)
    assert ens.time_axis[0] >= -t_p - 1e-15
    assert ens.measurement_records().shape[1] == round(short.duration / short.dt)


def test_determinism(short):
    a, b = simulate_ensemble(short), simulate_ensemble(short)
    assert np.array_equal(a.records, b.records) and np.array_equal(a.truths, b.truths)


def test_single_repetition_matches_ensemble(short):
    ens = simulate_ensemble(replace(short, repetitions=1))
    rec, truth = simulate_repetition(short, 0)
    assert np.array_equal(ens.records[0], rec) and np.array_equal(ens.truths[0], truth)


def test_repetition_content_independent_of_order(short):
    full = simulate_ensemble(short)
    part = simulate_ensemble(short, [4, 1, 2])
    assert np.array_equal(part.records, full.records[[4, 1, 2]])
    assert np.array_equal(part.truths, full.truths[[4, 1, 2]])


def test_worker_count_does_not_change_results(short, monkeypatch):
    ref = simulate_ensemble(short)
    monkeypatch.setenv("NANODELOC_WORKERS", "3")
    par = simulate_ensemble(short)
    assert np.array_equal(ref.records, par.records)


def test_numba_and_numpy_paths_agree(short):
    a = simulate_ensemble(short, use_numba=True)
    b = simulate_ensemble(short, use_numba=False)
    np.testing.assert_allclose(a.truths, b.truths, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a.records, b.records, rtol=1e-12, atol=1e-9)


def test_noiseless_truth_is_a_sinusoid():
    om = 2 * math.pi * 56.5e3
    p = PhysicalParams(omega_m=om, gamma_qba=0.0, eta=1.0, n_bar=0.0)
    r = 1.7
    cfg = SimConfig(p, one_pulse(r), duration=2e-4, repetitions=2, seed=1)
    ens = simulate_ensemble(cfg)
    t = ens.time_axis
    t_init = -cfg.protocol.duration(om)
    for k in range(2):
        z = ens.truths[k, :, 0]
        soft = t < 0
        ph = om * (t[soft] - t_init) / r
        basis = np.column_stack([np.cos(ph), r * np.sin(ph)])
        coef, *_ = np.linalg.lstsq(basis, z[soft], rcond=None)
        assert np.max(np.abs(basis @ coef - z[soft])) < 1e-10
        hard = t >= 0
        basis = np.column_stack([np.cos(om * t[hard]), np.sin(om * t[hard])])
        coef, *_ = np.linalg.lstsq(basis, z[hard], rcond=None)
        assert np.max(np.abs(basis @ coef - z[hard])) < 1e-10
    # no measurement strength: the record is white noise of variance 1/dt
    assert np.std(ens.records * math.sqrt(cfg.dt)) == pytest.approx(1.0, rel=0.03)


def _var_se(v, c, R):
    return math.sqrt(2.0 / R) * v, math.sqrt((v * v + c * c) / R)


def test_marker_covariance_matches_dynamics(nominal):
    cfg = SimConfig(nominal, two_pulse(2.45), duration=2e-6, repetitions=400, seed=3)
    ens = simulate_ensemble(cfg)
    x = ens.truths[:, ens.marker]
    cov = np.cov(x.T)
    # sample at the marker lies up to one dt after the protocol end
    st = run_protocol(thermal_state(nominal.n_bar), two_pulse(2.45), nominal)
    plan = transition_plan(cfg)
    m, q = plan.m[ens.marker], plan.q[ens.marker]
    ref = m @ st.covariance() @ m.T + q if ens.time_axis[ens.marker] > 0 else st.covariance()
    R = cfg.repetitions
    se_z, _ = _var_se(ref[0, 0], 0, R)
    se_p, _ = _var_se(ref[1, 1], 0, R)
    se_c = math.sqrt((ref[0, 0] * ref[1, 1] + ref[0, 1] ** 2) / R)
    assert abs(cov[0, 0] - ref[0, 0]) < 3 * se_z
    assert abs(cov[1, 1] - ref[1, 1]) < 3 * se_p
    assert abs(cov[0, 1] - ref[0, 1]) < 3 * se_c


@pytest.mark.parametrize("protocol", [one_pulse(1.7), two_pulse(2.0), loop_protocol(2.45, 0.3)],
                         ids=["one_pulse", "two_pulse", "loop"])
def test_moment_convergence(protocol, nominal):
    p = nominal.replace(f0_mean=0.05 * nominal.omega_m, v_f0=(0.02 * nominal.omega_m) ** 2)
    t_p = protocol.duration(p.omega_m)
    # a protocol that ends exactly on a sample puts the marker at its end
    dt = t_p / math.ceil(t_p / 2e-7)
    cfg = SimConfig(p, protocol, dt=dt, duration=dt, repetitions=20_000, seed=17)
    ens = simulate_ensemble(cfg)
    x = ens.truths[:, cfg.marker]
    st = run_protocol(thermal_state(p.n_bar), protocol, p)
    mean_ref = st.mean
    cov_ref = st.covariance() + p.v_f0 * np.outer(st.sens, st.sens)
    cov = np.cov(x.T)
    tol = 4 / math.sqrt(cfg.repetitions)
    assert cov[0, 0] == pytest.approx(cov_ref[0, 0], rel=tol)
    assert cov[1, 1] == pytest.approx(cov_ref[1, 1], rel=tol)
    se_mean = np.sqrt(np.diag(cov_ref) / cfg.repetitions)
    assert np.all(np.abs(x.mean(axis=0) - mean_ref) < 4 * se_mean)


@pytest.mark.parametrize("dt", [2e-7, 1e-7, 1.37e-7])
def test_transition_plan_composes_to_protocol(dt, nominal):
    """Exact discretization: the composed step maps equal the closed-form
    propagation for any dt, including boundaries that fall between samples."""
    p = nominal.replace(f0_mean=0.1 * nominal.omega_m)
    cfg = SimConfig(p, two_pulse(2.45), dt=dt, duration=10 * dt, repetitions=1)
    plan = transition_plan(cfg)
    end = cfg.protocol.duration(p.omega_m)
    v = np.eye(2) * p.v0
    mean = np.zeros(2)
    for k in range(cfg.n_samples):
        mean = plan.m[k] @ mean + p.f0_mean * plan.b[k]
        v = plan.m[k] @ v @ plan.m[k].T + plan.q[k]
        t_k = plan.times[k]
        if abs(t_k) < 1e-15:
            ref = run_protocol(thermal_state(p.n_bar), two_pulse(2.45), p)
            np.testing.assert_allclose(v, ref.covariance(), rtol=1e-10)
            np.testing.assert_allclose(mean, ref.mean, rtol=1e-10, atol=1e-12)
    # final sample: free evolution past the end of the protocol
    tail = PulseProtocol(tuple(two_pulse(2.45).segments) + (PulseSegment(1.0, p.omega_m * (plan.times[-1])),))
    ref = run_protocol(thermal_state(p.n_bar), tail, p)
    np.testing.assert_allclose(v, ref.covariance(), rtol=1e-10)
    assert -end - 1e-15 <= plan.times[0] < -end + dt


def test_record_calibration_identity(nominal):
    gain = 3.0
    cfg = SimConfig(nominal, hold(), duration=1.5e-3, repetitions=1000, seed=8, gain=gain)
    ens = simulate_ensemble(cfg)
    z = ens.truths[:, :, 0].ravel()
    y = ens.records.ravel()
    slope = float(np.dot(z, y) / np.dot(z, z))
    assert slope == pytest.approx(gain * math.sqrt(8 * nominal.gamma_meas), rel=0.01)


def test_record_scale_follows_segment_ratio(nominal):
    cfg = SimConfig(nominal, one_pulse(2.0), duration=1e-5, repetitions=1)
    plan = transition_plan(cfg)
    full = math.sqrt(8 * nominal.gamma_meas)
    assert plan.meas_scale[0] == pytest.approx(full / 2.0)
    assert plan.meas_scale[-1] == pytest.approx(full)


def test_persistence_round_trip(short, tmp_path):
    ens = simulate_ensemble(short)
    path = tmp_path / "ens.bin"
    save_ensemble(ens, path)
    back = load_ensemble(path)
    assert np.array_equal(back.records, ens.records)
    assert np.array_equal(back.truths, ens.truths)
    assert np.array_equal(back.time_axis, ens.time_axis)
    assert (back.marker, back.dt, back.config_digest) == (ens.marker, ens.dt, short.digest())
    raw = path.read_bytes()
    assert raw[:8] == b"NDLENSMB"


def test_persistence_rejects_bad_files(short, tmp_path):
    ens = simulate_ensemble(short)
    path = tmp_path / "ens.bin"
    save_ensemble(ens, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-8])
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "tiny.bin").write_bytes(raw[:10])
    for name in ("trunc.bin", "magic.bin", "tiny.bin"):
        with pytest.raises(ValueError):
            load_ensemble(tmp_path / name)


def test_csv_export(short, tmp_path):
    ens = simulate_ensemble(short)
    export_csv(ens, tmp_path / "z.csv", what="z")
    data = np.loadtxt(tmp_path / "z.csv", delimiter=",", skiprows=1)
    assert data.shape == (short.n_samples, 1 + short.repetitions)
    np.testing.assert_array_equal(data[:, 1:].T, ens.truths[:, :, 0])
    with pytest.raises(ValueError):
        export_csv(ens, tmp_path / "x.csv", what="nope")


def test_ensemble_validates_shapes():
    with pytest.raises(ValueError):
        MeasurementEnsemble(np.zeros((2, 5)), np.zeros((2, 4, 2)), np.zeros(5), 0, 1e-7)
    with pytest.raises(ValueError):
        MeasurementEnsemble(np.zeros((2, 5)), np.zeros((2, 5, 2)), np.zeros(5), 5, 1e-7)
