"""Analytic teacher: exact scores against finite differences of the
log-density, solver convergence against a closed-form Gaussian flow,
and deterministic dataset generation."""

import numpy as np
import pytest

from ardlab.dataset import load_dataset, save_dataset
from ardlab.errors import ConfigError, LoadError, RangeError, UnknownClassError
from ardlab.teacher import (GaussianMixtureTeacher, TrajectoryGrid, VPSchedule,
                            cfg_score, generate_dataset, log_marginal,
                            make_blobs8, make_gmm2d, make_preset, pf_ode_rhs,
                            record_seed, score, solve_trajectory,
                            solve_trajectories, tweedie_x0)

from oracles import (fd_score, gaussian_ode_endpoint, mixture_logpdf,
                     vp_alpha_sigma)

SCHED = VPSchedule()


def small_teacher():
    means = np.array([[1.0, 0.0, -1.0], [-1.0, 1.0, 0.5]])
    return GaussianMixtureTeacher(
        means=means, stds=np.array([0.3, 0.5]),
        weights=np.array([0.4, 0.6]),
        class_map={0: (0,), 1: (1,), 2: (0, 1)}, image=(1, 1, 3))


def test_alpha_sigma_matches_reference_and_vp_identity():
    for t in (0.0, 1e-6, 0.123, 0.5, 1.0):
        a, s = SCHED.alpha_sigma(t)
        ar, sr = vp_alpha_sigma(t)
        assert abs(a - ar) < 1e-12 and abs(s - sr) < 1e-12
        assert abs(a * a + s * s - 1.0) < 1e-12
    assert SCHED.alpha_sigma(0.0) == (1.0, 0.0)


def test_alpha_sigma_range_checked():
    with pytest.raises(RangeError):
        SCHED.alpha_sigma(-0.01)
    with pytest.raises(RangeError):
        SCHED.alpha_sigma(1.01)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        VPSchedule(T=0.0)
    with pytest.raises(ConfigError):
        VPSchedule(beta_min=-1.0, beta_max=1.0)


def test_log_marginal_matches_oracle():
    teacher = small_teacher()
    rng = np.random.Generator(np.random.PCG64(0))
    x = rng.standard_normal((5, 3))
    for t in (0.05, 0.4, 1.0):
        for label in (None, 0, 2):
            means, stds, logw = teacher._subset(label)
            ref = mixture_logpdf(x, t, means, stds, logw)
            got = log_marginal(teacher, SCHED, x, t, label)
            np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_score_matches_fd_of_log_density():
    teacher = small_teacher()
    rng = np.random.Generator(np.random.PCG64(1))
    x = rng.standard_normal((4, 3))
    for t in (0.05, 0.5, 1.0):
        for label in (None, 1, 2):
            means, stds, logw = teacher._subset(label)
            ref = fd_score(x, t, means, stds, logw)
            got = score(teacher, SCHED, x, t, label)
            assert np.abs(got - ref).max() <= 1e-4


def test_score_single_vector_form():
    teacher = small_teacher()
    x = np.array([0.3, -0.2, 0.8])
    s1 = score(teacher, SCHED, x, 0.5, 0)
    s2 = score(teacher, SCHED, x[None, :], 0.5, 0)
    assert s1.shape == (3,)
    np.testing.assert_array_equal(s1, s2[0])


def test_cfg_score_exact_endpoints_and_composition():
    teacher = small_teacher()
    x = np.array([[0.1, 0.2, -0.4]])
    t = 0.6
    sc = score(teacher, SCHED, x, t, 1)
    su = score(teacher, SCHED, x, t, None)
    # w=1 / w=0 take the exact single-score branch, no composition residue
    np.testing.assert_array_equal(cfg_score(teacher, SCHED, x, t, 1, 1.0), sc)
    np.testing.assert_array_equal(cfg_score(teacher, SCHED, x, t, 1, 0.0), su)
    np.testing.assert_allclose(cfg_score(teacher, SCHED, x, t, 1, 2.5),
                               su + 2.5 * (sc - su), rtol=1e-12)


def test_unknown_class_raises():
    teacher = small_teacher()
    with pytest.raises(UnknownClassError):
        score(teacher, SCHED, np.zeros(3), 0.5, 7)


def test_rhs_domain_excludes_zero():
    teacher = small_teacher()
    with pytest.raises(RangeError):
        pf_ode_rhs(teacher, SCHED, np.zeros(3), 0.0, 0, 1.0)
    pf_ode_rhs(teacher, SCHED, np.zeros(3), 1e-9, 0, 1.0)


def test_heun_endpoint_matches_closed_form_gaussian():
    """Single-component mixture: the PF-ODE flow is linear with a known
    closed form, so the solver error is purely discretization."""
    mu = np.array([0.7, -0.3])
    teacher = GaussianMixtureTeacher(
        means=mu[None, :], stds=np.array([0.25]), weights=np.array([1.0]),
        class_map={0: (0,)}, image=(1, 1, 2))
    x_T = np.array([1.2, 0.4])
    grid = TrajectoryGrid(4, SCHED.T)
    traj = solve_trajectory(teacher, SCHED, x_T, grid, 0, 1.0, fine_steps=1000)
    taus = grid.taus()
    for s in range(4, -1, -1):
        ref = gaussian_ode_endpoint(x_T, taus[s], SCHED.T, mu, 0.25)
        got = traj.states[4 - s]
        assert np.abs(got - ref).max() <= 1e-4, f"node s={s}"


def test_heun_second_order_convergence():
    mu = np.array([0.7, -0.3])
    teacher = GaussianMixtureTeacher(
        means=mu[None, :], stds=np.array([0.25]), weights=np.array([1.0]),
        class_map={0: (0,)}, image=(1, 1, 2))
    x_T = np.array([-0.9, 1.1])
    grid = TrajectoryGrid(1, SCHED.T)
    exact = gaussian_ode_endpoint(x_T, 0.0, SCHED.T, mu, 0.25)
    errs = {}
    for n in (250, 500):
        got = solve_trajectory(teacher, SCHED, x_T, grid, 0, 1.0, fine_steps=n)
        errs[n] = np.abs(got.states[-1] - exact).max()
    ratio = errs[250] / errs[500]
    assert 3.0 <= ratio <= 5.0, f"halving substeps scaled error by {ratio}"


def test_solver_step_count_validation():
    teacher = small_teacher()
    grid = TrajectoryGrid(4, SCHED.T)
    X = np.zeros((1, 3))
    lab = np.array([0])
    with pytest.raises(ConfigError):
        solve_trajectories(teacher, SCHED, X, lab, grid, 1.0, fine_steps=2)
    with pytest.raises(ConfigError):
        solve_trajectories(teacher, SCHED, X, lab, grid, 1.0, fine_steps=6)


def test_grid_nodes_uniform():
    grid = TrajectoryGrid(4, 1.0)
    np.testing.assert_allclose(grid.taus(), [0.0, 0.25, 0.5, 0.75, 1.0])


def test_tweedie_x0_matches_identity():
    teacher = small_teacher()
    x = np.array([[0.2, -0.1, 0.5]])
    t = 0.7
    a, s = SCHED.alpha_sigma(t)
    ref = (x + s * s * cfg_score(teacher, SCHED, x, t, 0, 1.5)) / a
    np.testing.assert_allclose(tweedie_x0(teacher, SCHED, x, t, 0, 1.5), ref,
                               rtol=1e-12)
    with pytest.raises(RangeError):
        tweedie_x0(teacher, SCHED, x, 0.0, 0, 1.5)


def test_record_seed_spreads():
    seeds = {record_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert record_seed(7, 3) != record_seed(8, 3)


def test_generate_dataset_deterministic_across_threads():
    teacher = make_gmm2d()
    grid = TrajectoryGrid(3, SCHED.T)
    a = generate_dataset(teacher, SCHED, grid, 700, 1.5, seed=3,
                         fine_steps=12, threads=1)
    b = generate_dataset(teacher, SCHED, grid, 700, 1.5, seed=3,
                         fine_steps=12, threads=4)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.seeds, b.seeds)
    c = generate_dataset(teacher, SCHED, grid, 700, 1.5, seed=4,
                         fine_steps=12, threads=1)
    assert not np.array_equal(a.states, c.states)


def test_generate_dataset_prefix_stable():
    # record i depends only on (seed, i), so a longer run extends a shorter one
    teacher = make_gmm2d()
    grid = TrajectoryGrid(2, SCHED.T)
    a = generate_dataset(teacher, SCHED, grid, 20, 1.0, seed=9, fine_steps=8)
    b = generate_dataset(teacher, SCHED, grid, 50, 1.0, seed=9, fine_steps=8)
    np.testing.assert_array_equal(a.states, b.states[:20])


def test_dataset_roundtrip_byte_identical(tmp_path):
    teacher = make_gmm2d()
    grid = TrajectoryGrid(2, SCHED.T)
    ds = generate_dataset(teacher, SCHED, grid, 30, 1.5, seed=1, fine_steps=8)
    p1 = tmp_path / "a.ardt"
    p2 = tmp_path / "b.ardt"
    save_dataset(ds, p1)
    save_dataset(load_dataset(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = load_dataset(p1)
    assert back.count == 30 and back.S == 2 and back.D == teacher.D
    assert back.teacher_hash == teacher.hash64()
    np.testing.assert_array_equal(back.states, ds.states)


def test_dataset_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ardt"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(LoadError):
        load_dataset(p)
    teacher = make_gmm2d()
    ds = generate_dataset(teacher, SCHED, TrajectoryGrid(2, SCHED.T), 5, 1.0,
                          seed=0, fine_steps=8)
    good = tmp_path / "good.ardt"
    save_dataset(ds, good)
    truncated = tmp_path / "trunc.ardt"
    truncated.write_bytes(good.read_bytes()[:-7])
    with pytest.raises(LoadError):
        load_dataset(truncated)


def test_presets():
    blobs = make_blobs8()
    assert blobs.D == 64 and blobs.K == 8 and blobs.labels == (0, 1, 2, 3)
    assert blobs.image == (1, 8, 8)
    gmm = make_gmm2d()
    assert gmm.D == 2 and gmm.K == 8
    assert make_preset("blobs8").hash64() == blobs.hash64()
    with pytest.raises(ConfigError):
        make_preset("nope")


def test_teacher_hash_sensitive_to_params():
    a = make_gmm2d()
    b = GaussianMixtureTeacher(means=a.means * 1.0001, stds=a.stds,
                               weights=a.weights, class_map=a.class_map,
                               image=a.image)
    assert a.hash64() != b.hash64()


def test_mixture_validation():
    with pytest.raises(ConfigError):
        GaussianMixtureTeacher(means=np.zeros((2, 2)), stds=np.array([0.1, -0.1]),
                               weights=np.array([0.5, 0.5]),
                               class_map={0: (0, 1)}, image=(1, 1, 2))
    with pytest.raises(ConfigError):
        GaussianMixtureTeacher(means=np.zeros((2, 2)), stds=np.array([0.1, 0.1]),
                               weights=np.array([0.5, 0.6]),
                               class_map={0: (0, 1)}, image=(1, 1, 2))
    with pytest.raises(ConfigError):
        GaussianMixtureTeacher(means=np.zeros((2, 2)), stds=np.array([0.1, 0.1]),
                               weights=np.array([0.5, 0.5]),
                               class_map={0: (0, 5)}, image=(1, 1, 2))
    with pytest.raises(ConfigError):
        GaussianMixtureTeacher(means=np.zeros((2, 2)), stds=np.array([0.1, 0.1]),
                               weights=np.array([0.5, 0.5]),
                               class_map={0: (0, 1)}, image=(1, 2, 2))


def test_sample_data_respects_class_map():
    teacher = make_gmm2d()
    rng = np.random.Generator(np.random.Philox(key=np.uint64(5)))
    labels = np.array([0] * 200)
    draws = teacher.sample_data(rng, labels)
    # class 0 pairs components 0 and 1; every draw should hug one of them
    d0 = np.linalg.norm(draws - teacher.means[0], axis=1)
    d1 = np.linalg.norm(draws - teacher.means[1], axis=1)
    assert (np.minimum(d0, d1) < 0.5).all()
