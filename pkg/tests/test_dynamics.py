import numpy as np
import pytest

from cbfcert import dynamics
from cbfcert.dynamics import (GRAVITY, Label, closed_loop_field, dubins_system,
                              make_system, planar_aerial_system,
                              quadruped_system, register_system)
from cbfcert.sampling import sample_uniform


def test_dubins_bounds_verbatim():
    sys_ = dubins_system()
    assert np.all(sys_.state_bounds == np.array([[-2, 2], [-2, 2], [-np.pi, np.pi]]))
    assert sys_.n == 3 and sys_.m == 2


def test_dubins_labels():
    sys_ = dubins_system()
    assert sys_.label([1.8, 1.8, 0.0]) == Label.SAFE
    assert sys_.label([0.0, 0.1, 1.0]) == Label.UNSAFE
    assert sys_.label([1.0, 0.0, 0.0]) == Label.UNLABELED


def test_dubins_heading_zero_moves_along_x():
    sys_ = dubins_system()
    xdot = closed_loop_field(sys_, np.array([0.5, 0.5, 0.0]), np.array([1.0, 0.0]))
    assert np.allclose(xdot, [1.0, 0.0, 0.0])


def test_dubins_drift_free():
    sys_ = dubins_system()
    x = np.array([0.3, -1.0, 2.0])
    assert np.allclose(sys_.f(x), 0.0)
    assert np.allclose(closed_loop_field(sys_, x, np.zeros(2)), sys_.f(x))


def test_aerial_bounds_and_drift():
    sys_ = planar_aerial_system()
    assert np.all(sys_.state_bounds[0] == [-2, 2])
    assert np.all(sys_.state_bounds[2] == [-np.pi, np.pi])
    x = np.array([0.5, -0.3, 1.2, 0.0, 0.0, 0.0])
    f = sys_.f(x)
    assert np.allclose(f[3:], [0.0, -GRAVITY, 0.0])


def test_aerial_control_matrix_at_level_attitude():
    sys_ = planar_aerial_system()
    g = sys_.g(np.zeros(6))
    assert np.allclose(g[3], [0.0, 0.0])
    assert np.allclose(g[4], [1.0, 1.0])
    assert np.allclose(g[5], [1.0, -1.0])


def test_aerial_hover_equilibrium():
    sys_ = planar_aerial_system()
    x = np.array([0.2, 0.1, 0.0, 0.0, 0.0, 0.0])
    u = np.array([GRAVITY / 2.0, GRAVITY / 2.0])
    assert np.allclose(closed_loop_field(sys_, x, u), 0.0, atol=1e-14)


def test_aerial_label_shell_unlabeled():
    sys_ = planar_aerial_system()
    x = np.array([0.9, 0.0, 0.0, 0.0, 0.0, 0.0])
    assert sys_.label(x) == Label.UNLABELED
    assert sys_.label(np.zeros(6)) == Label.SAFE
    x[0] = 1.5
    assert sys_.label(x) == Label.UNSAFE


def test_quadruped_control_matrix_heading_up():
    sys_ = quadruped_system()
    x = np.zeros(8)
    x[2] = np.pi / 2.0
    x[7] = 0.6
    g = sys_.g(x)
    assert np.allclose(g[:, 0], [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], atol=1e-15)
    assert np.allclose(g[:, 1], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])


def test_quadruped_drift_columns():
    sys_ = quadruped_system(k1=0.0, k2=0.0, kr=0.0)
    x = np.zeros(8)
    x[5], x[6] = 0.3, -0.2
    x[7] = 0.7
    assert np.allclose(sys_.f(x), [0, 0, 0, 0.3, -0.2, 0, 0, 0])


def test_quadruped_zero_gains_zero_input_keeps_robot_still():
    sys_ = quadruped_system(k1=0.0, k2=0.0, kr=0.0)
    x = np.array([0.1, 0.2, 0.5, 1.0, 1.0, 0.1, 0.1, 0.6])
    xdot = closed_loop_field(sys_, x, np.zeros(2))
    assert np.allclose(xdot[:3], 0.0)


def test_quadruped_gain_passthrough():
    sys_ = quadruped_system(k1=0.5, k2=-0.25, kr=0.1)
    f = sys_.f(np.zeros(8))
    assert np.allclose(f[5:], [0.5, -0.25, 0.1])


def test_affinity_of_closed_loop_field():
    rng = np.random.default_rng(5)
    for name in ("dubins", "planar_aerial", "quadruped"):
        sys_ = make_system(name)
        for _ in range(30):
            x = sample_uniform(sys_.state_bounds, 1, rng)[0]
            u1 = rng.uniform(-1, 1, sys_.m)
            u2 = rng.uniform(-1, 1, sys_.m)
            lam = float(rng.uniform())
            lhs = closed_loop_field(sys_, x, lam * u1 + (1 - lam) * u2)
            rhs = (lam * closed_loop_field(sys_, x, u1)
                   + (1 - lam) * closed_loop_field(sys_, x, u2))
            assert np.allclose(lhs, rhs, atol=1e-12)


def test_labeler_disjoint_and_inside_domain():
    for name in ("dubins", "planar_aerial", "quadruped"):
        sys_ = make_system(name)
        pts = sample_uniform(sys_.state_bounds, 100_000, seed=2)
        labels = sys_.label_batch(pts)
        # single integer per point by construction; check the label sets
        # cover everything and safe/unsafe samples stay in the domain
        assert set(np.unique(labels)) <= {0, 1, 2}
        marked = pts[labels != Label.UNLABELED]
        assert np.all(sys_.contains(marked))


def test_batch_single_state_agreement():
    for name in ("dubins", "planar_aerial", "quadruped"):
        sys_ = make_system(name)
        pts = sample_uniform(sys_.state_bounds, 16, seed=3)
        fb = sys_.f(pts)
        gb = sys_.g(pts)
        for i, x in enumerate(pts):
            assert np.allclose(fb[i], sys_.f(x))
            assert np.allclose(gb[i], sys_.g(x))


def test_dimension_mismatch_raises():
    sys_ = dubins_system()
    with pytest.raises(ValueError):
        closed_loop_field(sys_, np.zeros(3), np.zeros(3))


def test_registry_round_trip_and_unknown():
    assert make_system("dubins").name == "dubins"
    with pytest.raises(KeyError):
        make_system("hovercraft")

    def toy():
        return dubins_system()

    register_system("toy_alias", toy)
    try:
        assert make_system("toy_alias").name == "dubins"
    finally:
        dynamics._BUILDERS.pop("toy_alias")


def test_quadruped_params_forwarded():
    sys_ = make_system("quadruped", k1=0.3, margin=0.5)
    assert np.allclose(sys_.f(np.zeros(8))[5], 0.3)
