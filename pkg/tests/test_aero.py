import numpy as np
import pytest
from numpy.testing import assert_allclose

from services import aero
from services.aero import AeroSurface, BETZ_LIMIT
from services.errors import DegenerateLambda, OutOfDomain, Unachievable


def test_default_surface_matches_parametric_model_on_nodes(surface):
    lam = np.array([2.0, 5.5, 7.3, 11.0])
    theta = np.array([0.0, 0.05, 0.12, 0.3])
    assert_allclose(aero.cp(surface, lam, theta), aero.parametric_cp(lam, theta), atol=1e-10)
    assert_allclose(aero.ct(surface, lam, theta), aero.parametric_ct(lam, theta), atol=1e-10)


def test_interpolation_between_nodes_stays_close_to_model(surface):
    rng = np.random.default_rng(3)
    lam = rng.uniform(4.0, 10.0, 100)
    theta = rng.uniform(0.0, 0.2, 100)
    assert_allclose(aero.cp(surface, lam, theta), aero.parametric_cp(lam, theta), atol=2e-3)


def test_default_surface_is_memoized(surface):
    assert aero.default_surface() is surface


def test_parametric_cp_below_betz_and_clipped():
    lam, theta = np.meshgrid(np.linspace(1, 15, 50), np.linspace(0, 0.52, 30))
    values = aero.parametric_cp(lam, theta)
    assert values.max() < BETZ_LIMIT
    assert values.min() >= aero.CP_MIN


def test_axial_induction_inverts_momentum_relation():
    cp_values = np.array([0.0, 0.1, 0.3, 0.45, BETZ_LIMIT])
    a = aero.axial_induction(cp_values)
    assert_allclose(4 * a * (1 - a) ** 2, cp_values, atol=1e-10)
    assert np.all((a >= 0) & (a <= 1 / 3 + 1e-12))


def test_thrust_grows_with_lambda_at_equal_cp(surface):
    cp_target = 0.3
    low = aero.pitch_from_cp(surface, cp_target, 7.0)
    high = aero.pitch_from_cp(surface, cp_target, 10.0)
    assert aero.ct(surface, 10.0, high) > aero.ct(surface, 7.0, low)


def test_cq_is_cp_over_lambda(surface):
    assert aero.cq(surface, 8.0, 0.05) == pytest.approx(aero.cp(surface, 8.0, 0.05) / 8.0)


def test_out_of_domain_queries_raise(surface):
    with pytest.raises(OutOfDomain):
        aero.cp(surface, 0.5, 0.0)
    with pytest.raises(OutOfDomain):
        aero.ct(surface, 8.0, 0.6)
    with pytest.raises(OutOfDomain):
        aero.cp(surface, np.nan, 0.0)


def test_cq_rejects_vanishing_lambda(surface):
    with pytest.raises(DegenerateLambda):
        aero.cq(surface, 5e-4, 0.1)


def test_partials_match_finite_differences(surface):
    lam, theta, h = 7.5, 0.1, 1e-5
    d = aero.partials(surface, lam, theta)
    fd_lam = (aero.cp(surface, lam + h, theta) - aero.cp(surface, lam - h, theta)) / (2 * h)
    fd_theta = (aero.cp(surface, lam, theta + h) - aero.cp(surface, lam, theta - h)) / (2 * h)
    assert d["dcp_dlambda"] == pytest.approx(fd_lam, rel=1e-5, abs=1e-8)
    assert d["dcp_dtheta"] == pytest.approx(fd_theta, rel=1e-5, abs=1e-8)
    fd_cq = (aero.cq(surface, lam + h, theta) - aero.cq(surface, lam - h, theta)) / (2 * h)
    assert d["dcq_dlambda"] == pytest.approx(fd_cq, rel=1e-5, abs=1e-8)


def test_partials_need_margin_from_the_edge(surface):
    with pytest.raises(OutOfDomain):
        aero.partials(surface, 8.0, 0.0, margin_cells=1)
    assert np.isfinite(aero.partials(surface, 8.0, 0.0, margin_cells=0)["dcp_dtheta"])


def test_max_cp_scalar_and_vector_agree(surface):
    lam = np.array([4.0, 7.0, 9.5])
    values, thetas = aero.max_cp(surface, lam)
    for i, x in enumerate(lam):
        scalar_value, scalar_theta = aero.max_cp(surface, float(x))
        assert scalar_value == pytest.approx(values[i])
        assert scalar_theta == pytest.approx(thetas[i])
    grid_best = aero.cp(surface, lam[:, None], surface.theta_grid[None, :]).max(axis=1)
    assert np.all(values >= grid_best - 1e-12)


def test_optimal_tip_speed_ratio_is_interior(surface, lambda_opt):
    lo, hi = surface.lambda_bounds
    assert lo < lambda_opt < hi
    best, _ = aero.max_cp(surface, lambda_opt)
    for lam in (lambda_opt - 1.0, lambda_opt + 1.0):
        assert aero.max_cp(surface, lam)[0] <= best


@pytest.mark.parametrize("fraction", [0.3, 0.6, 0.9])
def test_pitch_from_cp_hits_target_on_high_pitch_branch(surface, fraction):
    lam = 8.0
    best, theta_best = aero.max_cp(surface, lam)
    theta = aero.pitch_from_cp(surface, fraction * best, lam)
    assert theta >= theta_best
    assert aero.cp(surface, lam, theta) == pytest.approx(fraction * best, abs=1e-6)
    assert aero.partials(surface, lam, theta, margin_cells=0)["dcp_dtheta"] <= 0


def test_pitch_from_cp_rejects_unachievable_target(surface):
    best, _ = aero.max_cp(surface, 8.0)
    with pytest.raises(Unachievable):
        aero.pitch_from_cp(surface, best + 0.01, 8.0)


def test_steady_state_pairs_witness_non_uniqueness(surface, lambda_opt):
    best, _ = aero.max_cp(surface, lambda_opt)
    cp_target = 0.7 * best
    pairs = aero.steady_state_pairs(surface, cp_target)
    assert len({lam for lam, _ in pairs}) >= 2
    for lam, theta in pairs:
        assert abs(aero.cp(surface, lam, theta) - cp_target) <= 1e-6


def test_stall_margin_sign_on_high_pitch_branch(surface, params):
    theta = aero.pitch_from_cp(surface, 0.25, 8.0)
    margin = aero.stall_margin(surface, params, 8.0, 8.0, theta)
    assert margin.dtr_dtheta < 0
    with pytest.raises(OutOfDomain):
        aero.stall_margin(surface, params, 0.0, 8.0, theta)


def test_stall_region_map_shapes_and_regions(surface):
    region = aero.stall_region_map(surface)
    shape = (surface.lambda_grid.size, surface.theta_grid.size)
    for key in ("lambda", "theta", "cp", "ct", "dcq_dtheta", "dcq_dlambda", "pitch_stall", "speed_stall"):
        assert region[key].shape == shape
    # Low tip-speed ratios stall in speed, the attached region dominates elsewhere
    assert region["speed_stall"][surface.lambda_grid < 3.0].any()
    assert not region["pitch_stall"].all()


def test_surface_validation_lists_problems():
    lam = np.array([1.0, 2.0, 3.0, 4.0])
    theta = np.array([0.0, 0.1, 0.2, 0.3])
    bad_cp = np.full((4, 4), 0.7)
    with pytest.raises(ValueError, match="Betz"):
        AeroSurface(lam, theta, bad_cp, np.zeros((4, 4)))
    with pytest.raises(ValueError, match="strictly increasing"):
        AeroSurface(lam[::-1], theta, np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError, match="shape"):
        AeroSurface(lam, theta, np.zeros((3, 4)), np.zeros((4, 4)))


def test_load_surface_reads_user_table(tmp_path):
    lam = [2.0, 4.0, 6.0, 8.0, 10.0]
    theta = [0.0, 0.1, 0.2, 0.3]
    lines = ["# test table", "lambda: " + " ".join(map(str, lam)), "theta: " + " ".join(map(str, theta)), "cp:"]
    for x in lam:
        lines.append(" ".join(f"{aero.parametric_cp(x, t):.6f}" for t in theta))
    lines.append("ct:")
    for x in lam:
        lines.append(" ".join(f"{aero.parametric_ct(x, t):.6f}" for t in theta))
    path = tmp_path / "table.txt"
    path.write_text("\n".join(lines) + "\n")

    surface = aero.load_surface(path)
    assert surface.source == aero.SurfaceSource.USER_TABLE
    assert aero.cp(surface, 6.0, 0.1) == pytest.approx(float(aero.parametric_cp(6.0, 0.1)), abs=1e-6)


@pytest.mark.parametrize("key, direction, steps", [
    ("dcp_dlambda", 0, (0.02, 0.01, 0.005)),
    ("dcp_dtheta", 1, (0.002, 0.001, 0.0005)),
    ("dct_dlambda", 0, (0.02, 0.01, 0.005)),
    ("dct_dtheta", 1, (0.002, 0.001, 0.0005)),
])
def test_partials_agree_with_shrinking_differences(surface, key, direction, steps):
    lam, theta = 7.55, 0.105
    value = aero.partials(surface, lam, theta)[key]
    coefficient = aero.cp if key.startswith("dcp") else aero.ct

    def central(h):
        dl, dt = (h, 0.0) if direction == 0 else (0.0, h)
        upper = coefficient(surface, lam + dl, theta + dt)
        lower = coefficient(surface, lam - dl, theta - dt)
        return float((upper - lower) / (2 * h))

    errors = [abs(central(h) - value) for h in steps]
    assert errors[1] <= 0.3 * errors[0] + 1e-10
    assert errors[2] <= 0.3 * errors[1] + 1e-10
    assert errors[2] <= 1e-5 * max(1.0, abs(value))
