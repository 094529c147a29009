import numpy as np
import pytest

from skillflow.errors import DegenerateGeometry, EmptySkill, UnknownSkill
from skillflow.geometry import MotionFlow2D, project_points
from skillflow.skillbank import (SKILLS, SkillTemplateBank, bank_from_dict, bank_to_dict, build_bank,
                                 default_prior_scale, lift_demo_to_3d, load_bank, max_extent,
                                 normalize_trajectory, resample, resample_prior, retrieve_and_align,
                                 save_bank, skill_by_index)

POUR, PICK = SKILLS[0], SKILLS[1]


def line(T, direction=(1.0, 0.0, 0.0), start=(0.0, 0.0, 1.0)):
    s = np.linspace(0.0, 1.0, T)[:, None]
    return np.asarray(start) + s * np.asarray(direction)


class TestSkills:
    def test_five_skills_in_order(self):
        assert [s.index for s in SKILLS] == [0, 1, 2, 3, 4]
        assert skill_by_index(4).name == "Hinge Opening"

    def test_unknown_index(self):
        with pytest.raises(UnknownSkill):
            skill_by_index(9)


class TestResample:
    def test_identity_length(self, rng):
        x = rng.normal(size=(6, 3))
        assert np.array_equal(resample(x, 6), x)

    def test_linear_is_exact(self):
        assert np.allclose(resample(line(5), 17), line(17))

    def test_endpoints_kept(self, rng):
        x = rng.normal(size=(9, 3))
        y = resample(x, 4)
        assert np.allclose(y[[0, -1]], x[[0, -1]])


class TestNormalize:
    def test_centroid_and_extent(self, rng):
        y = normalize_trajectory(rng.normal(size=(20, 3)) * 5 + 3)
        assert np.allclose(y.mean(axis=0), 0.0, atol=1e-15)
        assert max_extent(y) == pytest.approx(1.0, abs=1e-12)

    def test_zero_extent(self):
        with pytest.raises(DegenerateGeometry):
            normalize_trajectory(np.ones((5, 3)))


class TestBuildBank:
    def test_average_of_two_lines(self):
        demos = [(POUR, line(10, (1.0, 0, 0))), (POUR, line(14, (1.0, 0.2, 0)))]
        bank = build_bank(demos, 12)
        tpl = bank[POUR].waypoints
        oracle = normalize_trajectory((line(12, (1.0, 0, 0)) + line(12, (1.0, 0.2, 0))) / 2)
        assert np.allclose(tpl, oracle, atol=1e-12)
        assert bank.horizon == 12

    def test_circle_arc_template_is_circular(self):
        t = np.linspace(0.0, 1.2, 32)
        arcs = [(POUR, np.column_stack([r * np.cos(t), r * np.sin(t), np.full_like(t, 1.0)]))
                for r in (0.2, 0.3)]
        tpl = build_bank(arcs, 32)[POUR].waypoints
        # averaged concentric arcs with a shared angle are still a circle
        radii = np.linalg.norm(tpl[:, :2] - _fit_circle(tpl[:, :2]), axis=1)
        assert np.ptp(radii) < 1e-9

    def test_empty_declared_skill(self):
        with pytest.raises(EmptySkill):
            build_bank([(POUR, line(5))], 5, skills=[POUR, PICK])

    def test_unknown_lookup(self):
        bank = build_bank([(POUR, line(5))], 5)
        assert PICK not in bank
        with pytest.raises(UnknownSkill):
            bank[PICK]

    def test_horizon_mismatch_rejected(self):
        bank = build_bank([(POUR, line(5))], 5)
        with pytest.raises(ValueError):
            SkillTemplateBank({0: bank[POUR]}, 6)

    def test_round_trip(self, tmp_path):
        bank = build_bank([(POUR, line(5)), (PICK, line(7, (0, 1.0, 0.3)))], 8)
        path = tmp_path / "bank.json"
        save_bank(bank, path, extra={"config": {"x": 1}})
        back = load_bank(path)
        assert back.skills == bank.skills
        for s in bank.skills:
            assert np.array_equal(back[s].waypoints, bank[s].waypoints)
        assert bank_to_dict(bank_from_dict(bank_to_dict(bank))) == bank_to_dict(bank)


def _fit_circle(xy):
    A = np.column_stack([2 * xy, np.ones(len(xy))])
    sol = np.linalg.lstsq(A, (xy**2).sum(1), rcond=None)[0]
    return sol[:2]


class TestAlign:
    def test_first_waypoint_is_anchor(self):
        bank = build_bank([(POUR, line(5))], 5)
        prior = retrieve_and_align(bank, POUR, [0.1, 0.2, 0.9], 0.3)
        assert np.array_equal(prior.waypoints[0], [0.1, 0.2, 0.9])
        assert max_extent(prior.waypoints) == pytest.approx(0.3)

    def test_scale_must_be_positive(self):
        bank = build_bank([(POUR, line(5))], 5)
        with pytest.raises(ValueError):
            retrieve_and_align(bank, POUR, np.zeros(3), 0.0)

    def test_resample_prior_keeps_anchor(self):
        bank = build_bank([(POUR, line(5))], 5)
        prior = resample_prior(retrieve_and_align(bank, POUR, [0, 0, 1.0], 0.5), 11)
        assert prior.T == 11 and np.array_equal(prior.waypoints[0], [0, 0, 1.0])

    def test_default_scale(self):
        square = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], dtype=float)
        assert default_prior_scale(square) == pytest.approx(8 * np.sqrt(2))


def test_lift_demo_with_true_depth_recovers_centroids(synth_cam, rng):
    pts = np.stack([rng.normal([0, 0, 1.0], 0.05, (6, 3)) + [0.01 * t, 0, 0] for t in range(4)])
    flow = MotionFlow2D(project_points(synth_cam, pts))
    assert np.allclose(lift_demo_to_3d(flow, synth_cam, pts[..., 2]), pts.mean(axis=1), atol=1e-12)
    with pytest.raises(ValueError):
        lift_demo_to_3d(flow, synth_cam, np.ones((4, 5)))
