import math

import numpy as np
import pytest

from fidmap.dataset import load_session, save_session
from fidmap.graph import Hyperparams, build_graph, total_loss
from fidmap.metrics import tag_path_distances
from fidmap.optimizer import optimize
from fidmap.se3 import Pose, relative_pose, rot_z, translation
from fidmap.simulate import (
    NoiseSpec,
    ScenarioSpec,
    corridor_scenario,
    corrupt_odometry,
    generate_tag_observations,
    generate_true_trajectory,
    is_visible,
    simulate,
)

THETA = Hyperparams(4e-4, 3e-4, 1e-4, 1.2e-5)


def line_spec(**kw):
    return ScenarioSpec(waypoints=((0, 0, 0), (10, 0, 0)), speed=1.0, tags=(), **kw)


def test_straight_line_trajectory():
    poses = generate_true_trajectory(line_spec())
    assert len(poses) == 11
    for k, x in enumerate(poses):
        np.testing.assert_allclose(x.p, [k, 0, 0], atol=1e-12)
        np.testing.assert_allclose(x.rotation[:, 0], [1, 0, 0], atol=1e-12)


def test_closed_loop_returns_to_start():
    spec = ScenarioSpec(waypoints=((0, 0, 0), (4, 0, 0), (4, 4, 0), (0, 4, 0), (0, 0, 0)), speed=0.7, tags=())
    poses = generate_true_trajectory(spec)
    assert np.linalg.norm(poses[-1].p - poses[0].p) <= 0.7


def test_l_shaped_corner_turns_ninety_degrees():
    spec = ScenarioSpec(waypoints=((0, 0, 0), (2, 0, 0), (2, 2, 0)), speed=0.5, tags=())
    poses = generate_true_trajectory(spec)
    yaw = [math.atan2(x.rotation[1, 0], x.rotation[0, 0]) for x in poses]
    assert yaw[0] == pytest.approx(0, abs=1e-12)
    assert yaw[-1] == pytest.approx(math.pi / 2, abs=1e-12)
    assert max(abs(b - a) for a, b in zip(yaw[:-1], yaw[1:])) == pytest.approx(math.pi / 2, abs=1e-12)


def test_zero_noise_odometry_is_exact():
    true = generate_true_trajectory(corridor_scenario())
    vio = corrupt_odometry(true, NoiseSpec.zero(), 5)
    for a, b in zip(true, vio):
        assert a.allclose(b, 1e-12)


def test_odometry_is_deterministic_per_seed():
    true = generate_true_trajectory(corridor_scenario())
    a, b = corrupt_odometry(true, NoiseSpec(), 11), corrupt_odometry(true, NoiseSpec(), 11)
    assert all(x.allclose(y, 0) for x, y in zip(a, b))
    c = corrupt_odometry(true, NoiseSpec(), 12)
    assert not all(x.allclose(y, 1e-6) for x, y in zip(a, c))


def test_random_walk_rms():
    spec = ScenarioSpec(waypoints=((0, 0, 0), (100, 0, 0)), speed=1.0, tags=())
    true = generate_true_trajectory(spec)
    noise = NoiseSpec(0.01, 0.0, 0.0, 0.0, 0.0)
    finals = np.array([corrupt_odometry(true, noise, seed)[-1].p - true[-1].p for seed in range(1000)])
    rms = math.sqrt(np.mean(np.sum(finals**2, axis=1)))
    assert rms == pytest.approx(0.01 * math.sqrt(100 * 3), rel=0.2)


def test_tag_directly_ahead_is_exact():
    spec = ScenarioSpec(waypoints=((0, 0, 0), (0.5, 0, 0)), speed=1.0,
                        tags=((3, rot_z(0.2, p=(1, 0, 0))),), noise=NoiseSpec.zero())
    true = generate_true_trajectory(spec)
    obs, gt = generate_tag_observations(true, spec, 0)
    first = [o for o in obs if o.pose_index == 0][0]
    assert first.pose_in_phone.allclose(relative_pose(true[0], rot_z(0.2, p=(1, 0, 0))), 1e-12)
    assert gt.tags[3].allclose(rot_z(0.2, p=(1, 0, 0)))


def test_tag_behind_is_never_seen():
    spec = ScenarioSpec(waypoints=((0, 0, 0), (5, 0, 0)), speed=0.5, tags=((1, translation(-1, 0, 0)),))
    obs, _ = generate_tag_observations(generate_true_trajectory(spec), spec, 0)
    assert obs == []


def test_cone_geometry():
    pose = Pose.identity()
    for deg, seen in ((30, True), (40, False)):
        a = math.radians(deg)
        tag = [2.9 * math.cos(a), 2.9 * math.sin(a), 0]
        assert is_visible(pose, tag, 3.0, 35.0) is seen
    assert not is_visible(pose, [3.1, 0, 0], 3.0, 35.0)


def test_at_most_one_observation_per_pose_and_tag():
    sim = simulate(corridor_scenario(), 0)
    keys = [(o.pose_index, o.tag_id) for o in sim.session.tag_observations]
    assert len(keys) == len(set(keys))


def test_corridor_shape():
    sim = simulate(corridor_scenario(noise=NoiseSpec.zero()), 0)
    assert sim.session.num_poses == 200
    assert len(sim.ground_truth.tags) == 10
    assert set(sim.session.tag_ids()) == set(range(10))
    assert len(sim.session.gravity_observations) == 200
    np.testing.assert_allclose(np.diff(sim.session.timestamps), 1.0)


def test_zero_noise_session_is_self_consistent():
    sim = simulate(corridor_scenario(noise=NoiseSpec.zero()), 0)
    g = build_graph(sim.session, THETA)
    truth = sim.true_poses + [sim.ground_truth.tags[t] for t in g.tag_ids]
    from fidmap.graph import GraphState

    assert total_loss(g, GraphState.from_poses(truth)).total < 1e-20


def test_session_survives_save_and_load():
    sim = simulate(corridor_scenario(), 8)
    again = load_session(save_session(sim.session))
    assert again.num_poses == sim.session.num_poses


def test_whole_pipeline_is_deterministic():
    a, b = simulate(corridor_scenario(), 21), simulate(corridor_scenario(), 21)
    assert save_session(a.session) == save_session(b.session)


def test_drift_grows_before_optimization_but_not_after():
    noise = NoiseSpec(tag_position_sigma=0.0, tag_orientation_sigma=0.0, gravity_sigma=0.0)
    pre_slopes, post_slopes = [], []
    for seed in range(10):
        sim = simulate(corridor_scenario(noise=noise), seed)
        g = build_graph(sim.session, THETA)
        state, _ = optimize(g)
        cum = tag_path_distances(sim.session).cumulative
        x = [cum[t] for t in g.tag_ids]
        truth = [sim.ground_truth.tags[t].p for t in g.tag_ids]
        pre = [np.linalg.norm(g.initial_state.pose(g.tag_variable(t)).p - p) for t, p in zip(g.tag_ids, truth)]
        post = [np.linalg.norm(state.pose(g.tag_variable(t)).p - p) for t, p in zip(g.tag_ids, truth)]
        pre_slopes.append(np.polyfit(x, pre, 1)[0])
        post_slopes.append(np.polyfit(x, post, 1)[0])
    assert min(pre_slopes) > 0
    assert all(b < a for a, b in zip(pre_slopes, post_slopes))
    assert np.mean(np.abs(post_slopes)) < 0.5 * np.mean(pre_slopes)


def test_scenario_json_round_trip():
    spec = corridor_scenario()
    again = ScenarioSpec.from_dict(spec.to_dict())
    assert again.waypoints == spec.waypoints and again.noise == spec.noise
    assert all(a[0] == b[0] and a[1].allclose(b[1], 1e-12) for a, b in zip(again.tags, spec.tags))


def test_invalid_specs():
    with pytest.raises(ValueError):
        ScenarioSpec(waypoints=((0, 0, 0),), speed=1.0, tags=())
    with pytest.raises(ValueError):
        line_spec(detection_range=0.0)
    with pytest.raises(ValueError):
        NoiseSpec(odom_linear_sigma=-1.0)
