import numpy as np
import pytest

from conftest import random_specs
from oracles import brute_force_cost, exhaustive_sequences
from gridnav.env import (
    FORWARD,
    STOP,
    TURN_LEFT,
    TURN_RIGHT,
    EpisodeSpec,
    Pose,
    UnreachableGoalError,
    generate_scene,
    geodesic_distance,
    scene_from_ascii,
)
from gridnav.planner import (
    DisconnectedError,
    Trajectory,
    generate_demo,
    optimal_action_plan,
    read_demos,
    replay,
    shortest_cell_path,
    write_demos,
)

def test_cell_path_examples(corridor):
    assert shortest_cell_path(corridor, (2, 1), (3, 1)) == [(2, 1), (3, 1)]
    assert shortest_cell_path(corridor, (2, 1), (2, 1)) == [(2, 1)]
    with pytest.raises(DisconnectedError):
        shortest_cell_path(corridor, (2, 1), (0, 0))


@pytest.mark.parametrize("seed", range(10))
def test_cell_path_is_shortest_and_valid(seed):
    scene = generate_scene(seed, 8 + seed % 2, 8, "rooms")
    for spec in random_specs(scene, 15, seed, min_distance=1):
        path = shortest_cell_path(scene, spec.start.cell, spec.goal)
        assert len(path) - 1 == geodesic_distance(scene, spec.start.cell, spec.goal)
        for (x0, y0), (x1, y1) in zip(path, path[1:]):
            assert abs(x0 - x1) + abs(y0 - y1) == 1 and scene.walkable(x1, y1)


def test_cell_path_tie_break_prefers_north_then_east():
    room = scene_from_ascii("#####\n#...#\n#...#\n#####")
    assert shortest_cell_path(room, (1, 2), (2, 1)) == [(1, 2), (1, 1), (2, 1)]


def test_plan_examples(corridor):
    plan = optimal_action_plan(corridor, Pose(2, 1, 1), (5, 1))
    assert list(plan.actions) == [FORWARD, FORWARD, FORWARD, STOP] and plan.cost == 4
    assert list(optimal_action_plan(corridor, Pose(4, 1, 2), (4, 1)).actions) == [STOP]
    behind = optimal_action_plan(corridor, Pose(4, 1, 1), (3, 1))
    assert behind.cost == 4 and list(behind.actions[2:]) == [FORWARD, STOP]
    assert list(behind.actions[:2]) in ([TURN_LEFT, TURN_LEFT], [TURN_RIGHT, TURN_RIGHT])
    with pytest.raises(UnreachableGoalError):
        optimal_action_plan(corridor, Pose(2, 1, 1), (0, 0))


def test_plans_match_exhaustive_search_on_short_pairs(corridor, ell):
    for scene in (corridor, ell):
        cells = scene.walkable_cells()
        for a in cells:
            for g in cells:
                for h in range(4):
                    plan = optimal_action_plan(scene, Pose(*a, h), g)
                    if plan.cost > 6:
                        continue
                    best = exhaustive_sequences(scene, Pose(*a, h), g)
                    assert best and len(best[0]) == plan.cost
                    assert list(plan.actions) in best


@pytest.mark.parametrize("seed", range(8))
def test_plan_cost_matches_reachable_set_search(seed):
    scene = generate_scene(seed, 8, 8, ["maze", "rooms"][seed % 2])
    for spec in random_specs(scene, 10, seed, min_distance=1):
        plan = optimal_action_plan(scene, spec.start, spec.goal)
        assert plan.cost == brute_force_cost(scene, spec.start, spec.goal)


def test_demo_properties(maze9):
    for spec in random_specs(maze9, 20, 4):
        demo = generate_demo(maze9, spec)
        d0 = geodesic_distance(maze9, spec.start.cell, spec.goal)
        assert demo.success and demo.actions[-1] == STOP
        assert demo.path_length == d0
        total = sum(s.reward for s in demo.steps)
        assert total == pytest.approx(d0 + len(demo.steps) * -0.0001 + 2.5, abs=1e-9)
        assert not any(s.info["collided"] for s in demo.steps)


def test_corridor_demo(corridor):
    demo = generate_demo(corridor, EpisodeSpec("corridor", Pose(2, 1, 1), (5, 1)))
    assert len(demo.steps) == 4 and demo.actions[-1] == STOP


def test_replay_regenerates_observations(maze9):
    for spec in random_specs(maze9, 5, 9):
        demo = generate_demo(maze9, spec)
        again = replay(maze9, spec, demo.actions)
        assert [s.observation for s in again.steps] == [s.observation for s in demo.steps]


def test_demo_file_roundtrip(tmp_path, maze9):
    demos = [generate_demo(maze9, s) for s in random_specs(maze9, 6, 2)]
    write_demos(tmp_path / "d.jsonl", demos, {"scene_ids": ["maze9"], "config_hash": "abc"})
    header, back = read_demos(tmp_path / "d.jsonl")
    assert header["format"] == "gridnav.demos" and header["config_hash"] == "abc"
    assert [t.to_dict() for t in back] == [t.to_dict() for t in demos]
    for t, u in zip(demos, back):
        assert [s.observation for s in t.steps] == [s.observation for s in u.steps]
    again = tmp_path / "e.jsonl"
    write_demos(again, back, {"scene_ids": ["maze9"], "config_hash": "abc"})
    assert again.read_bytes() == (tmp_path / "d.jsonl").read_bytes()


def test_trajectory_dict_without_rewards(maze9):
    demo = generate_demo(maze9, random_specs(maze9, 1, 0)[0])
    d = demo.to_dict(include_rewards=False)
    back = Trajectory.from_dict(d)
    assert back.actions == demo.actions
    assert np.array_equal(back.steps[0].observation.patch, demo.steps[0].observation.patch)
