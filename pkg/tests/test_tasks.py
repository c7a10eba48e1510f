import itertools
from collections import deque

import numpy as np
import pytest

from socialgrid import tasks as tk
from socialgrid.gridworld import (
    Action, AgentBody, DIR_VEC, GridState, Orientation, Role, TileKind,
    render_observation, step,
)
from socialgrid.seeding import substream


def _expected_event_rewards(seq, succ, p):
    """Independent reward table for a sequence of triggered goal events."""
    out = []
    last = None
    for g in seq:
        if last is None or g == succ[last]:
            out.append(1.0)
            last = g
        else:
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# goal cycle reward semantics

def test_first_goal_always_rewards():
    for g in range(3):
        cs = tk.CycleState(cycle=(1, 2, 0))
        r, cs2 = tk.goal_cycle_reward(cs, g, -1.5)
        assert r == 1.0
        assert cs2.last_rewarded_goal == g


def test_successor_rewards_and_advances():
    cs = tk.CycleState(cycle=(1, 2, 0), last_rewarded_goal=0)
    r, cs2 = tk.goal_cycle_reward(cs, 1, -1.5)
    assert r == 1.0 and cs2.last_rewarded_goal == 1


def test_wrong_goal_penalized_and_progress_kept():
    cs = tk.CycleState(cycle=(1, 2, 0), last_rewarded_goal=0)
    r, cs2 = tk.goal_cycle_reward(cs, 2, -1.5)
    assert r == -1.5
    assert cs2.last_rewarded_goal == 0  # expected successor unchanged


def test_reward_table_frozen_rows():
    succ = (1, 2, 0)  # cycle 0 -> 1 -> 2 -> 0
    cases = [
        ((0, 1, 2, 0, 1), [1, 1, 1, 1, 1]),
        ((0, 2, 1, 2, 0), [1, -1.5, 1, 1, 1]),
        ((2, 0, 1, 0, 2), [1, 1, 1, -1.5, 1]),
        ((1, 0, 1, 2, 0), [1, -1.5, -1.5, 1, 1]),
        ((0, 1, 0), [1, 1, -1.5]),
    ]
    for seq, want in cases:
        cs = tk.CycleState(cycle=succ)
        got = []
        for g in seq:
            r, cs = tk.goal_cycle_reward(cs, g, -1.5)
            got.append(r)
        assert got == want, f"sequence {seq}"


def test_reward_table_exhaustive_length_5():
    # every trigger-valid sequence (no immediate repeats) of length <= 5
    succ = (1, 2, 0)
    for n in range(1, 6):
        for seq in itertools.product(range(3), repeat=n):
            if any(a == b for a, b in zip(seq, seq[1:])):
                continue
            cs = tk.CycleState(cycle=succ)
            got = []
            for g in seq:
                r, cs = tk.goal_cycle_reward(cs, g, -1.5)
                got.append(r)
            assert got == _expected_event_rewards(seq, succ, -1.5)


def test_trigger_rule_through_engine():
    # corridor: goals at (2,1) and (5,1); walk on, off, back on, then across
    tiles = np.zeros((3, 8), dtype=np.int8)
    tiles[0, :] = tiles[2, :] = TileKind.OBSTACLE
    tiles[1, 0] = tiles[1, 7] = TileKind.OBSTACLE
    tiles[1, 2] = tiles[1, 5] = TileKind.GOAL
    state = GridState(width=8, height=3, tiles=tiles, goals=[(2, 1), (5, 1)],
                      agents=[AgentBody(0, (1, 1), Orientation.EAST)],
                      episode_limit=50)
    rules = tk.GoalCycleRules(cycle=(1, 0), n_agents=1, penalty=-1.5)
    rewards = []
    for act in [Action.FORWARD,        # enter goal 0 -> +1
                Action.FORWARD,        # leave (floor)
                Action.ROTATE_LEFT, Action.ROTATE_LEFT,
                Action.FORWARD,        # re-enter goal 0 -> no event
                Action.ROTATE_RIGHT, Action.ROTATE_RIGHT,
                Action.FORWARD, Action.FORWARD,
                Action.FORWARD]:       # enter goal 1 -> successor +1
        state, ev = step(state, [act], rules)
        rewards.append(ev.rewards[0])
    assert rewards == [1.0, 0, 0, 0, 0, 0, 0, 0, 0, 1.0]


def test_wrong_goal_not_repenalized_until_other_event():
    rules = tk.GoalCycleRules(cycle=(1, 2, 0), n_agents=1, penalty=-1.5)
    state = GridState(width=1, height=1, tiles=np.zeros((1, 1), dtype=np.int8),
                      goals=[(9, 9), (8, 8), (7, 7)],
                      agents=[AgentBody(0, (0, 0), 0)], episode_limit=10)
    r, _ = rules.resolve_step(state, [0])
    assert r[0] == 1.0
    r, _ = rules.resolve_step(state, [2])   # wrong
    assert r[0] == -1.5
    r, _ = rules.resolve_step(state, [2])   # same tile again: no event
    assert r[0] == 0.0
    r, _ = rules.resolve_step(state, [1])   # correct successor of 0
    assert r[0] == 1.0


def test_per_agent_progress_is_independent():
    rules = tk.GoalCycleRules(cycle=(1, 2, 0), n_agents=2, penalty=-1.5)
    state = GridState(width=1, height=1, tiles=np.zeros((1, 1), dtype=np.int8),
                      goals=[(9, 9), (8, 8), (7, 7)],
                      agents=[AgentBody(0, (0, 0), 0), AgentBody(1, (0, 0), 0)],
                      episode_limit=10)
    r, _ = rules.resolve_step(state, [0, 2])
    assert list(r) == [1.0, 1.0]
    r, _ = rules.resolve_step(state, [1, 1])  # succ(0)=1 ok; succ(2)=0 wrong
    assert list(r) == [1.0, -1.5]


# ---------------------------------------------------------------------------
# cycle sampling

def _cycle_orbit(succ):
    g, seen = 0, [0]
    for _ in range(len(succ) - 1):
        g = succ[g]
        seen.append(g)
    return tuple(seen)


@pytest.mark.parametrize("n_goals,expect", [(3, 2), (4, 6)])
def test_cycle_count_is_factorial(n_goals, expect):
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(600):
        succ = tk._sample_cycle(rng, n_goals)
        orbit = _cycle_orbit(succ)
        assert sorted(orbit) == list(range(n_goals))  # a single n-cycle
        seen.add(succ)
    assert len(seen) == expect


def test_cycle_sampling_roughly_uniform():
    rng = np.random.default_rng(1)
    counts = {}
    for _ in range(4000):
        succ = tk._sample_cycle(rng, 3)
        counts[succ] = counts.get(succ, 0) + 1
    freqs = np.array(list(counts.values())) / 4000
    assert np.all(np.abs(freqs - 0.5) < 0.05)


# ---------------------------------------------------------------------------
# generators

def test_goal_cycle_layouts_connected():
    cfg = tk.GoalCycleConfig()
    for i in range(100):
        rng = substream(123, "env", i)
        state, rules = tk.generate_goal_cycle(rng, cfg, [Role.NOVICE, Role.EXPERT])
        seeds = list(state.goals) + [a.position for a in state.agents]
        assert tk.flood_fill_connected(state.tiles, seeds)
        assert len(set(seeds)) == len(seeds)  # distinct cells
        assert (state.tiles == TileKind.GOAL).sum() == cfg.n_goals
        inner = state.tiles[1:-1, 1:-1]
        assert (inner == TileKind.OBSTACLE).sum() == cfg.n_obstacles
        for g in state.goals:
            assert state.tiles[g[1], g[0]] == TileKind.GOAL


def test_goal_cycle_generation_error_when_crowded():
    cfg = tk.GoalCycleConfig(grid_size=5, n_goals=3, n_obstacles=6)
    with pytest.raises(tk.GenerationError):
        tk.generate_goal_cycle(np.random.default_rng(0), cfg, [Role.NOVICE] * 3)


def test_four_rooms_structure():
    for i in range(50):
        rng = substream(7, "env", i)
        state, rules = tk.generate_four_rooms(rng, [Role.NOVICE])
        assert state.width == state.height == 17
        mid = 8
        # one gap per arm
        for arm in (state.tiles[1:mid, mid], state.tiles[mid + 1:-1, mid],
                    state.tiles[mid, 1:mid], state.tiles[mid, mid + 1:-1]):
            assert (arm == TileKind.FLOOR).sum() + (arm == TileKind.GOAL).sum() == 1
        seeds = list(state.goals) + [a.position for a in state.agents]
        assert tk.flood_fill_connected(state.tiles, seeds)


def test_four_rooms_has_four_rooms():
    # blocking all four gaps yields exactly 4 connected floor components
    rng = substream(99, "env", 0)
    state, _ = tk.generate_four_rooms(rng, [Role.NOVICE])
    tiles = state.tiles.copy()
    mid = 8
    tiles[:, mid] = TileKind.OBSTACLE
    tiles[mid, :] = TileKind.OBSTACLE
    passable = tiles != TileKind.OBSTACLE
    seen = np.zeros_like(passable)
    comps = 0
    for y in range(17):
        for x in range(17):
            if passable[y, x] and not seen[y, x]:
                comps += 1
                stack = [(x, y)]
                seen[y, x] = True
                while stack:
                    cx, cy = stack.pop()
                    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        nx, ny = cx + dx, cy + dy
                        if 0 <= nx < 17 and 0 <= ny < 17 and passable[ny, nx] \
                                and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((nx, ny))
    assert comps == 4


def test_four_rooms_goal_ends_episode():
    rng = substream(5, "env", 3)
    state, rules = tk.generate_four_rooms(rng, [Role.NOVICE])
    # teleport the agent next to the goal and step onto it
    gx, gy = state.goals[0]
    for dx, dy, o in ((-1, 0, Orientation.EAST), (1, 0, Orientation.WEST),
                      (0, -1, Orientation.SOUTH), (0, 1, Orientation.NORTH)):
        if state.passable(gx + dx, gy + dy):
            state.agents[0].position = (gx + dx, gy + dy)
            state.agents[0].orientation = o
            break
    state2, ev = step(state, [Action.FORWARD], rules)
    assert ev.rewards[0] == 1.0
    assert ev.episode_done


def test_four_rooms_no_goal_touch_zero_rewards():
    rng = substream(5, "env", 4)
    state, rules = tk.generate_four_rooms(rng, [Role.NOVICE])
    total = 0.0
    for i in range(20):
        act = Action.ROTATE_LEFT if i % 2 else Action.ROTATE_RIGHT
        state, ev = step(state, [act], rules)
        total += ev.rewards.sum()
    assert total == 0.0


def test_maze_perfect_tree_property():
    for i in range(25):
        rng = substream(11, "env", i)
        state, _ = tk.generate_maze(rng, [Role.NOVICE], braid=0.0)
        passable = state.tiles != TileKind.OBSTACLE
        n_cells = int(passable.sum())
        edges = 0
        for y in range(19):
            for x in range(19):
                if passable[y, x]:
                    if x + 1 < 19 and passable[y, x + 1]:
                        edges += 1
                    if y + 1 < 19 and passable[y + 1, x]:
                        edges += 1
        assert edges == n_cells - 1


def test_maze_braiding_adds_edges():
    rng0 = substream(12, "env", 0)
    state0, _ = tk.generate_maze(rng0, [Role.NOVICE], braid=0.0)
    rng1 = substream(12, "env", 0)
    state1, _ = tk.generate_maze(rng1, [Role.NOVICE], braid=0.3)
    assert (state1.tiles != TileKind.OBSTACLE).sum() > (state0.tiles != TileKind.OBSTACLE).sum()


def test_maze_layouts_connected():
    for i in range(50):
        rng = substream(13, "env", i)
        state, _ = tk.generate_maze(rng, [Role.NOVICE, Role.EXPERT])
        seeds = list(state.goals) + [a.position for a in state.agents]
        assert tk.flood_fill_connected(state.tiles, seeds)


# ---------------------------------------------------------------------------
# curriculum / mixing / distractors

def test_curriculum_lookup():
    sched = tk.CurriculumSchedule([(0, -0.5), (81920, -1.0)])
    assert tk.apply_curriculum(sched, 81919) == -0.5
    assert tk.apply_curriculum(sched, 81920) == -1.0
    assert tk.apply_curriculum(sched, 0) == -0.5
    assert tk.apply_curriculum(sched, 10 ** 9) == -1.0


def test_curriculum_single_stage_constant():
    sched = tk.CurriculumSchedule([(0, -1.5)])
    for ep in (0, 1, 10 ** 6):
        assert tk.apply_curriculum(sched, ep) == -1.5


def test_curriculum_validation():
    with pytest.raises(ValueError):
        tk.CurriculumSchedule([])
    with pytest.raises(ValueError):
        tk.CurriculumSchedule([(0, -1.0), (0, -2.0)])
    with pytest.raises(ValueError):
        tk.CurriculumSchedule([(0, -1.0), (10, -0.5)])  # penalty increased
    with pytest.raises(ValueError):
        tk.CurriculumSchedule([(5, -1.0)])  # must start at 0


def test_mode_social_before_switch():
    mix = tk.MixSchedule(switch_episode=100, solo_fraction_after=0.75)
    rng = np.random.default_rng(0)
    for ep in range(100):
        assert tk.sample_episode_mode(mix, ep, rng) == tk.EpisodeMode.SOCIAL


def test_mode_solo_fraction_after_switch():
    mix = tk.MixSchedule(switch_episode=0, solo_fraction_after=0.75)
    rng = np.random.default_rng(1)
    draws = sum(tk.sample_episode_mode(mix, 5, rng) == tk.EpisodeMode.SOLO
                for _ in range(100000))
    assert abs(draws / 100000 - 0.75) < 0.01


def test_mode_zero_fraction_always_social():
    mix = tk.MixSchedule(switch_episode=0, solo_fraction_after=0.0)
    rng = np.random.default_rng(2)
    for _ in range(200):
        assert tk.sample_episode_mode(mix, 10, rng) == tk.EpisodeMode.SOCIAL


def test_distractor_uniform_over_movement():
    rng = np.random.default_rng(3)
    counts = {a: 0 for a in (Action.ROTATE_LEFT, Action.ROTATE_RIGHT, Action.FORWARD)}
    for _ in range(30000):
        a = tk.distractor_policy(rng)
        counts[a] += 1
    for a, c in counts.items():
        assert abs(c / 30000 - 1 / 3) < 0.02


def test_distractor_deterministic_under_seed():
    a = [tk.distractor_policy(np.random.default_rng(9)) for _ in range(5)]
    b = [tk.distractor_policy(np.random.default_rng(9)) for _ in range(5)]
    assert a == b


# ---------------------------------------------------------------------------
# hidden cycle is unobservable; layout round trip

def test_cycle_permutation_invisible_in_render():
    rng = substream(77, "env", 0)
    cfg = tk.GoalCycleConfig()
    state, rules = tk.generate_goal_cycle(rng, cfg, [Role.NOVICE])
    img_a = render_observation(state, 0)
    rules_b = tk.GoalCycleRules(cycle=(2, 0, 1), n_agents=1, penalty=-1.5)
    assert rules_b.cycle != rules.cycle
    img_b = render_observation(state, 0)
    assert np.array_equal(img_a, img_b)


def test_layout_json_round_trip():
    rng = substream(21, "env", 0)
    state, rules = tk.generate_goal_cycle(rng, tk.GoalCycleConfig(),
                                          [Role.NOVICE, Role.EXPERT, Role.DISTRACTOR])
    doc = tk.layout_to_json(state, rules)
    state2, rules2 = tk.layout_from_json(doc)
    assert np.array_equal(state.tiles, state2.tiles)
    assert state.goals == state2.goals
    assert rules2.cycle == rules.cycle
    assert rules2.penalty == rules.penalty
    for a, b in zip(state.agents, state2.agents):
        assert (a.position, a.orientation, a.role) == (b.position, b.orientation, b.role)
    import json
    assert json.loads(json.dumps(doc)) == doc


def test_layout_json_rejects_unknown_version():
    rng = substream(21, "env", 1)
    state, rules = tk.generate_maze(rng, [Role.NOVICE])
    doc = tk.layout_to_json(state, rules)
    doc["version"] = 999
    with pytest.raises(ValueError):
        tk.layout_from_json(doc)


# ---------------------------------------------------------------------------
# optimal-return planner oracle on small instances

def _planner_optimal(state, rules, budget):
    """Exhaustive DP over (pos, orient, last_event, last_rewarded)."""
    succ = rules.cycle
    p = rules.penalty
    goal_at = {g: i for i, g in enumerate(state.goals)}
    a0 = state.agents[0]
    frontier = {(a0.position, a0.orientation, None, None): 0.0}
    best = 0.0
    for _ in range(budget):
        nxt = {}
        for (pos, o, le, lr), val in frontier.items():
            for act in (0, 1, 2):
                npos, no, nle, nlr, nval = pos, o, le, lr, val
                if act == 0:
                    no = (o - 1) % 4
                elif act == 1:
                    no = (o + 1) % 4
                else:
                    dx, dy = DIR_VEC[o]
                    tx, ty = pos[0] + dx, pos[1] + dy
                    if state.passable(tx, ty):
                        npos = (tx, ty)
                        g = goal_at.get(npos)
                        if g is not None and g != le:
                            if lr is None or g == succ[lr]:
                                nval += 1.0
                                nlr = g
                            else:
                                nval += p
                            nle = g
                key = (npos, no, nle, nlr)
                if nval > nxt.get(key, -np.inf):
                    nxt[key] = nval
        frontier = nxt
        best = max(best, max(frontier.values()))
    return best


def _legs_optimal(state, rules, budget):
    """1 + as many successor hops as fit, using pose-level BFS leg distances."""
    succ = rules.cycle
    goals = state.goals

    def bfs_enter(start_pose_set, target_g, allowed_goal):
        # min steps to *enter* goals[target_g]; other goals (except allowed) are lava
        forbidden = {g for i, g in enumerate(goals)
                     if i != target_g and g != allowed_goal}
        dist = {}
        dq = deque()
        for pose in start_pose_set:
            dist[pose] = 0
            dq.append(pose)
        arrivals = {}
        while dq:
            (pos, o) = dq.popleft()
            d = dist[(pos, o)]
            for act in (0, 1, 2):
                npose = None
                if act == 0:
                    npose = (pos, (o - 1) % 4)
                elif act == 1:
                    npose = (pos, (o + 1) % 4)
                else:
                    dx, dy = DIR_VEC[o]
                    tx, ty = pos[0] + dx, pos[1] + dy
                    if not state.passable(tx, ty) or (tx, ty) in forbidden:
                        continue
                    if (tx, ty) == goals[target_g]:
                        if o not in arrivals:
                            arrivals[o] = d + 1
                        continue
                    npose = ((tx, ty), o)
                if npose is not None and npose not in dist:
                    dist[npose] = d + 1
                    dq.append(npose)
        return arrivals  # orientation -> steps

    a0 = state.agents[0]
    # cost[k][(g, orient)]: min steps after k successor hops, standing on g
    cost = {}
    for g in range(len(goals)):
        for o, d in bfs_enter([(a0.position, a0.orientation)], g, None).items():
            cost[(g, o)] = d
    best_k = 0 if cost else None
    if best_k is None:
        return 0.0
    k = 0
    layer = {key: d for key, d in cost.items() if d <= budget}
    while layer:
        k_next = {}
        for (g, o), d in layer.items():
            tgt = succ[g]
            for o2, leg in bfs_enter([(goals[g], o)], tgt, goals[g]).items():
                nd = d + leg
                if nd <= budget and nd < k_next.get((tgt, o2), np.inf):
                    k_next[(tgt, o2)] = nd
        if not k_next:
            break
        k += 1
        layer = k_next
    return 1.0 + k


@pytest.mark.parametrize("seed,n_obstacles", [(0, 0), (1, 0), (2, 2), (3, 2), (4, 1)])
def test_planner_matches_leg_formula(seed, n_obstacles):
    cfg = tk.GoalCycleConfig(grid_size=7, n_goals=3, n_obstacles=n_obstacles,
                             episode_limit=26)
    rng = substream(1000 + seed, "env", 0)
    state, rules = tk.generate_goal_cycle(rng, cfg, [Role.NOVICE])
    got = _planner_optimal(state, rules, budget=26)
    want = _legs_optimal(state, rules, budget=26)
    assert got == want, f"planner {got} != legs {want}"
    assert got >= 1.0  # the first goal is always reachable


def test_random_play_rewards_match_independent_resimulation():
    # replay random episodes and re-derive rewards from position changes
    cfg = tk.GoalCycleConfig(grid_size=9, n_goals=3, n_obstacles=4, episode_limit=60)
    for i in range(5):
        rng = substream(500 + i, "env", 0)
        state, rules = tk.generate_goal_cycle(rng, cfg, [Role.NOVICE])
        succ = rules.cycle
        goal_at = {g: j for j, g in enumerate(state.goals)}
        last, lr = None, None
        prev_pos = state.agents[0].position
        for _ in range(60):
            act = tk.distractor_policy(rng)
            state, ev = step(state, [act], rules)
            pos = state.agents[0].position
            want = 0.0
            if pos != prev_pos and pos in goal_at and goal_at[pos] != last:
                g = goal_at[pos]
                if lr is None or g == succ[lr]:
                    want = 1.0
                    lr = g
                else:
                    want = cfg.penalty
                last = g
            assert ev.rewards[0] == want
            prev_pos = pos


def test_mix_schedule_validation():
    with pytest.raises(ValueError):
        tk.MixSchedule(switch_episode=0, solo_fraction_after=1.5)


def test_goal_cycle_config_validation():
    with pytest.raises(ValueError):
        tk.GoalCycleConfig(n_goals=1)
    with pytest.raises(ValueError):
        tk.GoalCycleConfig(penalty=0.5)
    with pytest.raises(ValueError):
        tk.GoalCycleConfig(alpha_c=0.0)
