"""Task generators and reward semantics.

Three episode families:

* Goal Cycle: n visually identical goals must be traversed in a hidden cyclic
  order. The first goal entered in an episode rewards +1; afterwards the
  cycle-successor of the last rewarded goal rewards +1 and any other goal
  costs the (non-positive) penalty. A goal event fires only when an agent
  enters a goal tile different from the tile of its last event, so loitering
  or stepping off and back on cannot farm rewards or penalties. Wrong visits
  do not reset progress: the expected successor stays the same.
* Four Rooms (17x17): two center walls with one gap per arm; a single goal
  worth +1 that ends the episode for everyone.
* Maze (19x19): recursive-backtracker maze on a 9x9 cell lattice, optionally
  braided by knocking out a fraction of the remaining walls; same goal
  semantics as Four Rooms.

Grids include their boundary wall ring in the stated size (a 13x13 Goal Cycle
has an 11x11 interior). All generators are pure functions of (rng, config)
and resample until every goal and spawn is mutually connected.
"""

from dataclasses import dataclass, replace

import numpy as np

from .gridworld import (
    Action, AgentBody, GridState, Role, TileKind, MOVEMENT_ACTIONS,
)

__all__ = [
    "GoalCycleConfig", "CycleState", "CurriculumSchedule", "MixSchedule",
    "GoalCycleRules", "SingleGoalRules", "EpisodeMode",
    "generate_goal_cycle", "goal_cycle_reward", "generate_four_rooms",
    "generate_maze", "apply_curriculum", "sample_episode_mode",
    "distractor_policy", "layout_to_json", "layout_from_json",
    "flood_fill_connected", "GenerationError",
]

LAYOUT_SCHEMA_VERSION = 1
PLACEMENT_RETRIES = 200


class GenerationError(RuntimeError):
    """Layout placement failed repeatedly (grid too crowded)."""


@dataclass
class GoalCycleConfig:
    grid_size: int = 13          # includes the boundary wall ring
    n_goals: int = 3
    penalty: float = -1.5
    n_obstacles: int = 8
    episode_limit: int = 250
    alpha_c: float = 0.99

    def __post_init__(self):
        if self.n_goals < 2:
            raise ValueError("need at least 2 goals")
        if self.penalty > 0:
            raise ValueError("penalty must be <= 0")
        if not 0 < self.alpha_c <= 1:
            raise ValueError("alpha_c must be in (0, 1]")


@dataclass
class CycleState:
    """Per-agent traversal progress; the successor table is shared."""
    cycle: tuple                      # cycle[g] = successor goal index
    last_rewarded_goal: int = None
    last_event_goal: int = None

    @property
    def entered(self):
        return self.last_rewarded_goal is not None


@dataclass
class CurriculumSchedule:
    stages: list  # [(episode_threshold, penalty)], thresholds strictly increasing

    def __post_init__(self):
        if not self.stages:
            raise ValueError("curriculum needs at least one stage")
        if self.stages[0][0] != 0:
            raise ValueError("first curriculum stage must start at episode 0")
        for (t0, p0), (t1, p1) in zip(self.stages, self.stages[1:]):
            if t1 <= t0:
                raise ValueError("curriculum thresholds must be strictly increasing")
            if p1 > p0:
                raise ValueError("curriculum penalties must be non-increasing")


@dataclass
class MixSchedule:
    switch_episode: int
    solo_fraction_after: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.solo_fraction_after <= 1.0:
            raise ValueError("solo fraction must be in [0, 1]")


class EpisodeMode:
    SOLO = "solo"
    SOCIAL = "social"


# ---------------------------------------------------------------------------
# reward rules

def goal_cycle_reward(cs, goal_visited, penalty):
    """Reward for a triggered goal event; returns (reward, new CycleState).

    The caller is responsible for the trigger rule (only entries onto a goal
    different from the last event tile count).
    """
    if not cs.entered:
        return 1.0, replace(cs, last_rewarded_goal=goal_visited)
    if goal_visited == cs.cycle[cs.last_rewarded_goal]:
        return 1.0, replace(cs, last_rewarded_goal=goal_visited)
    return penalty, cs


class GoalCycleRules:
    variant = "goal_cycle"

    def __init__(self, cycle, n_agents, penalty, alpha_c=0.99):
        self.cycle = tuple(cycle)
        self.penalty = penalty
        self.alpha_c = alpha_c
        self.agent_states = [CycleState(cycle=self.cycle) for _ in range(n_agents)]

    def resolve_step(self, state, visited):
        rewards = np.zeros(len(state.agents))
        for i, g in enumerate(visited):
            if g is None:
                continue
            cs = self.agent_states[i]
            if g == cs.last_event_goal:
                continue  # re-entering the last triggered tile is not an event
            r, cs = goal_cycle_reward(cs, g, self.penalty)
            self.agent_states[i] = replace(cs, last_event_goal=g)
            rewards[i] = r
        return rewards, False


class SingleGoalRules:
    """Four Rooms / Maze: +1 for reaching the goal, which ends the episode."""

    def __init__(self, variant, alpha_c=0.99):
        self.variant = variant
        self.alpha_c = alpha_c

    def resolve_step(self, state, visited):
        rewards = np.zeros(len(state.agents))
        done = False
        for i, g in enumerate(visited):
            if g is not None:
                rewards[i] = 1.0
                done = True
        return rewards, done


# ---------------------------------------------------------------------------
# placement helpers

def flood_fill_connected(tiles, seeds):
    """True if every seed lies in one 4-connected component of passable tiles."""
    if not seeds:
        return True
    h, w = tiles.shape
    passable = tiles != TileKind.OBSTACLE
    seen = np.zeros_like(passable)
    stack = [seeds[0]]
    sx, sy = seeds[0]
    if not passable[sy, sx]:
        return False
    seen[sy, sx] = True
    while stack:
        x, y = stack.pop()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and passable[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                stack.append((nx, ny))
    return all(seen[y, x] for x, y in seeds)


def _ring_tiles(size_w, size_h):
    tiles = np.zeros((size_h, size_w), dtype=np.int8)
    tiles[0, :] = TileKind.OBSTACLE
    tiles[-1, :] = TileKind.OBSTACLE
    tiles[:, 0] = TileKind.OBSTACLE
    tiles[:, -1] = TileKind.OBSTACLE
    return tiles


def _spawn_agents(rng, cells, roles):
    agents = []
    for i, (role, (x, y)) in enumerate(zip(roles, cells)):
        agents.append(AgentBody(agent_id=i, position=(int(x), int(y)),
                                orientation=int(rng.integers(0, 4)), role=role))
    return agents


def _sample_cycle(rng, n_goals):
    """Uniform over the (n-1)! rotation-distinct cyclic orders, as a successor table."""
    order = [0] + list(rng.permutation(np.arange(1, n_goals)))
    succ = [0] * n_goals
    for i, g in enumerate(order):
        succ[g] = int(order[(i + 1) % n_goals])
    return tuple(succ)


def generate_goal_cycle(rng, config, roles):
    """Random Goal Cycle layout plus its (hidden-cycle) rules."""
    n = config.grid_size
    interior = [(x, y) for y in range(1, n - 1) for x in range(1, n - 1)]
    need = config.n_goals + config.n_obstacles + len(roles)
    if need > len(interior):
        raise GenerationError("grid too small for requested layout")
    for _ in range(PLACEMENT_RETRIES):
        tiles = _ring_tiles(n, n)
        picks = rng.choice(len(interior), size=need, replace=False)
        cells = [interior[i] for i in picks]
        goals = cells[:config.n_goals]
        obstacles = cells[config.n_goals:config.n_goals + config.n_obstacles]
        spawns = cells[config.n_goals + config.n_obstacles:]
        for x, y in obstacles:
            tiles[y, x] = TileKind.OBSTACLE
        for x, y in goals:
            tiles[y, x] = TileKind.GOAL
        if not flood_fill_connected(tiles, goals + spawns):
            continue
        state = GridState(width=n, height=n, tiles=tiles, goals=list(goals),
                          agents=_spawn_agents(rng, spawns, roles),
                          episode_limit=config.episode_limit)
        rules = GoalCycleRules(_sample_cycle(rng, config.n_goals), len(roles),
                               config.penalty, config.alpha_c)
        return state, rules
    raise GenerationError("could not place a connected layout")


def generate_four_rooms(rng, roles, episode_limit=250, alpha_c=0.99):
    """17x17 Four Rooms: center cross walls, one random gap per arm, one goal."""
    n = 17
    mid = n // 2
    tiles = _ring_tiles(n, n)
    tiles[mid, :] = TileKind.OBSTACLE
    tiles[:, mid] = TileKind.OBSTACLE
    # one gap per arm
    for arm in (range(1, mid), range(mid + 1, n - 1)):
        gy = int(rng.choice(list(arm)))
        tiles[gy, mid] = TileKind.FLOOR
    for arm in (range(1, mid), range(mid + 1, n - 1)):
        gx = int(rng.choice(list(arm)))
        tiles[mid, gx] = TileKind.FLOOR
    free = [(x, y) for y in range(1, n - 1) for x in range(1, n - 1)
            if tiles[y, x] == TileKind.FLOOR]
    picks = rng.choice(len(free), size=1 + len(roles), replace=False)
    goal = free[picks[0]]
    spawns = [free[i] for i in picks[1:]]
    tiles[goal[1], goal[0]] = TileKind.GOAL
    if not flood_fill_connected(tiles, [goal] + spawns):
        # gaps guarantee connectivity; resample defensively all the same
        return generate_four_rooms(rng, roles, episode_limit, alpha_c)
    state = GridState(width=n, height=n, tiles=tiles, goals=[goal],
                      agents=_spawn_agents(rng, spawns, roles),
                      episode_limit=episode_limit)
    return state, SingleGoalRules("four_rooms", alpha_c)


def generate_maze(rng, roles, braid=0.1, episode_limit=250, alpha_c=0.99):
    """19x19 maze: DFS carving on the odd-coordinate cell lattice, then braiding."""
    n = 19
    tiles = np.full((n, n), TileKind.OBSTACLE, dtype=np.int8)
    nodes = [(x, y) for y in range(1, n - 1, 2) for x in range(1, n - 1, 2)]
    for x, y in nodes:
        tiles[y, x] = TileKind.FLOOR
    node_set = set(nodes)
    start = nodes[int(rng.integers(0, len(nodes)))]
    visited = {start}
    stack = [start]
    while stack:
        x, y = stack[-1]
        nbrs = [(x + dx, y + dy) for dx, dy in ((2, 0), (-2, 0), (0, 2), (0, -2))
                if (x + dx, y + dy) in node_set and (x + dx, y + dy) not in visited]
        if not nbrs:
            stack.pop()
            continue
        nx, ny = nbrs[int(rng.integers(0, len(nbrs)))]
        tiles[(y + ny) // 2, (x + nx) // 2] = TileKind.FLOOR
        visited.add((nx, ny))
        stack.append((nx, ny))
    if braid > 0:
        candidates = []
        for y in range(1, n - 1):
            for x in range(1, n - 1):
                if tiles[y, x] != TileKind.OBSTACLE or (x % 2 == 0) == (y % 2 == 0):
                    continue
                if x % 2 == 0:  # wall between horizontal neighbors
                    sides = ((x - 1, y), (x + 1, y))
                else:
                    sides = ((x, y - 1), (x, y + 1))
                if all(tiles[sy, sx] != TileKind.OBSTACLE for sx, sy in sides):
                    candidates.append((x, y))
        k = int(round(braid * len(candidates)))
        if k:
            for i in rng.choice(len(candidates), size=k, replace=False):
                x, y = candidates[i]
                tiles[y, x] = TileKind.FLOOR
    free = [(x, y) for y in range(1, n - 1) for x in range(1, n - 1)
            if tiles[y, x] == TileKind.FLOOR]
    picks = rng.choice(len(free), size=1 + len(roles), replace=False)
    goal = free[picks[0]]
    spawns = [free[i] for i in picks[1:]]
    tiles[goal[1], goal[0]] = TileKind.GOAL
    state = GridState(width=n, height=n, tiles=tiles, goals=[goal],
                      agents=_spawn_agents(rng, spawns, roles),
                      episode_limit=episode_limit)
    return state, SingleGoalRules("maze", alpha_c)


# ---------------------------------------------------------------------------
# schedules and scripted policies

def apply_curriculum(schedule, episode_idx):
    """Penalty of the last stage whose threshold is <= episode_idx."""
    penalty = schedule.stages[0][1]
    for threshold, p in schedule.stages:
        if threshold <= episode_idx:
            penalty = p
        else:
            break
    return penalty


def sample_episode_mode(mix, episode_idx, rng):
    """Social before the switch; afterwards solo with the configured probability."""
    if episode_idx < mix.switch_episode:
        return EpisodeMode.SOCIAL
    if rng.random() < mix.solo_fraction_after:
        return EpisodeMode.SOLO
    return EpisodeMode.SOCIAL


def distractor_policy(rng):
    """Uniform draw over the three movement actions."""
    return MOVEMENT_ACTIONS[int(rng.integers(0, 3))]


# ---------------------------------------------------------------------------
# layout (de)serialization

def layout_to_json(state, rules):
    doc = {
        "version": LAYOUT_SCHEMA_VERSION,
        "variant": rules.variant,
        "width": state.width,
        "height": state.height,
        "tiles": state.tiles.tolist(),
        "goals": [list(g) for g in state.goals],
        "spawns": [{"agent_id": a.agent_id, "position": list(a.position),
                    "orientation": int(a.orientation), "role": int(a.role)}
                   for a in state.agents],
        "episode_limit": state.episode_limit,
        "alpha_c": rules.alpha_c,
    }
    if isinstance(rules, GoalCycleRules):
        doc["cycle"] = list(rules.cycle)
        doc["penalty"] = rules.penalty
    return doc


def layout_from_json(doc):
    if doc.get("version") != LAYOUT_SCHEMA_VERSION:
        raise ValueError(f"unsupported layout schema version: {doc.get('version')}")
    tiles = np.asarray(doc["tiles"], dtype=np.int8)
    agents = [AgentBody(agent_id=s["agent_id"], position=tuple(s["position"]),
                        orientation=s["orientation"], role=Role(s["role"]))
              for s in doc["spawns"]]
    state = GridState(width=doc["width"], height=doc["height"], tiles=tiles,
                      goals=[tuple(g) for g in doc["goals"]], agents=agents,
                      episode_limit=doc["episode_limit"])
    if doc["variant"] == "goal_cycle":
        rules = GoalCycleRules(tuple(doc["cycle"]), len(agents), doc["penalty"],
                               doc["alpha_c"])
    else:
        rules = SingleGoalRules(doc["variant"], doc["alpha_c"])
    return state, rules
