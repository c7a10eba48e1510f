"""Simultaneous-move grid engine: state, movement, occlusion, rendering, prestige.

Conventions
-----------
* Grid coordinates are (x, y) with x the column and y the row; tiles[y, x].
* Orientations: N=0, E=1, S=2, W=3; N faces -y.
* The egocentric view covers 7x7 tiles with the observer at the bottom-center
  cell (view row 6, column 3), rotated so the observer faces "up".
* A tile is visible iff the open segment between the observer's tile center
  and the target's tile center crosses no obstacle tile interior. Obstacle
  tiles themselves are visible; goals and agents never block sight; grazing
  an obstacle's corner does not occlude. Cells outside the grid are treated
  as opaque and render as hidden.
* Observations are float64 images of shape (21, 21, 3) with values in [0, 1],
  3x3 pixels per tile. Hidden tiles are solid purple; agents are drawn as
  oriented arrows in their prestige color, in roster order (later agents
  overdraw earlier ones on a shared tile).

Everything in this module is deterministic given the state; there is no RNG.
"""

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

__all__ = [
    "TileKind", "Action", "Orientation", "AgentBody", "GridState", "StepEvents",
    "Role", "VIEW_TILES", "TILE_PIXELS", "OBS_SIZE", "PALETTE",
    "step", "compute_visibility", "render_observation", "render_full",
    "render_views_batch", "pad_tiles", "roster_tuples",
    "prestige_update", "prestige_color", "save_png",
]

VIEW_TILES = 7
TILE_PIXELS = 3
OBS_SIZE = VIEW_TILES * TILE_PIXELS  # 21
OBSERVER_VIEW_POS = (6, 3)  # (row, col) of the observer inside the view


class TileKind(IntEnum):
    FLOOR = 0
    OBSTACLE = 1
    GOAL = 2


class Action(IntEnum):
    ROTATE_LEFT = 0
    ROTATE_RIGHT = 1
    FORWARD = 2
    PICKUP = 3   # no-op
    DROP = 4     # no-op
    TOGGLE = 5   # no-op
    DONE = 6     # no-op


MOVEMENT_ACTIONS = (Action.ROTATE_LEFT, Action.ROTATE_RIGHT, Action.FORWARD)
N_ACTIONS = 7


class Orientation(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


# (dx, dy) unit step for each orientation
DIR_VEC = ((0, -1), (1, 0), (0, 1), (-1, 0))


class Role(IntEnum):
    NOVICE = 0
    EXPERT = 1
    DISTRACTOR = 2


PALETTE = {
    "floor": np.array([0.35, 0.35, 0.35]),
    "obstacle": np.array([0.55, 0.27, 0.07]),
    "goal": np.array([1.0, 1.0, 0.0]),
    "hidden": np.array([0.44, 0.15, 0.76]),
    "red": np.array([1.0, 0.0, 0.0]),
    "blue": np.array([0.0, 0.0, 1.0]),
}

_TILE_COLORS = np.stack([PALETTE["floor"], PALETTE["obstacle"], PALETTE["goal"]])

# 3x3 arrow glyph pointing "up"; rotations give the other headings
_ARROW_UP = np.array([[0, 1, 0],
                      [1, 1, 1],
                      [0, 0, 0]], dtype=bool)
ARROW_MASKS = [np.rot90(_ARROW_UP, -k) for k in range(4)]  # index = view orientation


@dataclass
class AgentBody:
    agent_id: int
    position: tuple  # (x, y)
    orientation: int
    prestige: float = 0.0
    role: Role = Role.NOVICE


@dataclass
class StepEvents:
    rewards: np.ndarray          # per agent
    visited_goals: list          # per agent: goal index or None (tile entered this step)
    episode_done: bool


@dataclass
class GridState:
    width: int
    height: int
    tiles: np.ndarray            # int8 [height, width] of TileKind values
    goals: list                  # goal index -> (x, y)
    agents: list = field(default_factory=list)
    step_count: int = 0
    episode_limit: int = 250

    def goal_index_at(self, pos):
        for i, g in enumerate(self.goals):
            if g == pos:
                return i
        return None

    def passable(self, x, y):
        return (0 <= x < self.width and 0 <= y < self.height
                and self.tiles[y, x] != TileKind.OBSTACLE)


# ---------------------------------------------------------------------------
# prestige (reward-dependent color accumulator)

def prestige_update(c_prev, r_t, alpha_c):
    """Decayed accumulator: alpha_c * c_prev + r_t for r_t >= 0, else reset to 0."""
    if r_t >= 0:
        return alpha_c * c_prev + r_t
    return 0.0


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def prestige_color(c_t):
    """Blend from red (low) to blue (high): blue*sig(c) + red*(1-sig(c))."""
    s = _sigmoid(c_t)
    return PALETTE["blue"] * s + PALETTE["red"] * (1.0 - s)


# ---------------------------------------------------------------------------
# visibility: exact center-to-center line of sight on the 7x7 window

def _cells_crossed(dx, dy):
    """Cells (excluding endpoints) whose open interior the open segment
    from cell (0,0) to cell (dx,dy) passes through.

    Integer line walk: coordinates are scaled by 2 so cell centers are even
    and boundaries odd; boundary-crossing parameters t = k/(2*delta) are
    compared by cross-multiplication, exactly. When the segment passes
    exactly through a lattice corner both axes advance at once and the two
    corner-adjacent cells are skipped (corner grazing does not occlude).
    """
    cells = []
    cx, cy = 0, 0
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    adx, ady = abs(dx), abs(dy)
    # next boundary crossings: t_x = (2*nx+1)/(2*adx), t_y = (2*ny+1)/(2*ady)
    nx, ny = 0, 0
    while (cx, cy) != (dx, dy):
        if adx == 0:
            step_x, step_y = False, True
        elif ady == 0:
            step_x, step_y = True, False
        else:
            lhs = (2 * nx + 1) * ady   # t_x vs t_y cross-multiplied
            rhs = (2 * ny + 1) * adx
            step_x, step_y = lhs <= rhs, rhs <= lhs
        if step_x:
            cx += sx
            nx += 1
        if step_y:
            cy += sy
            ny += 1
        if (cx, cy) != (dx, dy):
            cells.append((cx, cy))
    return cells


def _build_cross_matrix():
    """CROSS[t, c] is True when window cell c lies strictly between the
    observer and window cell t along their sight line. Built by walking
    rays outward row by row from the observer."""
    oy, ox = OBSERVER_VIEW_POS
    n = VIEW_TILES * VIEW_TILES
    mat = np.zeros((n, n), dtype=bool)
    for vy in range(VIEW_TILES - 1, -1, -1):
        for vx in range(VIEW_TILES):
            t = vy * VIEW_TILES + vx
            for (dx, dy) in _cells_crossed(vx - ox, vy - oy):
                cy, cx = oy + dy, ox + dx
                mat[t, cy * VIEW_TILES + cx] = True
    return mat


_CROSS_MAT = _build_cross_matrix()
_CROSS_U8 = _CROSS_MAT.T.astype(np.uint8)


def visibility_from_window(kind_window, oob_mask=None):
    """7x7 (or batched Bx7x7) visibility from window tile kinds.

    Out-of-grid cells (oob_mask True) behave as opaque and are themselves
    reported not visible.
    """
    kinds = np.asarray(kind_window)
    batched = kinds.ndim == 3
    k = kinds if batched else kinds[None]
    opaque = k == TileKind.OBSTACLE
    oob = None
    if oob_mask is not None:
        oob = oob_mask if batched else np.asarray(oob_mask)[None]
        opaque = opaque | oob
    flat = opaque.reshape(k.shape[0], -1).astype(np.uint8)
    blocked = flat @ _CROSS_U8 > 0
    vis = ~blocked
    if oob is not None:
        vis &= ~oob.reshape(k.shape[0], -1)
    vis = vis.reshape(k.shape[0], VIEW_TILES, VIEW_TILES)
    return vis if batched else vis[0]


def _view_offsets(orientation):
    """(dy, dx) world offsets for every view cell, given observer orientation."""
    oy, ox = OBSERVER_VIEW_POS
    f = (oy - np.arange(VIEW_TILES))[:, None]   # forward distance per view row
    r = (np.arange(VIEW_TILES) - ox)[None, :]   # lateral offset per view column
    fx, fy = DIR_VEC[orientation]
    rx, ry = DIR_VEC[(orientation + 1) % 4]
    return f * fy + r * ry, f * fx + r * rx


_OFFSETS = [_view_offsets(o) for o in range(4)]


def window_world_coords(position, orientation):
    """World (ys, xs) int arrays [7,7] covered by the view window."""
    x, y = position
    dy, dx = _OFFSETS[orientation]
    return y + dy, x + dx


def compute_visibility(state, observer):
    """7x7 boolean mask of tiles visible from the observer's pose.

    Mask is in view coordinates: row 6 is the observer's row, row 0 the
    farthest row ahead; the observer's own tile is always visible.
    """
    ys, xs = window_world_coords(observer.position, observer.orientation)
    oob = (ys < 0) | (ys >= state.height) | (xs < 0) | (xs >= state.width)
    kinds = np.zeros((VIEW_TILES, VIEW_TILES), dtype=np.int8)
    kinds[~oob] = state.tiles[ys[~oob], xs[~oob]]
    return visibility_from_window(kinds, oob)


# ---------------------------------------------------------------------------
# rendering

def _agent_view_cell(obs_pos, obs_orient, agent_pos, agent_orient):
    """(vy, vx, view_orientation) of an agent, or None if outside the window."""
    wdx, wdy = agent_pos[0] - obs_pos[0], agent_pos[1] - obs_pos[1]
    fx, fy = DIR_VEC[obs_orient]
    rx, ry = DIR_VEC[(obs_orient + 1) % 4]
    f = wdx * fx + wdy * fy
    r = wdx * rx + wdy * ry
    if not (0 <= f <= 6 and -3 <= r <= 3):
        return None
    return 6 - f, r + 3, (agent_orient - obs_orient) % 4


PAD = VIEW_TILES - 1  # window reach beyond the grid in any direction


def pad_tiles(tiles):
    """Obstacle-pad a tile array so window gathers never index out of range."""
    return np.pad(tiles, PAD, constant_values=int(TileKind.OBSTACLE))


def render_views_batch(padded, grid_hw, obs_pos, obs_orient, rosters):
    """Egocentric views for a batch of observers; the single shared render path.

    padded: [K, H+2*PAD, W+2*PAD] obstacle-padded tiles; grid_hw = (H, W);
    obs_pos [K, 2] as (x, y); obs_orient [K]; rosters[k] lists every agent in
    observer k's world as (x, y, orientation, prestige), in draw order.
    Returns float images [K, 21, 21, 3].
    """
    H, W = grid_hw
    K = len(obs_orient)
    off_dy = np.stack([_OFFSETS[o][0] for o in range(4)])
    off_dx = np.stack([_OFFSETS[o][1] for o in range(4)])
    ys = obs_pos[:, 1, None, None] + off_dy[obs_orient]
    xs = obs_pos[:, 0, None, None] + off_dx[obs_orient]
    oob = (ys < 0) | (ys >= H) | (xs < 0) | (xs >= W)
    kinds = padded[np.arange(K)[:, None, None], ys + PAD, xs + PAD]
    vis = visibility_from_window(kinds, oob)

    colors = _TILE_COLORS[kinds]
    colors[~vis] = PALETTE["hidden"]
    imgs = colors.repeat(TILE_PIXELS, axis=1).repeat(TILE_PIXELS, axis=2)
    for k in range(K):
        op = (int(obs_pos[k, 0]), int(obs_pos[k, 1]))
        oo = int(obs_orient[k])
        vk = vis[k]
        for (ax, ay, aorient, prestige) in rosters[k]:
            cell = _agent_view_cell(op, oo, (ax, ay), aorient)
            if cell is None:
                continue
            vy, vx, vo = cell
            if not vk[vy, vx]:
                continue
            block = imgs[k, vy * 3:vy * 3 + 3, vx * 3:vx * 3 + 3]
            block[ARROW_MASKS[vo]] = prestige_color(prestige)
    return imgs


def roster_tuples(state):
    return [(a.position[0], a.position[1], int(a.orientation), a.prestige)
            for a in state.agents]


def render_observation(state, agent_id):
    """Egocentric 21x21x3 image for one agent; deterministic in the state."""
    observer = state.agents[agent_id]
    imgs = render_views_batch(
        pad_tiles(state.tiles)[None], (state.height, state.width),
        np.array([observer.position]), np.array([int(observer.orientation)]),
        [roster_tuples(state)])
    return imgs[0]


def render_full(state):
    """Bird's-eye render of the whole grid (no occlusion), for debugging."""
    colors = _TILE_COLORS[state.tiles]
    img = colors.repeat(TILE_PIXELS, axis=0).repeat(TILE_PIXELS, axis=1)
    for body in state.agents:
        x, y = body.position
        block = img[y * 3:y * 3 + 3, x * 3:x * 3 + 3]
        block[ARROW_MASKS[body.orientation]] = prestige_color(body.prestige)
    return img


def save_png(img, path):
    """Write a float [0,1] HxWx3 image as PNG (scaled up for legibility)."""
    from PIL import Image
    arr = (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(arr).resize((arr.shape[1] * 8, arr.shape[0] * 8),
                                Image.NEAREST).save(path)


# ---------------------------------------------------------------------------
# stepping

def step(state, joint_actions, task):
    """Advance one tick: simultaneous moves, task rewards, prestige update.

    All moves resolve independently (agents pass through one another and
    through goals); Pickup/Drop/Toggle/Done do nothing. Goal-entry events
    (an agent's position changed onto a goal tile) are handed to the task,
    which owns reward semantics and early termination.
    """
    if len(joint_actions) != len(state.agents):
        raise ValueError(
            f"need {len(state.agents)} actions, got {len(joint_actions)}")
    if state.step_count >= state.episode_limit:
        raise ValueError("episode already at its step limit")

    new_agents = []
    visited = []
    for body, action in zip(state.agents, joint_actions):
        action = Action(action)
        pos, orient = body.position, body.orientation
        if action == Action.ROTATE_LEFT:
            orient = (orient - 1) % 4
        elif action == Action.ROTATE_RIGHT:
            orient = (orient + 1) % 4
        elif action == Action.FORWARD:
            dx, dy = DIR_VEC[orient]
            nx, ny = pos[0] + dx, pos[1] + dy
            if state.passable(nx, ny):
                pos = (nx, ny)
        new_agents.append(replace(body, position=pos, orientation=orient))
        entered_goal = None
        if pos != body.position and state.tiles[pos[1], pos[0]] == TileKind.GOAL:
            entered_goal = state.goal_index_at(pos)
        visited.append(entered_goal)

    new_state = replace(state, agents=new_agents, step_count=state.step_count + 1)
    rewards, task_done = task.resolve_step(new_state, visited)
    rewards = np.asarray(rewards, dtype=np.float64)
    for body, r in zip(new_agents, rewards):
        body.prestige = prestige_update(body.prestige, r, task.alpha_c)
    done = task_done or new_state.step_count >= new_state.episode_limit
    return new_state, StepEvents(rewards=rewards, visited_goals=visited,
                                 episode_done=done)
