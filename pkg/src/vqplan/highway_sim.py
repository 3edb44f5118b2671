"""Straight multi-lane highway with kinematic ego and rule-based traffic.

Coordinates: ``x`` along the road, ``y`` lateral with lane ``i`` centred at
``i * lane_width``.  Planning happens in a frame whose origin moves to the
ego's ``x`` at every replan (absolute ``y``).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .latent_sampler import NUM_OBSTACLE_SLOTS, OBS_DIM, SENSING_RANGE
from .safety_filter import SceneConstraints
from .trajgen import DT, HORIZON_STEPS, Trajectory

log = logging.getLogger(__name__)

EGO_LENGTH, EGO_WIDTH = 5.0, 2.0
ELLIPSE_A, ELLIPSE_B = 9.0, 3.5
V_MIN, V_MAX, A_MAX = 0.0, 30.0, 8.0
REPLAN_INTERVAL = 10

# neighbor longitudinal model
IDM_ACCEL, IDM_DECEL, IDM_MAX_BRAKE = 2.0, 3.0, 9.0
IDM_GAP0, IDM_HEADWAY = 2.0, 1.0
LANE_CHANGE_SPEED = 1.5
LANE_CHANGE_COOLDOWN = 5.0
VIEW_BEHIND, VIEW_AHEAD = 100.0, 220.0


@dataclass
class VehicleState:
    x: float
    y: float
    vx: float
    vy: float = 0.0
    heading: float = 0.0
    length: float = EGO_LENGTH
    width: float = EGO_WIDTH

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("vehicle length and width must be positive")


@dataclass
class ScenarioConfig:
    lanes: int = 4
    lane_width: float = 4.0
    density: float = 1.0          # vehicles per 100 m per lane
    speed_limit: float = 15.0
    episode_steps: int = 400
    seed: int = 0
    ego_speed: float = 15.0

    def __post_init__(self):
        if self.lanes < 1 or not self.lane_width > 0:
            raise ValueError("need at least one lane of positive width")
        if self.density < 0 or self.speed_limit < 0:
            raise ValueError("density and speed limit must be non-negative")

    @property
    def road_bounds(self) -> tuple[float, float]:
        return -0.5 * self.lane_width, (self.lanes - 0.5) * self.lane_width

    @property
    def ego_y_bounds(self) -> tuple[float, float]:
        lo, hi = self.road_bounds
        return lo + 0.5 * EGO_WIDTH, hi - 0.5 * EGO_WIDTH

    def lane_centers(self) -> np.ndarray:
        return np.arange(self.lanes) * self.lane_width

    def digest(self) -> str:
        return config_hash(asdict(self))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


@dataclass
class Traffic:
    """Neighbor vehicles as parallel arrays."""

    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    target_speed: np.ndarray
    target_lane: np.ndarray
    cooldown: np.ndarray
    length: np.ndarray
    width: np.ndarray

    @property
    def count(self) -> int:
        return self.x.size

    @property
    def heading(self) -> np.ndarray:
        return np.arctan2(self.vy, np.maximum(self.vx, 1e-6))

    def copy(self) -> "Traffic":
        return Traffic(*(getattr(self, f).copy() for f in self.__dataclass_fields__))

    @classmethod
    def empty(cls) -> "Traffic":
        z = np.zeros(0)
        return cls(z, z, z, z, z, np.zeros(0, dtype=np.int64), z, z, z)


@dataclass
class World:
    cfg: ScenarioConfig
    ego: VehicleState
    ego_acc: np.ndarray
    traffic: Traffic
    rng: np.random.Generator
    step_count: int = 0
    crashed: bool = False


@dataclass
class EpisodeResult:
    crashed: bool
    mean_speed: float
    speed_std: float
    steps: int
    planner_failed: bool = False
    note: str = ""
    trace: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------- geometry

def rect_corners(x, y, heading, length, width) -> np.ndarray:
    """Corners ``(..., 4, 2)`` of oriented rectangles."""
    x, y, heading, length, width = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, y, heading, length, width)))
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    lx = np.stack([hl, -hl, -hl, hl], axis=-1)
    ly = np.stack([hw, hw, -hw, -hw], axis=-1)
    cx = x[..., None] + lx * c[..., None] - ly * s[..., None]
    cy = y[..., None] + lx * s[..., None] + ly * c[..., None]
    return np.stack([cx, cy], axis=-1)


def rectangles_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis test for corner arrays ``(..., 4, 2)``; touching counts as overlap."""
    a, b = np.broadcast_arrays(a, b)
    hit = np.ones(a.shape[:-2], dtype=bool)
    for poly in (a, b):
        for i in range(2):
            edge = poly[..., i + 1, :] - poly[..., i, :]
            axis = np.stack([-edge[..., 1], edge[..., 0]], axis=-1)
            pa = np.einsum("...kd,...d->...k", a, axis)
            pb = np.einsum("...kd,...d->...k", b, axis)
            sep = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
            hit &= ~sep
    return hit


def ego_collides(ego: VehicleState, traffic: Traffic) -> bool:
    if traffic.count == 0:
        return False
    near = np.abs(traffic.x - ego.x) < 0.5 * (traffic.length + ego.length) + ego.width + 1.0
    if not near.any():
        return False
    ea = rect_corners(ego.x, ego.y, ego.heading, ego.length, ego.width)
    tb = rect_corners(traffic.x[near], traffic.y[near], traffic.heading[near], traffic.length[near], traffic.width[near])
    return bool(rectangles_overlap(ea[None], tb).any())


def trajectory_collides(waypoints: np.ndarray, vel: np.ndarray, xo: np.ndarray, yo: np.ndarray,
                        obs_heading: np.ndarray | None = None, inflate: float = 0.0,
                        mask: np.ndarray | None = None) -> np.ndarray:
    """Rectangle overlap between planned ego poses and forecast obstacles.

    ``waypoints``/``vel``: (B, N, 2); ``xo``/``yo``: (M, N).  Both footprints
    grow by ``inflate`` metres per side.  Returns (B,) booleans.
    """
    B, N, _ = waypoints.shape
    M = xo.shape[0]
    if M == 0:
        return np.zeros(B, dtype=bool)
    heading = np.arctan2(vel[..., 1], np.maximum(vel[..., 0], 1e-6))
    L, Wd = EGO_LENGTH + 2 * inflate, EGO_WIDTH + 2 * inflate
    ego = rect_corners(waypoints[..., 0], waypoints[..., 1], heading, L, Wd)          # (B, N, 4, 2)
    oh = np.zeros_like(xo) if obs_heading is None else obs_heading
    obs = rect_corners(xo, yo, oh, L, Wd)                                             # (M, N, 4, 2)
    dx = np.abs(waypoints[:, None, :, 0] - xo[None])
    dy = np.abs(waypoints[:, None, :, 1] - yo[None])
    cand = (dx < L + 1.0) & (dy < L + 1.0)
    if mask is not None:
        cand &= np.asarray(mask, dtype=bool)[None, :, None]
    out = np.zeros(B, dtype=bool)
    bi, mi, ki = np.nonzero(cand)
    if bi.size:
        hit = rectangles_overlap(ego[bi, ki], obs[mi, ki])
        out[np.unique(bi[hit])] = True
    return out


# ---------------------------------------------------------------- traffic

def _lane_of(y, cfg: ScenarioConfig) -> np.ndarray:
    return np.clip(np.round(np.asarray(y) / cfg.lane_width), 0, cfg.lanes - 1).astype(np.int64)


def _leader_gaps(x, y, vx, lengths, cfg: ScenarioConfig, lane_y=None):
    """Bumper gap and speed of the nearest vehicle ahead sharing the lane (per row)."""
    lane_y = y if lane_y is None else lane_y
    dx = x[None, :] - x[:, None]
    same = np.abs(y[None, :] - lane_y[:, None]) < 0.75 * cfg.lane_width
    ahead = same & (dx > 0)
    gap = np.where(ahead, dx - 0.5 * (lengths[None, :] + lengths[:, None]), np.inf)
    j = np.argmin(gap, axis=1)
    g = gap[np.arange(len(x)), j]
    return g, np.where(np.isfinite(g), vx[j], np.inf)


def _follower_gaps(x, y, vx, lengths, cfg: ScenarioConfig, lane_y):
    dx = x[:, None] - x[None, :]
    same = np.abs(y[None, :] - lane_y[:, None]) < 0.75 * cfg.lane_width
    behind = same & (dx > 0)
    gap = np.where(behind, dx - 0.5 * (lengths[None, :] + lengths[:, None]), np.inf)
    j = np.argmin(gap, axis=1)
    g = gap[np.arange(len(x)), j]
    return g, np.where(np.isfinite(g), vx[j], 0.0)


def neighbor_policy(v, target_speed, gap, leader_speed):
    """Gap-keeping longitudinal acceleration (intelligent-driver form).

    ``gap`` is bumper-to-bumper; ``inf`` means no leader.  Returns
    accelerations clipped to ``[-IDM_MAX_BRAKE, IDM_ACCEL]``.
    """
    v = np.asarray(v, dtype=np.float64)
    v0 = np.asarray(target_speed, dtype=np.float64)
    gap = np.asarray(gap, dtype=np.float64)
    dv = np.where(np.isfinite(leader_speed), v - leader_speed, 0.0)
    s_star = IDM_GAP0 + np.maximum(0.0, v * IDM_HEADWAY + v * dv / (2.0 * np.sqrt(IDM_ACCEL * IDM_DECEL)))
    with np.errstate(divide="ignore", invalid="ignore"):
        inter = np.where(np.isfinite(gap), (s_star / np.maximum(gap, 1e-6)) ** 2, 0.0)
        # a zero target speed holds the vehicle at rest
        free = np.where(v0 > 0, np.minimum((v / v0) ** 4, 1e6), np.where(v > 0, 1e6, 1.0))
    acc = IDM_ACCEL * (1.0 - free - inter)
    return np.clip(acc, -IDM_MAX_BRAKE, IDM_ACCEL)


def lane_change_decision(traffic: Traffic, ego: VehicleState, cfg: ScenarioConfig) -> np.ndarray:
    """Target lane per neighbor: move when the adjacent lane offers a safe, longer gap."""
    t = traffic
    n = t.count
    decision = t.target_lane.copy()
    if n == 0 or cfg.lanes == 1:
        return decision
    X = np.append(t.x, ego.x)
    Y = np.append(t.y, ego.y)
    V = np.append(t.vx, ego.vx)
    Lg = np.append(t.length, ego.length)
    lane = _lane_of(t.y, cfg)
    settled = (np.abs(t.y - lane * cfg.lane_width) < 0.2) & (t.target_lane == lane) & (t.cooldown <= 0)
    gap_here, _ = _leader_gaps(X, Y, V, Lg, cfg)
    gap_here = gap_here[:n]
    wants = settled & (gap_here < 3.0 * (IDM_GAP0 + t.vx * IDM_HEADWAY)) & (t.vx < t.target_speed - 1.0)
    best_gain = np.zeros(n)
    for side in (-1, 1):
        cand = lane + side
        ok = wants & (cand >= 0) & (cand < cfg.lanes)
        if not ok.any():
            continue
        cand_y = np.append(cand * cfg.lane_width, Y[n:])
        g_ahead, _ = _leader_gaps(X, Y, V, Lg, cfg, lane_y=cand_y)
        g_behind, v_behind = _follower_gaps(X, Y, V, Lg, cfg, lane_y=cand_y)
        g_ahead, g_behind, v_behind = g_ahead[:n], g_behind[:n], v_behind[:n]
        safe = g_behind > IDM_GAP0 + 2.0 * v_behind * IDM_HEADWAY + 5.0
        gain = np.minimum(g_ahead, 500.0) - np.minimum(gap_here, 500.0)
        take = ok & safe & (gain > 10.0) & (gain > best_gain)
        decision = np.where(take, cand, decision)
        best_gain = np.where(take, gain, best_gain)
    return decision


def _spawn(rng, cfg: ScenarioConfig, count: int, x_lo: float, x_hi: float, occupied_x, occupied_y):
    """Place up to ``count`` vehicles in ``[x_lo, x_hi]`` keeping 12 m spacing per lane."""
    xs, ys = list(occupied_x), list(occupied_y)
    new_x, new_y = [], []
    for _ in range(count):
        for _attempt in range(20):
            lane = rng.integers(cfg.lanes)
            x = rng.uniform(x_lo, x_hi)
            y = lane * cfg.lane_width
            if all(abs(x - ox) > 12.0 or abs(y - oy) > 0.75 * cfg.lane_width for ox, oy in zip(xs, ys)):
                xs.append(x)
                ys.append(y)
                new_x.append(x)
                new_y.append(y)
                break
    return np.array(new_x), np.array(new_y)


def make_world(cfg: ScenarioConfig, ego_lane: int | None = None) -> World:
    rng = np.random.default_rng(cfg.seed)
    lane = int(rng.integers(cfg.lanes)) if ego_lane is None else int(ego_lane)
    ego = VehicleState(0.0, lane * cfg.lane_width, cfg.ego_speed)
    count = int(round(cfg.density * cfg.lanes * (VIEW_BEHIND + VIEW_AHEAD) / 100.0))
    x, y = _spawn(rng, cfg, count, -VIEW_BEHIND, VIEW_AHEAD, [ego.x], [ego.y])
    # keep the immediate surroundings of the ego's start clear
    keep = ~((np.abs(x - ego.x) < 20.0) & (np.abs(y - ego.y) < 0.75 * cfg.lane_width))
    x, y = x[keep], y[keep]
    target = rng.uniform(0.0, cfg.speed_limit, x.size)
    n = x.size
    traffic = Traffic(x, y, target.copy(), np.zeros(n), target, _lane_of(y, cfg), np.zeros(n),
                      np.full(n, EGO_LENGTH), np.full(n, EGO_WIDTH))
    return World(cfg, ego, np.zeros(2), traffic, rng)


def advance_traffic(world: World, dt: float = DT, recycle: bool = True) -> None:
    """One step of neighbor motion, then recycling of vehicles far from the ego."""
    cfg, t, ego = world.cfg, world.traffic, world.ego
    n = t.count
    if n == 0:
        return
    t.target_lane = lane_change_decision(t, ego, cfg)
    X = np.append(t.x, ego.x)
    Y = np.append(t.y, ego.y)
    V = np.append(t.vx, ego.vx)
    Lg = np.append(t.length, ego.length)
    # during a lane change the vehicle also reacts to leaders in the target lane
    gap_cur, lv_cur = _leader_gaps(X, Y, V, Lg, cfg)
    tgt_y = np.append(t.target_lane * cfg.lane_width, Y[n:])
    gap_tgt, lv_tgt = _leader_gaps(X, Y, V, Lg, cfg, lane_y=tgt_y)
    use_tgt = gap_tgt[:n] < gap_cur[:n]
    gap = np.where(use_tgt, gap_tgt[:n], gap_cur[:n])
    lv = np.where(use_tgt, lv_tgt[:n], lv_cur[:n])
    acc = neighbor_policy(t.vx, t.target_speed, gap, lv)
    v_new = np.clip(t.vx + acc * dt, 0.0, cfg.speed_limit)
    t.x = t.x + 0.5 * (t.vx + v_new) * dt
    t.vx = v_new
    dy = t.target_lane * cfg.lane_width - t.y
    t.vy = np.clip(dy / dt, -LANE_CHANGE_SPEED, LANE_CHANGE_SPEED)
    t.y = t.y + t.vy * dt
    changing = np.abs(dy) > 1e-9
    t.cooldown = np.where(changing, LANE_CHANGE_COOLDOWN, np.maximum(t.cooldown - dt, 0.0))
    if recycle:
        _recycle(world)


def _recycle(world: World) -> None:
    cfg, t, ego = world.cfg, world.traffic, world.ego
    rel = t.x - ego.x
    gone = (rel < -VIEW_BEHIND) | (rel > VIEW_AHEAD + 30.0)
    if not gone.any():
        return
    keep = ~gone
    for f in t.__dataclass_fields__:
        setattr(t, f, getattr(t, f)[keep])
    count = int(gone.sum())
    x, y = _spawn(world.rng, cfg, count, ego.x + VIEW_AHEAD - 40.0, ego.x + VIEW_AHEAD, t.x, t.y)
    k = x.size
    target = world.rng.uniform(0.0, cfg.speed_limit, k)
    t.x = np.append(t.x, x)
    t.y = np.append(t.y, y)
    t.vx = np.append(t.vx, target)
    t.vy = np.append(t.vy, np.zeros(k))
    t.target_speed = np.append(t.target_speed, target)
    t.target_lane = np.append(t.target_lane, _lane_of(y, cfg))
    t.cooldown = np.append(t.cooldown, np.zeros(k))
    t.length = np.append(t.length, np.full(k, EGO_LENGTH))
    t.width = np.append(t.width, np.full(k, EGO_WIDTH))


def step(world: World, plan: Trajectory, replan_interval: int = REPLAN_INTERVAL) -> World:
    """Follow ``plan`` (planning frame) for ``replan_interval`` steps, checking collisions each step."""
    wp = np.asarray(plan.waypoints)
    if wp.shape[0] <= replan_interval:
        raise ValueError("plan horizon shorter than the replan interval")
    x_origin = world.ego.x
    lo, hi = world.cfg.road_bounds
    for j in range(1, replan_interval + 1):
        vx, vy = plan.vel[j]
        world.ego = VehicleState(x_origin + wp[j, 0], wp[j, 1], float(vx), float(vy),
                                 float(np.arctan2(vy, max(vx, 1e-6))))
        world.ego_acc = np.asarray(plan.acc[j], dtype=np.float64)
        advance_traffic(world)
        world.step_count += 1
        off_road = (world.ego.y - 0.5 * EGO_WIDTH < lo - 1e-9) or (world.ego.y + 0.5 * EGO_WIDTH > hi + 1e-9)
        if off_road or ego_collides(world.ego, world.traffic):
            world.crashed = True
            break
    return world


# ---------------------------------------------------------------- observation

def build_observation(world: World) -> np.ndarray:
    """55-entry observation: road-edge distances, ego velocity/heading, 10 nearest neighbors."""
    cfg, ego, t = world.cfg, world.ego, world.traffic
    lo, hi = cfg.road_bounds
    O = np.zeros(OBS_DIM)
    O[0] = hi - ego.y
    O[1] = ego.y - lo
    O[2] = ego.vy
    O[3] = ego.vx
    O[4] = ego.heading
    slots = O[5:].reshape(NUM_OBSTACLE_SLOTS, 5)
    slots[:, 0] = SENSING_RANGE
    if t.count:
        dx, dy = t.x - ego.x, t.y - ego.y
        dist = np.hypot(dx, dy)
        order = np.argsort(dist, kind="stable")
        order = order[dist[order] <= SENSING_RANGE][:NUM_OBSTACLE_SLOTS]
        k = order.size
        slots[:k] = np.stack([dx[order], dy[order], t.vx[order], t.vy[order], t.heading[order]], axis=1)
    return O


def observation_mask(O: np.ndarray) -> np.ndarray:
    """True for obstacle slots holding a real vehicle."""
    slots = np.asarray(O)[..., 5:].reshape(np.shape(O)[:-1] + (NUM_OBSTACLE_SLOTS, 5))
    sentinel = (slots[..., 0] == SENSING_RANGE) & np.all(slots[..., 1:] == 0.0, axis=-1)
    return ~sentinel


def scene_from_observation(O: np.ndarray, cfg: ScenarioConfig, n: int = HORIZON_STEPS, dt: float = DT,
                           drop_absent: bool = True) -> SceneConstraints:
    """Constant-velocity forecasts of the observed neighbors in the planning frame."""
    O = np.asarray(O, dtype=np.float64)
    lo, _ = cfg.road_bounds
    y_ego = lo + O[1]
    slots = O[5:].reshape(NUM_OBSTACLE_SLOTS, 5)
    mask = observation_mask(O)
    if drop_absent:
        slots, mask = slots[mask], mask[mask]
    t = np.arange(n + 1) * dt
    xo = slots[:, 0:1] + slots[:, 2:3] * t
    y_lo, y_hi = cfg.road_bounds
    yo = np.clip(y_ego + slots[:, 1:2] + slots[:, 3:4] * t, y_lo + 0.5 * EGO_WIDTH, y_hi - 0.5 * EGO_WIDTH)
    y_lb, y_ub = cfg.ego_y_bounds
    return SceneConstraints(xo, yo, y_lb, y_ub, ELLIPSE_A, ELLIPSE_B, V_MIN, V_MAX, A_MAX, mask.astype(np.float64))


def planning_initial(world: World) -> np.ndarray:
    """Boundary state ``(x0, y0, vx0, vy0, ax0, ay0)`` in the planning frame."""
    e = world.ego
    return np.array([0.0, e.y, e.vx, e.vy, world.ego_acc[0], world.ego_acc[1]])


# ---------------------------------------------------------------- episodes

Planner = Callable[[np.ndarray, SceneConstraints, np.ndarray], Trajectory]


def run_episode(cfg: ScenarioConfig, planner: Planner, replan_interval: int = REPLAN_INTERVAL,
                record: bool = False) -> EpisodeResult:
    """Closed-loop episode; planner exceptions end it as a crash with ``planner_failed``."""
    world = make_world(cfg)
    speeds = []
    trace = []
    failed, note = False, ""
    while world.step_count < cfg.episode_steps and not world.crashed:
        O = build_observation(world)
        scene = scene_from_observation(O, cfg)
        try:
            plan = planner(O, scene, planning_initial(world))
        except Exception as exc:  # recorded, not raised: the episode counts as failed
            failed, note = True, f"{type(exc).__name__}: {exc}"
            world.crashed = True
            break
        start = world.step_count
        step(world, plan, min(replan_interval, cfg.episode_steps - world.step_count))
        speeds.extend([float(np.hypot(*plan.vel[j])) for j in range(1, world.step_count - start + 1)])
        if record:
            trace.append(_trace_row(world, plan))
    sp = np.array(speeds) if speeds else np.zeros(1)
    return EpisodeResult(bool(world.crashed), float(sp.mean()), float(sp.std()), world.step_count, failed, note, trace)


def _trace_row(world: World, plan: Trajectory) -> dict:
    e, t = world.ego, world.traffic
    neighbors = ";".join(f"{a:.3f}:{b:.3f}:{c:.3f}:{d:.3f}" for a, b, c, d in zip(t.x, t.y, t.vx, t.vy))
    setpoints = getattr(plan, "setpoints", (np.nan, np.nan))
    return {"step": world.step_count, "x": e.x, "y": e.y, "vx": e.vx, "vy": e.vy, "heading": e.heading,
            "v_d": float(setpoints[0]), "y_d": float(setpoints[1]), "crashed": int(world.crashed), "neighbors": neighbors}


def header_line(digest: str) -> str:
    return f"# config_hash={digest} version={__version__}"


def write_trace_csv(path, result: EpisodeResult, digest: str) -> None:
    cols = ["step", "x", "y", "vx", "vy", "heading", "v_d", "y_d", "crashed", "neighbors"]
    with open(path, "w", newline="") as fh:
        fh.write(header_line(digest) + "\n")
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for row in result.trace:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
