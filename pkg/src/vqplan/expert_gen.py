"""Grid-search demonstration generator and the dataset file format.

For each scene every setpoint on a ``(v_d, y_d)`` grid is pushed through the
affine QP map, infeasible trajectories are dropped, survivors are ranked by
the selection cost and up to ``keep_k`` mutually distinct ones are kept.

Dataset layout (little-endian)::

    64-byte header: magic b"VQPLNDS1", u32 version, u32 count, u32 horizon,
                    u32 obs_dim, u32 record_len, u32 lanes, f64 lane_width,
                    u64 seed, zero padding
    count records of record_len float64: O (55) | tau (x.. then y..) | p (2) | initial (6) | scene index (1)
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import highway_sim as hs
from .latent_sampler import OBS_DIM
from .safety_filter import SceneConstraints, min_clearance
from .trajgen import SetpointQP, Trajectory

log = logging.getLogger(__name__)

MAGIC = b"VQPLNDS1"
VERSION = 1
HEADER_FMT = "<8sIIIIIIdQ"
HEADER_SIZE = 64
V_CRUISE = 20.0
COST_WEIGHTS = (1.0, 0.1, 0.5)
FEASIBILITY_INFLATE = 0.25
LATERAL_SEPARATION = 4.0


@dataclass
class Demonstration:
    O: np.ndarray
    tau: np.ndarray           # (N, 2)
    p: np.ndarray
    initial: np.ndarray
    scene_index: int


@dataclass
class Dataset:
    obs: np.ndarray           # (R, 55)
    tau: np.ndarray           # (R, N, 2)
    p: np.ndarray             # (R, 2)
    initial: np.ndarray       # (R, 6)
    scene_index: np.ndarray   # (R,)
    lanes: int = 4
    lane_width: float = 4.0
    seed: int = 0
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def horizon(self) -> int:
        return self.tau.shape[1] - 1

    def road(self) -> hs.ScenarioConfig:
        return hs.ScenarioConfig(lanes=self.lanes, lane_width=self.lane_width)

    def flat_tau(self) -> np.ndarray:
        return np.concatenate([self.tau[..., 0], self.tau[..., 1]], axis=-1)


@dataclass
class GenConfig:
    scenes: int = 5000
    keep_k: int = 4
    seed: int = 0
    gap_fraction: float = 0.3
    densities: tuple = (0.5, 1.0, 1.5, 2.5, 3.0)
    speed_limits: tuple = (10.0, 15.0, 20.0)
    lanes: int = 4
    lane_width: float = 4.0
    v_step: float = 2.5
    v_max: float = 30.0
    y_offsets: tuple = (-1.0, 0.0, 1.0)

    def grid(self) -> np.ndarray:
        v = np.arange(0.0, self.v_max + 1e-9, self.v_step)
        centers = np.arange(self.lanes) * self.lane_width
        y = np.unique((centers[:, None] + np.asarray(self.y_offsets)[None, :]).ravel())
        V, Y = np.meshgrid(v, y, indexing="ij")
        return np.stack([V.ravel(), Y.ravel()], axis=1)


@dataclass
class Scene:
    O: np.ndarray
    initial: np.ndarray
    constraints: SceneConstraints
    obs_heading: np.ndarray = field(default=None)


# ---------------------------------------------------------------- scoring

def selection_cost(traj: Trajectory, scene: SceneConstraints, basis, v_cruise: float = V_CRUISE,
                   weights=COST_WEIGHTS) -> np.ndarray:
    """``w1 (v_cruise - mean speed)^2 + w2 mean(a_y^2) + w3 / min clearance`` per trajectory."""
    speed = np.hypot(traj.vel[..., 0], traj.vel[..., 1]).mean(axis=-1)
    lat = np.mean(traj.acc[..., 1] ** 2, axis=-1)
    clear = min_clearance(basis, traj.xi, scene)
    inv = np.where(np.isfinite(clear), 1.0 / np.maximum(clear, 1e-3), 0.0)
    return weights[0] * (v_cruise - speed) ** 2 + weights[1] * lat + weights[2] * inv


def feasible(traj: Trajectory, scene: Scene | SceneConstraints, inflate: float = FEASIBILITY_INFLATE,
             obs_heading=None) -> np.ndarray:
    """Collision (rectangle overlap), lane, speed and acceleration checks per trajectory."""
    sc = scene.constraints if isinstance(scene, Scene) else scene
    if isinstance(scene, Scene):
        obs_heading = scene.obs_heading
    y = traj.waypoints[..., 1]
    speed = np.hypot(traj.vel[..., 0], traj.vel[..., 1])
    accel = np.hypot(traj.acc[..., 0], traj.acc[..., 1])
    ok = (y.min(-1) >= sc.y_lb - 1e-9) & (y.max(-1) <= sc.y_ub + 1e-9)
    ok &= (speed.max(-1) <= sc.v_max + 1e-9) & (traj.vel[..., 0].min(-1) >= -1e-6)
    ok &= accel.max(-1) <= sc.a_max + 1e-9
    hit = hs.trajectory_collides(traj.waypoints, traj.vel, sc.xo, sc.yo, obs_heading, inflate, sc.mask)
    return ok & ~hit


def passing_side(traj: Trajectory, scene: SceneConstraints) -> np.ndarray:
    """+1/-1 for passing the nearest overtaken obstacle on the left/right, 0 if none is overtaken."""
    wp = traj.waypoints
    B = wp.shape[0]
    side = np.zeros(B, dtype=np.int64)
    if scene.num_obstacles == 0:
        return side
    rel_x = wp[:, None, :, 0] - scene.xo[None]          # (B, M, N)
    passed = (rel_x[..., 0] < 0) & (rel_x[..., -1] > 0) & (scene.mask[None] > 0)
    k_cross = np.argmax(rel_x > 0, axis=-1)             # first step ahead of the obstacle
    dy = np.take_along_axis(wp[:, None, :, 1] - scene.yo[None], k_cross[..., None], axis=-1)[..., 0]
    start_gap = np.where(passed, scene.xo[None, :, 0] - wp[:, None, 0, 0], np.inf)
    first = np.argmin(start_gap, axis=1)
    any_pass = np.isfinite(start_gap[np.arange(B), first])
    side[any_pass] = np.sign(dy[np.arange(B), first][any_pass]).astype(np.int64)
    return side


def select_diverse(order: np.ndarray, traj: Trajectory, sides: np.ndarray, keep_k: int,
                   separation: float = LATERAL_SEPARATION) -> list[int]:
    """Greedy pick in ``order`` keeping trajectories distinct from every kept one."""
    kept: list[int] = []
    y = traj.waypoints[..., 1]
    for i in order:
        if len(kept) >= keep_k:
            break
        ok = True
        for j in kept:
            far = np.mean(np.abs(y[i] - y[j])) >= separation
            opposite = sides[i] * sides[j] < 0
            if not (far or opposite):
                ok = False
                break
        if ok:
            kept.append(int(i))
    return kept


def demos_for_scene(qp: SetpointQP, scene: Scene, grid: np.ndarray, keep_k: int):
    """``(P, Trajectory)`` of the kept grid points, best first; empty if nothing is feasible."""
    init = np.broadcast_to(scene.initial, (len(grid), 6))
    traj = qp.trajectory(grid, init)
    ok = feasible(traj, scene)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return grid[:0], None
    sub = Trajectory(traj.xi[idx], traj.waypoints[idx], traj.vel[idx], traj.acc[idx])
    cost = selection_cost(sub, scene.constraints, qp.basis)
    order = np.argsort(cost, kind="stable")
    kept = select_diverse(order, sub, passing_side(sub, scene.constraints), keep_k)
    kept = np.array(kept, dtype=np.int64)
    return grid[idx[kept]], Trajectory(sub.xi[kept], sub.waypoints[kept], sub.vel[kept], sub.acc[kept])


# ---------------------------------------------------------------- scene sampling

def snapshot_scene(rng: np.random.Generator, gcfg: GenConfig, horizon: int, dt: float) -> Scene:
    """A traffic snapshot from the simulator with a randomized ego state."""
    cfg = hs.ScenarioConfig(lanes=gcfg.lanes, lane_width=gcfg.lane_width,
                            density=float(rng.choice(gcfg.densities)),
                            speed_limit=float(rng.choice(gcfg.speed_limits)),
                            seed=int(rng.integers(2**31)), ego_speed=float(rng.uniform(5.0, 25.0)))
    world = hs.make_world(cfg)
    for _ in range(int(rng.integers(0, 40))):
        world.ego.x += world.ego.vx * dt
        hs.advance_traffic(world)
    if rng.random() < 0.5:
        world.ego.y = float(np.clip(world.ego.y + rng.uniform(-1.5, 1.5), *cfg.ego_y_bounds))
        world.ego.vy = float(rng.uniform(-1.0, 1.0))
        world.ego_acc = rng.uniform(-1.0, 1.0, 2)
    world.ego.heading = float(np.arctan2(world.ego.vy, world.ego.vx))
    O = hs.build_observation(world)
    sc = hs.scene_from_observation(O, cfg, horizon, dt)
    return Scene(O, hs.planning_initial(world), sc)


def gap_scene(rng: np.random.Generator, gcfg: GenConfig, horizon: int, dt: float,
              ego_lane: int | None = None, gap_x: float | None = None, ego_speed: float | None = None) -> Scene:
    """Stopped vehicle ahead of the ego in its lane with the neighboring lanes open.

    With the ego in an interior lane this is the two-gap (left/right overtake) scene.
    """
    cfg = hs.ScenarioConfig(lanes=gcfg.lanes, lane_width=gcfg.lane_width, density=0.0)
    lane = int(rng.integers(1, max(gcfg.lanes - 1, 2))) if ego_lane is None else ego_lane
    lane = min(lane, gcfg.lanes - 1)
    gx = float(rng.uniform(30.0, 60.0)) if gap_x is None else gap_x
    v = float(rng.uniform(10.0, 20.0)) if ego_speed is None else ego_speed
    world = hs.make_world(cfg, ego_lane=lane)
    world.ego = hs.VehicleState(0.0, lane * cfg.lane_width, v)
    world.traffic = hs.Traffic(np.array([gx]), np.array([lane * cfg.lane_width]), np.zeros(1), np.zeros(1),
                               np.zeros(1), np.array([lane]), np.zeros(1), np.full(1, hs.EGO_LENGTH),
                               np.full(1, hs.EGO_WIDTH))
    O = hs.build_observation(world)
    sc = hs.scene_from_observation(O, cfg, horizon, dt)
    return Scene(O, hs.planning_initial(world), sc)


def two_gap_scene(gcfg: GenConfig | None = None, horizon: int = 100, dt: float = 0.1) -> Scene:
    """Canonical two-gap scene: ego in lane 1 at 15 m/s, stopped car 45 m ahead."""
    gcfg = gcfg or GenConfig()
    return gap_scene(np.random.default_rng(0), gcfg, horizon, dt, ego_lane=1, gap_x=45.0, ego_speed=15.0)


def generate_demos(qp: SetpointQP, gcfg: GenConfig, progress_every: int = 0) -> Dataset:
    """Sample scenes, run the grid search and collect the kept demonstrations."""
    rng = np.random.default_rng(gcfg.seed)
    grid = gcfg.grid()
    n, dt = qp.basis.n, qp.basis.dt
    obs, taus, ps, inits, sidx = [], [], [], [], []
    skipped = 0
    for s in range(gcfg.scenes):
        scene = gap_scene(rng, gcfg, n, dt) if rng.random() < gcfg.gap_fraction else snapshot_scene(rng, gcfg, n, dt)
        P, traj = demos_for_scene(qp, scene, grid, gcfg.keep_k)
        if traj is None:
            skipped += 1
            continue
        k = len(P)
        obs.append(np.broadcast_to(scene.O, (k, OBS_DIM)))
        taus.append(traj.waypoints)
        ps.append(P)
        inits.append(np.broadcast_to(scene.initial, (k, 6)))
        sidx.append(np.full(k, s))
        if progress_every and (s + 1) % progress_every == 0:
            log.info("scene %d/%d, %d demos", s + 1, gcfg.scenes, sum(len(a) for a in ps))
    if skipped:
        log.info("skipped %d scenes without a feasible grid point", skipped)
    N = n + 1
    if not obs:
        return Dataset(np.zeros((0, OBS_DIM)), np.zeros((0, N, 2)), np.zeros((0, 2)), np.zeros((0, 6)),
                       np.zeros(0, dtype=np.int64), gcfg.lanes, gcfg.lane_width, gcfg.seed, skipped)
    return Dataset(np.concatenate(obs), np.concatenate(taus), np.concatenate(ps), np.concatenate(inits),
                   np.concatenate(sidx).astype(np.int64), gcfg.lanes, gcfg.lane_width, gcfg.seed, skipped)


# ---------------------------------------------------------------- file I/O

class DatasetError(ValueError):
    pass


def record_length(horizon: int) -> int:
    return OBS_DIM + 2 * (horizon + 1) + 2 + 6 + 1


def save_dataset(path, ds: Dataset) -> None:
    R, N = len(ds), ds.tau.shape[1]
    rec = record_length(N - 1)
    header = struct.pack(HEADER_FMT, MAGIC, VERSION, R, N - 1, OBS_DIM, rec, ds.lanes, ds.lane_width, ds.seed)
    header = header.ljust(HEADER_SIZE, b"\0")
    body = np.concatenate([ds.obs, ds.tau[..., 0], ds.tau[..., 1], ds.p, ds.initial,
                           ds.scene_index[:, None].astype(np.float64)], axis=1) if R else np.zeros((0, rec))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(body, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise DatasetError(f"{path}: truncated header")
    magic, version, R, n, obs_dim, rec, lanes, lane_width, seed = struct.unpack_from(HEADER_FMT, raw)
    if magic != MAGIC or version != VERSION:
        raise DatasetError(f"{path}: not a demonstration dataset (version {version})")
    if obs_dim != OBS_DIM or rec != record_length(n):
        raise DatasetError(f"{path}: unexpected record layout")
    body = np.frombuffer(raw, dtype="<f8", offset=HEADER_SIZE)
    if body.size != R * rec:
        raise DatasetError(f"{path}: expected {R} records, payload holds {body.size / rec:.1f}")
    body = body.reshape(R, rec).astype(np.float64)
    N = n + 1
    o = 0
    obs = body[:, o:o + OBS_DIM]; o += OBS_DIM
    tau = np.stack([body[:, o:o + N], body[:, o + N:o + 2 * N]], axis=-1); o += 2 * N
    p = body[:, o:o + 2]; o += 2
    init = body[:, o:o + 6]; o += 6
    sidx = body[:, o].astype(np.int64)
    return Dataset(obs, tau, p, init, sidx, lanes, lane_width, seed)
