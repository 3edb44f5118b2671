"""Sampling planner: latent prior -> QP decoder -> safety filter -> cost selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import safety_filter as sf
from .expert_gen import COST_WEIGHTS, V_CRUISE, selection_cost
from .latent_sampler import SamplerModel, sample_latents
from .trajgen import SetpointQP, Trajectory
from .vqvae import VqVaeModel

log = logging.getLogger(__name__)


@dataclass
class PlannedTrajectory(Trajectory):
    setpoints: np.ndarray = None
    feasible: bool = True
    candidates: int = 0


@dataclass
class PlannerConfig:
    samples: int = 1000
    temperature: float = 1.0
    filter_iters: int = 100
    rho: float = 1.0
    margin: float = 0.2
    prune_radius: float = 3.0
    use_filter: bool = True
    random_sampler: bool = False
    v_cruise: float = V_CRUISE
    seed: int = 0


def _lane_ok(traj: Trajectory, scene: sf.SceneConstraints, tol: float = 1e-3) -> np.ndarray:
    y = traj.waypoints[..., 1]
    return (y.min(-1) >= scene.y_lb - tol) & (y.max(-1) <= scene.y_ub + tol)


class Planner:
    """Callable planner for :func:`vqplan.highway_sim.run_episode`.

    Identical latent sequences decode to identical trajectories, so each
    distinct sequence is decoded and filtered once.
    """

    def __init__(self, qp: SetpointQP, vqvae: VqVaeModel, sampler: SamplerModel | None,
                 net: sf.WarmStartNet | None, cfg: PlannerConfig | None = None):
        self.qp, self.vqvae, self.sampler, self.net = qp, vqvae, sampler, net
        self.cfg = cfg or PlannerConfig()
        if self.sampler is None and not self.cfg.random_sampler:
            raise ValueError("a latent sampler is required unless random_sampler is set")
        if self.net is None and self.cfg.use_filter:
            raise ValueError("a filter network is required unless use_filter is off")
        self.calls = 0

    def reset(self, seed: int | None = None) -> None:
        self.calls = 0
        if seed is not None:
            self.cfg.seed = seed

    def latents(self, O: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        seed = int(np.random.SeedSequence([cfg.seed, self.calls]).generate_state(1)[0])
        if cfg.random_sampler:
            L, K = self.vqvae.cfg.L, self.vqvae.cfg.K
            return np.random.default_rng(seed).integers(0, K, (cfg.samples, L))
        return sample_latents(self.sampler, O, cfg.samples, cfg.temperature, seed)

    def candidates(self, O: np.ndarray, scene: sf.SceneConstraints, initial: np.ndarray):
        """Distinct sampled setpoints with raw and (optionally) filtered coefficients."""
        h = np.unique(self.latents(O), axis=0)
        p = self.vqvae.decode_indices(h)
        init = np.broadcast_to(initial, (len(p), 6))
        xi_raw = self.qp.xi(p, init)
        xi = xi_raw
        if self.cfg.use_filter:
            # obstacles far from every raw sample only slow the solver down
            near = sf.relevant_obstacles(self.qp.basis, xi_raw, scene, self.cfg.prune_radius)
            res = sf.run_filter(self.qp.basis, xi_raw, O, near, self.net, init, self.cfg.filter_iters, self.cfg.rho,
                                margin=self.cfg.margin)
            xi = res.xi.value
        return p, xi_raw, xi

    def __call__(self, O: np.ndarray, scene: sf.SceneConstraints, initial: np.ndarray) -> PlannedTrajectory:
        p, _, xi = self.candidates(O, scene, initial)
        self.calls += 1
        traj = Trajectory.from_xi(self.qp.basis, xi)
        clear = sf.min_clearance(self.qp.basis, xi, scene)
        ok = (clear > 0) & _lane_ok(traj, scene)
        if ok.any():
            cost = selection_cost(traj, scene, self.qp.basis, self.cfg.v_cruise, COST_WEIGHTS)
            best = int(np.argmin(np.where(ok, cost, np.inf)))
        else:
            best = int(np.argmax(clear))
        return PlannedTrajectory(traj.xi[best], traj.waypoints[best], traj.vel[best], traj.acc[best],
                                 setpoints=p[best], feasible=bool(ok[best]), candidates=len(p))


@dataclass
class ConstantSpeedPlanner:
    """Holds lateral position and tracks a fixed speed; ignores traffic."""

    qp: SetpointQP
    speed: float

    def __call__(self, O, scene, initial) -> PlannedTrajectory:
        p = np.array([self.speed, initial[1]])
        t = self.qp.trajectory(p, initial)
        return PlannedTrajectory(t.xi, t.waypoints, t.vel, t.acc, setpoints=p)
