"""Hierarchical training: VQ-VAE, then the latent prior, then the filter."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import highway_sim as hs
from . import safety_filter as sf
from .expert_gen import Dataset
from .latent_sampler import SamplerConfig, SamplerModel, sample_latents, train_sampler
from .trajgen import SetpointQP
from .vqvae import VqVaeConfig, VqVaeModel, quantize, train_vqvae

log = logging.getLogger(__name__)


def fit_vqvae(ds: Dataset, qp: SetpointQP, cfg: VqVaeConfig, log_every: int = 0):
    return train_vqvae(ds.flat_tau(), ds.initial, cfg, qp, log_every=log_every)


def latent_codes(model: VqVaeModel, ds: Dataset, chunk: int = 2048) -> np.ndarray:
    """Ground-truth index sequences ``(R, L)`` for every demonstration."""
    taus = ds.flat_tau()
    out = [quantize(model.encode(taus[s:s + chunk]), model.codebook.E).h_q for s in range(0, len(taus), chunk)]
    return np.concatenate(out).astype(np.int64) if out else np.zeros((0, model.cfg.L), dtype=np.int64)


def fit_sampler(ds: Dataset, vqvae: VqVaeModel, cfg: SamplerConfig, log_every: int = 0):
    if cfg.K != vqvae.cfg.K or cfg.L != vqvae.cfg.L:
        cfg = SamplerConfig(**{**cfg.__dict__, "K": vqvae.cfg.K, "L": vqvae.cfg.L})
    model = SamplerModel(cfg)
    return train_sampler(model, ds.obs, latent_codes(vqvae, ds), cfg, log_every=log_every)


@dataclass
class FilterData:
    xi_star: np.ndarray
    obs: np.ndarray
    initial: np.ndarray
    scene: sf.SceneConstraints

    def __len__(self) -> int:
        return len(self.xi_star)

    def split(self, frac: float):
        n = int(round(len(self) * (1.0 - frac)))
        a, b = np.arange(n), np.arange(n, len(self))
        return (FilterData(self.xi_star[a], self.obs[a], self.initial[a], self.scene.take(a)),
                FilterData(self.xi_star[b], self.obs[b], self.initial[b], self.scene.take(b)))


def stack_scenes(scenes: list[sf.SceneConstraints]) -> sf.SceneConstraints:
    """Batch equal-size scenes (padded slots carry mask 0)."""
    s0 = scenes[0]
    return sf.SceneConstraints(np.stack([s.xo for s in scenes]), np.stack([s.yo for s in scenes]),
                               s0.y_lb, s0.y_ub, s0.a, s0.b, s0.v_min, s0.v_max, s0.a_max,
                               np.stack([s.mask for s in scenes]))


def padded_scene(O: np.ndarray, road: hs.ScenarioConfig, n: int, dt: float) -> sf.SceneConstraints:
    """All ten obstacle slots; absent ones are parked far behind and masked out."""
    sc = hs.scene_from_observation(O, road, n, dt, drop_absent=False)
    absent = sc.mask == 0
    sc.xo[absent] = -1e3
    return sc


def filter_dataset(ds: Dataset, qp: SetpointQP, vqvae: VqVaeModel, sampler: SamplerModel | None,
                   items: int, per_obs: int = 4, seed: int = 0) -> FilterData:
    """Sampled (not expert) trajectories paired with their observations and scenes."""
    rng = np.random.default_rng(seed)
    scene_ids = np.unique(ds.scene_index)
    first = {s: i for i, s in reversed(list(enumerate(ds.scene_index)))}
    road = ds.road()
    xs, os, inits, scenes = [], [], [], []
    while len(xs) < items:
        s = scene_ids[rng.integers(len(scene_ids))]
        i = first[s]
        O, init = ds.obs[i], ds.initial[i]
        if sampler is None:
            h = rng.integers(0, vqvae.cfg.K, (per_obs, vqvae.cfg.L))
        else:
            h = sample_latents(sampler, O, per_obs, 1.0, int(rng.integers(2**31)))
        p = vqvae.decode_indices(np.unique(h, axis=0))
        xi = qp.xi(p, np.broadcast_to(init, (len(p), 6)))
        sc = padded_scene(O, road, qp.basis.n, qp.basis.dt)
        for row in xi[: items - len(xs)]:
            xs.append(row)
            os.append(O)
            inits.append(init)
            scenes.append(sc)
    return FilterData(np.array(xs), np.array(os), np.array(inits), stack_scenes(scenes))


def fit_filter(data: FilterData, qp: SetpointQP, cfg: sf.FilterConfig, log_every: int = 0):
    net = sf.WarmStartNet(cfg, 2 * qp.basis.nvar)
    return sf.train_filter(net, qp.basis, data.xi_star, data.obs, data.scene, data.initial, cfg, log_every)


def mean_final_residual(data: FilterData, qp: SetpointQP, net, iters: int, rho: float = 1.0,
                        margin: float = 0.0) -> float:
    res = sf.run_filter(qp.basis, data.xi_star, data.obs, data.scene, net, data.initial, iters, rho, margin=margin)
    return float(np.mean(res.residuals[-1]))
