"""Closed-loop sweeps and sample-distribution statistics."""
from __future__ import annotations

import concurrent.futures as cf
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import highway_sim as hs
from .planner import Planner, PlannerConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalSetting:
    """One row group of a sweep."""

    label: str
    density: float
    speed_limit: float = 15.0
    use_filter: bool = True
    random_sampler: bool = False
    samples: int = 1000
    filter_iters: int = 100
    episode_steps: int = 400


@dataclass
class EvalRow:
    label: str
    density: float
    speed_limit: float
    use_filter: bool
    random_sampler: bool
    samples: int
    filter_iters: int
    seed: int
    episodes: int
    collision_rate: float
    mean_speed: float
    speed_std: float
    planner_failures: int


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0] % (2**31))


def run_setting(models, setting: EvalSetting, seed: int, episodes: int, base: PlannerConfig | None = None,
                workers: int = 1) -> EvalRow:
    """``episodes`` closed-loop runs of one setting under one seed."""
    jobs = [(models, setting, seed, e, base) for e in range(episodes)]
    if workers > 1:
        with cf.ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_episode_job, jobs))
    else:
        results = [_episode_job(j) for j in jobs]
    crashed = np.array([r.crashed for r in results])
    speed = np.array([r.mean_speed for r in results])
    return EvalRow(setting.label, setting.density, setting.speed_limit, setting.use_filter, setting.random_sampler,
                   setting.samples, setting.filter_iters, seed, episodes, float(crashed.mean()),
                   float(speed.mean()), float(speed.std()), int(sum(r.planner_failed for r in results)))


def _episode_job(job):
    models, setting, seed, episode, base = job
    qp, vqvae, sampler, net = models
    cfg = replace(base or PlannerConfig(), samples=setting.samples, filter_iters=setting.filter_iters,
                  use_filter=setting.use_filter, random_sampler=setting.random_sampler,
                  seed=episode_seed(seed, 10_000 + episode))
    planner = Planner(qp, vqvae, sampler if not setting.random_sampler else None,
                      net if setting.use_filter else None, cfg)
    scen = hs.ScenarioConfig(density=setting.density, speed_limit=setting.speed_limit,
                             episode_steps=setting.episode_steps, seed=episode_seed(seed, episode))
    return hs.run_episode(scen, planner)


def row_dict(row: EvalRow) -> dict:
    return asdict(row)


# ---------------------------------------------------------------- distribution statistics

def kmeans_1d(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Globally optimal two-cluster split of 1-D data (contiguous in sorted order).

    Returns ``(labels, centers)`` with cluster 0 holding the smaller values.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two values")
    order = np.argsort(v, kind="stable")
    s = v[order]
    n = s.size
    c1, c2 = np.cumsum(s), np.cumsum(s * s)
    k = np.arange(1, n)                                       # left cluster sizes
    left = c2[k - 1] - c1[k - 1] ** 2 / k
    right = (c2[-1] - c2[k - 1]) - (c1[-1] - c1[k - 1]) ** 2 / (n - k)
    best = int(np.argmin(left + right)) + 1
    labels = np.empty(n, dtype=np.int64)
    labels[order[:best]] = 0
    labels[order[best:]] = 1
    return labels, np.array([s[:best].mean(), s[best:].mean()])


def silhouette_1d(values: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient using absolute differences (sort + prefix sums)."""
    v = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.zeros(v.size)
    sums = {}
    for c in np.unique(labels):
        s = np.sort(v[labels == c])
        sums[c] = (s, np.concatenate([[0.0], np.cumsum(s)]))

    def total_dist(x, c):
        s, cs = sums[c]
        j = np.searchsorted(s, x, side="right")
        return x * j - cs[j] + (cs[-1] - cs[j]) - x * (s.size - j), s.size

    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        x = v[idx]
        ta, na = total_dist(x, c)
        a = ta / max(na - 1, 1)
        b = np.full(x.size, np.inf)
        for o in sums:
            if o != c:
                tb, nb = total_dist(x, o)
                b = np.minimum(b, tb / nb)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(np.maximum(a, b) > 0, (b - a) / np.maximum(a, b), 0.0)
        out[idx] = np.where(na > 1, s, 0.0)
    return float(out.mean())


@dataclass
class ModalityReport:
    centers: np.ndarray
    fractions: np.ndarray
    separation: float
    silhouette: float

    def bimodal(self, min_separation: float, min_fraction: float = 0.2, min_silhouette: float = 0.5) -> bool:
        return bool(self.separation >= min_separation and self.fractions.min() >= min_fraction
                    and self.silhouette >= min_silhouette)


def modality_report(values: np.ndarray) -> ModalityReport:
    labels, centers = kmeans_1d(values)
    frac = np.bincount(labels, minlength=2) / labels.size
    return ModalityReport(centers, frac, float(abs(centers[1] - centers[0])), silhouette_1d(values, labels))
