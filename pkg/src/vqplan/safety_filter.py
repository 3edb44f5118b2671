"""Learnable barrier-function safety filter.

Projects sampled coefficient vectors onto collision, lane, velocity and
acceleration constraints.  Collision/velocity/acceleration constraints are
written in polar form (angles ``alpha`` and radii ``d``), lane constraints as
discrete-time barriers with slack, and the augmented Lagrangian

    1/2 |xi - xi*|^2 - lam' xi + rho/2 |F xi - e|^2,   A xi = b

is minimized by alternating closed-form updates of ``(alpha, d)``, ``s``,
``lam``, ``e`` and one equality-constrained solve for ``xi``.  Every step is
built from :mod:`vqplan.diffcore` primitives, so the unrolled loop can be
trained end to end.

Row layout of ``F``/``e`` (per axis block, x then y, then lane rows)::

    [obstacle rows (M*N), velocity rows (N), acceleration rows (N)]  x-axis
    [obstacle rows (M*N), velocity rows (N), acceleration rows (N)]  y-axis
    [lane upper (n), lane lower (n)]
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import diffcore as dc
from .latent_sampler import OBS_DIM, OBS_SCALE
from .nn import MLP, Adam, ParamSet
from .trajgen import BasisMatrices, boundary_matrix, DEFAULT_TERMINAL, KKT_TOL

log = logging.getLogger(__name__)

GAMMA_FLOOR = 0.02
XI_SCALE = np.concatenate([np.full(11, 100.0), np.full(11, 10.0)])


@dataclass
class SceneConstraints:
    """Obstacle forecasts ``(..., M, N)`` in the ego frame plus box limits.

    ``a``/``b`` are the semi-axes of the combined ellipse used in
    ``(dx/a)^2 + (dy/b)^2 >= 1``.  ``mask`` flags real obstacles (padding
    slots get 0 and drop out of every row).
    """

    xo: np.ndarray
    yo: np.ndarray
    y_lb: float
    y_ub: float
    a: float = 9.0
    b: float = 3.5
    v_min: float = 0.0
    v_max: float = 30.0
    a_max: float = 8.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.xo = np.asarray(self.xo, dtype=np.float64)
        self.yo = np.asarray(self.yo, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.xo.shape[:-1])
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if not (self.a > 0 and self.b > 0):
            raise dc.ContractError("ellipse axes must be positive")
        if not self.y_lb < self.y_ub:
            raise dc.ContractError("y_lb must be below y_ub")
        if self.v_min > self.v_max:
            raise dc.ContractError("v_min must not exceed v_max")

    @property
    def num_obstacles(self) -> int:
        return self.xo.shape[-2]

    def take(self, idx) -> "SceneConstraints":
        """Select batch entries from a batched scene."""
        return SceneConstraints(self.xo[idx], self.yo[idx], self.y_lb, self.y_ub, self.a, self.b,
                                self.v_min, self.v_max, self.a_max, self.mask[idx])


@dataclass
class BarrierParams:
    gamma_obs: float
    gamma_lane: float

    def __post_init__(self):
        for g in (self.gamma_obs, self.gamma_lane):
            if not (0.0 < float(np.min(g)) and float(np.max(g)) <= 1.0):
                raise dc.ContractError("barrier parameters must lie in (0, 1]")


@dataclass
class FilterConfig:
    rho: float = 1.0
    iters: int = 100
    train_iters: int = 20
    d_max: float = 1e4
    violation_weight: float = 10.0
    hidden: int = 256
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 300
    gamma_init: float = 0.5
    lam_scale: float = 10.0
    margin: float = 0.2
    seed: int = 0


@dataclass
class PolarVars:
    """Polar variables stored as unit directions ``(cos, sin)`` and radii.

    The angles themselves are available as properties.
    """

    c_o: dc.Tensor
    s_o: dc.Tensor
    d_o: dc.Tensor
    c_v: dc.Tensor
    s_v: dc.Tensor
    d_v: dc.Tensor
    c_a: dc.Tensor
    s_a: dc.Tensor
    d_a: dc.Tensor
    s: dc.Tensor | None = None

    @property
    def alpha_o(self) -> dc.Tensor:
        return dc.arctan2(self.s_o, self.c_o)

    @property
    def alpha_v(self) -> dc.Tensor:
        return dc.arctan2(self.s_v, self.c_v)

    @property
    def alpha_a(self) -> dc.Tensor:
        return dc.arctan2(self.s_a, self.c_a)


@dataclass
class Rows:
    """Structured stand-in for a stacked ``F``-row vector."""

    ox: dc.Tensor   # (B, M, N)
    vx: dc.Tensor   # (B, N)
    ax: dc.Tensor
    oy: dc.Tensor
    vy: dc.Tensor
    ay: dc.Tensor
    lane: dc.Tensor  # (B, 2n)

    def __sub__(self, other: "Rows") -> "Rows":
        return Rows(*(getattr(self, f) - getattr(other, f) for f in _ROW_FIELDS))

    def flatten(self) -> np.ndarray:
        """Dense vector(s) in the documented row order."""
        def v(t):
            t = t.value if isinstance(t, dc.Tensor) else np.asarray(t)
            return t.reshape(t.shape[0], -1)
        return np.concatenate([v(self.ox), v(self.vx), v(self.ax), v(self.oy), v(self.vy), v(self.ay), v(self.lane)], axis=-1)

    def max_abs(self, mask: np.ndarray) -> np.ndarray:
        parts = [np.max(np.abs(self.ox.value) * mask[..., None], axis=(-2, -1)) if self.ox.shape[-2] else 0.0,
                 np.max(np.abs(self.oy.value) * mask[..., None], axis=(-2, -1)) if self.oy.shape[-2] else 0.0]
        for f in ("vx", "ax", "vy", "ay", "lane"):
            parts.append(np.max(np.abs(getattr(self, f).value), axis=-1))
        return np.max(np.stack(np.broadcast_arrays(*parts)), axis=0)


_ROW_FIELDS = ("ox", "vx", "ax", "oy", "vy", "ay", "lane")


# ---------------------------------------------------------------- barrier pieces

def _gamma_col(gamma):
    g = dc.as_tensor(gamma)
    return dc.reshape(g, g.shape + (1, 1)) if g.ndim else g


def build_lane_barrier(basis: BasisMatrices, gamma_lane, y_lb: float, y_ub: float):
    """Stacked lane barrier ``G c_y <= y_lane`` over consecutive step pairs.

    Upper rows ``W[k+1] + (g-1) W[k]`` with bound ``g y_ub``; lower rows
    ``-W[k+1] + (1-g) W[k]`` with bound ``-g y_lb``.  ``gamma_lane`` may be a
    batch of values, giving a leading batch axis.
    """
    W1, W0 = basis.W[1:], basis.W[:-1]
    g = dc.as_tensor(gamma_lane)
    gc = _gamma_col(g)
    G_ub = W1 + (gc - 1.0) * W0
    G = dc.concat([G_ub, -G_ub], axis=-2) if g.ndim else dc.concat([G_ub, -G_ub], axis=0)
    n = W1.shape[0]
    gv = dc.reshape(g, g.shape + (1,)) if g.ndim else g
    y_lane = dc.concat([gv * (y_ub * np.ones(n)), gv * (-y_lb * np.ones(n))], axis=-1)
    return G, y_lane


def barrier_lower_bounds(d_prev, gamma_obs, d_first=None) -> dc.Tensor:
    """``d_min[k] = 1 + (1 - gamma) (d_prev[k-1] - 1)``; step 0 uses ``d_first``.

    ``d_prev`` has time on the last axis.  Without ``d_first`` step 0 keeps
    ``d_prev[0]``.
    """
    d_prev = dc.as_tensor(d_prev)
    g = dc.as_tensor(gamma_obs)
    while g.ndim and g.ndim < d_prev.ndim:
        g = dc.expand_dims(g, -1)
    rest = 1.0 + (1.0 - g) * (d_prev[..., :-1] - 1.0)
    first = d_prev[..., :1] if d_first is None else dc.expand_dims(dc.as_tensor(d_first), -1)
    return dc.concat([first, rest], axis=-1)


def _kinematics(basis: BasisMatrices, xi):
    xi = dc.as_tensor(xi)
    nv = basis.nvar
    cx, cy = xi[..., :nv], xi[..., nv:]
    return (cx @ basis.W.T, cy @ basis.W.T, cx @ basis.Wdot.T, cy @ basis.Wdot.T,
            cx @ basis.Wddot.T, cy @ basis.Wddot.T)


def obstacle_radius(basis: BasisMatrices, xi, scene: SceneConstraints):
    """Unconstrained polar direction and radius to every obstacle: ``(cos, sin, d)`` each ``(B, M, N)``."""
    x, y, *_ = _kinematics(basis, xi)
    dx = dc.expand_dims(x, -2) - scene.xo
    dy = dc.expand_dims(y, -2) - scene.yo
    return _polar_obstacle(dx, dy, scene.a, scene.b)


def _unit(u, v, eps: float = 1e-9):
    """``(cos, sin)`` of ``arctan2(v, u)``; the zero vector maps to angle 0 with zero gradient."""
    r2 = u * u + v * v
    small = r2.value < eps * eps
    r_safe = dc.sqrt(dc.where(small, 1.0, r2))
    return dc.where(small, 1.0, u / r_safe), dc.where(small, 0.0, v / r_safe), dc.where(small, 0.0, r_safe)


def _polar_obstacle(dx, dy, a, b):
    c, s, _ = _unit(dx * (1.0 / a), dy * (1.0 / b))
    d = (dx * c * a + dy * s * b) / (c * c * (a * a) + s * s * (b * b))
    return c, s, d


def am_update_alpha_d(basis: BasisMatrices, xi, scene: SceneConstraints, d_min, d_max: float = 1e4) -> PolarVars:
    """Closed-form angle/radius updates for obstacle, velocity and acceleration rows."""
    x, y, vx, vy, ax, ay = _kinematics(basis, xi)
    dx = dc.expand_dims(x, -2) - scene.xo
    dy = dc.expand_dims(y, -2) - scene.yo
    c_o, s_o, d_unc = _polar_obstacle(dx, dy, scene.a, scene.b)
    d_o = dc.clip(d_unc, d_min, d_max)
    c_v, s_v, speed = _unit(vx, vy)
    d_v = dc.clip(speed, scene.v_min, scene.v_max)
    c_a, s_a, acc = _unit(ax, ay)
    d_a = dc.clip(acc, 0.0, scene.a_max)
    return PolarVars(c_o, s_o, d_o, c_v, s_v, d_v, c_a, s_a, d_a)


def initial_radius(initial, scene: SceneConstraints) -> np.ndarray:
    """Normalized ellipse radius of the measured initial position, ``(B, M)``."""
    initial = np.asarray(initial, dtype=np.float64)
    dx = initial[..., None, 0] - scene.xo[..., 0]
    dy = initial[..., None, 1] - scene.yo[..., 0]
    return np.sqrt((dx / scene.a) ** 2 + (dy / scene.b) ** 2)


def am_update_slack(xi, G, y_lane) -> dc.Tensor:
    """Exact minimizer of ``|G c_y - y_lane + s|^2`` over ``s >= 0``; ``xi`` is the full coefficient vector."""
    xi = dc.as_tensor(xi)
    G = dc.as_tensor(G)
    nv = G.shape[-1]
    cy = xi[..., nv:]
    Gc = dc.matmul(G, dc.expand_dims(cy, -1))[..., 0] if G.ndim == 3 else cy @ dc.transpose(G)
    return dc.relu(y_lane - Gc)


class FilterProblem:
    """Row operators ``F``, ``F'`` and the KKT system for one batch of scenes."""

    def __init__(self, basis: BasisMatrices, scene: SceneConstraints, gamma_lane, rho: float,
                 terminal=DEFAULT_TERMINAL):
        self.basis = basis
        self.scene = scene
        self.rho = rho
        self.nv = basis.nvar
        self.A = boundary_matrix(basis, terminal)
        g = dc.as_tensor(gamma_lane)
        self.G, self.y_lane = build_lane_barrier(basis, g if g.ndim else dc.reshape(g, (1,)), scene.y_lb, scene.y_ub)
        self.mask = scene.mask if scene.mask.ndim == 2 else scene.mask[None]

    # --- F xi
    def apply(self, xi) -> Rows:
        x, y, vx, vy, ax, ay = _kinematics(self.basis, xi)
        M = self.scene.num_obstacles
        ox = dc.expand_dims(x, -2) * np.ones((M, 1))
        oy = dc.expand_dims(y, -2) * np.ones((M, 1))
        cy = dc.as_tensor(xi)[..., self.nv:]
        lane = dc.matmul(self.G, dc.expand_dims(cy, -1))[..., 0]
        return Rows(ox, vx, ax, oy, vy, ay, lane)

    # --- F' rows
    def apply_T(self, r: Rows) -> dc.Tensor:
        W, Wd, Wdd = self.basis.W, self.basis.Wdot, self.basis.Wddot
        m = self.mask[..., None]
        tx = dc.sum(r.ox * m, axis=-2) @ W + r.vx @ Wd + r.ax @ Wdd
        ty = dc.sum(r.oy * m, axis=-2) @ W + r.vy @ Wd + r.ay @ Wdd
        ty = ty + dc.matmul(dc.expand_dims(r.lane, -2), self.G)[..., 0, :]
        return dc.concat([tx, ty], axis=-1)

    def targets(self, polar: PolarVars, s) -> Rows:
        sc = self.scene
        return Rows(
            sc.xo + polar.d_o * polar.c_o * sc.a,
            polar.d_v * polar.c_v,
            polar.d_a * polar.c_a,
            sc.yo + polar.d_o * polar.s_o * sc.b,
            polar.d_v * polar.s_v,
            polar.d_a * polar.s_a,
            self.y_lane - s,
        )

    def hessian_blocks(self):
        W, Wd, Wdd = self.basis.W, self.basis.Wdot, self.basis.Wddot
        base = Wd.T @ Wd + Wdd.T @ Wdd
        wsum = np.sum(self.mask, axis=-1)[:, None, None]
        Hx = np.eye(self.nv) + self.rho * (base + wsum * (W.T @ W))
        GtG = dc.matmul(dc.swapaxes(self.G, -1, -2), self.G)
        Hy = Hx + self.rho * GtG
        return dc.Tensor(Hx), Hy

    def kkt_matrix(self) -> dc.Tensor:
        Hx, Hy = self.hessian_blocks()
        B = max(Hx.shape[0], Hy.shape[0])
        nv, ne = self.nv, self.A.shape[0]
        Hx = dc.broadcast_to(Hx, (B, nv, nv))
        Hy = dc.broadcast_to(Hy, (B, nv, nv))
        Z = np.zeros((B, nv, nv))
        H = dc.concat([dc.concat([Hx, dc.Tensor(Z)], axis=-1), dc.concat([dc.Tensor(Z), Hy], axis=-1)], axis=-2)
        At = np.broadcast_to(self.A.T, (B,) + self.A.T.shape)
        top = dc.concat([H, dc.Tensor(At)], axis=-1)
        bot = dc.Tensor(np.broadcast_to(np.hstack([self.A, np.zeros((ne, ne))]), (B, ne, 2 * nv + ne)))
        return dc.concat([top, bot], axis=-2)


def am_update_lambda_e(problem: FilterProblem, lam, xi, e_prev: Rows, polar: PolarVars, s, rho: float):
    """Multiplier step on the previous penalty residual, then fresh targets.

    ``lam <- lam - rho F'(F xi - e_prev)``; with the ``-lam' xi`` term in the
    Lagrangian this sign drives the residual to zero.
    """
    r = problem.apply(xi) - e_prev
    lam = dc.as_tensor(lam) - problem.apply_T(r) * rho
    return lam, problem.targets(polar, s)


def am_update_xi(xi_star, A, b, F, e, lam, rho: float):
    """Dense reference step: minimize the augmented Lagrangian subject to ``A xi = b``.

    ``F`` and ``e`` are the stacked dense matrix and target vector.
    """
    from .trajgen import solve_kkt

    F = np.asarray(F.value if isinstance(F, dc.Tensor) else F)
    nv = F.shape[1]
    H = np.eye(nv) + rho * F.T @ F
    rhs = dc.as_tensor(xi_star) + dc.as_tensor(lam) + dc.as_tensor(e) @ F * rho
    A = np.asarray(A).reshape(-1, nv)
    xi, _ = solve_kkt(H, -rhs, A, np.asarray(b).reshape(-1))
    return xi


def dense_F(problem: FilterProblem, batch_index: int = 0) -> np.ndarray:
    """Materialize ``F`` for one batch entry in the documented row order (tests/oracles)."""
    basis = problem.basis
    W, Wd, Wdd = basis.W, basis.Wdot, basis.Wddot
    nv = basis.nvar
    M = problem.scene.num_obstacles
    mask = problem.mask[min(batch_index, problem.mask.shape[0] - 1)]
    Fo = np.vstack([W * mask[i] for i in range(M)]) if M else np.zeros((0, nv))
    blk = np.vstack([Fo, Wd, Wdd])
    Z = np.zeros_like(blk)
    G = problem.G.value
    G = G[min(batch_index, G.shape[0] - 1)] if G.ndim == 3 else G
    return np.vstack([np.hstack([blk, Z]), np.hstack([Z, blk]), np.hstack([np.zeros((G.shape[0], nv)), G])])


# ---------------------------------------------------------------- warm-start network

class WarmStartNet:
    """MLP ``(O, xi*) -> (gamma_obs, gamma_lane, lam0, xi0)``.

    The last layer starts at zero, i.e. ``lam0 = 0``, ``xi0 = xi*`` and both
    barrier parameters at ``gamma_init``.
    """

    def __init__(self, cfg: FilterConfig, nvar2: int = 22, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.nvar2 = nvar2
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.params = ParamSet()
        H = cfg.hidden
        self.mlp = MLP(self.params, "warm", [OBS_DIM + nvar2, H, H, 2 + 2 * nvar2], rng, "tanh", zero_last=True)
        g = (cfg.gamma_init - GAMMA_FLOOR) / (1.0 - GAMMA_FLOOR)
        self.gamma_bias = float(np.log(g / (1.0 - g)))

    def __call__(self, O, xi_star):
        xi_star = dc.as_tensor(xi_star)
        scale = XI_SCALE if self.nvar2 == 22 else np.ones(self.nvar2)
        inp = dc.concat([dc.Tensor(np.asarray(O, dtype=np.float64) / OBS_SCALE), xi_star * (1.0 / scale)], axis=-1)
        out = self.mlp(inp)
        k = self.nvar2
        gamma = dc.sigmoid(out[..., :2] + self.gamma_bias) * (1.0 - GAMMA_FLOOR) + GAMMA_FLOOR
        lam0 = out[..., 2:2 + k] * self.cfg.lam_scale
        xi0 = xi_star + out[..., 2 + k:] * (0.1 * scale)
        return gamma[..., 0], gamma[..., 1], lam0, xi0

    def save(self, path) -> None:
        checkpoint.save(path, self.params.state(), {"kind": "filter", "config": asdict(self.cfg), "nvar2": self.nvar2})

    @classmethod
    def load(cls, path) -> "WarmStartNet":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "filter":
            raise checkpoint.CheckpointError(f"{path} is not a filter checkpoint")
        net = cls(FilterConfig(**meta["config"]), meta["nvar2"])
        net.params.load(tensors)
        return net


# ---------------------------------------------------------------- solver loop

class FilterDivergence(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite filter state at iteration {iteration}")
        self.iteration = iteration


@dataclass
class FilterResult:
    xi: dc.Tensor
    residuals: np.ndarray        # (T, B) max |F xi - e| after each xi update
    gamma_obs: np.ndarray
    gamma_lane: np.ndarray
    polar: PolarVars | None = None


@dataclass
class WarmStart:
    """Explicit initialization, bypassing the network."""

    gamma_obs: object
    gamma_lane: object
    lam0: object = None
    xi0: object = None


def run_filter(basis: BasisMatrices, xi_star, O, scene: SceneConstraints, net: WarmStartNet | WarmStart | None,
               initial, iters: int = 100, rho: float = 1.0, d_max: float = 1e4,
               terminal=DEFAULT_TERMINAL, margin: float = 0.0) -> FilterResult:
    """Unrolled alternating minimization over a batch of trajectories.

    ``xi_star``: (B, 2(m+1)); ``initial``: (B, 6) boundary states; ``scene``
    entries broadcast against the batch.  ``margin`` grows both ellipse
    semi-axes by that fraction so the iterate, which approaches the boundary
    from inside, ends up outside the nominal ellipse.  Differentiable end to end.
    """
    from .trajgen import boundary_vector

    if margin:
        scene = inflate(scene, margin)
    xi_star = dc.as_tensor(xi_star)
    if xi_star.ndim == 1:
        xi_star = dc.reshape(xi_star, (1, -1))
    B, nv2 = xi_star.shape
    if net is None:
        net = WarmStart(1.0, 1.0)
    if isinstance(net, WarmStart):
        g_obs = dc.as_tensor(np.broadcast_to(np.asarray(net.gamma_obs, dtype=np.float64), (B,))) if not isinstance(net.gamma_obs, dc.Tensor) else net.gamma_obs
        g_lane = dc.as_tensor(np.broadcast_to(np.asarray(net.gamma_lane, dtype=np.float64), (B,))) if not isinstance(net.gamma_lane, dc.Tensor) else net.gamma_lane
        lam = dc.as_tensor(np.zeros((B, nv2)) if net.lam0 is None else net.lam0)
        xi = xi_star if net.xi0 is None else dc.as_tensor(net.xi0)
    else:
        g_obs, g_lane, lam, xi = net(np.broadcast_to(O, (B, OBS_DIM)), xi_star)
    prob = FilterProblem(basis, scene, g_lane, rho, terminal)
    b = boundary_vector(np.broadcast_to(initial, (B, 6)), terminal)
    K = prob.kkt_matrix()
    n_eq = prob.A.shape[0]
    K = dc.broadcast_to(K, (B,) + K.shape[-2:])
    b_t = dc.Tensor(np.broadcast_to(b, (B, n_eq)))

    *_, d_prev = obstacle_radius(basis, xi, scene)
    d_first = initial_radius(np.broadcast_to(initial, (B, 6)), scene)
    e = prob.apply(xi)
    residuals = []
    polar = None
    mask = np.broadcast_to(prob.mask, (B, scene.num_obstacles))
    for t in range(iters):
        d_min = barrier_lower_bounds(d_prev, g_obs, d_first)
        polar = am_update_alpha_d(basis, xi, scene, d_min, d_max)
        s = am_update_slack(xi, prob.G, prob.y_lane)
        polar.s = s
        lam, e = am_update_lambda_e(prob, lam, xi, e, polar, s, rho)
        rhs = xi_star + lam + prob.apply_T(e) * rho
        xi = dc.solve_linear(K, dc.concat([rhs, b_t], axis=-1))[..., :nv2]
        if dc.checked_enabled():
            check_xi_step(K.value[:, :nv2, :nv2], prob.A, b, rhs.value, xi.value)
        d_prev = polar.d_o
        res = (prob.apply(xi) - e).max_abs(mask)
        if not np.all(np.isfinite(xi.value)):
            raise FilterDivergence(t)
        residuals.append(np.broadcast_to(res, (B,)))
    return FilterResult(xi, np.array(residuals).reshape(iters, B), np.asarray(g_obs.value), np.asarray(g_lane.value), polar)


def check_xi_step(H, A, b, rhs, xi, tol: float = KKT_TOL) -> tuple[float, float]:
    """Stationarity and equality residuals of ``min 1/2 xi'H xi - rhs'xi, A xi = b``.

    The multiplier is recovered by least squares; raises when either
    residual exceeds ``tol``.
    """
    g = np.einsum("bij,bj->bi", np.broadcast_to(H, (len(xi),) + H.shape[-2:]), xi) - rhs
    mu = np.linalg.lstsq(A.T, -g.T, rcond=None)[0]
    stat = float(np.max(np.abs(g + (A.T @ mu).T), initial=0.0))
    eq = float(np.max(np.abs(xi @ A.T - b), initial=0.0))
    if stat > tol or eq > tol:
        raise dc.ContractError(f"xi step residuals {stat:.2e} (stationarity), {eq:.2e} (equality) exceed {tol:g}")
    return stat, eq


# ---------------------------------------------------------------- evaluation helpers

def inflate(scene: SceneConstraints, margin: float) -> SceneConstraints:
    return SceneConstraints(scene.xo, scene.yo, scene.y_lb, scene.y_ub, scene.a * (1.0 + margin),
                            scene.b * (1.0 + margin), scene.v_min, scene.v_max, scene.a_max, scene.mask)


def ellipse_distance(basis: BasisMatrices, xi, scene: SceneConstraints) -> np.ndarray:
    """Normalized ellipse radius ``sqrt((dx/a)^2 + (dy/b)^2)``, shape (B, M, N)."""
    xi = np.asarray(xi.value if isinstance(xi, dc.Tensor) else xi)
    x = xi[..., :basis.nvar] @ basis.W.T
    y = xi[..., basis.nvar:] @ basis.W.T
    dx = x[..., None, :] - scene.xo
    dy = y[..., None, :] - scene.yo
    return np.sqrt((dx / scene.a) ** 2 + (dy / scene.b) ** 2)


def relevant_obstacles(basis: BasisMatrices, xi, scene: SceneConstraints, radius: float = 3.0) -> SceneConstraints:
    """Unbatched scene restricted to real obstacles that come within ``radius`` of any trajectory."""
    d = ellipse_distance(basis, xi, scene)                 # (B, M, N)
    near = (np.min(d, axis=(0, 2)) < radius) & (scene.mask > 0)
    return SceneConstraints(scene.xo[near], scene.yo[near], scene.y_lb, scene.y_ub, scene.a, scene.b,
                            scene.v_min, scene.v_max, scene.a_max, scene.mask[near])


def min_clearance(basis: BasisMatrices, xi, scene: SceneConstraints) -> np.ndarray:
    """``min (d - 1)`` over real obstacles and steps; +inf with no obstacles."""
    d = ellipse_distance(basis, xi, scene)
    mask = np.broadcast_to(scene.mask, d.shape[:-1])
    d = np.where(mask[..., None] > 0, d, np.inf)
    if d.shape[-2] == 0:
        return np.full(d.shape[:-2], np.inf)
    return np.min(d, axis=(-2, -1)) - 1.0


def violation_cost(basis: BasisMatrices, xi, scene: SceneConstraints) -> dc.Tensor:
    """Summed hinge violations per trajectory, shape (B,)."""
    x, y, vx, vy, ax, ay = _kinematics(basis, xi)
    dx = dc.expand_dims(x, -2) - scene.xo
    dy = dc.expand_dims(y, -2) - scene.yo
    r2 = dc.square(dx * (1.0 / scene.a)) + dc.square(dy * (1.0 / scene.b))
    mask = np.broadcast_to(scene.mask, r2.shape[:-1])[..., None]
    obs = dc.sum(dc.sum(dc.relu(1.0 - r2) * mask, axis=-1), axis=-1)
    lane = dc.sum(dc.relu(y - scene.y_ub) + dc.relu(scene.y_lb - y), axis=-1)
    speed = dc.sqrt(vx * vx + vy * vy + 1e-12)
    vel = dc.sum(dc.relu(speed - scene.v_max) + dc.relu(scene.v_min - speed), axis=-1)
    accel = dc.sum(dc.relu(dc.sqrt(ax * ax + ay * ay + 1e-12) - scene.a_max), axis=-1)
    return obs + lane + vel + accel


def filter_loss(xi_star, result: FilterResult, basis: BasisMatrices, scene: SceneConstraints, weight: float):
    """Projection distance plus weighted violation cost, averaged over the batch."""
    diff = dc.as_tensor(xi_star) - result.xi
    proj = dc.sum(dc.square(diff), axis=-1)
    viol = violation_cost(basis, result.xi, scene)
    return dc.mean(proj + viol * weight), (dc.mean(proj), dc.mean(viol))


@dataclass
class FilterHistory:
    loss: list = field(default_factory=list)
    projection: list = field(default_factory=list)
    violation: list = field(default_factory=list)


def train_filter(net: WarmStartNet, basis: BasisMatrices, xi_star: np.ndarray, obs: np.ndarray,
                 scene: SceneConstraints, initial: np.ndarray, cfg: FilterConfig | None = None, log_every: int = 0):
    """Self-supervised training through the unrolled solver.

    ``scene`` is batched along the dataset axis (xo: (S, M, N)).
    """
    cfg = cfg or net.cfg
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params.values(), lr=cfg.lr, clip_norm=10.0)
    hist = FilterHistory()
    S = len(xi_star)
    B = min(cfg.batch_size, S)
    for step in range(1, cfg.steps + 1):
        sel = rng.choice(S, size=B, replace=S < B)
        sub = scene.take(sel)
        with dc.Tape() as tape:
            tape.watch(*net.params.values())
            res = run_filter(basis, xi_star[sel], obs[sel], sub, net, initial[sel], cfg.train_iters, cfg.rho, cfg.d_max,
                             margin=cfg.margin)
            loss, (proj, viol) = filter_loss(xi_star[sel], res, basis, sub, cfg.violation_weight)
            grads = tape.backward(loss)
        lv = loss.item()
        if not np.isfinite(lv):
            raise RuntimeError(f"filter loss became {lv} at step {step}")
        opt.step(grads)
        hist.loss.append(lv)
        hist.projection.append(proj.item())
        hist.violation.append(viol.item())
        if log_every and step % log_every == 0:
            log.info("filter step %d loss %.4f proj %.4f viol %.4f", step, lv, proj.item(), viol.item())
    return net, hist
