"""Polynomial trajectory basis and the setpoint-tracking QP.

A trajectory is a pair of degree-``m`` polynomials ``x(t) = W c_x``,
``y(t) = W c_y`` sampled at ``n + 1`` instants.  Setpoints ``p = (v_d, y_d)``
enter the QP objective linearly, so the optimal coefficients are an affine
function of ``p`` and of the boundary values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

HORIZON_STEPS = 100
DEGREE = 10
DT = 0.1
KAPPA_P = 1.0
KAPPA_V = 2.0 * np.sqrt(KAPPA_P)
DEFAULT_TERMINAL = (("x", 2, 0.0), ("y", 1, 0.0), ("y", 2, 0.0))
KKT_TOL = 1e-8           # residual bound asserted under diffcore.checked_mode


@dataclass(frozen=True)
class BasisMatrices:
    W: np.ndarray
    Wdot: np.ndarray
    Wddot: np.ndarray
    dt: float
    n: int
    m: int
    normalized: bool = True

    @property
    def nvar(self) -> int:
        return self.m + 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.dt

    def derivative(self, order: int) -> np.ndarray:
        return (self.W, self.Wdot, self.Wddot)[order]


def build_basis(n: int = HORIZON_STEPS, m: int = DEGREE, dt: float = DT, normalized: bool = True) -> BasisMatrices:
    """Monomial basis at ``t_k = k dt``.

    With ``normalized`` the monomials are taken in ``s = (2 t - T) / T`` on
    ``[-1, 1]`` (``T = n dt``) and the derivative matrices carry the chain-rule
    factor; otherwise ``W[k, i] = t_k ** i``.
    """
    if n < 2 or m < 1 or not dt > 0:
        raise dc.ContractError(f"degenerate basis sizes n={n}, m={m}, dt={dt}")
    t = np.arange(n + 1) * dt
    if normalized:
        T = n * dt
        s, scale = (2.0 * t - T) / T, 2.0 / T
    else:
        s, scale = t, 1.0
    i = np.arange(m + 1)
    W = s[:, None] ** i
    Wdot = np.zeros_like(W)
    Wdot[:, 1:] = i[1:] * s[:, None] ** (i[1:] - 1) * scale
    Wddot = np.zeros_like(W)
    Wddot[:, 2:] = i[2:] * (i[2:] - 1) * s[:, None] ** (i[2:] - 2) * scale ** 2
    return BasisMatrices(W, Wdot, Wddot, float(dt), int(n), int(m), normalized)


@dataclass(frozen=True)
class Setpoints:
    v_d: float
    y_d: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_d, self.y_d], dtype=np.float64)


@dataclass(frozen=True)
class BoundaryConditions:
    """Initial state plus terminal derivative targets ``(axis, order, value)``."""

    x0: float = 0.0
    y0: float = 0.0
    vx0: float = 0.0
    vy0: float = 0.0
    ax0: float = 0.0
    ay0: float = 0.0
    terminal: tuple = field(default=DEFAULT_TERMINAL)

    def initial(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.vx0, self.vy0, self.ax0, self.ay0])

    @classmethod
    def from_initial(cls, state, terminal=DEFAULT_TERMINAL) -> "BoundaryConditions":
        return cls(*[float(v) for v in state], terminal=terminal)


def boundary_matrix(basis: BasisMatrices, terminal=DEFAULT_TERMINAL) -> np.ndarray:
    """Equality rows: initial pos/vel/acc of both axes, then the terminal rows."""
    nv = basis.nvar
    rows = []
    for axis in (0, 1):
        for order in (0, 1, 2):
            r = np.zeros(2 * nv)
            r[axis * nv:(axis + 1) * nv] = basis.derivative(order)[0]
            rows.append(r)
    for axis, order, _ in terminal:
        r = np.zeros(2 * nv)
        a = 0 if axis == "x" else 1
        r[a * nv:(a + 1) * nv] = basis.derivative(order)[-1]
        rows.append(r)
    return np.array(rows)


def boundary_vector(initial, terminal=DEFAULT_TERMINAL) -> np.ndarray:
    """Right-hand side matching :func:`boundary_matrix` for states ``(..., 6)``.

    ``initial`` is ordered ``(x0, y0, vx0, vy0, ax0, ay0)``.
    """
    s = np.asarray(initial, dtype=np.float64)
    head = s[..., [0, 2, 4, 1, 3, 5]]
    tail = np.broadcast_to(np.array([v for *_, v in terminal], dtype=np.float64), s.shape[:-1] + (len(terminal),))
    return np.concatenate([head, tail], axis=-1)


@dataclass
class Trajectory:
    xi: np.ndarray
    waypoints: np.ndarray
    vel: np.ndarray
    acc: np.ndarray

    @classmethod
    def from_xi(cls, basis: BasisMatrices, xi) -> "Trajectory":
        xi = np.asarray(xi.value if isinstance(xi, dc.Tensor) else xi, dtype=np.float64)
        nv = basis.nvar
        cx, cy = xi[..., :nv], xi[..., nv:]

        def ev(M):
            return np.stack([cx @ M.T, cy @ M.T], axis=-1)

        return cls(xi, ev(basis.W), ev(basis.Wdot), ev(basis.Wddot))


def residual_maps(basis: BasisMatrices, gains=(KAPPA_P, KAPPA_V)):
    """Stacked residual rows ``M xi - (r0 + R p)`` whose squared norm is the cost.

    Rows per step: smoothness ``xdd``, ``ydd``; lateral PD tracking
    ``ydd + kp (y - y_d) + kv yd``; velocity tracking ``xdd + kp (xd - v_d)``.
    """
    kp, kv = gains
    nv, N = basis.nvar, basis.n + 1
    W, Wd, Wdd = basis.W, basis.Wdot, basis.Wddot
    Z = np.zeros_like(W)
    M = np.vstack([
        np.hstack([Wdd, Z]),
        np.hstack([Z, Wdd]),
        np.hstack([Z, Wdd + kp * W + kv * Wd]),
        np.hstack([Wdd + kp * Wd, Z]),
    ])
    R = np.zeros((4 * N, 2))
    R[2 * N:3 * N, 1] = kp
    R[3 * N:, 0] = kp
    return M, R


def assemble_setpoint_qp(basis: BasisMatrices, sp: Setpoints, bc: BoundaryConditions, gains=(KAPPA_P, KAPPA_V)):
    """QP data ``(Q, q, A, b)`` for ``min 1/2 xi'Q xi + q'xi  s.t.  A xi = b``.

    ``1/2 xi'Q xi + q'xi`` equals the summed per-step costs up to a constant.
    """
    if min(gains) < 0:
        raise dc.ContractError("gains must be non-negative")
    M, R = residual_maps(basis, gains)
    r = R @ sp.as_array()
    Q = 2.0 * M.T @ M
    q = -2.0 * M.T @ r
    A = boundary_matrix(basis, bc.terminal)
    b = boundary_vector(bc.initial(), bc.terminal)
    return Q, q, A, b


def solve_kkt(Q, q, A, b):
    """Solve the equality-constrained QP through one KKT solve.

    Differentiable in every argument.  Returns ``(xi, mu)`` with
    ``Q xi + q + A' mu = 0`` and ``A xi = b``.
    """
    Q, q, A, b = (dc.as_tensor(v) for v in (Q, q, A, b))
    nv = Q.shape[0]
    ne = A.shape[0]
    if ne == 0:
        return dc.solve_linear(Q, -q), dc.Tensor(np.zeros(0))
    top = dc.concat([Q, dc.transpose(A)], axis=1)
    bot = dc.concat([A, dc.Tensor(np.zeros((ne, ne)))], axis=1)
    K = dc.concat([top, bot], axis=0)
    sol = dc.solve_linear(K, dc.concat([-q, b], axis=0))
    xi, mu = sol[:nv], sol[nv:]
    if dc.checked_enabled():
        stat = np.max(np.abs(Q.value @ xi.value + q.value + A.value.T @ mu.value))
        eq = np.max(np.abs(A.value @ xi.value - b.value))
        if stat > KKT_TOL or eq > KKT_TOL:
            raise dc.ContractError(f"KKT residuals {stat:.2e} (stationarity), {eq:.2e} (equality) exceed {KKT_TOL:g}")
    return xi, mu


def solve_setpoint_qp(Q, q, A, b, basis: BasisMatrices | None = None):
    """Optimal coefficients as a :class:`Trajectory` (or bare ``xi`` without a basis)."""
    xi, _ = solve_kkt(Q, q, A, b)
    if basis is None:
        return xi
    return Trajectory.from_xi(basis, xi)


class SetpointQP:
    """Precomputed affine solution map ``xi*(p, b) = P p + B b``.

    ``Q`` and ``A`` do not depend on the setpoints or boundary values, so one
    KKT inverse serves every solve.
    """

    def __init__(self, basis: BasisMatrices, gains=(KAPPA_P, KAPPA_V), terminal=DEFAULT_TERMINAL):
        self.basis = basis
        self.gains = tuple(gains)
        self.terminal = tuple(terminal)
        M, R = residual_maps(basis, gains)
        self.Q = 2.0 * M.T @ M
        self.q_of_p = -2.0 * M.T @ R          # q = q_of_p @ p
        self.A = boundary_matrix(basis, terminal)
        nv, ne = self.Q.shape[0], self.A.shape[0]
        K = np.block([[self.Q, self.A.T], [self.A, np.zeros((ne, ne))]])
        Kinv = dc.solve_linear(K, np.eye(nv + ne)).value
        self.P = -Kinv[:nv, :nv] @ self.q_of_p
        self.B = Kinv[:nv, nv:]
        self.nv, self.ne = nv, ne

    def boundary(self, initial) -> np.ndarray:
        return boundary_vector(initial, self.terminal)

    def xi(self, p, initial):
        """Coefficients for setpoints ``p (..., 2)``; tensors in, tensor out."""
        b = self.boundary(initial)
        if isinstance(p, dc.Tensor):
            return p @ self.P.T + b @ self.B.T
        return np.asarray(p) @ self.P.T + b @ self.B.T

    def trajectory(self, p, initial) -> Trajectory:
        return Trajectory.from_xi(self.basis, self.xi(p, initial))
