"""Finite-difference oracles shared by the unit and acceptance suites.

Each ``*_case(seed)`` builds one random instance and returns the relative
error between the tape gradient and central differences.
"""
from __future__ import annotations

import numpy as np

from vqplan import diffcore as dc
from vqplan import safety_filter as sf
from vqplan import trajgen as tg
from vqplan import vqvae as vq

SMALL_BASIS = dict(n=10, m=5, dt=0.3)


def rel(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-10))


def _flat(params):
    return np.concatenate([p.value.ravel() for p in params])


def _assign(params, flat):
    i = 0
    for p in params:
        p.value = flat[i:i + p.size].reshape(p.shape).copy()
        i += p.size


# ---------------------------------------------------------------- diffcore primitives

def grad_of(f, *xs):
    ts = [dc.Tensor(x) for x in xs]
    with dc.Tape() as tape:
        tape.watch(*ts)
        out = f(*ts)
        g = tape.backward(out)
    return [g[t] for t in ts]


def fd_of(f, xs, i, h=1e-5):
    def scalar(v):
        args = [dc.Tensor(x) for x in xs]
        args[i] = dc.Tensor(v)
        return f(*args).item()
    return dc.finite_difference_grad(scalar, xs[i], h)


def away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


# (name, scalar function of tensors, input factory)
W3 = np.random.default_rng(7).normal(size=(3, 4))
PRIMITIVES = [
    ("add", lambda a, b: dc.sum(a + b * b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    ("sub", lambda a, b: dc.sum((a - b) ** 2), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
    ("mul", lambda a, b: dc.sum(a * b * a), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    ("div", lambda a, b: dc.sum(a / b), lambda r: [r.normal(size=(5,)), away_from_zero(r, (5,))]),
    ("power", lambda a: dc.sum(dc.power(a, 3.0)), lambda r: [r.normal(size=(4,))]),
    ("matmul", lambda a, b: dc.sum(dc.square(a @ b)), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    ("batched_matmul", lambda a, b: dc.sum(dc.tanh(dc.matmul(a, b))),
     lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
    ("mean_axis", lambda a: dc.sum(dc.square(dc.mean(a, axis=0))), lambda r: [r.normal(size=(3, 4))]),
    ("reshape_transpose", lambda a: dc.sum(dc.transpose(dc.reshape(a, (4, 3))) @ W3.T),
     lambda r: [r.normal(size=(3, 4))]),
    ("getitem", lambda a: dc.sum(dc.square(a[1:, ::2])), lambda r: [r.normal(size=(3, 4))]),
    ("fancy_index", lambda a: dc.sum(dc.square(a[np.array([0, 2, 2])])), lambda r: [r.normal(size=(3, 4))]),
    ("concat_stack", lambda a, b: dc.sum(dc.square(dc.concat([a, b], 0)) * dc.stack([a, a, b], 0)[0, 0]),
     lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    ("exp_log", lambda a: dc.sum(dc.log(dc.exp(a) + 1.0)), lambda r: [r.normal(size=(6,))]),
    ("tanh_sigmoid", lambda a: dc.sum(dc.tanh(a) * dc.sigmoid(a)), lambda r: [r.normal(size=(6,))]),
    ("relu", lambda a: dc.sum(dc.relu(a) * a), lambda r: [away_from_zero(r, (6,))]),
    ("maximum", lambda a, b: dc.sum(dc.maximum(a, b) ** 2),
     lambda r: [r.normal(size=(6,)), r.normal(size=(6,)) + 0.5]),
    ("minimum", lambda a, b: dc.sum(dc.minimum(a, b) ** 2),
     lambda r: [r.normal(size=(6,)), r.normal(size=(6,)) + 0.5]),
    ("clip", lambda a: dc.sum(dc.clip(a, -0.5, 0.7) * a),
     lambda r: [np.where(np.abs(np.abs(x := r.normal(size=(8,))) - 0.6) < 0.15, x + 0.4, x)]),
    ("sqrt", lambda a: dc.sum(dc.sqrt(a)), lambda r: [r.uniform(0.3, 3.0, (6,))]),
    ("abs", lambda a: dc.sum(dc.abs(a) * a), lambda r: [away_from_zero(r, (6,))]),
    ("sin_cos", lambda a: dc.sum(dc.sin(a) * dc.cos(2.0 * a)), lambda r: [r.normal(size=(6,))]),
    ("arctan2", lambda y, x: dc.sum(dc.arctan2(y, x)), lambda r: [away_from_zero(r, (6,)), away_from_zero(r, (6,))]),
    ("where", lambda a, b: dc.sum(dc.where(np.array([1, 0, 1, 0], bool), a * a, b * 3.0)),
     lambda r: [r.normal(size=(4,)), r.normal(size=(4,))]),
    ("softmax", lambda a: dc.sum(dc.softmax(a) * np.arange(5.0)), lambda r: [r.normal(size=(2, 5))]),
    ("log_softmax", lambda a: dc.sum(dc.log_softmax(a, axis=-1)[:, 1]), lambda r: [r.normal(size=(3, 5))]),
    ("logsumexp", lambda a: dc.sum(dc.logsumexp(a, axis=0)), lambda r: [r.normal(size=(3, 5))]),
    ("broadcast_expand", lambda a: dc.sum(dc.square(dc.broadcast_to(dc.expand_dims(a, 0), (3, 4)))),
     lambda r: [r.normal(size=(4,))]),
    ("swapaxes", lambda a: dc.sum(dc.tanh(dc.swapaxes(a, 0, 1) @ W3[:, :3])), lambda r: [r.normal(size=(3, 2))]),
    ("solve_linear", lambda A, b: dc.sum(dc.square(dc.solve_linear(A, b))),
     lambda r: [np.eye(4) * 3 + 0.3 * r.normal(size=(4, 4)), r.normal(size=(4,))]),
    ("solve_linear_matrix_rhs", lambda A, b: dc.sum(dc.solve_linear(A, b) * np.arange(6.0).reshape(3, 2)),
     lambda r: [np.eye(3) * 2 + 0.3 * r.normal(size=(3, 3)), r.normal(size=(3, 2))]),
]


def primitive_case(f, make, rng) -> float:
    """Worst relative error over the inputs of one primitive instance."""
    xs = make(rng)
    errs = []
    for i, g in enumerate(grad_of(f, *xs)):
        fd = fd_of(f, xs, i)
        errs.append(float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-6)))
    return max(errs)


# ---------------------------------------------------------------- setpoint QP

def qp_case(seed: int, h: float = 1e-4) -> float:
    """Jacobian of xi* with respect to p through the KKT solve."""
    rng = np.random.default_rng(seed)
    basis = tg.build_basis()
    bc = tg.BoundaryConditions(0.0, rng.uniform(-2, 14), rng.uniform(0, 30), rng.uniform(-1, 1),
                               rng.uniform(-3, 3), rng.uniform(-1, 1))
    M, R = tg.residual_maps(basis)
    Q = 2.0 * M.T @ M
    A = tg.boundary_matrix(basis)
    b = tg.boundary_vector(bc.initial())
    w = rng.normal(size=2 * basis.nvar)
    p0 = np.array([rng.uniform(0, 30), rng.uniform(-2, 14)])

    def f(p):
        return float(w @ tg.solve_kkt(Q, -2.0 * M.T @ R @ p, A, b)[0].value)

    p = dc.Tensor(p0)
    with dc.Tape() as tape:
        tape.watch(p)
        xi, _ = tg.solve_kkt(Q, dc.matmul(dc.Tensor(-2.0 * M.T @ R), p), A, b)
        g = tape.backward(dc.sum(xi * w))[p]
    return rel(g, dc.finite_difference_grad(f, p0, h))


# ---------------------------------------------------------------- VQ-VAE loss

def small_vqvae(seed: int):
    qp = tg.SetpointQP(tg.build_basis(**SMALL_BASIS))
    cfg = vq.VqVaeConfig(L=2, D=3, K=4, hidden=8, seed=seed, recon_scale=5.0)
    model = vq.VqVaeModel(cfg, qp, np.random.default_rng(seed))
    return qp, model


def small_batch(qp, rng, B=3):
    p = np.stack([rng.uniform(5, 25, B), rng.uniform(0, 12, B)], axis=1)
    init = np.zeros((B, 6))
    init[:, 1] = rng.uniform(0, 12, B)
    init[:, 2] = rng.uniform(5, 25, B)
    tau = vq.flatten_waypoints(qp.trajectory(p, init).waypoints) + rng.normal(0, 0.3, (B, 2 * (qp.basis.n + 1)))
    return tau, init


def vqvae_case(seed: int, h: float = 1e-6) -> float:
    """All three loss terms; encoder/codebook against the straight-through surrogate."""
    rng = np.random.default_rng(seed)
    qp, model = small_vqvae(seed)
    tau, init = small_batch(qp, rng)
    beta = model.cfg.beta
    params = model.params.values()
    Z_e0 = model.encode(tau).value
    grid = vq.quantize(Z_e0, model.codebook.E)
    h0, Zq0 = grid.h_q, grid.Z_q
    E0 = model.codebook.E.value.copy()

    with dc.Tape() as tape:
        tape.watch(*params)
        xi, g2, _, Z_e = vq.vqvae_forward(model, tau, init)
        loss, _ = vq.vqvae_loss(qp, xi, tau, Z_e, model.codebook.E[g2.h_q], beta, model.cfg.recon_scale)
        grads = tape.backward(loss)
    g = np.concatenate([grads[p].ravel() for p in params])

    def surrogate(flat):
        _assign(params, flat)
        Ze = model.encode(tau).value
        p = model.decode(Zq0 + Ze - Z_e0).value
        pos = vq.positions_from_xi(qp, qp.xi(p, init)).value
        nb = len(tau)
        recon = np.sum(((pos - tau) / model.cfg.recon_scale) ** 2) / nb
        E = model.codebook.E.value
        dictionary = np.sum((Z_e0 - E[h0]) ** 2) / nb
        commit = beta * np.sum((Ze - E0[h0]) ** 2) / nb
        return recon + dictionary + commit

    x0 = _flat(params)
    fd = dc.finite_difference_grad(surrogate, x0.copy(), h)
    _assign(params, x0)
    return rel(g, fd)


# ---------------------------------------------------------------- unrolled filter

def small_filter_problem(seed: int, B: int = 2):
    rng = np.random.default_rng(seed)
    basis = tg.build_basis(**SMALL_BASIS)
    qp = tg.SetpointQP(basis)
    p = np.stack([rng.uniform(8, 20, B), rng.uniform(1, 11, B)], axis=1)
    init = np.zeros((B, 6))
    init[:, 1] = rng.uniform(1, 11, B)
    init[:, 2] = rng.uniform(8, 20, B)
    xi_star = qp.xi(p, init)
    N = basis.n + 1
    t = basis.times
    xo = rng.uniform(15, 40, (B, 2, 1)) + rng.uniform(0, 8, (B, 2, 1)) * t
    yo = np.broadcast_to(rng.uniform(0, 12, (B, 2, 1)), (B, 2, N)).copy()
    scene = sf.SceneConstraints(xo, yo, -1.0, 13.0)
    O = rng.normal(0, 1, (B, sf.OBS_DIM))
    return basis, xi_star, O, scene, init


def filter_case(seed: int, T: int = 5, coords: int = 40, h: float = 1e-6) -> float:
    """Training loss through a T-step unroll, checked on random weight coordinates."""
    rng = np.random.default_rng(seed + 10_000)
    basis, xi_star, O, scene, init = small_filter_problem(seed)
    cfg = sf.FilterConfig(hidden=8, seed=seed)
    net = sf.WarmStartNet(cfg, 2 * basis.nvar)
    params = net.params.values()
    for p in params:  # the zero-initialized head would hide most of the chain
        p.value = rng.normal(0, 0.3, p.shape)

    def loss_value():
        res = sf.run_filter(basis, xi_star, O, scene, net, init, T)
        return sf.filter_loss(xi_star, res, basis, scene, cfg.violation_weight)[0]

    with dc.Tape() as tape:
        tape.watch(*params)
        grads = tape.backward(loss_value())
    g = np.concatenate([grads[p].ravel() for p in params])
    x0 = _flat(params)
    pick = rng.choice(x0.size, size=min(coords, x0.size), replace=False)
    fd = np.zeros(pick.size)
    for j, i in enumerate(pick):
        for sign in (1.0, -1.0):
            x = x0.copy()
            x[i] += sign * h
            _assign(params, x)
            fd[j] += sign * loss_value().item() / (2 * h)
    _assign(params, x0)
    return rel(g[pick], fd)
