"""VQ-VAE whose decoder emits setpoints and reconstructs through the setpoint QP.

Encoder: flattened expert trajectory -> ``Z_e`` (L x D).  Quantization snaps
each row to its nearest codebook vector, the decoder maps the quantized grid
to ``p = (v_d, y_d)``, and :class:`~vqplan.trajgen.SetpointQP` turns ``p`` and
the boundary state into polynomial coefficients.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import diffcore as dc
from .nn import MLP, Adam, ParamSet, cosine_lr
from .trajgen import SetpointQP, Trajectory

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class VqVaeConfig:
    L: int = 4
    D: int = 8
    K: int = 64
    hidden: int = 256
    beta: float = 0.25
    lr: float = 1e-3
    batch_size: int = 128
    steps: int = 3000
    dead_after: int = 200
    reseed_noise: float = 0.05
    recon_scale: float = 10.0
    pos_scale: tuple = (300.0, 8.0)
    y_offset: float = 6.0
    v_mid: float = 15.0
    v_half: float = 15.0
    reseed_until: float = 0.7
    seed: int = 0


@dataclass
class Codebook:
    E: dc.Tensor
    usage: np.ndarray = field(default=None)
    last_used: np.ndarray = field(default=None)

    def __post_init__(self):
        K = self.E.shape[0]
        if K < 1:
            raise dc.ContractError("codebook needs at least one row")
        if self.usage is None:
            self.usage = np.zeros(K, dtype=np.int64)
        if self.last_used is None:
            self.last_used = np.zeros(K, dtype=np.int64)

    @property
    def K(self) -> int:
        return self.E.shape[0]


@dataclass
class LatentGrid:
    Z_e: np.ndarray
    Z_q: np.ndarray
    h_q: np.ndarray


def quantize(Z_e, E) -> LatentGrid:
    """Nearest-codebook assignment per latent row; ties go to the lowest index."""
    Ze = np.asarray(Z_e.value if isinstance(Z_e, dc.Tensor) else Z_e, dtype=np.float64)
    Ev = np.asarray(E.value if isinstance(E, dc.Tensor) else E, dtype=np.float64)
    if Ze.shape[-1] != Ev.shape[-1]:
        raise dc.ContractError(f"latent dim {Ze.shape[-1]} does not match codebook dim {Ev.shape[-1]}")
    diff = Ze[..., None, :] - Ev
    dist = np.einsum("...kd,...kd->...k", diff, diff)
    h = np.argmin(dist, axis=-1)
    return LatentGrid(Ze, Ev[h], h)


class VqVaeModel:
    def __init__(self, cfg: VqVaeConfig, qp: SetpointQP, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.qp = qp
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        N = qp.basis.n + 1
        self.params = ParamSet()
        H = cfg.hidden
        self.encoder = MLP(self.params, "enc", [2 * N, H, H, cfg.L * cfg.D], rng, "tanh")
        self.decoder = MLP(self.params, "dec", [cfg.L * cfg.D, H, H, 2], rng, "tanh")
        self.codebook = Codebook(self.params.add("codebook", rng.normal(0.0, 1.0, (cfg.K, cfg.D))))

    @property
    def beta(self) -> float:
        return self.cfg.beta

    def normalize(self, tau: np.ndarray) -> np.ndarray:
        tau = np.asarray(tau, dtype=np.float64)
        N = self.qp.basis.n + 1
        sx, sy = self.cfg.pos_scale
        out = tau.copy()
        out[..., :N] /= sx
        out[..., N:] = (out[..., N:] - self.cfg.y_offset) / sy
        return out

    def encode(self, tau) -> dc.Tensor:
        x = self.normalize(tau)
        z = self.encoder(x)
        return dc.reshape(z, z.shape[:-1] + (self.cfg.L, self.cfg.D))

    def decode(self, Z_q) -> dc.Tensor:
        Z_q = dc.as_tensor(Z_q)
        o = self.decoder(dc.reshape(Z_q, Z_q.shape[:-2] + (self.cfg.L * self.cfg.D,)))
        mid = np.array([self.cfg.v_mid, self.cfg.y_offset])
        half = np.array([self.cfg.v_half, self.cfg.pos_scale[1]])
        return o * half + mid

    def decode_indices(self, h_q) -> np.ndarray:
        """Setpoints for integer index sequences ``(..., L)``."""
        h = np.asarray(h_q, dtype=np.int64)
        return self.decode(self.codebook.E.value[h]).value

    def state(self) -> dict:
        return self.params.state()

    def save(self, path) -> None:
        meta = {"kind": "vqvae", "config": _jsonable(asdict(self.cfg)),
                "basis": [self.qp.basis.n, self.qp.basis.m, self.qp.basis.dt], "gains": list(self.qp.gains)}
        tensors = self.params.state()
        tensors["codebook_usage"] = self.codebook.usage.astype(np.float64)
        checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path, qp: SetpointQP) -> "VqVaeModel":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "vqvae":
            raise checkpoint.CheckpointError(f"{path} is not a VQ-VAE checkpoint")
        cfg = VqVaeConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
        model = cls(cfg, qp)
        model.params.load(tensors)
        model.codebook.usage = tensors["codebook_usage"].astype(np.int64)
        return model


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def flatten_waypoints(waypoints: np.ndarray) -> np.ndarray:
    """``(..., N, 2)`` waypoints to ``(..., 2N)`` as ``[x_0..x_n, y_0..y_n]``."""
    w = np.asarray(waypoints)
    return np.concatenate([w[..., 0], w[..., 1]], axis=-1)


def vqvae_forward(model: VqVaeModel, tau_e, initial):
    """Encode, quantize (straight-through), decode to setpoints, solve the QP.

    Returns ``(xi, grid, p, Z_e)``; ``xi`` and ``p`` are tensors so the
    reconstruction loss reaches the encoder and decoder weights.
    """
    tau_e = np.asarray(tau_e, dtype=np.float64)
    N = model.qp.basis.n + 1
    if tau_e.shape[-1] != 2 * N:
        raise dc.ContractError(f"expert trajectory needs {2 * N} coordinates, got {tau_e.shape[-1]}")
    Z_e = model.encode(tau_e)
    grid = quantize(Z_e, model.codebook.E)
    Z_st = dc.st_passthrough(dc.Tensor(grid.Z_q), Z_e)
    p = model.decode(Z_st)
    xi = model.qp.xi(p, initial)
    return xi, grid, p, Z_e


def positions_from_xi(qp: SetpointQP, xi) -> dc.Tensor:
    """Block-diagonal basis applied to ``xi``; flattened like :func:`flatten_waypoints`."""
    nv = qp.basis.nvar
    W = qp.basis.W
    xi = dc.as_tensor(xi)
    return dc.concat([xi[..., :nv] @ W.T, xi[..., nv:] @ W.T], axis=-1)


def vqvae_loss(model_or_qp, xi, tau_e, Z_e, E_used, beta: float, recon_scale: float = 1.0):
    """Reconstruction + dictionary + commitment terms, averaged over the batch.

    ``E_used`` holds the selected codebook rows as a tensor gathered from the
    codebook, so the dictionary term is the only path into the codebook.
    Returns ``(total, (recon, dictionary, commitment))``.
    """
    qp = model_or_qp.qp if isinstance(model_or_qp, VqVaeModel) else model_or_qp
    Z_e, E_used = dc.as_tensor(Z_e), dc.as_tensor(E_used)
    pos = positions_from_xi(qp, xi)
    r = (pos - np.asarray(tau_e)) * (1.0 / recon_scale)
    batch_axes = tuple(range(r.ndim - 1))
    nb = int(np.prod([r.shape[a] for a in batch_axes])) if batch_axes else 1
    recon = dc.sum(dc.square(r)) * (1.0 / nb)
    dictionary = dc.sum(dc.square(dc.stop_gradient(Z_e) - E_used)) * (1.0 / nb)
    commit = dc.sum(dc.square(Z_e - dc.stop_gradient(E_used))) * (beta / nb)
    return recon + dictionary + commit, (recon, dictionary, commit)


@dataclass
class VqVaeHistory:
    loss: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    reseeded: int = 0
    rmse: float = float("nan")


def reconstruction_rmse(model: VqVaeModel, taus: np.ndarray, initials: np.ndarray, chunk: int = 1024) -> float:
    """Per-waypoint Euclidean RMSE (metres) of the full encode/decode/QP map."""
    N = model.qp.basis.n + 1
    total, count = 0.0, 0
    for s in range(0, len(taus), chunk):
        xi, *_ = vqvae_forward(model, taus[s:s + chunk], initials[s:s + chunk])
        pos = positions_from_xi(model.qp, xi.value).value
        d = pos - taus[s:s + chunk]
        total += float(np.sum(d[:, :N] ** 2 + d[:, N:] ** 2))
        count += d.shape[0] * N
    return float(np.sqrt(total / count))


def train_vqvae(taus: np.ndarray, initials: np.ndarray, cfg: VqVaeConfig, qp: SetpointQP,
                model: VqVaeModel | None = None, log_every: int = 0):
    """Minibatch Adam on the three-term loss.  Returns ``(model, history)``."""
    taus = np.asarray(taus, dtype=np.float64)
    initials = np.asarray(initials, dtype=np.float64)
    if len(taus) == 0:
        raise dc.ContractError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = model or VqVaeModel(cfg, qp, rng)
    cb = model.codebook
    # data-dependent codebook init keeps early assignments spread out
    idx = rng.integers(0, len(taus), size=cfg.K)
    z0 = model.encode(taus[idx]).value.reshape(cfg.K, cfg.L, cfg.D)[np.arange(cfg.K), rng.integers(0, cfg.L, cfg.K)]
    cb.E.value = z0 + cfg.reseed_noise * rng.normal(size=z0.shape)
    opt = Adam(model.params.values(), lr=cfg.lr)
    hist = VqVaeHistory()
    B = min(cfg.batch_size, len(taus))
    for step in range(1, cfg.steps + 1):
        sel = rng.choice(len(taus), size=B, replace=len(taus) < B)
        opt.lr = cosine_lr(cfg.lr, step, cfg.steps)
        with dc.Tape() as tape:
            tape.watch(*model.params.values())
            xi, grid, _, Z_e = vqvae_forward(model, taus[sel], initials[sel])
            E_used = cb.E[grid.h_q]
            loss, (recon, *_) = vqvae_loss(qp, xi, taus[sel], Z_e, E_used, cfg.beta, cfg.recon_scale)
            grads = tape.backward(loss)
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingDivergence(f"VQ-VAE loss became {lv} at step {step}")
        opt.step(grads)
        used = np.unique(grid.h_q)
        cb.usage += np.bincount(grid.h_q.reshape(-1), minlength=cb.K)
        cb.last_used[used] = step
        dead = np.flatnonzero(step - cb.last_used >= cfg.dead_after)
        if dead.size and step <= cfg.reseed_until * cfg.steps:
            pool = Z_e.value.reshape(-1, cfg.D)
            pick = pool[rng.integers(0, len(pool), size=dead.size)]
            E = cb.E.value.copy()
            E[dead] = pick + cfg.reseed_noise * rng.normal(size=pick.shape)
            cb.E.value = E
            cb.last_used[dead] = step
            hist.reseeded += int(dead.size)
        hist.loss.append(lv)
        hist.recon.append(recon.item())
        if log_every and step % log_every == 0:
            log.info("vqvae step %d loss %.5f recon %.5f", step, lv, recon.item())
    hist.rmse = reconstruction_rmse(model, taus, initials)
    return model, hist


def decode_to_trajectory(model: VqVaeModel, h_q, initial) -> tuple[np.ndarray, Trajectory]:
    p = model.decode_indices(h_q)
    return p, model.qp.trajectory(p, initial)
