"""Observation-conditioned autoregressive prior over codebook index sequences.

A stack of masked causal 1-D convolutions over the length-L index sequence.
The first layer cannot see the current position, the rest can, so the logits
for position ``i`` depend only on ``h[:i]`` and the observation.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import diffcore as dc
from .nn import MLP, Adam, ParamSet, glorot

log = logging.getLogger(__name__)

OBS_DIM = 55
NUM_OBSTACLE_SLOTS = 10
SENSING_RANGE = 100.0
# lane-boundary distances, ego (v_lat, v_long, heading), then per obstacle (dx, dy, vx, vy, heading)
OBS_SCALE = np.concatenate([[8.0, 8.0, 5.0, 30.0, 0.5], np.tile([SENSING_RANGE, 8.0, 30.0, 5.0, 0.5], NUM_OBSTACLE_SLOTS)])


@dataclass
class SamplerConfig:
    L: int = 4
    K: int = 64
    channels: int = 64
    layers: int = 4
    kernel: int = 3
    cond_hidden: int = 64
    cond_dim: int = 32
    lr: float = 1e-3
    batch_size: int = 128
    steps: int = 3000
    holdout: float = 0.1
    seed: int = 0


class SamplerModel:
    def __init__(self, cfg: SamplerConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.params = ParamSet()
        C, k = cfg.channels, cfg.kernel
        self.conditioner = MLP(self.params, "cond", [OBS_DIM, cfg.cond_hidden, cfg.cond_dim], rng, "tanh")
        self.masks = []
        for layer in range(cfg.layers):
            c_in = cfg.K if layer == 0 else C
            self.params.add(f"conv{layer}.w", glorot(rng, k * c_in, C))
            self.params.add(f"conv{layer}.b", np.zeros(C))
            self.params.add(f"conv{layer}.cond", glorot(rng, cfg.cond_dim, C))
            mask = np.ones((k * c_in, C))
            if layer == 0:
                mask[(k - 1) * c_in:] = 0.0   # type A: current position hidden
            self.masks.append(mask)
        self.params.add("head.w", np.zeros((C, cfg.K)))
        self.params.add("head.b", np.zeros(cfg.K))

    def features(self, O) -> dc.Tensor:
        return self.conditioner(np.asarray(O, dtype=np.float64) / OBS_SCALE)

    def logits_from_features(self, h_q: np.ndarray, feat: dc.Tensor) -> dc.Tensor:
        cfg = self.cfg
        h_q = np.asarray(h_q)
        if h_q.shape[-1] != cfg.L:
            raise dc.ContractError(f"index sequence must have length {cfg.L}")
        if h_q.size and (h_q.min() < 0 or h_q.max() >= cfg.K):
            raise dc.ContractError("codebook index out of range")
        x = dc.Tensor(np.eye(cfg.K)[h_q])                      # (B, L, K)
        cond = dc.expand_dims(feat, -2)                        # (B, 1, cond_dim)
        for layer, mask in enumerate(self.masks):
            w = self.params[f"conv{layer}.w"] * mask
            y = _causal_unfold(x, cfg.kernel) @ w + self.params[f"conv{layer}.b"]
            y = y + cond @ self.params[f"conv{layer}.cond"]
            x = dc.relu(y)
        return x @ self.params["head.w"] + self.params["head.b"]

    def save(self, path) -> None:
        checkpoint.save(path, self.params.state(), {"kind": "sampler", "config": asdict(self.cfg)})

    @classmethod
    def load(cls, path) -> "SamplerModel":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "sampler":
            raise checkpoint.CheckpointError(f"{path} is not a sampler checkpoint")
        model = cls(SamplerConfig(**meta["config"]))
        model.params.load(tensors)
        return model


def _causal_unfold(x: dc.Tensor, k: int) -> dc.Tensor:
    """Concatenate copies shifted by ``k-1 .. 0`` positions along channels."""
    B, L, C = x.shape
    parts = []
    for shift in range(k - 1, -1, -1):
        if shift == 0:
            parts.append(x)
        elif shift >= L:
            parts.append(dc.Tensor(np.zeros((B, L, C))))
        else:
            parts.append(dc.concat([dc.Tensor(np.zeros((B, shift, C))), x[:, :L - shift, :]], axis=1))
    return dc.concat(parts, axis=-1)


def sampler_logits(model: SamplerModel, h_q, O) -> dc.Tensor:
    """``L x K`` logits (batched over leading axes of ``h_q``/``O``)."""
    h_q = np.asarray(h_q)
    O = np.asarray(O, dtype=np.float64)
    single = h_q.ndim == 1
    if single:
        h_q, O = h_q[None], O[None]
    out = model.logits_from_features(h_q, model.features(O))
    return out[0] if single else out


def sequence_nll(logits: dc.Tensor, h_q: np.ndarray) -> dc.Tensor:
    """Per-sample negative log-likelihood summed over positions, shape ``(B,)``."""
    lp = dc.log_softmax(logits, axis=-1)
    onehot = np.eye(logits.shape[-1])[np.asarray(h_q)]
    return -dc.sum(dc.sum(lp * onehot, axis=-1), axis=-1)


@dataclass
class SamplerHistory:
    loss: list = field(default_factory=list)
    heldout_perplexity: float = float("nan")
    initial_nll: float = float("nan")


def train_sampler(model: SamplerModel, obs: np.ndarray, h_q: np.ndarray, cfg: SamplerConfig | None = None,
                  log_every: int = 0):
    """Minimize mean per-position cross-entropy; returns ``(model, history)``."""
    cfg = cfg or model.cfg
    obs = np.asarray(obs, dtype=np.float64)
    h_q = np.asarray(h_q, dtype=np.int64)
    if h_q.max(initial=0) >= model.cfg.K or h_q.shape[-1] != model.cfg.L:
        raise dc.ContractError("dataset indices do not match the sampler's K/L")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(obs))
    n_hold = int(round(cfg.holdout * len(obs))) if len(obs) >= 10 else 0
    hold, train = order[:n_hold], order[n_hold:]
    opt = Adam(model.params.values(), lr=cfg.lr)
    hist = SamplerHistory()
    B = min(cfg.batch_size, len(train))
    L = model.cfg.L
    hist.initial_nll = float(np.mean(sequence_nll(sampler_logits(model, h_q[train], obs[train]), h_q[train]).value))
    for step in range(1, cfg.steps + 1):
        sel = train[rng.choice(len(train), size=B, replace=len(train) < B)]
        with dc.Tape() as tape:
            tape.watch(*model.params.values())
            nll = sequence_nll(sampler_logits(model, h_q[sel], obs[sel]), h_q[sel])
            loss = dc.mean(nll) * (1.0 / L)
            grads = tape.backward(loss)
        lv = loss.item()
        if not np.isfinite(lv):
            raise RuntimeError(f"sampler loss became {lv} at step {step}")
        opt.step(grads)
        hist.loss.append(lv)
        if log_every and step % log_every == 0:
            log.info("sampler step %d loss %.4f", step, lv)
    if n_hold:
        nll = sequence_nll(sampler_logits(model, h_q[hold], obs[hold]), h_q[hold]).value
        hist.heldout_perplexity = float(np.exp(np.mean(nll) / L))
    return model, hist


def sample_latents(model: SamplerModel, O, count: int, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
    """Draw ``count`` index sequences position by position.

    Entry ``j`` consumes uniforms ``j*L .. j*L+L-1`` of the stream seeded by
    ``seed``, so an entry's draw does not depend on ``count``.  A temperature
    of zero decodes greedily.
    """
    L, K = model.cfg.L, model.cfg.K
    O = np.asarray(O, dtype=np.float64)
    feat_one = model.features(O.reshape(1, -1)).value
    feat = dc.Tensor(np.broadcast_to(feat_one, (count, feat_one.shape[-1])))
    u = np.random.default_rng(seed).random((count, L))
    h = np.zeros((count, L), dtype=np.int64)
    for i in range(L):
        logits = model.logits_from_features(h, feat).value[:, i, :]
        if temperature <= 0:
            h[:, i] = np.argmax(logits, axis=-1)
            continue
        z = logits / temperature
        z = z - z.max(axis=-1, keepdims=True)
        prob = np.exp(z)
        cdf = np.cumsum(prob, axis=-1)
        cdf /= cdf[:, -1:]
        h[:, i] = np.minimum((cdf < u[:, i:i + 1]).sum(axis=-1), K - 1)
    return h
