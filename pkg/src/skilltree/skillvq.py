"""Discrete skills learned from demonstration segments.

An encoder maps an ``h``-step state/action segment to ``z_e``; the nearest codebook
row becomes the skill embedding ``z_q``; a state-conditioned decoder reproduces
each action from ``(s_t, z_q)``; a soft-tree prior predicts the selected code from
the segment's first state. Actions are divided by ``action_scale`` inside the
model, so the decoder works in units of one maximal step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import sdt
from .envsuite import ACT_DIM, MAX_STEP, OBS_DIM
from .errors import ContractError, NumericFault
from .nets import mlp_forward, mlp_graph, mlp_init


@dataclass
class SkillModel:
    nets: dict            # "enc.*", "dec.*" and "codebook" arrays
    prior: sdt.SoftTree
    h: int
    action_scale: float = MAX_STEP

    @property
    def codebook(self):
        return self.nets["codebook"]

    @property
    def n_skills(self):
        return self.codebook.shape[0]

    @property
    def code_dim(self):
        return self.codebook.shape[1]

    @property
    def obs_dim(self):
        return self.prior.obs_dim

    @property
    def act_dim(self):
        return self.nets["dec.b" + str(_last_layer(self.nets, "dec."))].shape[1]

    def params(self):
        """Trainable arrays (views)."""
        out = dict(self.nets)
        out.update({f"prior.{k}": v for k, v in self.prior.params().items()})
        return out

    def arrays(self):
        out = dict(self.nets)
        out.update({f"prior.{k}": v for k, v in self.prior.arrays().items()})
        return out

    @classmethod
    def from_params(cls, p, h, action_scale=MAX_STEP):
        nets = {k: np.asarray(v, np.float32) for k, v in p.items() if not k.startswith("prior.")}
        prior = sdt.SoftTree.from_params({k[6:]: v for k, v in p.items() if k.startswith("prior.")})
        return cls(nets, prior, h, action_scale)

    def copy(self):
        return SkillModel({k: v.copy() for k, v in self.nets.items()}, self.prior.copy(), self.h,
                          self.action_scale)


def _last_layer(p, prefix):
    return max(int(k[len(prefix) + 1:]) for k in p if k.startswith(prefix + "W"))


def init_model(obs_dim=OBS_DIM, act_dim=ACT_DIM, h=10, n_skills=8, code_dim=8, depth=4,
               hidden=128, seed=0):
    if min(obs_dim, act_dim, h, code_dim, depth, hidden) < 1 or n_skills < 2:
        raise ContractError("invalid skill model dimensions")
    rng = np.random.default_rng(seed)
    nets = {}
    nets.update(mlp_init([h * (obs_dim + act_dim), hidden, hidden, code_dim], rng, "enc."))
    nets.update(mlp_init([obs_dim + code_dim, hidden, hidden, act_dim], rng, "dec."))
    nets["codebook"] = rng.uniform(-1.0 / n_skills, 1.0 / n_skills, size=(n_skills, code_dim)).astype(np.float32)
    prior = sdt.init_tree(depth, obs_dim, n_skills, rng.integers(2 ** 31))
    return SkillModel(nets, prior, h)


def quantize(codebook, z_e):
    """Nearest codebook row (Euclidean, ties to the smallest index) for one or many ``z_e``."""
    z = np.asarray(z_e)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != codebook.shape[1]:
        raise ContractError(f"z_e has {z.shape[1]} dims, codebook has {codebook.shape[1]}")
    if not np.all(np.isfinite(z)):
        raise NumericFault("non-finite encoder output")
    diff = z.astype(np.float64)[:, None, :] - codebook.astype(np.float64)[None, :, :]
    k = np.argmin((diff * diff).sum(axis=2), axis=1)
    zq = codebook[k]
    if single:
        return int(k[0]), zq[0]
    return k, zq


def encoder_input(model, states, actions):
    states = np.asarray(states, np.float32)
    actions = np.asarray(actions, np.float32)
    if states.ndim == 2:
        states, actions = states[None], actions[None]
    if states.shape[1] != model.h or actions.shape[1] != model.h:
        raise ContractError(f"segments must have length h={model.h}")
    b = states.shape[0]
    scaled = actions / np.float32(model.action_scale)
    return np.concatenate([states.reshape(b, -1), scaled.reshape(b, -1)], axis=1)


def encode(model, states, actions):
    return mlp_forward(model.nets, encoder_input(model, states, actions), "enc.")


def vq_objective(nodes, model, states, actions, beta):
    """Build the skill-learning loss from parameter Nodes.

    Returns ``(total, components, codes, z_e)``. Stop-gradients are realised with
    constants: the codebook term sees a constant encoder output and the
    commitment term a constant codebook row.
    """
    x = encoder_input(model, states, actions)
    b, h = x.shape[0], model.h
    states = np.asarray(states, np.float32).reshape(b, h, -1)
    target = (np.asarray(actions, np.float32).reshape(b, h, -1) / np.float32(model.action_scale)).reshape(b * h, -1)

    z_e = mlp_graph(nodes, dc.const(x), "enc.")
    k, _ = quantize(nodes["codebook"].value, z_e.value)
    k = np.atleast_1d(k)
    e = dc.gather(nodes["codebook"], k, axis=0)
    z_q = dc.straight_through(z_e, e.value)

    dec_in = dc.concat([dc.const(states.reshape(b * h, -1)), dc.gather(z_q, np.repeat(np.arange(b), h), axis=0)])
    pred = mlp_graph(nodes, dec_in, "dec.")
    n_out = target.shape[1]
    recon = dc.scale(dc.mse(pred, dc.const(target)), h * n_out)

    d = e.shape[1]
    codebook_term = dc.scale(dc.mse(e, dc.stop_gradient(z_e)), d)
    commit = dc.scale(dc.mse(z_e, dc.const(e.value)), beta * d)

    prior_nodes = {"W": nodes["prior.W"], "b": nodes["prior.b"], "leaf": nodes["prior.leaf"]}
    probs = sdt.tree_graph(prior_nodes, dc.const(states[:, 0, :]), model.prior)
    onehot = np.eye(probs.shape[1], dtype=np.float32)[k]
    prior_term = dc.scale(dc.sum(dc.mul(dc.log(probs), dc.const(onehot))), -1.0 / b)

    total = recon + codebook_term + commit + prior_term
    comps = {"reconstruction": recon, "codebook": codebook_term, "commitment": commit, "prior": prior_term}
    return total, comps, k, z_e


def vq_loss(model, states, actions, beta=0.25):
    """Total loss and its four components (batch means) for one segment or a batch."""
    if beta <= 0:
        raise ContractError("beta must be positive")
    nodes = dc.params(model.params())
    total, comps, _, _ = vq_objective(nodes, model, states, actions, beta)
    return float(total.value), {k: float(v.value) for k, v in comps.items()}


def decode(model, states, z_q):
    """Decoder output in model units (before scaling and clipping)."""
    s = np.atleast_2d(np.asarray(states, np.float32))
    z = np.atleast_2d(np.asarray(z_q, np.float32))
    if z.shape[0] == 1 and s.shape[0] > 1:
        z = np.repeat(z, s.shape[0], axis=0)
    return mlp_forward(model.nets, np.concatenate([s, z], axis=1), "dec.")


def low_level_action(model, s, z_q):
    s = np.asarray(s, np.float32)
    z_q = np.asarray(z_q, np.float32)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(z_q))):
        raise NumericFault("non-finite decoder input")
    scale = np.float32(model.action_scale)
    a = np.clip(decode(model, s, z_q) * scale, -scale, scale)
    return a[0] if s.ndim == 1 else a


def prior_predict(model, s):
    s = np.asarray(s, np.float32)
    if s.shape[-1] != model.obs_dim:
        raise ContractError(f"state has {s.shape[-1]} dims, prior expects {model.obs_dim}")
    return sdt.tree_forward(model.prior, s)[0]


class SegmentIndex:
    """All (trajectory, start) pairs of length-``h`` windows, backed by flat arrays."""

    def __init__(self, trajs, h):
        usable = [t for t in trajs if len(t) >= h]
        if not usable:
            raise ContractError(f"no trajectory has length >= h={h}")
        self.states = np.concatenate([t.states for t in usable])
        self.actions = np.concatenate([t.actions for t in usable])
        offsets = np.cumsum([0] + [len(t) for t in usable])[:-1]
        self.starts = np.concatenate([o + np.arange(len(t) - h + 1) for o, t in zip(offsets, usable)])
        self.h = h

    def __len__(self):
        return len(self.starts)

    def batch(self, idx):
        rows = self.starts[idx][:, None] + np.arange(self.h)
        return self.states[rows], self.actions[rows]


def evaluate_segments(model, segments):
    """Held-out reconstruction MSE (raw action units squared) and prior top-1 agreement."""
    states, actions = segments.batch(np.arange(len(segments)))
    z_e = encode(model, states, actions)
    k, zq = quantize(model.codebook, z_e)
    b, h = states.shape[:2]
    pred = decode(model, states.reshape(b * h, -1), np.repeat(zq, h, axis=0)) * np.float32(model.action_scale)
    mse = float(np.mean((pred - actions.reshape(b * h, -1)) ** 2))
    prior_k = np.argmax(sdt.tree_forward(model.prior, states[:, 0, :])[0], axis=1)
    return {"mse": mse, "agreement": float(np.mean(prior_k == k)), "codes": np.bincount(k, minlength=model.n_skills)}


def train_skills(trajs, h=10, n_skills=8, code_dim=8, beta=0.25, epochs=50, batch=32, lr=1e-3,
                 seed=0, depth=4, hidden=128, holdout=0.1, prior_lr=3e-2, codebook_lr=1e-2, action_scale=MAX_STEP, rng=None,
                 reinit_dead=True):
    """Fit encoder, codebook, decoder and prior jointly; returns ``(model, history)``.

    The prior tree has its own Adam learning rate; its input standardisation is
    fixed from the training states, and the codebook starts at encoder outputs
    of the first batch. Codes unused for a whole epoch restart at random encoder
    outputs of that epoch unless ``reinit_dead`` is off. Pass ``rng`` to draw
    from an existing generator instead of ``seed``.
    """
    if len(trajs) == 0:
        raise ContractError("empty dataset")
    if beta <= 0 or epochs < 0 or batch < 1:
        raise ContractError("invalid training configuration")
    rng = rng if rng is not None else np.random.default_rng(seed)
    order = rng.permutation(len(trajs))
    n_hold = int(round(holdout * len(trajs))) if len(trajs) > 1 else 0
    held = [trajs[i] for i in order[:n_hold]]
    train = [trajs[i] for i in order[n_hold:]]
    segs = SegmentIndex(train, h)
    held_segs = SegmentIndex(held, h) if any(len(t) >= h for t in held) else None

    obs_dim, act_dim = segs.states.shape[1], segs.actions.shape[1]
    model = init_model(obs_dim, act_dim, h, n_skills, code_dim, depth, hidden, rng.integers(2 ** 31))
    model.action_scale = action_scale
    sdt.fit_normalizer(model.prior, segs.states)
    states, actions = segs.batch(rng.integers(len(segs), size=max(batch, n_skills)))
    z0 = encode(model, states, actions)
    model.codebook[:] = z0[rng.choice(len(z0), size=n_skills, replace=False)]

    params = model.params()
    groups = [(dc.Optimizer("adam", lr), [k for k in params if not k.startswith("prior.") and k != "codebook"]),
              (dc.Optimizer("adam", codebook_lr or lr), ["codebook"]),
              (dc.Optimizer("adam", prior_lr), [k for k in params if k.startswith("prior.")])]
    n_batches = max(1, int(np.ceil(len(segs) / batch)))
    history = []
    for epoch in range(epochs):
        usage = np.zeros(n_skills, np.int64)
        sums = dict.fromkeys(("loss", "reconstruction", "codebook", "commitment", "prior"), 0.0)
        z_pool = []
        for _ in range(n_batches):
            idx = rng.integers(len(segs), size=batch)
            states, actions = segs.batch(idx)
            nodes = dc.params(params)
            total, comps, k, z_e = vq_objective(nodes, model, states, actions, beta)
            grads = dc.collect(nodes, dc.backward(total))
            for opt, keys in groups:
                opt.step(params, {k: grads[k] for k in keys})
            usage += np.bincount(k, minlength=n_skills)
            z_pool.append(z_e.value)
            sums["loss"] += float(total.value)
            for name, node in comps.items():
                sums[name] += float(node.value)
        dead = np.flatnonzero(usage == 0) if reinit_dead else np.zeros(0, np.int64)
        if len(dead):
            pool = np.concatenate(z_pool)
            model.codebook[dead] = pool[rng.choice(len(pool), size=len(dead), replace=False)]
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "reinit": int(len(dead)),
               "codes_used": int((usage > 0).sum()), "dominant": int(np.argmax(usage))}
        if held_segs is not None:
            ev = evaluate_segments(model, held_segs)
            row["heldout_mse"] = ev["mse"]
            row["heldout_agreement"] = ev["agreement"]
        history.append(row)
    return model, history

