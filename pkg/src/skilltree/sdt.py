"""Soft decision trees over observations with categorical leaves.

Inner node ``u = 2**i - 1 + j`` sits at layer ``i`` and position ``j``; its left
child is position ``2j`` of layer ``i + 1`` and the left branch is taken with
probability ``sigmoid(w_u . x + b_u)``. Leaf ``l`` emits ``softmax(leaf_logits[l])``. Gates see ``(x - offset) / scale``;
both are fixed per feature (identity by default) and are not trained.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ContractError, NumericFault


@dataclass
class SoftTree:
    weights: np.ndarray      # (2**depth - 1, obs_dim)
    biases: np.ndarray       # (2**depth - 1,)
    leaf_logits: np.ndarray  # (2**depth, n_skills)
    offset: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        if self.offset is None:
            self.offset = np.zeros(self.weights.shape[1], np.float32)
        if self.scale is None:
            self.scale = np.ones(self.weights.shape[1], np.float32)

    @property
    def depth(self):
        return int(np.log2(self.leaf_logits.shape[0]))

    @property
    def obs_dim(self):
        return self.weights.shape[1]

    @property
    def n_skills(self):
        return self.leaf_logits.shape[1]

    @property
    def n_inner(self):
        return self.weights.shape[0]

    @property
    def n_leaves(self):
        return self.leaf_logits.shape[0]

    def params(self):
        """Trainable arrays keyed by name; optimizer updates through them mutate the tree."""
        return {"W": self.weights, "b": self.biases, "leaf": self.leaf_logits}

    def arrays(self):
        return {**self.params(), "offset": self.offset, "scale": self.scale}

    @classmethod
    def from_params(cls, p):
        f = lambda k: None if k not in p else np.array(p[k], np.float32)  # noqa: E731
        return cls(f("W"), f("b"), f("leaf"), f("offset"), f("scale"))

    def copy(self):
        return SoftTree.from_params(self.arrays())

    def normalize(self, x):
        return (x - self.offset) * (np.float32(1) / self.scale)


def fit_normalizer(tree, xs):
    """Set the fixed input standardisation from observed data; constant features map to 0."""
    xs = np.asarray(xs, np.float32)
    sd = xs.std(axis=0, dtype=np.float64)
    varies = sd > 1e-6
    tree.offset = np.where(varies, xs.mean(axis=0, dtype=np.float64), xs[0]).astype(np.float32)
    tree.scale = np.where(varies, sd, 1.0).astype(np.float32)
    return tree


@dataclass
class DecisionPath:
    nodes: list = field(default_factory=list)      # inner node indices u, root first
    branches: list = field(default_factory=list)   # "left" / "right"
    probs: list = field(default_factory=list)      # probability of the branch taken
    node_weights: list = field(default_factory=list)
    leaf: int = 0
    leaf_dist: np.ndarray | None = None

    @property
    def probability(self):
        return float(np.prod(self.probs))

    @property
    def skill(self):
        return int(np.argmax(self.leaf_dist))


def init_tree(depth, obs_dim, n_skills, seed):
    if depth < 1 or obs_dim < 1 or n_skills < 2:
        raise ContractError(f"invalid tree dimensions depth={depth} obs_dim={obs_dim} K={n_skills}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(obs_dim)
    n_inner = 2 ** depth - 1
    w = rng.uniform(-bound, bound, size=(n_inner, obs_dim)).astype(np.float32)
    return SoftTree(w, np.zeros(n_inner, np.float32), np.zeros((2 ** depth, n_skills), np.float32))


def _as_batch(tree, x):
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != tree.obs_dim:
        raise ContractError(f"observation has {x.shape[1]} dims, tree expects {tree.obs_dim}")
    if not np.all(np.isfinite(x)):
        raise NumericFault("non-finite observation")
    return x, single


def _sigmoid(z):
    return (0.5 * (1.0 + np.tanh(0.5 * z))).astype(z.dtype)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _interleave(n):
    # [L0..L(n-1), R0..R(n-1)] -> [L0, R0, L1, R1, ...]
    return np.stack([np.arange(n), np.arange(n) + n], axis=1).ravel()


def gates(tree, x):
    """Left-branch probabilities, shape (batch, n_inner)."""
    x, _ = _as_batch(tree, x)
    return _sigmoid(tree.normalize(x) @ tree.weights.T + tree.biases)


def path_probs(tree, x):
    """Probability of reaching each leaf, shape (batch, n_leaves)."""
    g = gates(tree, x)
    reach = np.ones((g.shape[0], 1), dtype=np.float32)
    for i in range(tree.depth):
        gi = g[:, 2 ** i - 1: 2 ** (i + 1) - 1]
        reach = np.concatenate([reach * gi, reach * (1 - gi)], axis=1)[:, _interleave(2 ** i)]
    return reach


def tree_forward(tree, x):
    """Mixture distribution over skills and per-leaf path probabilities."""
    _, single = _as_batch(tree, x)
    reach = path_probs(tree, x)
    dist = reach @ _softmax(tree.leaf_logits)
    if single:
        return dist[0], reach[0]
    return dist, reach


def tree_graph(nodes, x, tree=None):
    """Differentiable mixture over skills.

    ``nodes`` holds W, b, leaf as Nodes and ``x`` is a (B, obs) Node; ``tree``
    supplies the fixed input standardisation.
    """
    w, b, leaf = nodes["W"], nodes["b"], nodes["leaf"]
    if tree is not None:
        x = dc.mul(dc.sub(x, dc.const(tree.offset[None])), dc.const(1.0 / tree.scale[None]))
    z = dc.add(dc.matmul(x, dc.transpose(w)), dc.reshape(b, (1, -1)))
    g = dc.sigmoid(z)
    depth = int(np.log2(leaf.shape[0]))
    reach = dc.const(np.ones((x.shape[0], 1)))
    for i in range(depth):
        gi = dc.gather(g, np.arange(2 ** i - 1, 2 ** (i + 1) - 1), axis=1)
        both = dc.concat([dc.mul(reach, gi), dc.mul(reach, 1.0 - gi)], axis=1)
        reach = dc.gather(both, _interleave(2 ** i), axis=1)
    return dc.matmul(reach, dc.softmax(leaf))


def greedy_path(tree, x):
    """Descend taking the branch with probability >= 0.5 at each node (ties go left)."""
    g = gates(tree, x)[0]
    path = DecisionPath()
    j = 0
    for i in range(tree.depth):
        u = 2 ** i - 1 + j
        p_left = float(g[u])
        path.nodes.append(u)
        path.node_weights.append(tree.weights[u].copy())
        if p_left >= 0.5:
            path.branches.append("left")
            path.probs.append(p_left)
            j = 2 * j
        else:
            path.branches.append("right")
            path.probs.append(1.0 - p_left)
            j = 2 * j + 1
    path.leaf = j
    path.leaf_dist = _softmax(tree.leaf_logits[j])
    return path


def greedy_skills(tree, xs):
    """Vectorised greedy-path skill choice for a batch of observations."""
    g = gates(tree, xs)
    j = np.zeros(g.shape[0], dtype=np.int64)
    for i in range(tree.depth):
        go_right = g[np.arange(g.shape[0]), 2 ** i - 1 + j] < 0.5
        j = 2 * j + go_right
    return np.argmax(tree.leaf_logits[j], axis=1), j


def best_path_leaf(tree, x):
    """Leaf with the largest root-to-leaf probability product (exhaustive)."""
    _, reach = tree_forward(tree, np.asarray(x, np.float32))
    return int(np.argmax(reach))


def sample_skill(tree, x, rng):
    dist, _ = tree_forward(tree, x)
    return int(rng.choice(tree.n_skills, p=_renorm(dist)))


def _renorm(p):
    p = np.asarray(p, dtype=np.float64)
    return p / p.sum()


def categorical_kl(p, q):
    p = np.asarray(p, np.float64)
    q = np.asarray(q, np.float64)
    lp = np.log(np.maximum(p, dc.LOG_FLOOR))
    lq = np.log(np.maximum(q, dc.LOG_FLOOR))
    return (p * (lp - lq)).sum(axis=-1)


def tree_kl(tree_a, tree_b, x):
    """KL(tree_a(x) || tree_b(x)) for one observation or a batch."""
    if tree_a.n_skills != tree_b.n_skills or tree_a.obs_dim != tree_b.obs_dim:
        raise ContractError("trees must share K and observation size")
    pa, _ = tree_forward(tree_a, x)
    pb, _ = tree_forward(tree_b, x)
    kl = np.maximum(categorical_kl(pa, pb), 0.0)
    return float(kl) if np.ndim(kl) == 0 else kl


def kl_graph(p, q):
    """Row-wise KL(p || q) as a (B, 1) Node; gradients reach both sides unless one is constant."""
    return dc.sum(dc.mul(p, dc.sub(dc.log(p), dc.log(q))), axis=1, keepdims=True)
