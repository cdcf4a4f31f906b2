"""Feed-forward tanh networks stored as flat name -> array dicts."""
import numpy as np

from . import diffcore as dc


def mlp_init(sizes, rng, prefix=""):
    """Uniform fan-in init; weights are (in, out) so a batch is ``x @ W + b``."""
    out = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        out[f"{prefix}W{i}"] = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(np.float32)
        out[f"{prefix}b{i}"] = np.zeros((1, n_out), dtype=np.float32)
    return out


def n_layers(p, prefix=""):
    return sum(1 for k in p if k.startswith(prefix + "W"))


def mlp_forward(p, x, prefix=""):
    """Plain numpy forward pass (no graph)."""
    h = np.asarray(x, dtype=np.float32)
    n = n_layers(p, prefix)
    for i in range(n):
        h = h @ p[f"{prefix}W{i}"] + p[f"{prefix}b{i}"]
        if i < n - 1:
            h = np.tanh(h)
    return h


def mlp_graph(nodes, x, prefix=""):
    """Same network built from Node parameters."""
    h = x
    n = n_layers(nodes, prefix)
    for i in range(n):
        h = dc.add(dc.matmul(h, nodes[f"{prefix}W{i}"]), nodes[f"{prefix}b{i}"])
        if i < n - 1:
            h = dc.tanh(h)
    return h


def subset(p, prefix):
    return {k: v for k, v in p.items() if k.startswith(prefix)}
