import numpy as np

from dualteacher.model import EncoderParams, PrototypeSet

FD_STEP = 1e-6


def rand_params(rng, D=4, H=3, F=3, scale=1.0):
    return EncoderParams(
        scale * rng.standard_normal((H, D)),
        scale * rng.standard_normal(H),
        scale * rng.standard_normal((F, H)),
        scale * rng.standard_normal(F),
    )


def rand_units(rng, n, F):
    U = rng.standard_normal((n, F))
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def rand_protos(rng, L, F, first_label=0):
    return PrototypeSet(rand_units(rng, L, F), tuple(range(first_label, first_label + L)))


def as_lists(params):
    return [a.tolist() for a in params.arrays()]


def fd_grad(loss_of_params, params, h=FD_STEP):
    """Central differences of a scalar loss w.r.t. every parameter entry."""
    theta = params.flat()
    g = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (loss_of_params(params.from_flat(up)) - loss_of_params(params.from_flat(dn))) / (2 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    """Largest entrywise |a - n| / max(|a|, |n|), with entries far below the
    gradient's scale measured against ``floor`` times that scale instead."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom))


SMALL_INI = """
[experiment]
domains = A, B, C
seeds = 0, 1
hidden_dim = 12
feature_dim = 6
input_dim = 8

[optimizer]
base_lr = 1e-2

[training]
epochs = 3
task_batch = 16
ref_batch = 16

[pretrain]
epochs = 3
samples_per_class = 12

[pool]
size = 120

[domain_defaults]
num_classes = 3
samples_per_class = 20
center_scale = 3.0
noise_sigma = 0.3

[domain.A]
[domain.B]
[domain.C]
"""


def small_config(**changes):
    """Three tiny domains; a full sequence trains in well under a second."""
    from dualteacher.config import parse_config

    cfg = parse_config(SMALL_INI)
    return cfg.with_(**changes) if changes else cfg


def normwise_rel_err(analytic, numeric):
    """|a - n|_inf / |n|_inf for one gradient vector."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-300))
