"""Central finite-difference checks of analytic gradients."""
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .config import tiny_config
from .dataio import gen_synthetic, make_rng

STEP = 1e-5


def rel_error(a, b):
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a = np.ravel(a)
    b = np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def numeric_grad(f, x, idx, step=STEP):
    """Central differences of scalar f() wrt flat entries ``idx`` of array x (in place)."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * step)
    return out


@dataclass
class GroupResult:
    name: str
    entry_error: float
    direction_error: float

    @property
    def error(self):
        return max(self.entry_error, self.direction_error)


def check_function(loss_of, tensors, entries=16, seed=0, step=STEP):
    """Compare tape gradients of ``loss_of()`` against finite differences.

    For every tensor, ``entries`` randomly chosen coordinates (all of them for
    small tensors) are perturbed one at a time, and one random direction is
    perturbed as a whole. Returns one GroupResult per tensor.
    """
    with ad.Tape() as tape:
        loss = loss_of()
    grads = tape.backward(loss, list(tensors.values()))

    def f():
        return float(loss_of().data)

    rng = np.random.default_rng(seed)
    results = []
    for (name, t), g in zip(tensors.items(), grads):
        size = t.data.size
        idx = np.arange(size) if size <= entries else rng.choice(size, entries, replace=False)
        num = numeric_grad(f, t.data, idx, step)
        e_err = rel_error(g.reshape(-1)[idx], num)
        v = rng.standard_normal(t.shape)
        v /= np.linalg.norm(v)
        base = t.data.copy()
        t.data[...] = base + step * v
        fp = f()
        t.data[...] = base - step * v
        fm = f()
        t.data[...] = base
        d_err = rel_error(np.vdot(g, v), (fp - fm) / (2 * step))
        results.append(GroupResult(name, e_err, d_err))
    return results


def model_gradcheck(task="classify", seed=0, entries=16, n_points=64):
    """Finite-difference check of every parameter tensor on the tiny config.

    Biases are jittered away from zero first. Runs in train mode with the
    dropout/FPS stream re-seeded on every call so each evaluation sees the
    same masks.
    """
    cfg = tiny_config(task=task)
    params = mdl.init_params(cfg, seed)
    # zero biases put every centroid's own (0, 0, 0) row exactly on a ReLU
    # hinge; move to a generic point where the loss is differentiable
    jitter = make_rng(seed + 7)
    for name, t in params.items():
        if name.endswith(".b"):
            t.data[...] = jitter.uniform(-0.1, 0.1, t.shape)
    kind = "sphere" if task == "classify" else "cylinder"
    cloud = gen_synthetic(kind, n_points, 0.02, seed + 11)
    coords = cloud.coords[None]
    if task == "classify":
        target = np.array([1])
    else:
        target = cloud.labels[None] % cfg.num_parts

    def loss_of():
        logits = mdl.forward(coords, cfg, params, "train", make_rng(seed + 101))
        return mdl.loss_fn(logits, target)

    return check_function(loss_of, params, entries, seed)
