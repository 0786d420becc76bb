"""Shared test utilities: synthetic optimizer trajectories with scripted
connectivity churn, plus the trajectory-recomputation oracle for the
growth-aware averaging rule."""

import numpy as np

from sparse_rnn.optimizers import OptimizerConfig, SntAsgd
from sparse_rnn.sparse_tensor import Coordinate


def run_snt_trajectory(shape=(6, 5), n_iters=60, n_events=6, seed=0,
                       trigger_at=5, lr=0.1):
    """Drive SntAsgd over random gradients with scripted remove/grow events.

    Returns (optimizer, params, masks, history, growth_stamp, trigger_start)
    where history[t] is the post-step, post-mask value array at 1-based
    iteration t, and growth_stamp[i,j] is the first iteration whose iterate
    belongs to the weight's current life (0 = active since the start).
    """
    rng = np.random.default_rng(seed)
    mask = (rng.random(shape) < 0.6).astype(np.float64)
    params = {"w": rng.normal(size=shape) * mask}
    masks = {"w": mask}
    opt = SntAsgd(OptimizerConfig(kind="snt_asgd", lr=lr, nonmono=0), params, masks)

    history = {}
    growth_stamp = np.zeros(shape, dtype=np.int64)
    trigger_start = None
    event_iters = set(np.linspace(8, n_iters - 4, n_events, dtype=int).tolist())

    for t in range(1, n_iters + 1):
        grads = {"w": rng.normal(size=shape) * mask}
        opt.step(params, grads)
        history[t] = params["w"].copy()

        if t == trigger_at:
            opt.check_trigger(1.0)
            opt.check_trigger(2.0)  # non-improving -> trigger (nonmono 0)
            assert opt.trigger_active
            trigger_start = t + 1

        if t in event_iters:
            k = 3
            active = np.argwhere(mask == 1.0)
            inactive = np.argwhere(mask == 0.0)
            dropped = active[rng.choice(len(active), size=min(k, len(active)), replace=False)]
            mask[dropped[:, 0], dropped[:, 1]] = 0.0
            params["w"][dropped[:, 0], dropped[:, 1]] = 0.0
            grown = inactive[rng.choice(len(inactive), size=min(k, len(inactive)), replace=False)]
            mask[grown[:, 0], grown[:, 1]] = 1.0
            params["w"][grown[:, 0], grown[:, 1]] = 0.0
            coords = [Coordinate(int(r), int(c)) for r, c in grown]
            opt.notify_growth("w", coords)
            growth_stamp[grown[:, 0], grown[:, 1]] = t + 1

    return opt, params, masks, history, growth_stamp, trigger_start


def recompute_averaged(history, mask, growth_stamp, trigger_start, params):
    """Independent oracle: mean of stored iterates over max(T_i, t0)..K per weight."""
    K = max(history)
    out = np.zeros_like(params)
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            if mask[i, j] == 0.0:
                continue
            start = max(int(growth_stamp[i, j]), trigger_start)
            vals = [history[t][i, j] for t in range(start, K + 1)]
            out[i, j] = float(np.mean(vals)) if vals else params[i, j]
    return out
