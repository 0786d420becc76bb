import numpy as np
import pytest

from helpers import recompute_averaged, run_snt_trajectory
from sparse_rnn.optimizers import (
    Adam,
    MomentumSgd,
    NtAsgd,
    OptimizerConfig,
    OptimizerError,
    Sgd,
    SntAsgd,
    make_optimizer,
)
from sparse_rnn.sparse_tensor import Coordinate


def make(kind, lr, masks=None, params=None, **kw):
    params = params if params is not None else {"w": np.array([[1.0]])}
    masks = masks if masks is not None else {"w": None}
    return make_optimizer(OptimizerConfig(kind=kind, lr=lr, **kw), params, masks), params


def test_plain_sgd_hand_value():
    opt, params = make("sgd", lr=0.1)
    opt.step(params, {"w": np.array([[0.5]])})
    assert params["w"][0, 0] == pytest.approx(0.95, abs=1e-15)
    assert opt.iteration == 1


def test_adam_first_step_magnitude():
    opt, params = make("adam", lr=0.001)
    w0 = params["w"].copy()
    opt.step(params, {"w": np.array([[1.0]])})
    # bias-corrected first step: mhat=1, vhat=1 -> update = lr/(1+eps) ~= lr
    update = float((w0 - params["w"])[0, 0])
    assert update == pytest.approx(0.001, rel=1e-6)


def test_adam_two_steps_hand_recurrence():
    opt, params = make("adam", lr=0.01)
    g1, g2 = 1.0, -0.5
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = v = 0.0
    w = 1.0
    for t, g in ((1, g1), (2, g2)):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= 0.01 * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    opt.step(params, {"w": np.array([[g1]])})
    opt.step(params, {"w": np.array([[g2]])})
    assert params["w"][0, 0] == pytest.approx(w, abs=1e-14)


def test_momentum_accumulates():
    opt, params = make("momentum_sgd", lr=0.1, momentum=0.9)
    opt.step(params, {"w": np.array([[1.0]])})
    opt.step(params, {"w": np.array([[1.0]])})
    # buf1 = 1, buf2 = 1.9 -> w = 1 - 0.1*(1 + 1.9)
    assert params["w"][0, 0] == pytest.approx(1.0 - 0.1 * 2.9, abs=1e-14)


def test_non_finite_gradients_abort():
    opt, params = make("sgd", lr=0.1)
    with pytest.raises(OptimizerError, match="w"):
        opt.step(params, {"w": np.array([[np.nan]])})
    with pytest.raises(OptimizerError):
        opt.step(params, {"w": np.array([[np.inf]])})
    assert opt.iteration == 0


def test_step_keeps_masked_positions_zero():
    mask = np.array([[1.0, 0.0]])
    params = {"w": np.array([[0.5, 0.0]])}
    for kind in ("sgd", "momentum_sgd", "adam", "nt_asgd", "snt_asgd"):
        p = {"w": params["w"].copy()}
        opt, _ = make(kind, lr=0.1, masks={"w": mask}, params=p)
        opt.buffers = getattr(opt, "buffers", None)
        # seed stale state at the masked position, as if it was active before
        if isinstance(opt, MomentumSgd):
            opt.buffers["w"][0, 1] = 3.0
        if isinstance(opt, Adam):
            opt.m["w"][0, 1] = 3.0
            opt.v["w"][0, 1] = 1.0
        opt.step(p, {"w": np.array([[0.2, 0.0]])})
        assert p["w"][0, 1] == 0.0, kind


# ---------------------------------------------------------------------------
# trigger behaviour
# ---------------------------------------------------------------------------

def test_trigger_fires_on_pinned_history():
    opt, _ = make("nt_asgd", lr=1.0, nonmono=5)
    history = [100, 99, 98, 98.5, 98.6, 98.7, 98.8, 98.9]
    fired_at = None
    for i, v in enumerate(history, 1):
        if opt.check_trigger(v) and fired_at is None:
            fired_at = i
    assert fired_at == 8


def test_trigger_never_fires_when_improving():
    opt, _ = make("snt_asgd", lr=1.0, nonmono=5)
    for v in np.linspace(100, 50, 30):
        assert not opt.check_trigger(float(v))


def test_trigger_degenerate_window():
    opt, _ = make("nt_asgd", lr=1.0, nonmono=0)
    assert not opt.check_trigger(10.0)
    assert opt.check_trigger(10.0)  # first non-improving check


def test_trigger_is_monotone():
    opt, _ = make("snt_asgd", lr=1.0, nonmono=0)
    opt.check_trigger(5.0)
    opt.check_trigger(6.0)
    assert opt.trigger_active
    for v in (1.0, 0.5, 0.1):
        opt.check_trigger(v)
        assert opt.trigger_active


def test_adam_lr_drop_schedule():
    opt, params = make("adam", lr=0.008)
    opt.check_trigger(10.0)
    opt.check_trigger(11.0)  # bad 1
    assert opt.lr == 0.008
    opt.check_trigger(11.0)  # bad 2 -> halve
    assert opt.lr == pytest.approx(0.004)
    opt.check_trigger(11.0)  # counter reset, bad 1 again
    assert opt.lr == pytest.approx(0.004)
    opt.check_trigger(11.0)
    assert opt.lr == pytest.approx(0.002)


def test_momentum_lr_drop_schedule():
    opt, params = make("momentum_sgd", lr=2.0)
    opt.check_trigger(10.0)
    opt.check_trigger(10.5)  # one bad check -> divide by 1.33
    assert opt.lr == pytest.approx(2.0 / 1.33)


# ---------------------------------------------------------------------------
# averaging semantics
# ---------------------------------------------------------------------------

def test_snt_equals_plain_sgd_before_trigger():
    rng = np.random.default_rng(0)
    mask = (rng.random((4, 4)) < 0.5).astype(float)
    w0 = rng.normal(size=(4, 4)) * mask
    p_sgd = {"w": w0.copy()}
    p_snt = {"w": w0.copy()}
    sgd, _ = make("sgd", lr=0.3, masks={"w": mask}, params=p_sgd)
    snt, _ = make("snt_asgd", lr=0.3, masks={"w": mask}, params=p_snt)
    for _ in range(10):
        g = rng.normal(size=(4, 4)) * mask
        sgd.step(p_sgd, {"w": g.copy()})
        snt.step(p_snt, {"w": g.copy()})
    assert np.array_equal(p_sgd["w"], p_snt["w"])
    view = snt.averaged_parameters(p_snt, {"w": mask})
    assert np.array_equal(view["w"], p_snt["w"])  # identity before trigger


def test_growth_window_mean_hand_example():
    # weight grown after iteration 2; iterates at steps 3..5 are 1.0, 2.0, 3.0
    mask = np.array([[1.0]])
    params = {"w": np.array([[0.0]])}
    opt, _ = make("snt_asgd", lr=1.0, masks={"w": mask}, params=params, nonmono=0)
    opt.check_trigger(1.0)
    opt.check_trigger(2.0)
    assert opt.trigger_active

    def step_to(value):
        g = {"w": params["w"] - value}  # lr=1: w <- w - (w - value) = value
        opt.step(params, g)

    step_to(5.0)
    step_to(7.0)
    opt.notify_growth("w", [Coordinate(0, 0)])
    for v in (1.0, 2.0, 3.0):
        step_to(v)
    view = opt.averaged_parameters(params, {"w": mask})
    assert view["w"][0, 0] == pytest.approx(2.0, abs=1e-15)


def test_masked_weight_averages_to_zero():
    mask = np.array([[1.0, 1.0]])
    params = {"w": np.array([[1.0, 2.0]])}
    opt, _ = make("snt_asgd", lr=0.1, masks={"w": mask}, params=params, nonmono=0)
    opt.check_trigger(1.0)
    opt.check_trigger(2.0)
    for _ in range(3):
        opt.step(params, {"w": np.array([[0.1, 0.1]]) * mask})
    mask[0, 1] = 0.0
    params["w"][0, 1] = 0.0
    opt.step(params, {"w": np.array([[0.1, 0.0]])})
    view = opt.averaged_parameters(params, {"w": mask})
    assert view["w"][0, 1] == 0.0


def test_never_regrown_matches_standard_asgd():
    rng = np.random.default_rng(7)
    mask = (rng.random((5, 3)) < 0.7).astype(float)
    w0 = rng.normal(size=(5, 3)) * mask
    p_nt = {"w": w0.copy()}
    p_snt = {"w": w0.copy()}
    nt, _ = make("nt_asgd", lr=0.2, masks={"w": mask}, params=p_nt, nonmono=0)
    snt, _ = make("snt_asgd", lr=0.2, masks={"w": mask}, params=p_snt, nonmono=0)
    for opt in (nt, snt):
        opt.check_trigger(1.0)
        opt.check_trigger(2.0)
    for _ in range(20):
        g = rng.normal(size=(5, 3)) * mask
        nt.step(p_nt, {"w": g.copy()})
        snt.step(p_snt, {"w": g.copy()})
    v_nt = nt.averaged_parameters(p_nt)["w"] * mask  # restrict to active coords
    v_snt = snt.averaged_parameters(p_snt, {"w": mask})["w"]
    assert np.allclose(v_nt, v_snt, atol=1e-15, rtol=0)


def test_incremental_average_matches_trajectory_oracle():
    opt, params, masks, history, stamps, t0 = run_snt_trajectory(
        shape=(6, 5), n_iters=60, n_events=6, seed=3)
    view = opt.averaged_parameters(params, masks)["w"]
    oracle = recompute_averaged(history, masks["w"], stamps, t0, params["w"])
    assert np.max(np.abs(view - oracle)) <= 1e-12
    assert np.all(view[masks["w"] == 0.0] == 0.0)


def test_notify_growth_unknown_tensor():
    opt, params = make("snt_asgd", lr=0.1, masks={"w": np.ones((1, 1))})
    with pytest.raises(OptimizerError):
        opt.notify_growth("nope", [Coordinate(0, 0)])


def test_state_dict_roundtrip():
    opt, params, masks, *_ = run_snt_trajectory(n_iters=20, n_events=2, seed=5)
    scalars, arrays = opt.state_dict()
    clone = SntAsgd(opt.config, params, masks)
    clone.load_state_dict(scalars, arrays)
    v1 = opt.averaged_parameters(params, masks)["w"]
    v2 = clone.averaged_parameters(params, masks)["w"]
    assert np.array_equal(v1, v2)
    assert clone.iteration == opt.iteration
