"""Depth routing: selection primitives, balancing terms, the routed forward."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recursor import tensor as tt
from recursor.errors import ConfigError
from recursor.model import init_model
from recursor.routing import (Activation, AuxMode, BalanceMode, Router,
                              RouterArch, RouterConfig, RouterKind,
                              aux_bce_loss, balancing_loss, capacity_schedule,
                              dead_token_ratio, evaluate_router,
                              expert_choice_default, expert_choice_select,
                              loss_free_update, max_violation, mor_forward,
                              sampling_accuracy, score_histogram_overlap,
                              selection_entropy, threshold_select,
                              token_choice_assign, token_choice_default,
                              trace_records, z_loss)
from conftest import fd_grad, grad_rel_err, tiny_spec


# ---- capacities ----


def test_capacity_schedule_linear():
    assert capacity_schedule(3, 9) == [9, 6, 3]
    assert capacity_schedule(2, 10) == [10, 5]
    assert capacity_schedule(4, 8) == [8, 6, 4, 2]


def test_capacity_schedule_floors():
    assert capacity_schedule(3, 10) == [10, 6, 3]


def test_capacity_schedule_first_step_keeps_all():
    for nr in range(1, 6):
        for t in (1, 7, 64):
            caps = capacity_schedule(nr, t)
            assert caps[0] == t
            assert all(b <= a for a, b in zip(caps, caps[1:]))


def test_capacity_schedule_custom_fractions():
    assert capacity_schedule(3, 12, fractions=(1.0, 0.5, 0.25)) == [12, 6, 3]


# ---- selection ----


def test_expert_choice_exact_k():
    scores = np.array([0.1, 0.9, 0.5, 0.7])
    mask = expert_choice_select(scores, 2)
    assert mask.tolist() == [False, True, False, True]


def test_expert_choice_tie_goes_to_lower_index():
    mask = expert_choice_select(np.array([0.5, 0.5, 0.5]), 2)
    assert mask.tolist() == [True, True, False]


def test_expert_choice_k_bounds():
    scores = np.array([1.0, 2.0])
    assert expert_choice_select(scores, 0).sum() == 0
    assert expert_choice_select(scores, 5).sum() == 2


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=50),
       st.integers(0, 50))
@settings(max_examples=100, deadline=None)
def test_expert_choice_count_property(scores, k):
    scores = np.asarray(scores)
    mask = expert_choice_select(scores, k)
    assert mask.sum() == min(k, scores.size)
    if 0 < k < scores.size:
        # every kept score is >= every dropped score
        assert scores[mask].min() >= scores[~mask].max() - 1e-12


def test_token_choice_assign_top1():
    gates = np.array([[0.2, 0.8], [0.9, 0.1]])
    assert token_choice_assign(gates).tolist() == [2, 1]


def test_token_choice_bias_affects_selection_only():
    gates = np.array([[0.6, 0.4]])
    assert token_choice_assign(gates).tolist() == [1]
    assert token_choice_assign(gates, np.array([0.0, 0.5])).tolist() == [2]


def test_threshold_select_and_fallback():
    scores = np.array([0.2, 0.7, 0.55])
    assert threshold_select(scores, 2).tolist() == [False, True, True]
    # nothing above threshold: keep the single best
    assert threshold_select(np.array([0.1, 0.4, 0.2]), 2).tolist() == \
        [False, True, False]


# ---- balancing terms ----


def test_aux_bce_pushes_toward_mask():
    scores = tt.Tensor(np.array([0.9, 0.1, 0.5]), requires_grad=True)
    mask = np.array([True, False, True])
    aux_bce_loss(scores, mask).backward()
    assert scores.grad[0] < 0           # selected scores pushed up
    assert scores.grad[1] > 0
    assert scores.grad[2] < 0


def test_balancing_loss_uniform_is_one():
    nr, T = 4, 16
    gates = tt.Tensor(np.full((T, nr), 1.0 / nr))
    depths = np.tile(np.arange(1, nr + 1), T // nr)
    assert balancing_loss(gates, depths, nr).item() == pytest.approx(1.0)


def test_balancing_loss_penalizes_collapse():
    nr, T = 2, 8
    skew = tt.Tensor(np.column_stack([np.full(T, 0.9), np.full(T, 0.1)]))
    collapsed = balancing_loss(skew, np.ones(T, dtype=int), nr).item()
    uniform = balancing_loss(tt.Tensor(np.full((T, nr), 0.5)),
                             np.tile([1, 2], T // 2), nr).item()
    assert collapsed > uniform


def test_balancing_loss_hand_value():
    # 3 tokens at depth 1, 1 at depth 2; mean gates 0.7 / 0.3
    gates = tt.Tensor(np.array([[0.7, 0.3]] * 4))
    depths = np.array([1, 1, 1, 2])
    # f = [3, 1] * 2/4 = [1.5, 0.5]; loss = 1.5*0.7 + 0.5*0.3
    assert balancing_loss(gates, depths, 2).item() == pytest.approx(1.2)


def test_loss_free_update_direction_and_zero():
    # mean load is 6: overloaded down, starved up, exactly-average untouched
    out = loss_free_update(np.array([10.0, 2.0, 6.0]), np.zeros(3), 0.01)
    assert out.tolist() == [-0.01, 0.01, 0.0]


def test_loss_free_update_sign_zero_is_noop():
    out = loss_free_update(np.array([4.0, 4.0]), np.array([0.3, -0.3]), 0.1)
    assert np.allclose(out, [0.3, -0.3])


def test_z_loss_value():
    logits = tt.Tensor(np.zeros((2, 4)))
    assert z_loss(logits).item() == pytest.approx(np.log(4) ** 2)


# ---- configuration ----


def test_config_pairing_rules():
    with pytest.raises(ConfigError):
        RouterConfig(kind=RouterKind.EXPERT_CHOICE, activation=Activation.SOFTMAX)
    with pytest.raises(ConfigError):
        RouterConfig(kind=RouterKind.EXPERT_CHOICE, activation=Activation.SIGMOID,
                     balance_mode=BalanceMode.BALANCE_LOSS)
    with pytest.raises(ConfigError):
        RouterConfig(kind=RouterKind.TOKEN_CHOICE, activation=Activation.SOFTMAX,
                     aux_mode=AuxMode.AUX_LOSS)


def test_config_capacity_validation():
    with pytest.raises(ConfigError):
        RouterConfig(kind=RouterKind.EXPERT_CHOICE, activation=Activation.SIGMOID,
                     capacities=(0.5, 0.25))
    with pytest.raises(ConfigError):
        RouterConfig(kind=RouterKind.EXPERT_CHOICE, activation=Activation.SIGMOID,
                     capacities=(1.0, 0.25, 0.5))


def test_router_arch_variants_run():
    spec = tiny_spec()
    ids = np.arange(1, 9)
    for arch in RouterArch:
        cfg = RouterConfig(kind=RouterKind.EXPERT_CHOICE,
                           activation=Activation.SIGMOID, arch=arch, alpha=0.1)
        w = init_model(spec, 0)
        router = Router(cfg, spec.d_model, 2, seed=0)
        out = mor_forward(w, router, ids)
        assert out.logits.shape == (8, spec.vocab_size)


def test_tanh_activation_supported():
    spec = tiny_spec()
    cfg = RouterConfig(kind=RouterKind.EXPERT_CHOICE, activation=Activation.TANH,
                       alpha=0.1)
    router = Router(cfg, spec.d_model, 2, seed=0)
    out = mor_forward(init_model(spec, 0), router, np.arange(4))
    assert np.all(np.isfinite(out.logits.data))


# ---- routed forward ----


def test_expert_choice_masks_are_nested():
    spec = tiny_spec(n_layers=6, n_recursions=3)
    w = init_model(spec, 0)
    router = Router(expert_choice_default(), spec.d_model, 3, seed=4)
    out = mor_forward(w, router, np.arange(2, 14))
    sel = out.selection
    assert sel[0].all()
    for r in range(1, 3):
        assert np.all(sel[r] <= sel[r - 1])
    assert sel.sum(axis=1).tolist() == capacity_schedule(3, 12)


def test_expert_choice_depths_match_selection():
    spec = tiny_spec()
    w = init_model(spec, 0)
    router = Router(expert_choice_default(), spec.d_model, 2, seed=4)
    out = mor_forward(w, router, np.arange(10))
    expect = out.selection.sum(axis=0)
    assert np.array_equal(out.depths, expect)


def test_token_choice_depth_histogram():
    spec = tiny_spec()
    w = init_model(spec, 0)
    router = Router(token_choice_default(), spec.d_model, 2, seed=4)
    out = mor_forward(w, router, np.arange(12))
    assert out.counts.sum() == 12
    assert np.array_equal(out.counts,
                          np.bincount(out.depths - 1, minlength=2))
    # selection at step r means depth >= r
    for r in (1, 2):
        assert np.array_equal(out.selection[r - 1], out.depths >= r)


def test_unselected_tokens_keep_their_state():
    """A token dropped at step 2 must exit with its exact step-1 state."""
    spec = tiny_spec()
    w = init_model(spec, 0)
    router = Router(expert_choice_default(), spec.d_model, 2, seed=4)

    cfg_all = RouterConfig(kind=RouterKind.EXPERT_CHOICE,
                           activation=Activation.SIGMOID, alpha=0.1,
                           capacities=(1.0, 1.0))
    router_all = Router(cfg_all, spec.d_model, 2, seed=4)
    for name in router.params:
        router_all.params[name].data[:] = router.params[name].data

    ids = np.arange(8)
    routed = mor_forward(w, router, ids, kv_mode="recursive_share")
    full = mor_forward(w, router_all, ids, kv_mode="recursive_share")
    dropped = np.where(routed.depths == 1)[0]
    assert dropped.size > 0
    # under shared deep reads the step-2 context is position-complete, so
    # surviving tokens see the same keys; dropped rows differ from full depth
    assert not np.allclose(routed.logits.data[dropped], full.logits.data[dropped])


def test_hybrid_equals_recursion_wise_when_nothing_drops():
    spec = tiny_spec()
    w = init_model(spec, 0)
    cfg = RouterConfig(kind=RouterKind.EXPERT_CHOICE, activation=Activation.SIGMOID,
                       alpha=0.1, capacities=(1.0, 1.0))
    ids = np.arange(1, 10)
    a = mor_forward(w, Router(cfg, spec.d_model, 2, seed=4), ids,
                    kv_mode="recursion_wise")
    b = mor_forward(w, Router(cfg, spec.d_model, 2, seed=4), ids,
                    kv_mode="hybrid")
    assert np.array_equal(a.logits.data, b.logits.data)


def test_kv_modes_change_deep_context():
    spec = tiny_spec()
    w = init_model(spec, 0)
    ids = np.arange(1, 13)
    outs = {m: mor_forward(w, Router(expert_choice_default(), spec.d_model, 2,
                                     seed=4), ids, kv_mode=m).logits.data
            for m in ("recursion_wise", "recursive_share", "hybrid")}
    assert not np.allclose(outs["recursion_wise"], outs["recursive_share"])
    assert not np.allclose(outs["recursion_wise"], outs["hybrid"])


def test_unknown_kv_mode_rejected():
    spec = tiny_spec()
    w = init_model(spec, 0)
    with pytest.raises(ConfigError):
        mor_forward(w, Router(expert_choice_default(), spec.d_model, 2, seed=0),
                    np.arange(4), kv_mode="everything")


def test_inference_threshold_first_step_keeps_all():
    spec = tiny_spec()
    w = init_model(spec, 0)
    router = Router(expert_choice_default(), spec.d_model, 2, seed=4)
    out = mor_forward(w, router, np.arange(10), inference=True)
    assert out.selection[0].all()


def test_aux_router_scores_detached():
    spec = tiny_spec()
    cfg = RouterConfig(kind=RouterKind.EXPERT_CHOICE, activation=Activation.SIGMOID,
                       alpha=0.1, aux_mode=AuxMode.AUX_ROUTER)
    w = init_model(spec, 0)
    router = Router(cfg, spec.d_model, 2, seed=4)
    out = mor_forward(w, router, np.arange(8))
    assert len(out.aux_step_scores) == 2
    loss = tt.tsum(out.aux_step_scores[0])
    loss.backward()
    # the aux head trains, the trunk sees no gradient from it
    assert router.params["aux_router.step1.w0"].grad is not None
    assert w.params["embedding"].grad is None


def test_expert_choice_gradient_through_routing():
    spec = tiny_spec(d_model=8, n_heads=2, n_kv_heads=1, d_head=4, d_inter=12,
                     vocab_size=11)
    w = init_model(spec, seed=6)
    router = Router(expert_choice_default(), spec.d_model, 2, seed=7)
    ids = np.array([1, 7, 3, 2, 9, 4])
    targets = np.array([7, 3, 2, 9, 4, 1])

    def loss_fn():
        return tt.cross_entropy(mor_forward(w, router, ids).logits, targets).item()

    tt.cross_entropy(mor_forward(w, router, ids).logits, targets).backward()
    # router gradients are ~1e-7 here (damped gate); a wider step keeps the
    # central difference above float roundoff
    for name in ("router.step2.w0", "router.step1.w0"):
        p = router.params[name]
        err = grad_rel_err(p.grad, fd_grad(loss_fn, p.data, eps=1e-4))
        assert err < 1e-4, f"{name}: {err:.2e}"
    p = w.params["blocks.0.wq"]
    err = grad_rel_err(p.grad, fd_grad(loss_fn, p.data, eps=1e-4))
    assert err < 1e-4


def test_token_choice_gradient_through_gates():
    spec = tiny_spec(d_model=8, n_heads=2, n_kv_heads=1, d_head=4, d_inter=12,
                     vocab_size=11)
    w = init_model(spec, seed=6)
    router = Router(token_choice_default(), spec.d_model, 2, seed=7)
    ids = np.array([1, 7, 3, 2, 9, 4])
    targets = np.array([7, 3, 2, 9, 4, 1])

    def loss_fn():
        return tt.cross_entropy(mor_forward(w, router, ids).logits, targets).item()

    tt.cross_entropy(mor_forward(w, router, ids).logits, targets).backward()
    p = router.params["router.w0"]
    err = grad_rel_err(p.grad, fd_grad(loss_fn, p.data))
    assert err < 1e-4


# ---- metrics ----


def test_dead_token_ratio():
    masks = np.array([[True, False, False, True],
                      [False, False, True, True]])
    assert dead_token_ratio(masks) == pytest.approx(0.25)
    assert dead_token_ratio(np.ones((3, 5), dtype=bool)) == 0.0


def test_max_violation():
    assert max_violation(np.array([10, 10, 10])) == 0.0
    assert max_violation(np.array([30, 10, 20])) == pytest.approx(0.5)
    assert max_violation(np.zeros(3)) == 0.0


def test_selection_entropy():
    assert selection_entropy(np.array([0.5, 0.5])) == pytest.approx(np.log(2))
    assert selection_entropy(np.array([1.0, 0.0])) == 0.0


def test_score_histogram_overlap_extremes():
    lo = np.random.default_rng(0).uniform(0.0, 0.2, 500)
    hi = np.random.default_rng(1).uniform(0.8, 1.0, 500)
    assert score_histogram_overlap(lo, hi) == 0.0
    same = np.random.default_rng(2).uniform(0, 1, 500)
    assert score_histogram_overlap(same, same) == pytest.approx(1.0)


def test_sampling_accuracy():
    a = np.array([True, False, True, True])
    b = np.array([True, True, True, False])
    assert sampling_accuracy(a, b) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        sampling_accuracy(a, b[:2])


def test_evaluate_router_keys():
    spec = tiny_spec()
    w = init_model(spec, 0)
    router = Router(expert_choice_default(), spec.d_model, 2, seed=4)
    rows = [np.arange(1, 9), np.arange(3, 11)]
    stats = evaluate_router(w, router, rows)
    for key in ("dead_token_ratio", "max_violation", "entropy", "depth_counts",
                "overlap", "sampling_accuracy"):
        assert key in stats
    assert sum(stats["depth_counts"]) == 16


def test_trace_records_expert_choice():
    spec = tiny_spec()
    w = init_model(spec, 0)
    router = Router(expert_choice_default(), spec.d_model, 2, seed=4)
    out = mor_forward(w, router, np.arange(6))
    recs = trace_records(out, sample_id=3)
    assert len(recs) == 6
    for r in recs:
        assert r["sample_id"] == 3
        # a token is scored at every step it enters, including the one that
        # drops it, so depth-1 tokens still carry a step-2 score
        assert len(r["scores"]) == min(r["depth"] + 1, 2)
        assert r["depth"] == sum(r["selected"])


def test_trace_records_token_choice():
    spec = tiny_spec()
    w = init_model(spec, 0)
    router = Router(token_choice_default(), spec.d_model, 2, seed=4)
    recs = trace_records(mor_forward(w, router, np.arange(6)), 0)
    assert all(len(r["scores"]) == 2 for r in recs)
