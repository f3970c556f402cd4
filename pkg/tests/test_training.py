"""Loss schedules, the layer-mapping distiller, AdamW, and the step loop."""

import itertools
import math

import numpy as np
import pytest

from conftest import tiny_spec
from recursor import tensor as tt
from recursor.errors import ConfigError, NumericError
from recursor.model import init_model
from recursor.routing import (BalanceMode, Router, RouterConfig, RouterKind,
                              Activation, expert_choice_default,
                              token_choice_default)
from recursor.training import (AdamW, CosineLR, ExitMode, KdMode, LossSchedule,
                               TrapezoidLR, exit_coefficients, exit_loss,
                               kd_dyna_loss, kd_dyna_map, layer_hiddens,
                               train_loop, train_step, trainable_parameters)


# ---- exit-loss weighting ----


def test_exit_coefficients_modes():
    assert exit_coefficients(ExitMode.SINGLE, 3) == [0.0, 0.0, 1.0]
    w = exit_coefficients(ExitMode.WEIGHTED_AVG, 3)
    assert w == pytest.approx([1 / 6, 2 / 6, 3 / 6])
    assert sum(w) == pytest.approx(1.0)
    assert exit_coefficients(ExitMode.UNWEIGHTED_AVG, 4) == [0.25] * 4
    assert exit_coefficients(ExitMode.AGGRESSIVE, 3, 0.2) == [0.2, 0.2, 1.0]
    with pytest.raises(ConfigError):
        exit_coefficients(ExitMode.SINGLE, 0)


def test_loss_schedule_validation():
    with pytest.raises(ConfigError):
        LossSchedule(aggressive_coeff=-0.1)
    with pytest.raises(ConfigError):
        LossSchedule(kd_coeff=-1.0)


def random_logits(rng, n, T=5, V=7):
    return [tt.Tensor(rng.standard_normal((T, V))) for _ in range(n)]


def test_exit_loss_single_equals_final_ce():
    rng = np.random.default_rng(0)
    logits = random_logits(rng, 3)
    targets = rng.integers(0, 7, size=5)
    total, parts = exit_loss(logits, targets, LossSchedule())
    assert float(total.data) == pytest.approx(parts["ce_depth3"])
    assert set(parts) == {"ce_depth1", "ce_depth2", "ce_depth3"}


def test_exit_loss_weighted_combination():
    rng = np.random.default_rng(1)
    logits = random_logits(rng, 2)
    targets = rng.integers(0, 7, size=5)
    total, parts = exit_loss(logits, targets, LossSchedule(mode=ExitMode.WEIGHTED_AVG))
    expect = parts["ce_depth1"] / 3 + parts["ce_depth2"] * 2 / 3
    assert float(total.data) == pytest.approx(expect)


def test_exit_loss_self_distillation_term():
    rng = np.random.default_rng(2)
    logits = random_logits(rng, 2)
    targets = rng.integers(0, 7, size=5)
    sched = LossSchedule(kd=KdMode.FORWARD_KL, kd_coeff=2.0)
    total, parts = exit_loss(logits, targets, sched)
    assert parts["kd"] > 0
    base, _ = exit_loss(logits, targets, LossSchedule())
    assert float(total.data) == pytest.approx(float(base.data) + parts["kd"])
    # identical distributions carry no distillation pressure
    same = [tt.Tensor(logits[1].data.copy()), logits[1]]
    _, parts0 = exit_loss(same, targets, sched)
    assert parts0["kd"] == pytest.approx(0.0, abs=1e-12)


# ---- monotone layer mapping ----


def brute_force_map(shallow, deep):
    ns, nd = len(shallow), len(deep)
    cost = np.array([[np.mean((s - d) ** 2) for d in deep] for s in shallow])
    best, best_map = math.inf, None
    for comb in itertools.combinations_with_replacement(range(nd), ns):
        c = sum(cost[i, j] for i, j in enumerate(comb))
        if c < best - 1e-15:
            best, best_map = c, comb
    return [j + 1 for j in best_map], best


def test_kd_dyna_map_matches_enumeration():
    rng = np.random.default_rng(3)
    for trial in range(20):
        shallow = [rng.standard_normal((4, 6)) for _ in range(3)]
        deep = [rng.standard_normal((4, 6)) for _ in range(5)]
        want, _ = brute_force_map(shallow, deep)
        assert kd_dyna_map(shallow, deep) == want, trial


def test_kd_dyna_map_is_monotone_and_tiebreaks_low():
    # identical deep layers: every assignment costs the same, so the
    # lexicographically smallest monotone map must win
    sh = [np.ones((2, 2)) * i for i in range(3)]
    dp = [np.zeros((2, 2))] * 4
    assert kd_dyna_map(sh, dp) == [1, 1, 1]
    rng = np.random.default_rng(4)
    for trial in range(10):
        shallow = [rng.standard_normal(8) for _ in range(4)]
        deep = [rng.standard_normal(8) for _ in range(6)]
        m = kd_dyna_map(shallow, deep)
        assert all(a <= b for a, b in zip(m, m[1:]))


def test_kd_dyna_map_validation():
    x = [np.zeros(3)]
    with pytest.raises(ConfigError):
        kd_dyna_map([], x)
    with pytest.raises(ConfigError):
        kd_dyna_map(x * 3, x * 2)


def test_kd_dyna_loss_value_and_gradient():
    rng = np.random.default_rng(5)
    shallow = [tt.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
               for _ in range(2)]
    deep = [rng.standard_normal((3, 4)) for _ in range(3)]
    loss, mapping = kd_dyna_loss(shallow, deep)
    assert mapping == kd_dyna_map(shallow, deep)
    manual = np.mean([np.mean((s.data - deep[j - 1]) ** 2)
                      for s, j in zip(shallow, mapping)])
    assert float(loss.data) == pytest.approx(manual)
    loss.backward()
    for s, j in zip(shallow, mapping):
        # d/ds mean((s - d)^2) averaged over the pair count
        want = 2 * (s.data - deep[j - 1]) / s.data.size / len(mapping)
        assert np.allclose(s.grad, want)


def test_layer_hiddens_shape():
    spec = tiny_spec()
    weights = init_model(spec, seed=0)
    hid = layer_hiddens(weights, [1, 2, 3])
    assert len(hid) == spec.n_layers
    assert all(h.data.shape == (3, spec.d_model) for h in hid)


# ---- schedules ----


def test_cosine_lr():
    lr = CosineLR(2.0, total_steps=10)
    assert lr(0) == pytest.approx(2.0)
    assert lr(5) == pytest.approx(1.0)
    assert lr(10) == pytest.approx(0.0)
    assert lr(99) == pytest.approx(0.0)


def test_cosine_lr_warmup():
    lr = CosineLR(2.0, total_steps=12, warmup=4)
    assert lr(0) == pytest.approx(0.5)
    assert lr(3) == pytest.approx(2.0)
    assert lr(4) == pytest.approx(2.0)
    assert lr(12) == pytest.approx(0.0)


def test_trapezoid_lr():
    lr = TrapezoidLR(1.0, warmup=2, plateau=3, cooldown=4)
    got = [lr(s) for s in range(11)]
    assert got == pytest.approx(
        [0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 0.75, 0.5, 0.25, 0.0, 0.0])


# ---- optimizer ----


def test_adamw_decays_matrices_only():
    w = tt.Tensor(np.full((2, 2), 2.0))
    v = tt.Tensor(np.full(3, 2.0))
    opt = AdamW({"w": w, "v": v}, lr=0.1, weight_decay=0.5)
    opt.step()          # zero gradients: only decay moves anything
    assert np.allclose(w.data, 2.0 * (1 - 0.1 * 0.5))
    assert np.allclose(v.data, 2.0)


def test_adamw_clips_by_global_norm():
    w = tt.Tensor(np.zeros(4))
    w.grad = np.full(4, 5.0)            # norm 10
    opt = AdamW({"w": w}, lr=0.1, clip_norm=1.0, weight_decay=0.0)
    norm = opt.step()
    assert norm == pytest.approx(10.0)  # reported pre-clip
    assert np.allclose(opt.m["w"], 0.1 * 0.5)


def test_adamw_grad_norm_spans_params():
    a = tt.Tensor(np.zeros(1))
    b = tt.Tensor(np.zeros(1))
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert AdamW({"a": a, "b": b}).grad_norm() == pytest.approx(5.0)


def test_adamw_rejects_non_finite():
    w = tt.Tensor(np.zeros(2))
    w.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericError):
        AdamW({"w": w}).step()


def test_adamw_schedule_overrides_lr():
    w = tt.Tensor(np.zeros(2))
    opt = AdamW({"w": w}, lr=1.0, schedule=lambda s: 0.25 if s == 0 else 0.125)
    assert opt.lr == 0.25
    opt.step()
    assert opt.lr == 0.125


def test_adamw_first_step_is_signlike():
    w = tt.Tensor(np.array([1.0, -1.0, 0.5]))
    w.grad = np.array([0.3, -0.2, 0.7])
    opt = AdamW({"w": w}, lr=0.01, weight_decay=0.0, clip_norm=0.0)
    before = w.data.copy()
    opt.step()
    # bias correction makes the first update lr * g/|g| up to eps
    assert np.allclose(before - w.data, 0.01 * np.sign(w.grad), atol=1e-6)


# ---- stepping ----


def fixed_batch(rng, B=4, T=8, vocab=31):
    return rng.integers(0, vocab, size=(B, T + 1))


def test_train_step_validation():
    weights = init_model(tiny_spec(), seed=0)
    opt = AdamW(trainable_parameters(weights))
    with pytest.raises(ConfigError):
        train_step(weights, np.zeros(5, dtype=np.int64), opt)
    with pytest.raises(ConfigError):
        train_step(weights, np.zeros((2, 1), dtype=np.int64), opt)


def test_train_step_memorizes_a_batch():
    weights = init_model(tiny_spec(), seed=0)
    opt = AdamW(trainable_parameters(weights), lr=1e-2)
    batch = fixed_batch(np.random.default_rng(0))
    losses = [train_step(weights, batch, opt)["loss"] for _ in range(30)]
    assert losses[-1] < losses[0] * 0.7
    assert all(np.isfinite(losses))


def test_train_step_metrics_fields():
    weights = init_model(tiny_spec(), seed=0)
    opt = AdamW(trainable_parameters(weights), lr=1e-3)
    m = train_step(weights, fixed_batch(np.random.default_rng(1)), opt)
    assert m["step"] == 1
    assert m["grad_norm"] > 0
    assert m["lr"] == 1e-3
    assert "ce_depth1" in m


def test_train_step_multi_exit_parts():
    weights = init_model(tiny_spec(), seed=0)
    opt = AdamW(trainable_parameters(weights), lr=1e-3)
    sched = LossSchedule(mode=ExitMode.WEIGHTED_AVG, kd=KdMode.FORWARD_KL)
    m = train_step(weights, fixed_batch(np.random.default_rng(2)), opt, sched)
    assert "ce_depth1" in m and "ce_depth2" in m and "kd" in m


def test_train_step_layerwise_distillation():
    spec = tiny_spec()
    weights = init_model(spec, seed=0)
    teacher = init_model(spec, seed=7)
    opt = AdamW(trainable_parameters(weights), lr=1e-3)
    sched = LossSchedule(kd=KdMode.LAYERWISE_DYNA, kd_coeff=0.5)
    with pytest.raises(ConfigError):
        train_step(weights, fixed_batch(np.random.default_rng(3)), opt, sched)
    m = train_step(weights, fixed_batch(np.random.default_rng(3)), opt, sched,
                   teacher=teacher)
    assert m["kd"] > 0


def test_train_step_expert_choice_router():
    spec = tiny_spec()
    weights = init_model(spec, seed=0)
    router = Router(expert_choice_default(), spec.d_model, spec.n_recursions, seed=1)
    opt = AdamW(trainable_parameters(weights, router), lr=1e-3)
    m = train_step(weights, fixed_batch(np.random.default_rng(4)), opt, router=router)
    assert "aux" in m and "lm" in m
    assert len(m["depth_counts"]) == 2
    assert sum(m["depth_counts"]) == 4 * 8
    assert m["max_violation"] >= 0
    assert np.isfinite(m["loss"])


def test_train_step_token_choice_loss_free():
    spec = tiny_spec()
    weights = init_model(spec, seed=0)
    cfg = RouterConfig(kind=RouterKind.TOKEN_CHOICE, activation=Activation.SOFTMAX,
                       balance_mode=BalanceMode.LOSS_FREE, bias_update_rate=0.01)
    router = Router(cfg, spec.d_model, spec.n_recursions, seed=1)
    opt = AdamW(trainable_parameters(weights, router), lr=1e-3)
    before = router.biases.copy()
    m = train_step(weights, fixed_batch(np.random.default_rng(5)), opt, router=router)
    assert "balance" not in m
    assert not np.array_equal(router.biases, before)
    assert np.allclose(np.abs(router.biases[router.biases != 0]), 0.01)


def test_train_step_token_choice_balance_terms():
    spec = tiny_spec()
    weights = init_model(spec, seed=0)
    router = Router(token_choice_default(), spec.d_model, spec.n_recursions, seed=1)
    opt = AdamW(trainable_parameters(weights, router), lr=1e-3)
    m = train_step(weights, fixed_batch(np.random.default_rng(6)), opt, router=router)
    assert m["balance"] > 0 and m["z"] > 0


def test_train_loop_history_and_callback():
    weights = init_model(tiny_spec(), seed=0)
    opt = AdamW(trainable_parameters(weights), lr=1e-3)
    batch = fixed_batch(np.random.default_rng(7), B=2, T=4)
    seen = []
    history = train_loop(weights, [batch, batch, batch], opt,
                         on_step=lambda m: seen.append(m["step"]))
    assert [m["step"] for m in history] == [1, 2, 3]
    assert seen == [1, 2, 3]


# ---- parameter selection ----


def test_trainable_parameters_full_set():
    spec = tiny_spec()
    weights = init_model(spec, seed=0)
    router = Router(expert_choice_default(), spec.d_model, spec.n_recursions, seed=1)
    params = trainable_parameters(weights, router)
    assert set(weights.named_parameters()) <= set(params)
    assert any(n.startswith("router.") for n in params)


def test_trainable_parameters_adapters_only():
    from recursor.relax import attach_lora_zero

    spec = tiny_spec()
    weights = init_model(spec, seed=0)
    attach_lora_zero(weights, rank=2)
    only = trainable_parameters(weights, adapters_only=True)
    assert only and all(n.startswith("lora.") for n in only)
    assert all(n.endswith((".A", ".B")) for n in only)
    assert len(only) % 2 == 0
    full = trainable_parameters(weights)
    assert set(only) <= set(full)
    assert set(weights.named_parameters()) <= set(full)
