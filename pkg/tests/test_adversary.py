import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmix import tensor as T
from advmix.adversary import (AttackConfig, AttackError, _losses, evaluate_robust,
                              fgsm_random_start, pgd_attack, pgd_delta, project_linf,
                              random_search_attack)
from advmix.datasets import gen_two_moons
from advmix.nn import ModelSpec, OptimizerState, build_model, optimizer_step
from advmix.objectives import kl_loss, one_hot


@pytest.fixture(scope="module")
def moons_model():
    data = gen_two_moons(600, 0.1, 0)
    model = build_model(ModelSpec("mlp", (2,), 2, widths=(16, 16), init_seed=0))
    state = OptimizerState("yogi", learning_rate=0.01)
    target = one_hot(data.labels, 2)
    for _ in range(100):
        T.reset()
        kl_loss(model(data.inputs), target).backward()
        T.reset()
        optimizer_step(state, model.params)
        model.zero_grad()
    return model, data


def test_one_clamp_step_by_hand():
    delta = np.clip(np.array([0.1, -0.2]) + np.sign([-3.0, 5.0]) * 0.25, -0.3, 0.3)
    np.testing.assert_allclose(delta, [-0.15, 0.05])
    assert project_linf(np.array([0.5]), np.array([0.0]), 0.3)[0] == 0.3


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(step_size=0.0)
    with pytest.raises(ValueError):
        AttackConfig(steps=0)
    with pytest.raises(ValueError):
        AttackConfig(kind="square")


def test_single_step_pgd_equals_fgsm_random_start(moons_model):
    model, data = moons_model
    cfg = AttackConfig(epsilon=0.1, step_size=0.05, steps=1)
    a = pgd_attack(model, data.inputs[:64], data.labels[:64], cfg, np.random.default_rng(3))
    b = fgsm_random_start(model, data.inputs[:64], data.labels[:64], cfg, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-3, 0.5), st.sampled_from(["pgd", "fgsm", "random_search"]))
def test_attacks_respect_budget_exactly(seed, eps, kind):
    rng = np.random.default_rng(seed)
    model = build_model(ModelSpec("mlp", (3,), 3, widths=(8,), init_seed=seed))
    x = rng.normal(size=(16, 3)) * 3
    cfg = AttackConfig(epsilon=eps, step_size=eps / 3, steps=4, kind=kind, queries=20)
    if kind == "pgd":
        adv = pgd_attack(model, x, rng.integers(0, 3, 16), cfg, rng)
    elif kind == "fgsm":
        adv = fgsm_random_start(model, x, rng.integers(0, 3, 16), cfg, rng)
    else:
        adv = random_search_attack(model, x, rng.integers(0, 3, 16), cfg, rng=rng)
    assert np.all(np.abs(adv - x) <= eps)


def test_value_range_respected_on_images():
    rng = np.random.default_rng(0)
    model = build_model(ModelSpec("small_conv", (1, 6, 6), 3, channels=(2,), kernel_sizes=(3,)))
    x = rng.uniform(0, 1, (8, 1, 6, 6))
    cfg = AttackConfig(epsilon=0.2, step_size=0.1, steps=3, clamp_input_range=(0.0, 1.0))
    for adv in (pgd_attack(model, x, rng.integers(0, 3, 8), cfg, rng),
                random_search_attack(model, x, rng.integers(0, 3, 8), cfg, queries=10, rng=rng)):
        assert adv.min() >= 0.0 and adv.max() <= 1.0
        assert np.all(np.abs(adv - x) <= 0.2)


def test_random_search_zero_queries_tries_one_corner(moons_model):
    model, data = moons_model
    x, y = data.inputs[:50], data.labels[:50]
    cfg = AttackConfig(epsilon=0.1, kind="random_search")
    adv = random_search_attack(model, x, y, cfg, queries=0, rng=np.random.default_rng(1))
    changed = np.any(adv != x, axis=1)
    assert changed.any()
    np.testing.assert_allclose(np.abs(adv[changed] - x[changed]), 0.1, rtol=0, atol=1e-12)
    target = one_hot(y, 2)
    assert np.all(_losses(model, adv, target)[changed] > _losses(model, x, target)[changed])


def test_attacks_do_not_touch_parameters(moons_model):
    model, data = moons_model
    before = {k: v.copy() for k, v in model.state().items()}
    cfg = AttackConfig(epsilon=0.1, step_size=0.03, steps=5, queries=10)
    rng = np.random.default_rng(0)
    pgd_attack(model, data.inputs[:32], data.labels[:32], cfg, rng)
    fgsm_random_start(model, data.inputs[:32], data.labels[:32], cfg, rng)
    random_search_attack(model, data.inputs[:32], data.labels[:32], cfg, rng=rng)
    for k, v in model.state().items():
        assert v.tobytes() == before[k].tobytes()
        assert model.params[k].grad is None


def test_restart_keeps_per_example_maximum(moons_model):
    model, data = moons_model
    x, y = data.inputs[:80], data.labels[:80]
    cfg = AttackConfig(epsilon=0.15, step_size=0.04, steps=3, restarts=4)
    _, kept = pgd_attack(model, x, y, cfg, np.random.default_rng(9), return_loss=True)
    rng = np.random.default_rng(9)
    target = one_hot(y, 2)
    losses = []
    for _ in range(4):
        d = pgd_delta(model, x, target, 0.15, 0.04, 3, rng)
        losses.append(_losses(model, project_linf(x + d, x, 0.15), target))
    np.testing.assert_array_equal(kept, np.max(losses, axis=0))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_more_steps_no_weaker(moons_model, seed):
    model, _ = moons_model
    data = gen_two_moons(600, 0.1, 10 + seed)
    target = one_hot(data.labels, 2)
    means = []
    for steps in (2, 5, 20):
        cfg = AttackConfig(epsilon=0.1, step_size=0.025, steps=steps)
        adv = pgd_attack(model, data.inputs, data.labels, cfg, np.random.default_rng(seed))
        means.append(_losses(model, adv, target).mean())
    assert means[1] >= means[0] - 1e-6 and means[2] >= means[1] - 1e-6


def test_zero_budget_robust_equals_pristine(moons_model):
    model, data = moons_model
    cfg = AttackConfig(epsilon=0.0, step_size=0.01, steps=3, name="zero")
    res = evaluate_robust(model, data.inputs, data.labels, [cfg], seed=0)
    assert res["zero"] == res["pristine"]


def test_untrained_model_chance_level():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4000, 2))
    labels = rng.integers(0, 2, 4000)
    model = build_model(ModelSpec("mlp", (2,), 2, widths=(16,), init_seed=1))
    cfg = AttackConfig(epsilon=0.01, step_size=0.005, steps=5)
    res = evaluate_robust(model, x, labels, [cfg], seed=0)
    assert abs(res["PGD20"] - 0.5) <= 0.03


def test_stronger_pgd_no_weaker(moons_model):
    model, data = moons_model
    cfgs = [AttackConfig(epsilon=0.15, step_size=0.0375, steps=20, name="PGD20"),
            AttackConfig(epsilon=0.15, step_size=0.0375, steps=100, name="PGD100")]
    res = evaluate_robust(model, data.inputs, data.labels, cfgs, seed=0)
    assert res["PGD100"] <= res["PGD20"] + 0.005


def test_evaluation_is_seed_deterministic(moons_model):
    model, data = moons_model
    cfg = [AttackConfig(epsilon=0.1, step_size=0.03, steps=5)]
    a = evaluate_robust(model, data.inputs, data.labels, cfg, seed=4, shard_size=100)
    b = evaluate_robust(model, data.inputs, data.labels, cfg, seed=4, shard_size=100)
    assert a == b


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    model = build_model(ModelSpec("mlp", (2,), 2, widths=(2,)))
    model.params["fc0.weight"].values[:] = np.inf
    with pytest.raises(AttackError):
        pgd_attack(model, np.ones((2, 2)), np.zeros(2, int), AttackConfig(epsilon=0.1), np.random.default_rng(0))
