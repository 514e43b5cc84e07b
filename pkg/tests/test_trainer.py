import itertools
import json

import numpy as np
import pytest

from composer import tensor as T
from composer.datasets import LabeledDataset
from composer.errors import ConfigError, DivergenceError
from composer.model import Composer, ComposerConfig, ModuleSpec, load_model, model_to_bytes
from composer.preferences import PreferenceSpec
from composer.trainer import (
    SupervisedTrainer,
    TrainConfig,
    Trainer,
    batch_reward,
    enumerate_exact_objective,
    reinforce_gradient,
    route_table,
    supervised_train_loop,
    train_loop,
)

from conftest import tiny_model


def toy_dataset(count=400, seed=0, classes=2):
    """Linearly separable 2x2 images: class = brighter left column."""
    rng = np.random.default_rng(seed)
    px = rng.random((count, 2, 2)) * 0.5
    labels = rng.integers(0, classes, count)
    px[labels == 0, :, 0] += 0.5
    px[labels == 1, :, 1] += 0.5
    return LabeledDataset(px, labels, classes, "toy")


def expected_estimator(model, x, y, gammas, baseline=0.0):
    """E over routes of reinforce_gradient, by weighting every joint route."""
    routes = list(itertools.product(*[range(m) for m in model.config.num_choices]))
    total = None
    for assignment in itertools.product(routes, repeat=len(y)):
        model.params.zero_grad()
        _, res = reinforce_gradient(model, x, y, gammas, choices=np.array(assignment), baseline=baseline)
        weight = np.exp(res.path_log_prob.sum())
        g = {k: weight * v for k, v in model.params.grads_snapshot().items()}
        total = g if total is None else {k: total[k] + g[k] for k in g}
    model.params.zero_grad()
    return total


@pytest.mark.parametrize("n,kind", [
    (1, None), (1, "glimpse"), (1, "batch_entropy"), (1, "per_example_entropy"),
    (2, None), (2, "glimpse"), (2, "batch_entropy"), (2, "per_example_entropy"),
])
def test_estimator_expectation_is_exact_gradient(n, kind):
    gammas = {kind: 0.7} if kind else {}
    model = tiny_model(n=n, gamma_inputs=[kind] if kind else [], seed=2)
    rng = np.random.default_rng(1)
    x, y = rng.random((2, 4)), np.array([0, 1])
    _, exact = enumerate_exact_objective(model, x, y, gammas)
    for b in (0.0, -0.9):
        est = expected_estimator(model, x, y, gammas, baseline=b)
        for k in exact:
            np.testing.assert_allclose(est[k], exact[k], atol=1e-12, err_msg=k)


def test_exact_objective_matches_finite_differences():
    model = tiny_model(n=2, gamma_inputs=["batch_entropy"], seed=3)
    rng = np.random.default_rng(0)
    x, y = rng.random((2, 4)), np.array([1, 0])
    gammas = {"batch_entropy": 0.5}
    _, grads = enumerate_exact_objective(model, x, y, gammas)
    h = 1e-6
    for pid in ("ctrl.head1.W", "ml1.mod0.fc0.W", "ctrl.in0.W"):
        flat = model.params.value(pid).reshape(-1)
        for e in range(min(4, flat.size)):
            orig = flat[e]
            flat[e] = orig + h
            up = enumerate_exact_objective(model, x, y, gammas)[0]
            flat[e] = orig - h
            down = enumerate_exact_objective(model, x, y, gammas)[0]
            flat[e] = orig
            fd = (up - down) / (2 * h)
            a = grads[pid].reshape(-1)[e]
            assert abs(a - fd) <= 1e-5 * (abs(a) + abs(fd)) + 1e-10


def test_reward_is_loglik_at_zero_gamma(rng):
    model = tiny_model()
    x, y = rng.random((3, 4)), np.array([0, 1, 1])
    res = model.forward(x, mode="sample", rng=rng)
    rb = batch_reward(model, res, y, {})
    np.testing.assert_array_equal(rb.total, rb.loglik)
    np.testing.assert_allclose(rb.loglik, T.log_likelihood(res.logits, y).data)


def test_reward_approaches_zero_with_confident_prediction():
    model = tiny_model()
    for j in range(2):
        model.params.value(f"ml0.mod{j}.fc1.W")[:] = 0.0
        model.params.value(f"ml0.mod{j}.fc1.b")[:] = [60.0, -60.0]
    res = model.forward(np.zeros((1, 4)), mode="argmax")
    rb = batch_reward(model, res, np.array([0]), {})
    assert -1e-20 < rb.total[0] <= 0.0


def test_reward_hand_computed_two_examples():
    # two examples, n=1, m=2, beta_norm [0.2, 1.0]: one-hot routing [1,0] and [0,1]
    model = tiny_model(gamma_inputs=["glimpse", "batch_entropy"])
    model.betas[0] = np.array([20, 100])
    model.params.value("ctrl.head0.W")[:] = 0.0
    model.params.value("ctrl.head0.b")[:] = 0.0
    res = model.forward(np.zeros((2, 4)), {"glimpse": 0.5, "batch_entropy": 2.0}, choices=np.array([[0], [1]]))
    rb = batch_reward(model, res, np.array([0, 1]), {"glimpse": 0.5, "batch_entropy": 2.0})
    np.testing.assert_allclose(rb.glimpse, [-0.1, -0.5], atol=1e-12)
    # uniform p: ||mean p||^2 = 0.5
    assert rb.batch_entropy == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_allclose(rb.total, rb.loglik + rb.glimpse - 1.0, atol=1e-12)


def test_pinned_controller_gives_route_reward(rng):
    model = tiny_model()
    model.params.value("ctrl.head0.W")[:] = 0.0
    model.params.value("ctrl.head0.b")[:] = [0.0, -1e4]
    x, y = rng.random((1, 4)), np.array([1])
    routes, probs, ll = route_table(model, x, y, {})
    obj, _ = enumerate_exact_objective(model, x, y, {})
    assert obj == pytest.approx(ll[0, 0], abs=1e-12)


def test_forced_route_gradient_matches_finite_differences(rng):
    model = tiny_model()
    model.params.value("ctrl.head0.W")[:] = 0.0
    model.params.value("ctrl.head0.b")[:] = [0.0, -1e4]
    x, y = rng.random((1, 4)), np.array([1])
    model.params.zero_grad()
    reinforce_gradient(model, x, y, {}, choices=np.array([[0]]))
    analytic = model.params.grads_snapshot()
    model.params.zero_grad()

    def loss(p):
        return T.mean(T.log_likelihood(model.forward(x, choices=np.array([0])).logits, y))

    ids = [i for i in model.params.ids() if i.startswith("ml0.mod0")]
    assert T.finite_diff_check(loss, model.params, ids=ids) < 1e-5
    with T.Tape() as tape:
        out = loss(model.params)
    T.backward(tape, out, model.params)
    params_grad = model.params.grads_snapshot()
    for pid in ids:
        np.testing.assert_allclose(analytic[pid], params_grad[pid], atol=1e-12)


def test_jensen_on_random_models():
    for seed in range(30):
        model = tiny_model(n=1 + seed % 2, m=2 + seed % 3, seed=seed)
        rng = np.random.default_rng(seed)
        x, y = rng.random((3, 4)), rng.integers(0, 2, 3)
        _, probs, ll = route_table(model, x, y, {})
        lower = (probs * ll).sum(axis=1)
        upper = np.log((probs * np.exp(ll)).sum(axis=1))
        assert np.all(lower <= upper + 1e-12)


def test_enumeration_guard():
    cfg = ComposerConfig((2, 2), 2, [[ModuleSpec([], 3)] * 8, [ModuleSpec([], 3)] * 8,
                                     [ModuleSpec([], 2)] * 8], controller_pool=1)
    with pytest.raises(ConfigError):
        enumerate_exact_objective(Composer(cfg, 0), np.zeros((1, 4)), np.array([0]), {})


def test_lr_zero_leaves_parameters_unchanged():
    model = tiny_model(gamma_inputs=["glimpse"])
    before = model_to_bytes(model)
    cfg = TrainConfig(batch_size=8, lr=0.0, steps=5, seed=0,
                      preferences=[PreferenceSpec("glimpse", "uniform", low=0, high=1)])
    train_loop(model, toy_dataset(), cfg)
    assert model_to_bytes(model) == before


def test_zero_steps_is_a_no_op():
    model = tiny_model()
    before = model_to_bytes(model)
    assert train_loop(model, toy_dataset(), TrainConfig(batch_size=8, steps=0)) == []
    assert model_to_bytes(model) == before


def test_training_is_deterministic():
    def run():
        model = tiny_model(n=2, gamma_inputs=["glimpse", "batch_entropy"], seed=5)
        cfg = TrainConfig(batch_size=16, lr=0.2, steps=40, seed=9, preferences=[
            PreferenceSpec("glimpse", "log_uniform", low=0.01, high=1.0, zero_mass=0.1),
            PreferenceSpec("batch_entropy", value=0.3)])
        reps = train_loop(model, toy_dataset(), cfg)
        return [r.to_json() for r in reps], model_to_bytes(model)

    assert run() == run()


def test_step_report_reward_decomposition():
    model = tiny_model(gamma_inputs=["glimpse", "batch_entropy"])
    cfg = TrainConfig(batch_size=16, steps=20, seed=0, preferences=[
        PreferenceSpec("glimpse", "uniform", low=0, high=1), PreferenceSpec("batch_entropy", value=0.5)])
    for r in train_loop(model, toy_dataset(), cfg):
        assert r.reward == pytest.approx(r.loglik + sum(r.costs.values()), abs=1e-9)


def test_training_improves_loglik_on_separable_data():
    model = tiny_model(hidden=6, seed=1)
    cfg = TrainConfig(batch_size=16, lr=0.3, steps=500, seed=0)
    reps = train_loop(model, toy_dataset(count=800), cfg)
    first = np.mean([r.loglik for r in reps[:50]])
    last = np.mean([r.loglik for r in reps[-50:]])
    assert last > first + 0.1


def test_log_and_checkpoints(tmp_path):
    model = tiny_model()
    cfg = TrainConfig(batch_size=8, steps=12, seed=0, checkpoint_every=5)
    reps = train_loop(model, toy_dataset(), cfg, log_path=tmp_path / "log.jsonl", checkpoint_dir=tmp_path)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == len(reps) == 12
    assert json.loads(lines[3])["step"] == 3
    for k in (5, 10):
        assert (tmp_path / f"step_{k}.cmpz").exists()
    assert load_model(tmp_path / "step_10.cmpz").config.canonical() == model.config.canonical()
    assert not (tmp_path / "step_15.cmpz").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_saves_last_good(tmp_path):
    model = tiny_model()
    cfg = TrainConfig(batch_size=8, lr=0.1, steps=5, seed=0)
    data = toy_dataset()
    data.pixels[:] = np.inf
    with pytest.raises(DivergenceError):
        train_loop(model, data, cfg, checkpoint_dir=tmp_path)
    assert (tmp_path / "last_good.cmpz").read_bytes() == model_to_bytes(model)


def test_preference_inputs_must_match_model():
    with pytest.raises(ConfigError):
        Trainer(tiny_model(), TrainConfig(preferences=[PreferenceSpec("glimpse")]))


def test_single_module_matches_supervised_trainer():
    def make():
        cfg = ComposerConfig((2, 2), 2, [[ModuleSpec([5], 3)], [ModuleSpec([4], 2)]], controller_pool=1)
        return Composer(cfg, 7)

    cfg = TrainConfig(batch_size=16, lr=0.2, steps=60, seed=3, baseline="moving_average")
    a, b = make(), make()
    ra = train_loop(a, toy_dataset(), cfg)
    rb = supervised_train_loop(b, toy_dataset(), cfg)
    assert [r.loglik for r in ra] == [r.loglik for r in rb]
    assert model_to_bytes(a) == model_to_bytes(b)
    # score term is identically zero: controller parameters never move
    fresh = make()
    for pid in a.params.ids():
        if pid.startswith("ctrl."):
            np.testing.assert_array_equal(a.params.value(pid), fresh.params.value(pid))


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(lr=-1.0), dict(baseline="ema"),
                                dict(baseline_decay=1.0),
                                dict(preferences=[PreferenceSpec("batch_entropy"),
                                                  PreferenceSpec("per_example_entropy")])])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)
