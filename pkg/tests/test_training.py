import json
from collections import OrderedDict

import numpy as np
import pytest

from robustlens import tensor as T
from robustlens.attacks import AttackConfig
from robustlens.checkpoint import load_checkpoint, save_checkpoint
from robustlens.data import Dataset, generate_synthetic
from robustlens.exceptions import ConfigError, DivergenceError
from robustlens.models import NetworkSpec, ParameterStore, build
from robustlens.tensor import Tensor
from robustlens.training import TrainConfig, attack_at, evaluate, read_history, sgd_step, train


def _store(**arrays):
    spec = NetworkSpec()
    return ParameterStore(spec, OrderedDict((k, Tensor(np.asarray(v, dtype=np.float64), requires_grad=True))
                                            for k, v in arrays.items()))


def test_zero_grads_leave_params_bit_exact():
    p = _store(a=[0.1, 0.2, 0.3])
    before = p["a"].data.tobytes()
    sgd_step(p, {"a": np.zeros(3)}, lr=0.5, batch_size=8)
    assert p["a"].data.tobytes() == before


def test_update_rule_arithmetic():
    p = _store(w=[1.0])
    sgd_step(p, {"w": np.array([2.0])}, lr=0.1, batch_size=4)
    assert p["w"].data[0] == pytest.approx(0.95, abs=1e-15)


def test_nan_gradient_names_parameter_and_changes_nothing():
    p = _store(good=[1.0], bad=[2.0])
    with pytest.raises(DivergenceError, match="bad"):
        sgd_step(p, {"good": np.array([1.0]), "bad": np.array([np.nan])}, lr=0.1, batch_size=1)
    assert p["good"].data[0] == 1.0 and p["bad"].data[0] == 2.0


def test_convex_toy_problem_converges(rng):
    # logistic regression on two separable blobs, trained with the same update rule
    x = np.concatenate([rng.normal(-2, 0.5, (32, 2)), rng.normal(2, 0.5, (32, 2))])
    y = np.repeat([0, 1], 32)
    p = _store(w=np.zeros((2, 2)), b=np.zeros(2))
    for _ in range(200):
        p.zero_grad()
        loss = T.cross_entropy(T.linear(Tensor(x), p["w"], p["b"]), y, reduction="sum")
        loss.backward()
        sgd_step(p, None, lr=1.0, batch_size=len(y))
    final = T.cross_entropy(T.linear(Tensor(x), p["w"], p["b"]), y).item()
    assert final <= 0.01


def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(mode="adversarial")
    with pytest.raises(ConfigError):
        TrainConfig(mode="robust")
    assert TrainConfig(mode="adversarial", attack=AttackConfig()).selection_metric == "average"
    assert TrainConfig().selection_metric == "standard"


def test_attack_schedule():
    full = AttackConfig(epsilon=0.5, step_size=0.1)
    cfg = TrainConfig(mode="adversarial", attack=full, clean_epochs=2, warmup_epochs=4)
    assert attack_at(cfg, 0.5) is None and attack_at(cfg, 2.0) is None
    mid = attack_at(cfg, 3.0)
    assert mid.epsilon == pytest.approx(0.125) and mid.step_size == pytest.approx(0.025)
    assert mid.iterations == full.iterations and mid.norm == full.norm
    assert attack_at(cfg, 6.0) is full and attack_at(cfg, 9.0) is full
    plain = TrainConfig(mode="adversarial", attack=full)
    assert attack_at(plain, 1e-3) is full
    with pytest.raises(ConfigError):
        TrainConfig(warmup_epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(clean_epochs=-0.5)


def test_clean_phase_skips_attacks():
    data, spec = _small_setup()
    seen = []

    def hook(epoch, batch, x, delta):
        seen.append((epoch, delta is None))

    cfg = TrainConfig(lr=0.1, epochs=2, batch_size=16, mode="adversarial", attack=AttackConfig(iterations=2),
                      clean_epochs=1)
    train(build(spec, 0), data, cfg, hooks=[hook])
    assert seen == [(1, True)] * 3 + [(2, False)] * 3


def test_memorises_small_subset():
    data = generate_synthetic(4, 16, size=8, seed=3)
    spec = NetworkSpec(input_shape=(3, 8, 8), num_classes=4, widths=(8, 16), blocks=(1, 1))
    result = train(build(spec, 0), data, TrainConfig(lr=0.2, epochs=50, batch_size=16, seed=0))
    assert evaluate(result.params, data).standard_accuracy >= 95.0


def test_untrained_model_is_near_chance():
    data = generate_synthetic(4, 125, size=8, seed=4)
    spec = NetworkSpec(input_shape=(3, 8, 8), num_classes=4, widths=(8, 16), blocks=(1, 1))
    accs = [evaluate(build(spec, s), data).standard_accuracy for s in range(8)]
    # a single random net can favour one class; the average over inits is chance
    assert abs(np.mean(accs) - 25.0) <= 5.0


def test_null_attack_matches_standard(trained_tiny):
    params, data = trained_tiny
    report = evaluate(params, data, AttackConfig(epsilon=1e-9, step_size=1e-10, iterations=1))
    assert abs(report.robust_accuracy - report.standard_accuracy) <= 0.5
    assert report.sample_count == len(data)
    assert len(report.per_class_accuracy) == 4


def test_standard_model_is_fragile(trained_tiny):
    params, data = trained_tiny
    report = evaluate(params, data, AttackConfig(epsilon=0.5, step_size=0.1, iterations=7))
    assert report.standard_accuracy >= 80.0
    assert report.robust_accuracy < 0.1 * report.standard_accuracy


def _small_setup():
    data = generate_synthetic(4, 12, size=8, seed=5)
    spec = NetworkSpec(input_shape=(3, 8, 8), num_classes=4, widths=(4, 8), blocks=(1, 1))
    return data, spec


def test_training_is_reproducible(tmp_path):
    data, spec = _small_setup()
    cfg = TrainConfig(lr=0.1, epochs=2, batch_size=16, seed=3, mode="adversarial",
                      attack=AttackConfig(iterations=2, seed=4))
    a = train(build(spec, 0), data, cfg, history_path=tmp_path / "a.jsonl")
    b = train(build(spec, 0), data, cfg, history_path=tmp_path / "b.jsonl")
    assert a.history == b.history
    assert a.best.equals(b.best) and a.params.equals(b.params)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert [r["epoch"] for r in read_history(tmp_path / "a.jsonl")] == [1, 2]
    assert set(read_history(tmp_path / "a.jsonl")[0]) == {"epoch", "train_loss", "std_acc", "robust_acc"}


def test_input_store_not_modified():
    data, spec = _small_setup()
    params = build(spec, 0)
    snapshot = params.copy()
    train(params, data, TrainConfig(lr=0.1, epochs=1, batch_size=16))
    assert params.equals(snapshot)


def test_delta_regenerated_every_batch():
    data, spec = _small_setup()
    seen = []

    def hook(epoch, batch, x, delta):
        seen.append((epoch, batch, delta.copy()))

    cfg = TrainConfig(lr=0.1, epochs=2, batch_size=16, mode="adversarial", attack=AttackConfig(iterations=2))
    train(build(spec, 0), data, cfg, hooks=[hook])
    assert len(seen) == 2 * 3
    assert all(np.all(np.linalg.norm(d.reshape(len(d), -1), axis=1) <= 0.5 + 1e-6) for _, _, d in seen)
    # no perturbation is reused across batches or epochs
    digests = {d.tobytes() for _, _, d in seen}
    assert len(digests) == len(seen)


def test_best_checkpoint_maximises_average():
    data, spec = _small_setup()
    cfg = TrainConfig(lr=0.2, epochs=4, batch_size=8, mode="adversarial", attack=AttackConfig(iterations=2))
    result = train(build(spec, 1), data, cfg)
    avgs = [0.5 * (r["std_acc"] + r["robust_acc"]) for r in result.history]
    assert result.best_epoch == int(np.argmax(avgs)) + 1
    rep = evaluate(result.best, data, cfg.attack)
    assert 0.5 * (rep.standard_accuracy + rep.robust_accuracy) == pytest.approx(max(avgs))


def test_divergence_preserves_last_good():
    data, spec = _small_setup()
    with pytest.raises(DivergenceError) as info:
        train(build(spec, 0), data, TrainConfig(lr=1e30, epochs=3, batch_size=16))
    assert info.value.last_good is not None


def test_checkpoint_round_trip_gives_identical_report(tmp_path, trained_tiny):
    params, data = trained_tiny
    save_checkpoint(tmp_path / "m.rlck", params, {"epoch": 3})
    loaded, meta = load_checkpoint(tmp_path / "m.rlck")
    attack = AttackConfig(iterations=3)
    assert meta == {"epoch": 3}
    assert evaluate(params, data, attack) == evaluate(loaded, data, attack)


def test_empty_dataset_rejected():
    _, spec = _small_setup()
    empty = Dataset(np.zeros((0, 3, 8, 8), np.float32), np.zeros(0, int), ["a"])
    with pytest.raises(ConfigError):
        train(build(spec, 0), empty, TrainConfig())
