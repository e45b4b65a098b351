import json

import numpy as np
import pytest

from lyapflow.errors import ConfigError, ContractError, TrainingDivergence
from lyapflow.model import BASE_GROUPS, STAGE2_GROUPS, icnn_params, input_gradient
from lyapflow.robustness import AttackConfig, evaluate
from lyapflow.training import (
    AdversarialConfig, TrainConfig, adversarial_train, detect_convergence, perturb_features, train,
    train_stage1, train_stage2,
)

from helpers import golden, small_model


def _strip(history):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in history]


# ------------------------------------------------------------ convergence


def test_convergence_examples():
    assert detect_convergence([0.7] * 12, 10, 1e-9)
    assert not detect_convergence([0.5 + 0.05 * k for k in range(6)], 3, 0.01)
    assert not detect_convergence([0.9] * 4, 10, 0.005)
    with pytest.raises(ContractError):
        detect_convergence([], 10, 0.005)


@pytest.mark.parametrize("kw", [dict(window=1), dict(eps_acc=0.0), dict(optimizer="sgd"), dict(lr_stage1=-1.0)])
def test_invalid_train_configs(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# ------------------------------------------------------------------ stage 1


def test_stage1_fits_fixture(fixture_ds):
    r = train_stage1(fixture_ds, small_model(fixture_ds), TrainConfig(stage1_epochs=200))
    assert r.train_acc[-1] >= 0.95
    assert r.model.stage == 1


def test_zero_learning_rate_changes_nothing(fixture_ds):
    m = small_model(fixture_ds)
    r = train_stage1(fixture_ds, m, TrainConfig(lr_stage1=0.0))
    assert r.model.checksum() == m.checksum()
    assert r.converged and len(r.history) == TrainConfig().min_epochs


def test_training_is_deterministic(fixture_ds):
    cfg = TrainConfig(seed=4)
    a = train(fixture_ds, small_model(fixture_ds, seed=4), cfg)
    b = train(fixture_ds, small_model(fixture_ds, seed=4), cfg)
    for ra, rb in zip(a, b):
        assert _strip(ra.history) == _strip(rb.history)
        assert ra.model.checksum() == rb.model.checksum()


def test_adam_option(fixture_ds):
    r = train_stage1(fixture_ds, small_model(fixture_ds), TrainConfig(optimizer="adam"))
    assert r.train_acc[-1] >= 0.95


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good_model(fixture_ds):
    m = small_model(fixture_ds)
    with pytest.raises(TrainingDivergence) as info:
        train_stage1(fixture_ds, m, TrainConfig(lr_stage1=1e12, min_epochs=50, stage1_epochs=50))
    exc = info.value
    assert exc.last_good is not None and exc.epoch >= 0
    assert all(np.all(np.isfinite(v)) for v in exc.last_good.params.values())


def test_epoch_log(fixture_ds, tmp_path):
    r1, r2 = train(fixture_ds, small_model(fixture_ds), TrainConfig(), run_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert len(lines) == len(r1.history) + len(r2.history)
    assert set(lines[0]) == {"epoch", "stage", "train_acc", "val_acc", "loss", "wall_ms"}
    assert [x["stage"] for x in lines] == [1] * len(r1.history) + [2] * len(r2.history)


# ------------------------------------------------------------------ stage 2


@pytest.mark.parametrize("flow,scheme,beta", [
    ("grand", "euler", 1.0), ("graphbel", "rk4", 1.0), ("graphcon", "euler", 1.0), ("grand", "frac_abm", 0.6),
])
def test_stage2_freezes_base_flow(fixture_ds, flow, scheme, beta):
    cfg = TrainConfig(stage1_epochs=25, stage2_epochs=25)
    r1 = train_stage1(fixture_ds, small_model(fixture_ds, flow=flow, scheme=scheme, beta=beta), cfg)
    r2 = train_stage2(fixture_ds, r1.model, cfg)
    assert r2.model.checksum(BASE_GROUPS) == r1.model.checksum(BASE_GROUPS)
    # only stage-2 groups may move; the ICNN stays put when the projection never fires
    assert set(r2.model.names()) == set(r1.model.names(BASE_GROUPS + STAGE2_GROUPS))
    assert r2.model.checksum(("classifier",)) != r1.model.checksum(("classifier",))
    assert all(np.all(P.data >= 0) for P in icnn_params(r2.model).pass_through())
    assert all(np.all(np.isfinite(v)) for v in r2.model.params.values())


def test_stage2_contract(fixture_ds):
    m = small_model(fixture_ds)
    with pytest.raises(ContractError):
        train_stage2(fixture_ds, m, TrainConfig())
    base = train_stage1(fixture_ds, small_model(fixture_ds, lyapunov=False), TrainConfig()).model
    with pytest.raises(ContractError):
        train_stage2(fixture_ds, base, TrainConfig())


def test_stage2_keeps_validation_accuracy(fixture_ds):
    results = {}
    for seed in range(3):
        r1, r2 = train(fixture_ds, small_model(fixture_ds, seed=seed), TrainConfig(seed=seed))
        results[str(seed)] = [r1.val_acc[-1], r2.val_acc[-1]]
    ref = golden("stage2_val_accuracy", lambda: results)
    assert results == ref
    for s1, s2 in results.values():
        assert s2 >= s1 - 0.05


# -------------------------------------------------------- adversarial


def test_zero_radius_adversarial_training_is_standard(fixture_ds):
    std = train(fixture_ds, small_model(fixture_ds), TrainConfig())
    adv = adversarial_train(fixture_ds, small_model(fixture_ds),
                            TrainConfig(adversarial=AdversarialConfig(eps=0.0, pgd_steps=5)))
    for a, b in zip(std, adv):
        assert _strip(a.history) == _strip(b.history)
        assert a.model.checksum() == b.model.checksum()


def test_single_step_is_fgsm(fixture_ds):
    m = small_model(fixture_ds)
    X = np.array(fixture_ds.features)
    idx = fixture_ds.train
    adv = AdversarialConfig(eps=0.2, pgd_steps=1)
    out = perturb_features(m, fixture_ds, X, idx, adv.eps, adv.pgd_steps, adv.alpha, True)
    g = input_gradient(m, fixture_ds, X, idx, True)
    expected = X.copy()
    expected[idx] += 0.2 * np.sign(g[idx])
    assert np.array_equal(out, expected)


def test_adversarial_training_needs_config(fixture_ds):
    with pytest.raises(ContractError):
        adversarial_train(fixture_ds, small_model(fixture_ds), TrainConfig())


def test_adversarial_training_is_at_least_as_robust(fixture_ds):
    attack = [AttackConfig(eps=0.1, steps=20)]
    for seed in range(2):
        _, std = train(fixture_ds, small_model(fixture_ds, seed=seed), TrainConfig(seed=seed))
        _, at = adversarial_train(fixture_ds, small_model(fixture_ds, seed=seed),
                                  TrainConfig(seed=seed, adversarial=AdversarialConfig(0.1, 5)))
        r_std = evaluate(fixture_ds, std.model, attack, [seed]).robust[attack[0].name]["mean"]
        r_at = evaluate(fixture_ds, at.model, attack, [seed]).robust[attack[0].name]["mean"]
        assert r_at >= r_std
