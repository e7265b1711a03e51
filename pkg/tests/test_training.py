import numpy as np
import pytest

from moeforge import naming, training
from moeforge.compose import compose_moe
from moeforge.errors import TrainingError
from moeforge.recipe import ExpertSource, GatingMode, Granularity, MoeRecipe
from moeforge.runtime import Model, model_forward
from moeforge.tensorstore import save_checkpoint
from moeforge.tinymodels import TINY, random_dense_checkpoint
from moeforge.training import (
    Batch,
    Regime,
    Schedule,
    TrainConfig,
    Trainable,
    finite_diff_check,
    grad,
    lm_loss,
    make_batch,
    smoothed,
    train_routers,
    trainable_names,
    write_loss_curve,
)

import oracles
import taskgen

rng = np.random.default_rng(11)


def tiny_moe(gating=GatingMode.NOISY, n=2, k=2, granularity=Granularity.FFN,
             seed=0, identical=False):
    base = random_dense_checkpoint(TINY, seed=50)
    sources = [ExpertSource(
        "full", base if identical else random_dense_checkpoint(TINY, seed=50 + i), f"e{i}")
        for i in range(n)]
    recipe = MoeRecipe(gating, sources, top_k=k, noise_sigma=0.01, seed=seed,
                       granularity=granularity)
    return Model(compose_moe(base, recipe), dtype="f64")


def tiny_batch(seed=0, length=8):
    r = np.random.default_rng(seed)
    return make_batch(r.integers(0, TINY.vocab_size, size=length), Regime.PRETRAIN)


# ---- lm_loss ----

def test_lm_loss_uniform_logits():
    vocab = 11
    logits = np.full((4, vocab), 2.5)
    loss = lm_loss(logits, [0, 3, 7, 10], np.ones(4, dtype=bool))
    np.testing.assert_allclose(float(loss), np.log(vocab))


def test_lm_loss_dominant_correct_class():
    logits = np.zeros((3, 5))
    targets = [1, 2, 4]
    logits[np.arange(3), targets] = 100.0
    assert float(lm_loss(logits, targets, np.ones(3, dtype=bool))) < 1e-10


def test_lm_loss_matches_scalar_oracle():
    logits = rng.standard_normal((5, 7))
    targets = rng.integers(0, 7, size=5)
    mask = np.array([1, 0, 1, 1, 0], dtype=bool)
    want = np.mean([
        -np.log(oracles.scalar_softmax(list(logits[i]))[targets[i]])
        for i in range(5) if mask[i]
    ])
    np.testing.assert_allclose(float(lm_loss(logits, targets, mask)), want, atol=1e-12)


def test_lm_loss_all_masked():
    with pytest.raises(TrainingError, match="masked"):
        lm_loss(np.zeros((2, 4)), [0, 1], np.zeros(2, dtype=bool))


# ---- batches and regimes ----

def test_instruct_regime_masks_prompt_positions():
    b = make_batch([5, 6, 7, 8, 9], Regime.INSTRUCT, prompt_len=3)
    np.testing.assert_array_equal(b.tokens, [5, 6, 7, 8])
    np.testing.assert_array_equal(b.targets, [6, 7, 8, 9])
    np.testing.assert_array_equal(b.mask, [False, False, True, True])


def test_pretrain_regime_masks_nothing():
    b = make_batch([5, 6, 7], Regime.PRETRAIN, prompt_len=2)
    assert b.mask.all()


def test_fully_masked_batch_rejected():
    with pytest.raises(TrainingError, match="no active"):
        make_batch([1, 2, 3], Regime.INSTRUCT, prompt_len=10)


# ---- grad ----

@pytest.mark.parametrize("granularity", [Granularity.FFN, Granularity.FGMLP])
@pytest.mark.parametrize("gating", [GatingMode.NOISY, GatingMode.TRAINED])
@pytest.mark.parametrize("trainable", [Trainable.ROUTER, Trainable.ROUTER_PLUS_EMBED])
def test_grad_matches_finite_differences(granularity, gating, trainable):
    model = tiny_moe(gating=gating, n=3, k=2, granularity=granularity, seed=13)
    batch = tiny_batch(seed=3)
    cfg = TrainConfig(trainable=trainable)
    names = trainable_names(model, cfg)
    err = finite_diff_check(model, batch, names, eps=1e-4, samples=64)
    assert err < 1e-4, f"{granularity} {gating} {trainable}: {err:.3e}"


def test_identical_experts_give_zero_router_gradient():
    model = tiny_moe(n=3, k=2, identical=True, seed=4)
    grads = grad(model, tiny_batch(seed=5), TrainConfig(trainable=Trainable.ROUTER))
    for name, g in grads.items():
        assert np.max(np.abs(g)) < 1e-12, name


def test_router_config_excludes_embedding():
    model = tiny_moe(seed=2)
    grads = grad(model, tiny_batch(), TrainConfig(trainable=Trainable.ROUTER))
    assert naming.EMBED not in grads
    assert set(grads) == set(model.router_names())

    grads2 = grad(model, tiny_batch(), TrainConfig(trainable=Trainable.ROUTER_PLUS_EMBED))
    assert naming.EMBED in grads2


def test_grad_rejects_gateless():
    model = tiny_moe(gating=GatingMode.GATELESS)
    with pytest.raises(TrainingError, match="gate-less"):
        grad(model, tiny_batch(), TrainConfig())


def test_finite_diff_zero_task_error_is_zero():
    # Identical experts: loss independent of routing, both gradients vanish.
    model = tiny_moe(n=2, k=2, identical=True, seed=6)
    err = finite_diff_check(model, tiny_batch(seed=7), model.router_names(), samples=32)
    assert err == 0.0


def test_finite_diff_detects_injected_bug():
    model = tiny_moe(n=2, k=2, seed=8)
    batch = tiny_batch(seed=9)
    names = model.router_names()
    corrupted = grad(model, batch, TrainConfig(trainable=Trainable.ROUTER))
    corrupted = {n: g + 0.1 for n, g in corrupted.items()}
    err = finite_diff_check(model, batch, names, samples=32, analytic=corrupted)
    assert err > 1e-2


# ---- train_routers ----

def test_synthetic_task_routes_each_population_to_its_expert(two_pop_run):
    acc_before = taskgen.routing_accuracy(
        two_pop_run["model"], two_pop_run["corpus"][:64], two_pop_run["labels"][:64])
    acc_after = taskgen.routing_accuracy(
        two_pop_run["trained"], two_pop_run["corpus"][:64], two_pop_run["labels"][:64])
    assert acc_before < 0.7  # noisy init routes at chance
    assert acc_after >= 0.9


def test_synthetic_task_loss_trend(two_pop_run):
    losses = [r.loss for r in two_pop_run["curve"]]
    assert losses[-1] < losses[0]
    sm = smoothed(losses, window=max(1, 3 * len(losses) // 8))
    assert sm[-1] < sm[0]
    assert np.all(np.diff(sm) <= 1e-9)


def test_zero_learning_rate_is_byte_noop(tmp_path):
    model = tiny_moe(seed=20)
    corpus = [tiny_batch(seed=s) for s in range(4)]
    cfg = TrainConfig(learning_rate=0.0, grad_accum_steps=2, seed=1)
    trained, curve = train_routers(model, corpus, cfg)
    p1, p2 = str(tmp_path / "a.st"), str(tmp_path / "b.st")
    save_checkpoint(model.source, p1)
    save_checkpoint(trained.source, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    assert len(curve) == 2


def test_frozen_expert_byte_identity(two_pop_run):
    before = two_pop_run["moe"]
    after = two_pop_run["trained"].source
    trainable = set(two_pop_run["trained"].router_names())
    assert sorted(before.names()) == sorted(after.names())
    changed = []
    for name in before.names():
        if before.entry(name) != after.entry(name):
            changed.append(name)
    assert set(changed) <= trainable
    assert changed  # training did move the routers


def test_training_reproducibility(tmp_path):
    corpus = [tiny_batch(seed=s) for s in range(8)]
    outs = []
    for run in range(2):
        model = tiny_moe(seed=30)
        cfg = TrainConfig(learning_rate=0.05, grad_accum_steps=2, seed=9)
        trained, _ = train_routers(model, corpus, cfg)
        p = str(tmp_path / f"run{run}.st")
        save_checkpoint(trained.source, p)
        outs.append(open(p, "rb").read())
    assert outs[0] == outs[1]


def test_accumulation_equivalence():
    k = 4
    corpus = [tiny_batch(seed=s, length=5 + s) for s in range(k)]
    model = tiny_moe(seed=31)
    accum_cfg = TrainConfig(learning_rate=0.1, grad_accum_steps=k, batch_size=1, seed=3)
    joint_cfg = TrainConfig(learning_rate=0.1, grad_accum_steps=1, batch_size=k, seed=3)
    t1, c1 = train_routers(model, corpus, accum_cfg)
    t2, c2 = train_routers(model, corpus, joint_cfg)
    assert len(c1) == len(c2) == 1
    for name in t1.router_names():
        np.testing.assert_allclose(t1.source.array(name), t2.source.array(name), atol=1e-10)


def test_empty_corpus_rejected():
    with pytest.raises(TrainingError, match="empty"):
        train_routers(tiny_moe(), [], TrainConfig())


def test_adam_optimizer_updates_routers():
    model = tiny_moe(seed=33)
    corpus = [tiny_batch(seed=s) for s in range(4)]
    cfg = TrainConfig(learning_rate=1e-3, grad_accum_steps=2, optimizer="adam")
    trained, curve = train_routers(model, corpus, cfg)
    moved = any(
        not np.array_equal(trained.source.array(n), model.source.array(n))
        for n in model.router_names())
    assert moved and len(curve) == 2


def test_train_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(TrainingError):
        TrainConfig(learning_rate=-1.0).validate()
    with pytest.raises(TrainingError):
        TrainConfig(grad_accum_steps=0).validate()
    with pytest.raises(TrainingError):
        TrainConfig(optimizer="rmsprop").validate()
    TrainConfig().validate()  # paper defaults are valid
    assert TrainConfig().learning_rate == 1e-4
    assert TrainConfig().grad_accum_steps == 16
    assert TrainConfig().batch_size == 1
    assert TrainConfig().epochs == 1
    assert TrainConfig().schedule == Schedule.CONSTANT


def test_loss_curve_csv(tmp_path, two_pop_run):
    path = str(tmp_path / "curve.csv")
    write_loss_curve(path, two_pop_run["curve"][:3])
    lines = open(path).read().strip().splitlines()
    assert lines[0] == "step,loss,lr,tokens_seen"
    assert len(lines) == 4
    step, loss, lr, seen = lines[1].split(",")
    assert int(step) == 1 and float(lr) == 1e-4 and int(seen) > 0


def test_lr_zero_flat_curve():
    model = tiny_moe(seed=35)
    corpus = [tiny_batch(seed=1)] * 4
    _, curve = train_routers(model, corpus, TrainConfig(learning_rate=0.0,
                                                        grad_accum_steps=1))
    losses = {r.loss for r in curve}
    assert len(losses) == 1  # identical batch, frozen weights: flat loss
