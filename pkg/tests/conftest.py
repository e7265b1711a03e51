import pytest

from moeforge import training
from moeforge.runtime import Model

import taskgen


@pytest.fixture(scope="session")
def two_pop_run():
    """One training run on the constructed two-population task with the
    reference hyperparameters (lr 1e-4, constant schedule, batch size 1,
    grad accumulation 16, 1 epoch), shared by the training, analysis, and
    acceptance suites."""
    moe = taskgen.two_population_moe(seed=0, sigma=0.001)
    model = Model(moe, dtype="f64")
    corpus, labels = taskgen.population_corpus(2048, seq_len=13, seed=1)
    cfg = training.TrainConfig(
        trainable=training.Trainable.ROUTER,
        regime=training.Regime.PRETRAIN,
        epochs=1,
        batch_size=1,
        grad_accum_steps=16,
        learning_rate=1e-4,
        schedule=training.Schedule.CONSTANT,
        seed=0,
    )
    trained, curve = training.train_routers(model, corpus, cfg)
    return {
        "moe": moe,
        "model": model,
        "corpus": corpus,
        "labels": labels,
        "cfg": cfg,
        "trained": trained,
        "curve": curve,
    }
