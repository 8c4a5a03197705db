"""Trainer, early stopping, evaluation and checkpoint tests."""

import numpy as np
import pytest

from canarex import data, training as T
from canarex.errors import CheckpointError, ConfigError, TrainingDivergedError
from canarex.model import ModelConfig


def tiny_corpus(n_train=10, seed=0):
    corpus = data.synth_corpus(size=n_train + 2, seed=seed, val_fraction=0.0)
    train = corpus.train[:n_train]
    val = corpus.train[n_train:]
    return data.Corpus(train=train, val=val)


SMALL = ModelConfig(embedding_dim=8, hidden_dim=6)


def test_training_descends_on_tiny_corpus():
    corpus = tiny_corpus()
    cfg = T.TrainConfig(max_epochs=5, learning_rate=5e-3)
    model, report = T.train(corpus, SMALL, cfg, seed=1)
    assert len(report.train_losses) == 5
    assert report.train_losses[-1] < report.train_losses[0]
    assert report.stopped_epoch == 5


def test_training_deterministic():
    corpus = tiny_corpus()
    cfg = T.TrainConfig(max_epochs=3)
    m1, r1 = T.train(corpus, SMALL, cfg, seed=7)
    m2, r2 = T.train(corpus, SMALL, cfg, seed=7)
    assert r1.to_dict() == r2.to_dict()
    assert m1.params_hash() == m2.params_hash()
    m3, _ = T.train(corpus, SMALL, cfg, seed=8)
    assert m3.params_hash() != m1.params_hash()


def test_early_stop_schedule_plateau_arithmetic():
    # strict improvements up to epoch 3, then a plateau: stop at 3 + patience
    losses = [3.0, 2.0, 1.0] + [1.0] * 40
    best, stop = T.early_stop_schedule(losses, patience=20)
    assert best == 3
    assert stop == 23
    # still-improving curve never stops
    best, stop = T.early_stop_schedule([3.0, 2.5, 2.0, 1.5], patience=2)
    assert stop is None and best == 4


def test_early_stopping_restores_best_epoch_params():
    corpus = tiny_corpus()
    cfg = T.TrainConfig(
        max_epochs=12, learning_rate=2e-2, early_stopping_enabled=True, patience=3
    )
    model, report = T.train(corpus, SMALL, cfg, seed=3)
    assert report.stopped_epoch <= 12
    if report.best_epoch is not None and report.val_losses:
        restored = T._mean_loss(model, model.params, corpus.val)
        assert restored == pytest.approx(min(report.val_losses), abs=1e-9)


def test_early_stopping_needs_val_split():
    corpus = data.Corpus(train=tiny_corpus().train, val=[])
    cfg = T.TrainConfig(early_stopping_enabled=True)
    with pytest.raises(ConfigError):
        T.train(corpus, SMALL, cfg, seed=0)


def test_dropout_training_still_deterministic():
    corpus = tiny_corpus()
    cfg = T.TrainConfig(max_epochs=2, dropout_enabled=True)
    m1, r1 = T.train(corpus, SMALL, cfg, seed=5)
    m2, r2 = T.train(corpus, SMALL, cfg, seed=5)
    assert m1.params_hash() == m2.params_hash()
    assert r1.train_losses == r2.train_losses


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostics():
    # saturating gates keep finite-lr runs finite, so force the overflow:
    # an infinite step makes zero-gradient coordinates inf*0 = NaN
    corpus = tiny_corpus()
    cfg = T.TrainConfig(max_epochs=30, learning_rate=float("inf"))
    with pytest.raises(TrainingDivergedError, match="epoch"):
        T.train(corpus, SMALL, cfg, seed=0)


def test_evaluate_model_majority_and_overfit():
    # single-intent corpus: any model that emits that intent scores 1.0
    single = data.Corpus(
        train=[data.LabeledExample(("hello", "there"), ("O", "O"), "Greet")] * 6,
        val=[data.LabeledExample(("hello", "there"), ("O", "O"), "Greet")],
    )
    cfg = T.TrainConfig(max_epochs=2)
    model, report = T.train(single, SMALL, cfg, seed=0)
    assert report.intent_accuracy == 1.0

    # overfit run evaluated on its own training data: both accuracies 1.0
    corpus = tiny_corpus()
    fit_corpus = data.Corpus(train=corpus.train, val=corpus.train)
    model, report = T.train(
        fit_corpus, SMALL, T.TrainConfig(max_epochs=60, learning_rate=1e-2), seed=2
    )
    intent_acc, tag_acc = T.evaluate_model(model, corpus.train)
    assert intent_acc == 1.0
    assert tag_acc == 1.0


def test_random_model_intent_accuracy_near_chance():
    gen = np.random.default_rng(0)
    intents = ["A", "B", "C", "D"]
    examples = [
        data.LabeledExample(("tok",), ("O",), intents[int(gen.integers(0, 4))])
        for _ in range(400)
    ]
    corpus = data.Corpus(train=examples[:4], val=examples)
    from canarex.model import NLUModel

    model = NLUModel.initialize(
        SMALL,
        data.build_vocabulary(corpus),
        data.build_char_vocabulary(corpus),
        corpus.intent_labels,
        corpus.tag_labels,
        seed=9,
    )
    intent_acc, _ = T.evaluate_model(model, examples)
    # untrained model predicts one fixed intent for the single token; balanced
    # labels put accuracy near 1/4
    assert abs(intent_acc - 0.25) < 0.08


def test_checkpoint_round_trip_bit_exact(tmp_path):
    corpus = tiny_corpus()
    model, _ = T.train(corpus, SMALL, T.TrainConfig(max_epochs=1), seed=4)
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(model, path)
    loaded = T.load_checkpoint(path)
    assert loaded.params_hash() == model.params_hash()
    assert loaded.vocab.tokens == model.vocab.tokens
    assert loaded.intent_labels == model.intent_labels
    assert loaded.config == model.config
    for k in model.params:
        assert np.array_equal(loaded.params[k].data, model.params[k].data)


def test_checkpoint_inspect_and_truncation(tmp_path):
    corpus = tiny_corpus()
    model, _ = T.train(corpus, SMALL, T.TrainConfig(max_epochs=1), seed=4)
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(model, path)

    info = T.inspect_checkpoint(path)
    assert info["vocab_size"] == len(model.vocab)
    assert info["params_sha256"] == model.params_hash()
    assert info["tensor_shapes"]["embed.word"] == [len(model.vocab), 8]

    blob = path.read_bytes()
    truncated = tmp_path / "broken.ckpt"
    truncated.write_bytes(blob[: len(blob) - 17])
    with pytest.raises(CheckpointError, match="truncated"):
        T.inspect_checkpoint(truncated)

    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        T.inspect_checkpoint(garbage)
