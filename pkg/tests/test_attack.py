"""Extraction attack tests: schedules, gradients, freeze contract, recovery."""

import numpy as np
import pytest

from canarex import attack as A, data, numerics as nm, training as T
from canarex.errors import AttackDivergedError, ConfigError, ContractViolationError
from canarex.model import ModelConfig
from canarex.numerics import GradTape, Tensor


def make_target(pattern="pin", n=4, seed=5):
    spec = data.generate_canary(pattern, n=n, seed=seed)
    return spec, A.AttackTarget.from_canary(spec)


@pytest.fixture(scope="module")
def trained_small():
    """Small corpus with an injected 1-token pin canary, trained to memorize."""
    corpus = data.synth_corpus(size=300, seed=3)
    spec = data.generate_canary("pin", n=1, seed=11, repetitions=100)
    injected = data.inject_canary(corpus, spec)
    model, report = T.train(
        injected,
        ModelConfig(embedding_dim=16, hidden_dim=12),
        T.TrainConfig(max_epochs=14, learning_rate=1e-3),
        seed=21,
    )
    return model, spec, report


# ---------------------------------------------------------------------------
# config, init, relaxation
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        A.AttackConfig(temperature_init=0.0)
    with pytest.raises(ConfigError):
        A.AttackConfig(lr_decay=1.0)
    with pytest.raises(ConfigError):
        A.AttackConfig(temperature_decay=0.0)
    with pytest.raises(ConfigError):
        A.AttackConfig(init_scheme="sparta")


def test_init_logits_zeros_gives_uniform_activations():
    z = A.init_logits(4, 10, "zeros", seed=0)
    assert z.shape == (4, 10)
    a = nm.softmax_with_temperature(nm.row(z, 0), 0.1)
    assert np.allclose(a.data, 0.1, atol=1e-15)


def test_init_logits_gaussian_reproducible():
    a = A.init_logits(3, 5, "gaussian", seed=9)
    b = A.init_logits(3, 5, "gaussian", seed=9)
    c = A.init_logits(3, 5, "gaussian", seed=10)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert np.abs(a.data).max() < 1.0  # N(0, 0.01) stays small


def test_init_logits_rejects_degenerate():
    with pytest.raises(ConfigError):
        A.init_logits(4, 1, "zeros", seed=0)
    with pytest.raises(ConfigError):
        A.init_logits(0, 10, "zeros", seed=0)
    with pytest.raises(ConfigError):
        A.init_logits(1, 10, "pancake", seed=0)


def test_relax_embed_one_hot_and_mean():
    rng = np.random.default_rng(4)
    w0 = Tensor(rng.normal(size=(6, 3)))
    one_hot = np.full(6, -1e4)
    one_hot[2] = 1e4
    e = A.relax_embed(Tensor(one_hot), 0.1, w0)
    assert np.array_equal(e.data, w0.data[2])

    two = np.full(6, -1e4)
    two[1] = two[4] = 1e4
    e = A.relax_embed(Tensor(two), 0.1, w0)
    assert np.allclose(e.data, w0.data[[1, 4]].mean(axis=0), atol=1e-12)


def test_relax_embed_shift_invariant():
    rng = np.random.default_rng(8)
    w0 = Tensor(rng.normal(size=(5, 4)))
    z = rng.normal(size=5)
    e1 = A.relax_embed(Tensor(z), 0.3, w0)
    e2 = A.relax_embed(Tensor(z + 123.456), 0.3, w0)
    assert np.all(np.abs(e1.data - e2.data) < 1e-12)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


def test_schedules_match_closed_form():
    cfg = A.AttackConfig()
    assert A.temperature_at(cfg, 250) == 0.1 * 0.997**250
    assert A.learning_rate_at(cfg, 250) == 6.5e-3 * 0.995**250
    assert A.temperature_at(cfg, 250) == pytest.approx(0.0472, abs=5e-5)
    for t in (0, 1, 17, 250):
        assert abs(A.temperature_at(cfg, t) - 0.1 * 0.997**t) == 0.0
        assert abs(A.learning_rate_at(cfg, t) - 6.5e-3 * 0.995**t) == 0.0


def test_run_records_final_schedule_values(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    cfg = A.AttackConfig(attack_epochs=7, seed=1)
    result = A.run_attack(model, target, v0, cfg)
    assert result.final_temperature == 0.1 * 0.997**7
    assert result.final_learning_rate == 6.5e-3 * 0.995**7
    assert result.epochs_run == 7
    assert len(result.loss_trace) == 7


# ---------------------------------------------------------------------------
# step contract
# ---------------------------------------------------------------------------


def test_registry_check_rejects_watched_params(trained_small):
    model, _, _ = trained_small
    with GradTape() as tape:
        tape.watch(model.params["ic.weight"], "ic.weight")
        with pytest.raises(ContractViolationError, match="registry"):
            A.check_registry_excludes_params(tape, model.params)


def test_theta_hash_identical_after_100_steps(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    w0 = model.word_rows(v0)
    before = model.params_hash()
    state = A.AttackState(
        logits=A.init_logits(target.n_unknown, len(v0), "zeros", 0),
        temperature=0.1,
        adam=nm.adam_init({"Z": nm.zeros((target.n_unknown, len(v0)))}, 6.5e-3),
    )
    for t in range(1, 101):
        state, _ = A.attack_step(state, model, target, w0, None, 0.1, 1e-3)
    assert model.params_hash() == before
    assert state.epoch == 100


def test_attack_loss_gradient_matches_fd(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    w0 = model.word_rows(v0)
    logits = Tensor(np.random.default_rng(0).normal(0, 0.1, size=(target.n_unknown, len(v0))))

    def loss_fn():
        inputs, _ = A._relaxed_inputs(logits, 0.1, target, w0, None)
        return model.loss(inputs, target.intent, list(target.ner_tags)).loss

    report = nm.gradient_check(loss_fn, {"Z": logits}, h=1e-5, tol=1e-4)
    assert report.passed, report


def test_first_step_does_not_increase_loss(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    w0 = model.word_rows(v0)
    state = A.AttackState(
        logits=A.init_logits(target.n_unknown, len(v0), "zeros", 0),
        temperature=0.1,
        adam=nm.adam_init({"Z": nm.zeros((target.n_unknown, len(v0)))}, 6.5e-3),
    )
    state, loss0 = A.attack_step(state, model, target, w0, None, 0.1, 6.5e-3)
    _, loss1 = A.attack_step(state, model, target, w0, None, 0.1, 6.5e-3)
    assert loss1 <= loss0 + 1e-12


def test_one_hot_forcing_matches_discrete_loss(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    w0 = model.word_rows(v0)
    chosen = [3]
    z = np.full((1, len(v0)), -1e4)
    z[0, chosen[0]] = 1e4
    relaxed_loss = A._attack_loss_value(model, target, Tensor(z), 0.05, w0, None)
    tokens = list(target.prefix_tokens) + [v0.tokens[chosen[0]]]
    discrete_loss = float(
        model.loss(tokens, target.intent, list(target.ner_tags)).loss
    )
    assert relaxed_loss == pytest.approx(discrete_loss, abs=1e-9)


def test_row_shift_does_not_change_decode(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    cfg = A.AttackConfig(attack_epochs=5, seed=3)
    base = A.run_attack(model, target, v0, cfg)

    # decode is a per-row argmax of the final activations; adding a constant
    # per row to the logits leaves it unchanged
    shifted = base.activations.copy()
    logits_like = np.log(np.maximum(shifted, 1e-300))
    picks_base, _ = A._decode_rows(logits_like)
    picks_shift, _ = A._decode_rows(logits_like + np.arange(1, len(picks_base) + 1)[:, None] * 7.5)
    assert picks_base == picks_shift


def test_decode_tie_breaks_low_and_is_recorded():
    scores = np.array([[0.5, 0.5, 0.1], [0.2, 0.3, 0.3]])
    picks, ties = A._decode_rows(scores)
    assert picks == [0, 1]
    assert ties == [0, 1]


def test_activations_are_distributions(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    result = A.run_attack(model, target, v0, A.AttackConfig(attack_epochs=10, seed=0))
    sums = result.activations.sum(axis=1)
    assert np.all(np.abs(sums - 1.0) < 1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported_with_epoch(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    cfg = A.AttackConfig(attack_epochs=10, learning_rate=float("inf"), seed=0)
    with pytest.raises(AttackDivergedError, match="epoch"):
        A.run_attack(model, target, v0, cfg)


# ---------------------------------------------------------------------------
# end-to-end recovery and determinism
# ---------------------------------------------------------------------------


def test_recovers_single_unknown_token(trained_small):
    model, spec, report = trained_small
    assert report.train_losses[-1] < 0.5  # memorized
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    result = A.run_attack(model, target, v0, A.AttackConfig(seed=2))
    assert result.tokens == list(spec.unknown_tokens)
    assert result.theta_hash_before == result.theta_hash_after


def test_run_attack_deterministic(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    cfg = A.AttackConfig(attack_epochs=40, init_scheme="gaussian", seed=13)
    r1 = A.run_attack(model, target, v0, cfg)
    r2 = A.run_attack(model, target, v0, cfg)
    assert r1.tokens == r2.tokens
    assert r1.loss_trace == r2.loss_trace
    assert np.array_equal(r1.activations, r2.activations)


def test_full_vocab_mode(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    cfg = A.AttackConfig(attack_epochs=3, use_full_vocab=True, seed=0)
    result = A.run_attack(model, target, v0, cfg)
    assert result.v0_size == len(model.vocab) - 1  # UNK excluded
    assert result.v0_name == "full"


# ---------------------------------------------------------------------------
# continuous baseline
# ---------------------------------------------------------------------------


def test_continuous_decodes_within_candidates(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    result = A.continuous_baseline_attack(
        model, target, v0, A.AttackConfig(attack_epochs=30, seed=7)
    )
    assert all(t in v0.tokens for t in result.tokens)
    assert result.exacted_from == "continuous"
    assert result.theta_hash_before == result.theta_hash_after


def test_continuous_zero_steps_from_true_embedding(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    true_vec = model.params["embed.word"].data[
        model.vocab.index(spec.unknown_tokens[0])
    ]
    init = true_vec[None, :].copy()
    result = A.continuous_baseline_attack(
        model, target, v0, A.AttackConfig(attack_epochs=0, seed=0), init_vectors=init
    )
    assert result.tokens == list(spec.unknown_tokens)
    assert result.epochs_run == 0


def test_continuous_deterministic(trained_small):
    model, spec, _ = trained_small
    target = A.AttackTarget.from_canary(spec)
    v0 = data.candidate_set(model.vocab, "digits")
    cfg = A.AttackConfig(attack_epochs=20, seed=3)
    r1 = A.continuous_baseline_attack(model, target, v0, cfg)
    r2 = A.continuous_baseline_attack(model, target, v0, cfg)
    assert r1.tokens == r2.tokens and r1.loss_trace == r2.loss_trace
