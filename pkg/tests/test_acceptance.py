"""Acceptance suite: one test per release criterion, each printing a PASS/FAIL
line.  The expensive fixtures (full extraction sweeps on the 2000-example
synthetic corpus) are shared across criteria; expect the whole module to take
roughly 20-30 minutes single-threaded.

Run with `pytest tests/test_acceptance.py -v -s` for live criterion lines.
"""

import contextlib
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from canarex import attack as A, crf, data, metrics as MX, numerics as nm
from canarex import experiment as X
from canarex.model import ModelConfig, NLUModel
from canarex.numerics import Tensor
from canarex.training import TrainConfig


@contextlib.contextmanager
def criterion(number: int, title: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} ({title}): FAIL")
        raise
    print(f"ACCEPTANCE {number} ({title}): PASS")


# ---------------------------------------------------------------------------
# shared sweeps (criteria 4, 5, 6, 8, 9)
# ---------------------------------------------------------------------------

SWEEP_CONFIG = {
    "master_seed": 20240,
    "corpus": {"synth": {"size": 2000, "seed": 7}},
    "patterns": ["pin"],
    "n_values": [4],
    "r_values": [100],
    "defense_sets": [[]],
    "trials": 10,
    "model": {"embedding_dim": 40, "hidden_dim": 24},
    "train": {"max_epochs": 10, "learning_rate": 1e-3},
    "attack": {},  # published schedule: 250 epochs, lr 6.5e-3/0.995, T 0.1/0.997
    "v0": "digits",
    "run_continuous_baseline": True,
    "workers": 1,
}

CELL = "pin-n4-R100-none"
DEFENDED_CELL = "pin-n4-R100-D+ES+CE"


def _summary(out_dir: Path, cell: str) -> dict:
    with open(out_dir / "cells" / cell / "summary.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def attack_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "sweep-main"
    config = X.ExperimentConfig.from_dict(SWEEP_CONFIG)
    started = time.perf_counter()
    status = X.run_experiment(config, out)
    elapsed = time.perf_counter() - started
    assert status.exit_code == 0, "main sweep had failing trials"
    return out, elapsed


@pytest.fixture(scope="module")
def attack_sweep_rerun(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "sweep-rerun"
    config = X.ExperimentConfig.from_dict(SWEEP_CONFIG)
    status = X.run_experiment(config, out)
    assert status.exit_code == 0
    return out


@pytest.fixture(scope="module")
def defended_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "sweep-defended"
    config = X.ExperimentConfig.from_dict(
        {
            **SWEEP_CONFIG,
            "defense_sets": [["D", "ES", "CE"]],
            "run_continuous_baseline": False,
        }
    )
    status = X.run_experiment(config, out)
    assert status.exit_code == 0
    return out


# ---------------------------------------------------------------------------
# criterion 1: CRF forward/Viterbi vs exhaustive enumeration
# ---------------------------------------------------------------------------


def test_criterion_1_crf_oracle_equivalence():
    with criterion(1, "CRF oracle equivalence"):
        started = time.perf_counter()
        gen = np.random.default_rng(2024)
        for _ in range(200):
            n_tags = int(gen.integers(1, 5))
            length = int(gen.integers(1, 5))
            em = gen.normal(scale=2.0, size=(length, n_tags))
            tr = gen.normal(scale=2.0, size=(n_tags + 2, n_tags + 2))
            tags = gen.integers(0, n_tags, size=length).tolist()

            scores = {}
            bos, eos = n_tags, n_tags + 1
            for path in itertools.product(range(n_tags), repeat=length):
                s = tr[bos, path[0]] + em[0, path[0]]
                for i in range(1, length):
                    s += tr[path[i - 1], path[i]] + em[i, path[i]]
                s += tr[path[-1], eos]
                scores[path] = s
            values = np.array(list(scores.values()))
            m = values.max()
            log_z = m + math.log(np.exp(values - m).sum())
            gold = scores[tuple(tags)]

            nll = float(crf.crf_log_likelihood(Tensor(em), tags, Tensor(tr), n_tags))
            assert abs(nll - (log_z - gold)) < 1e-10

            got_path, got_score = crf.crf_viterbi_decode(Tensor(em), Tensor(tr), n_tags)
            want_path = max(scores, key=lambda p: (scores[p], [-i for i in p]))
            best = max(values)
            assert abs(got_score - best) < 1e-10
            assert scores[tuple(got_path)] == pytest.approx(best, abs=1e-10)
            assert tuple(got_path) == want_path
        elapsed = time.perf_counter() - started
        assert elapsed < 10.0, f"criterion 1 took {elapsed:.1f}s (limit 10s)"


# ---------------------------------------------------------------------------
# criterion 2: tape gradients vs central finite differences
# ---------------------------------------------------------------------------


def test_criterion_2_gradient_fidelity():
    with criterion(2, "gradient fidelity"):
        started = time.perf_counter()
        tokens = [f"tok{i}" for i in range(16)] + list(data.DIGIT_WORDS) + [
            "my", "pin", "code", "is",
        ]
        vocab = data.Vocabulary(tokens)
        assert len(vocab) == 31  # 30 tokens + UNK
        char_vocab = data.Vocabulary(c for t in tokens for c in t)
        config = ModelConfig(embedding_dim=8, hidden_dim=8)
        model = NLUModel.initialize(
            config, vocab, char_vocab,
            ["PinIntent", "Other"],
            ["O", "B-canary", "I-canary"],
            seed=77,
        )

        # model loss w.r.t. every parameter tensor
        example_tokens = ["my", "pin", "code", "is", "two", "nine"]
        example_tags = ["O", "O", "O", "O", "B-canary", "I-canary"]

        def model_loss_fn():
            return model.loss(example_tokens, "PinIntent", example_tags).loss

        report = nm.gradient_check(model_loss_fn, model.params, h=1e-5, tol=1e-4)
        assert report.passed, (
            f"model-loss gradient mismatch at {report.worst_param}"
            f"{report.worst_index}: rel {report.max_rel_error:.2e}"
        )

        # attack loss w.r.t. the logit matrix on a 2-unknown canary
        spec = data.generate_canary("pin", n=2, seed=5)
        target = A.AttackTarget.from_canary(spec)
        v0 = data.candidate_set(vocab, "digits")
        w0 = model.word_rows(v0)
        logits = Tensor(
            np.random.default_rng(3).normal(0.0, 0.1, size=(2, len(v0)))
        )

        def attack_loss_fn():
            inputs, _ = A._relaxed_inputs(logits, 0.1, target, w0, None)
            return model.loss(inputs, target.intent, list(target.ner_tags)).loss

        z_report = nm.gradient_check(attack_loss_fn, {"Z": logits}, h=1e-5, tol=1e-4)
        assert z_report.passed, (
            f"attack-loss gradient mismatch: rel {z_report.max_rel_error:.2e}"
        )
        elapsed = time.perf_counter() - started
        assert elapsed < 60.0, f"criterion 2 took {elapsed:.1f}s (limit 60s)"


# ---------------------------------------------------------------------------
# criterion 3: analytic baselines and Monte-Carlo agreement
# ---------------------------------------------------------------------------


def test_criterion_3_baseline_formulas():
    with criterion(3, "baseline formulas"):
        acc, hdt = MX.random_baseline(4, 10)
        assert acc == pytest.approx(1e-4, rel=1e-12)
        assert hdt == pytest.approx(0.90, rel=1e-12)

        acc12, hdt12 = MX.random_baseline(4, 12)
        assert acc12 == pytest.approx(4.82e-5, abs=5e-8)
        assert abs(hdt12 - 0.92) <= 0.005

        gen = np.random.default_rng(424242)
        trials = 100_000
        guesses = gen.integers(0, 10, size=(trials, 4))
        truth = gen.integers(0, 10, size=(trials, 4))
        acc_hat = (guesses == truth).all(axis=1).mean()
        hdts = (guesses != truth).mean(axis=1)
        se_acc = math.sqrt(acc * (1 - acc) / trials)
        se_hdt = hdts.std(ddof=1) / math.sqrt(trials)
        assert abs(acc_hat - acc) <= 3 * se_acc
        assert abs(hdts.mean() - hdt) <= 3 * se_hdt


# ---------------------------------------------------------------------------
# criteria 4-6: sweeps
# ---------------------------------------------------------------------------


def test_criterion_4_attack_beats_chance(attack_sweep):
    with criterion(4, "attack beats chance"):
        out, elapsed = attack_sweep
        summary = _summary(out, CELL)
        assert summary["baseline_hdt"] == pytest.approx(0.90)
        assert summary["baseline_accuracy"] == pytest.approx(1e-4)
        assert len(summary["trials"]) == 10
        assert summary["mean_hdt"] <= 0.6, f"mean HDT {summary['mean_hdt']}"
        assert summary["mean_accuracy"] >= 0.1, f"mean acc {summary['mean_accuracy']}"
        assert elapsed < 1800.0, f"sweep took {elapsed:.0f}s (limit 30 min)"


def test_criterion_5_continuous_baseline_at_chance(attack_sweep):
    with criterion(5, "continuous baseline at chance"):
        out, _ = attack_sweep
        summary = _summary(out, CELL)
        cont = summary["mean_continuous_hdt"]
        assert cont is not None and len(summary["trials"]) >= 10
        assert abs(cont - 0.90) <= 0.1, f"continuous HDT {cont}"


def test_criterion_6_defenses_stop_the_attack(attack_sweep, defended_sweep):
    with criterion(6, "defense efficacy"):
        undefended = _summary(attack_sweep[0], CELL)
        defended = _summary(defended_sweep, DEFENDED_CELL)
        assert defended["mean_accuracy"] == 0.0, (
            f"defended accuracy {defended['mean_accuracy']}"
        )
        assert defended["mean_hdt"] >= defended["baseline_hdt"] - 0.1, (
            f"defended HDT {defended['mean_hdt']}"
        )
        drop = (
            undefended["mean_intent_accuracy"] - defended["mean_intent_accuracy"]
        )
        assert drop < 0.05, f"defences cost {drop:.3f} intent accuracy"


# ---------------------------------------------------------------------------
# criterion 7: schedule exactness
# ---------------------------------------------------------------------------


def test_criterion_7_schedule_exactness():
    with criterion(7, "schedule exactness"):
        config = A.AttackConfig()
        assert abs(A.temperature_at(config, 250) - 0.1 * 0.997**250) < 1e-12
        assert abs(A.learning_rate_at(config, 250) - 6.5e-3 * 0.995**250) < 1e-12
        for t in range(0, 251):
            assert abs(A.temperature_at(config, t) - 0.1 * 0.997**t) < 1e-12
            assert abs(A.learning_rate_at(config, t) - 6.5e-3 * 0.995**t) < 1e-12


# ---------------------------------------------------------------------------
# criterion 8: frozen parameters across every attack run
# ---------------------------------------------------------------------------


def test_criterion_8_parameters_frozen(attack_sweep, defended_sweep):
    with criterion(8, "frozen-parameters contract"):
        for out, cell in ((attack_sweep[0], CELL), (defended_sweep, DEFENDED_CELL)):
            summary = _summary(out, cell)
            assert all(t["theta_frozen"] for t in summary["trials"]), cell

        # plus a direct hash check around one fresh attack
        corpus = data.synth_corpus(size=200, seed=1)
        spec = data.generate_canary("pin", n=2, seed=3, repetitions=20)
        injected = data.inject_canary(corpus, spec)
        from canarex.training import train

        model, _ = train(
            injected,
            ModelConfig(embedding_dim=10, hidden_dim=8),
            TrainConfig(max_epochs=2),
            seed=5,
        )
        before = model.params_hash()
        result = A.run_attack(
            model,
            A.AttackTarget.from_canary(spec),
            data.candidate_set(model.vocab, "digits"),
            A.AttackConfig(attack_epochs=30, seed=0),
        )
        assert model.params_hash() == before
        assert result.theta_hash_before == before
        assert result.theta_hash_after == before


# ---------------------------------------------------------------------------
# criterion 9: byte-identical rerun
# ---------------------------------------------------------------------------


def test_criterion_9_byte_identical_rerun(attack_sweep, attack_sweep_rerun):
    with criterion(9, "deterministic rerun"):
        first, _ = attack_sweep
        second = attack_sweep_rerun
        rel_summary = Path("cells") / CELL / "summary.json"
        assert (first / rel_summary).read_bytes() == (second / rel_summary).read_bytes()
        assert (first / "summary.csv").read_bytes() == (second / "summary.csv").read_bytes()
        for trial in range(10):
            rel = Path("cells") / CELL / "trials" / f"trial-{trial:02d}.json"
            assert (first / rel).read_bytes() == (second / rel).read_bytes()
