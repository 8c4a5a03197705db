"""Metric, baseline and aggregation tests."""

import numpy as np
import pytest

from canarex import data, metrics as MX
from canarex.errors import ContractViolationError


def test_hdt_cases():
    assert MX.hamming_distance_per_token(["a", "b"], ["a", "b"]) == 0.0
    assert MX.hamming_distance_per_token(
        ["one", "two", "three", "four"], ["one", "two", "nine", "four"]
    ) == 0.25
    assert MX.hamming_distance_per_token(["a", "b"], ["c", "d"]) == 1.0
    with pytest.raises(ContractViolationError):
        MX.hamming_distance_per_token(["a"], ["a", "b"])
    with pytest.raises(ContractViolationError):
        MX.hamming_distance_per_token([], [])


def test_random_baseline_values():
    acc, hdt = MX.random_baseline(4, 10)
    assert acc == pytest.approx(1e-4, rel=1e-12)
    assert hdt == pytest.approx(0.90, rel=1e-12)
    acc, hdt = MX.random_baseline(4, 12)
    assert acc == pytest.approx(4.82e-5, abs=5e-8)
    assert hdt == pytest.approx(0.92, abs=0.005)
    acc, hdt = MX.random_baseline(1, 2)
    assert acc == 0.5 and hdt == 0.5


def test_baseline_monte_carlo_agreement():
    # uniform guessing simulated at 1e5 trials agrees within 3 standard errors
    gen = np.random.default_rng(123)
    n, v0 = 4, 10
    trials = 100_000
    guesses = gen.integers(0, v0, size=(trials, n))
    truth = gen.integers(0, v0, size=(trials, n))
    matches = (guesses == truth).all(axis=1)
    hdts = (guesses != truth).mean(axis=1)

    acc_hat = matches.mean()
    hdt_hat = hdts.mean()
    acc, hdt = MX.random_baseline(n, v0)
    se_acc = np.sqrt(acc * (1 - acc) / trials)
    se_hdt = hdts.std(ddof=1) / np.sqrt(trials)
    assert abs(acc_hat - acc) <= 3 * se_acc
    assert abs(hdt_hat - hdt) <= 3 * se_hdt


def make_trial(idx, hdt, pattern="pin", n=4, r=10, defenses=(), v0=10, seed=100):
    spec = data.generate_canary(pattern, n=n, seed=seed + idx, repetitions=r)
    guess = list(spec.unknown_tokens)
    wrong = int(round(hdt * n))
    for k in range(wrong):
        tok = guess[k]
        pool = [t for t in data.DIGIT_WORDS if t != tok]
        guess[k] = pool[0]
    return MX.TrialReport(
        trial=idx,
        canary=spec,
        reconstructed=guess,
        hdt=wrong / n,
        exact_match=wrong == 0,
        defenses=tuple(defenses),
        v0_size=v0,
        seed=seed + idx,
    )


def test_trial_report_consistency_enforced():
    spec = data.generate_canary("pin", n=4, seed=0, repetitions=10)
    with pytest.raises(ContractViolationError):
        MX.TrialReport(
            trial=0, canary=spec, reconstructed=list(spec.unknown_tokens),
            hdt=0.25, exact_match=True, defenses=(), v0_size=10, seed=0,
        )


def test_aggregate_means():
    trials = [make_trial(i, hdt) for i, hdt in enumerate([0.0, 0.0, 0.25, 0.5])]
    summary = MX.aggregate_trials(trials)
    assert summary.mean_accuracy == 0.5
    assert summary.mean_hdt == pytest.approx((0.0 + 0.0 + 0.25 + 0.5) / 4)
    assert summary.baseline_accuracy == pytest.approx(1e-4)
    assert summary.baseline_hdt == pytest.approx(0.9)


def test_aggregate_ten_trials_four_exact():
    hdts = [0.0] * 4 + [0.25, 0.5, 0.5, 0.75, 1.0, 1.0]
    summary = MX.aggregate_trials([make_trial(i, h) for i, h in enumerate(hdts)])
    assert summary.mean_accuracy == 0.4


def test_aggregate_single_trial_equals_it():
    t = make_trial(0, 0.25)
    summary = MX.aggregate_trials([t])
    assert summary.mean_hdt == t.hdt
    assert summary.mean_accuracy == 0.0


def test_all_zero_hdt_means_full_accuracy():
    summary = MX.aggregate_trials([make_trial(i, 0.0) for i in range(5)])
    assert summary.mean_accuracy == 1.0


def test_aggregate_rejects_mixed_cells():
    a = make_trial(0, 0.0, r=10)
    b = make_trial(1, 0.0, r=100)
    with pytest.raises(ContractViolationError, match="mixed"):
        MX.aggregate_trials([a, b])
    c = make_trial(1, 0.0, defenses=("D",))
    with pytest.raises(ContractViolationError, match="mixed"):
        MX.aggregate_trials([a, c])


def test_trial_round_trip_and_canonical_json():
    t = make_trial(3, 0.25)
    again = MX.TrialReport.from_dict(t.to_dict())
    assert again.to_dict() == t.to_dict()
    summary = MX.aggregate_trials([t])
    s1 = MX.summary_to_json(summary)
    s2 = MX.summary_to_json(MX.aggregate_trials([again]))
    assert s1 == s2
    assert "runtime" not in s1


def test_csv_export(tmp_path):
    summary = MX.aggregate_trials([make_trial(i, h) for i, h in enumerate([0.0, 0.5])])
    out = tmp_path / "trials.csv"
    MX.write_trials_csv([summary], out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "pattern,n,r,defenses,trial,exact_match,hdt,seed"
    assert lines[1].startswith("pin,4,10,none,0,1,0.000000,")
    assert lines[2].startswith("pin,4,10,none,1,0,0.500000,")


def test_defenses_label_order():
    assert MX.defenses_label(("CE", "D", "ES")) == "D+ES+CE"
    assert MX.defenses_label(()) == "none"
    assert MX.defenses_label(("ES",)) == "ES"
