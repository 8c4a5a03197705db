"""Leakage metrics: exact-match accuracy, Hamming distance per token, the
analytic random-guess baselines, and multi-trial aggregation with JSON/CSV
persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import CanarySpec
from .errors import ContractViolationError

__all__ = [
    "hamming_distance_per_token",
    "random_baseline",
    "TrialReport",
    "ExperimentSummary",
    "aggregate_trials",
    "summary_to_json",
    "write_trials_csv",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ["pattern", "n", "r", "defenses", "trial", "exact_match", "hdt", "seed"]


def hamming_distance_per_token(truth, guess) -> float:
    """Fraction of positions where the reconstruction differs from the truth."""
    truth, guess = list(truth), list(guess)
    if len(truth) != len(guess) or not truth:
        raise ContractViolationError(
            f"sequences must have equal positive length, got {len(truth)} vs {len(guess)}"
        )
    mismatches = sum(a != b for a, b in zip(truth, guess))
    return mismatches / len(truth)


def random_baseline(n: int, v0_size: int) -> tuple[float, float]:
    """Expected (accuracy, HDT) of uniform guessing over the candidate set:
    accuracy (1/|V0|)^n, HDT 1 - 1/|V0|."""
    if n < 1:
        raise ContractViolationError("n must be >= 1")
    if v0_size < 2:
        raise ContractViolationError("candidate set size must be >= 2")
    return (1.0 / v0_size) ** n, 1.0 - 1.0 / v0_size


@dataclass
class TrialReport:
    """One canary + one attack run; exact_match holds iff hdt == 0."""

    trial: int
    canary: CanarySpec
    reconstructed: list[str]
    hdt: float
    exact_match: bool
    defenses: tuple[str, ...]
    v0_size: int
    seed: int
    final_loss: float | None = None
    tie_positions: list[int] = field(default_factory=list)
    theta_frozen: bool | None = None
    continuous_reconstructed: list[str] | None = None
    continuous_hdt: float | None = None
    train_stopped_epoch: int | None = None
    train_best_epoch: int | None = None
    intent_accuracy: float | None = None
    tag_accuracy: float | None = None
    runtime_s: float | None = None  # diagnostics only; never serialized

    def __post_init__(self):
        if self.exact_match != (self.hdt == 0.0):
            raise ContractViolationError(
                f"exact_match={self.exact_match} inconsistent with hdt={self.hdt}"
            )

    def to_dict(self) -> dict:
        """Canonical form: runtime is deliberately left out so that identical
        (config, seed) reruns serialize byte-for-byte."""
        return {
            "trial": self.trial,
            "canary": self.canary.to_dict(),
            "reconstructed": self.reconstructed,
            "hdt": self.hdt,
            "exact_match": self.exact_match,
            "defenses": list(self.defenses),
            "v0_size": self.v0_size,
            "seed": self.seed,
            "final_loss": self.final_loss,
            "tie_positions": self.tie_positions,
            "theta_frozen": self.theta_frozen,
            "continuous_reconstructed": self.continuous_reconstructed,
            "continuous_hdt": self.continuous_hdt,
            "train_stopped_epoch": self.train_stopped_epoch,
            "train_best_epoch": self.train_best_epoch,
            "intent_accuracy": self.intent_accuracy,
            "tag_accuracy": self.tag_accuracy,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrialReport":
        return cls(
            trial=obj["trial"],
            canary=CanarySpec.from_dict(obj["canary"]),
            reconstructed=list(obj["reconstructed"]),
            hdt=obj["hdt"],
            exact_match=obj["exact_match"],
            defenses=tuple(obj["defenses"]),
            v0_size=obj["v0_size"],
            seed=obj["seed"],
            final_loss=obj.get("final_loss"),
            tie_positions=list(obj.get("tie_positions") or []),
            theta_frozen=obj.get("theta_frozen"),
            continuous_reconstructed=obj.get("continuous_reconstructed"),
            continuous_hdt=obj.get("continuous_hdt"),
            train_stopped_epoch=obj.get("train_stopped_epoch"),
            train_best_epoch=obj.get("train_best_epoch"),
            intent_accuracy=obj.get("intent_accuracy"),
            tag_accuracy=obj.get("tag_accuracy"),
        )


@dataclass
class ExperimentSummary:
    pattern: str
    n: int
    r: int
    defenses: tuple[str, ...]
    v0_size: int
    trials: list[TrialReport]
    mean_accuracy: float
    mean_hdt: float
    baseline_accuracy: float
    baseline_hdt: float
    mean_continuous_hdt: float | None = None
    mean_intent_accuracy: float | None = None
    mean_tag_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern,
            "n": self.n,
            "r": self.r,
            "defenses": list(self.defenses),
            "v0_size": self.v0_size,
            "trials": [t.to_dict() for t in self.trials],
            "mean_accuracy": self.mean_accuracy,
            "mean_hdt": self.mean_hdt,
            "baseline_accuracy": self.baseline_accuracy,
            "baseline_hdt": self.baseline_hdt,
            "mean_continuous_hdt": self.mean_continuous_hdt,
            "mean_intent_accuracy": self.mean_intent_accuracy,
            "mean_tag_accuracy": self.mean_tag_accuracy,
        }


def _mean_or_none(values) -> float | None:
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def aggregate_trials(reports: list[TrialReport]) -> ExperimentSummary:
    """Means over a homogeneous trial list; mixed cells are rejected."""
    if not reports:
        raise ContractViolationError("cannot aggregate zero trials")
    head = reports[0]
    key = (head.canary.pattern, head.canary.n_unknown, head.canary.repetitions,
           head.defenses, head.v0_size)
    for rep in reports[1:]:
        other = (rep.canary.pattern, rep.canary.n_unknown, rep.canary.repetitions,
                 rep.defenses, rep.v0_size)
        if other != key:
            raise ContractViolationError(
                f"mixed configurations in one aggregation: {key} vs {other}"
            )
    baseline_acc, baseline_hdt = random_baseline(head.canary.n_unknown, head.v0_size)
    return ExperimentSummary(
        pattern=head.canary.pattern,
        n=head.canary.n_unknown,
        r=head.canary.repetitions,
        defenses=head.defenses,
        v0_size=head.v0_size,
        trials=list(reports),
        mean_accuracy=sum(r.exact_match for r in reports) / len(reports),
        mean_hdt=sum(r.hdt for r in reports) / len(reports),
        baseline_accuracy=baseline_acc,
        baseline_hdt=baseline_hdt,
        mean_continuous_hdt=_mean_or_none([r.continuous_hdt for r in reports]),
        mean_intent_accuracy=_mean_or_none([r.intent_accuracy for r in reports]),
        mean_tag_accuracy=_mean_or_none([r.tag_accuracy for r in reports]),
    )


def summary_to_json(summary: ExperimentSummary, extra: dict | None = None) -> str:
    """Canonical serialization: sorted keys, newline-terminated."""
    obj = summary.to_dict()
    if extra:
        obj.update(extra)
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def defenses_label(defenses) -> str:
    ordered = [d for d in ("D", "ES", "CE") if d in defenses]
    return "+".join(ordered) if ordered else "none"


def write_trials_csv(summaries: list[ExperimentSummary], path) -> None:
    """Flat per-trial export with columns (pattern, n, R, defenses, trial,
    exact_match, hdt, seed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for summary in summaries:
            for t in summary.trials:
                writer.writerow(
                    [
                        summary.pattern,
                        summary.n,
                        summary.r,
                        defenses_label(summary.defenses),
                        t.trial,
                        int(t.exact_match),
                        f"{t.hdt:.6f}",
                        t.seed,
                    ]
                )
