"""Sweep orchestration: for each (pattern, n, R, defense set) cell run
fresh-canary trials end to end (inject, train, attack, evaluate) and persist
summaries.

Reproducibility contract: every artifact under the output directory is a pure
function of (config, master seed); per-trial seeds are hashes of the cell
coordinates so adding cells never perturbs existing ones.  The result store is
append-only; wall-clock timings go to the log, never into result files.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rng_mod
from .attack import AttackConfig, AttackTarget, continuous_baseline_attack, run_attack
from .data import (
    Corpus,
    candidate_set,
    generate_canary,
    inject_canary,
    load_corpus,
    split_corpus,
    synth_corpus,
)
from .errors import ConfigError
from .metrics import (
    ExperimentSummary,
    TrialReport,
    aggregate_trials,
    defenses_label,
    hamming_distance_per_token,
    summary_to_json,
    write_trials_csv,
)
from .model import ModelConfig
from .training import TrainConfig, save_checkpoint, train

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "ExperimentStatus",
    "run_experiment",
    "run_single_trial",
    "cell_identifier",
    "config_hash",
    "WORKERS_ENV_VAR",
]

SCHEMA_VERSION = 1
WORKERS_ENV_VAR = "CANAREX_WORKERS"
DEFENSES = ("D", "ES", "CE")


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    corpus: dict = field(default_factory=lambda: {"synth": {"size": 2000, "seed": 0}})
    patterns: tuple[str, ...] = ("pin",)
    n_values: tuple[int, ...] = (4,)
    r_values: tuple[int, ...] = (100,)
    defense_sets: tuple[tuple[str, ...], ...] = ((),)
    trials: int = 10
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    v0: str = "auto"
    digit_style: str = "words"
    run_continuous_baseline: bool = False
    save_checkpoints: bool = False
    workers: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.v0 not in ("auto", "digits", "colors", "full"):
            raise ConfigError(f"unknown v0 selector {self.v0!r}")
        for ds in self.defense_sets:
            unknown = set(ds) - set(DEFENSES)
            if unknown:
                raise ConfigError(f"unknown defenses {sorted(unknown)}")
        if not ("synth" in self.corpus) ^ ("path" in self.corpus):
            raise ConfigError("corpus needs exactly one of 'synth' or 'path'")
        # fail fast on bad nested configs
        ModelConfig(**self.model)
        TrainConfig(**self.train)
        AttackConfig(**self.attack)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "master_seed": self.master_seed,
            "corpus": self.corpus,
            "patterns": list(self.patterns),
            "n_values": list(self.n_values),
            "r_values": list(self.r_values),
            "defense_sets": [list(d) for d in self.defense_sets],
            "trials": self.trials,
            "model": self.model,
            "train": self.train,
            "attack": self.attack,
            "v0": self.v0,
            "digit_style": self.digit_style,
            "run_continuous_baseline": self.run_continuous_baseline,
            "save_checkpoints": self.save_checkpoints,
            "workers": self.workers,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        version = obj.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        return cls(
            master_seed=int(obj.get("master_seed", 0)),
            corpus=obj.get("corpus", {"synth": {"size": 2000, "seed": 0}}),
            patterns=tuple(obj.get("patterns", ("pin",))),
            n_values=tuple(int(n) for n in obj.get("n_values", (4,))),
            r_values=tuple(int(r) for r in obj.get("r_values", (100,))),
            defense_sets=tuple(
                tuple(d) for d in obj.get("defense_sets", [[]])
            ),
            trials=int(obj.get("trials", 10)),
            model=dict(obj.get("model", {})),
            train=dict(obj.get("train", {})),
            attack=dict(obj.get("attack", {})),
            v0=obj.get("v0", "auto"),
            digit_style=obj.get("digit_style", "words"),
            run_continuous_baseline=bool(obj.get("run_continuous_baseline", False)),
            save_checkpoints=bool(obj.get("save_checkpoints", False)),
            workers=int(obj.get("workers", 1)),
            output_dir=obj.get("output_dir"),
        )

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(obj)


def config_hash(config: ExperimentConfig) -> str:
    """Hash of the scientific configuration; execution details (worker count,
    output location) are excluded so neither can change any artifact byte."""
    obj = config.to_dict()
    obj.pop("workers", None)
    obj.pop("output_dir", None)
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def cell_identifier(pattern: str, n: int, r: int, defenses) -> str:
    return f"{pattern}-n{n}-R{r}-{defenses_label(defenses)}"


@lru_cache(maxsize=4)
def _corpus_from_json(corpus_json: str) -> Corpus:
    spec = json.loads(corpus_json)
    if "synth" in spec:
        return synth_corpus(**spec["synth"])
    examples, _, _ = load_corpus(spec["path"])
    return split_corpus(
        examples,
        val_fraction=spec.get("val_fraction", 0.1),
        seed=spec.get("split_seed", 0),
    )


def _base_corpus(config: ExperimentConfig) -> Corpus:
    return _corpus_from_json(json.dumps(config.corpus, sort_keys=True))


def _v0_selector(config: ExperimentConfig, pattern: str) -> str:
    if config.v0 != "auto":
        return config.v0
    return "colors" if pattern == "color" else "digits"


def run_single_trial(
    config: ExperimentConfig,
    pattern: str,
    n: int,
    r: int,
    defenses: tuple[str, ...],
    trial: int,
) -> tuple[dict, bytes | None]:
    """One end-to-end trial; returns (canonical trial dict, checkpoint bytes)."""
    started = time.perf_counter()
    trial_seed = rng_mod.derive_seed(
        config.master_seed, pattern, n, r, defenses_label(defenses), trial
    )
    corpus = _base_corpus(config)
    canary = generate_canary(
        pattern, n,
        seed=rng_mod.derive_seed(trial_seed, "canary"),
        repetitions=r,
        digit_style=config.digit_style,
    )
    injected = inject_canary(corpus, canary)

    model_config = ModelConfig(
        **{**config.model, "char_embeddings_enabled": "CE" in defenses}
    )
    train_config = TrainConfig(
        **{
            **config.train,
            "dropout_enabled": "D" in defenses,
            "early_stopping_enabled": "ES" in defenses,
        }
    )
    model, train_report = train(
        injected, model_config, train_config,
        seed=rng_mod.derive_seed(trial_seed, "train"),
    )

    v0 = candidate_set(model.vocab, _v0_selector(config, pattern), config.digit_style)
    target = AttackTarget.from_canary(canary)
    attack_config = AttackConfig(
        **{**config.attack, "seed": rng_mod.derive_seed(trial_seed, "attack")}
    )
    result = run_attack(model, target, v0, attack_config)
    hdt = hamming_distance_per_token(canary.unknown_tokens, result.tokens)

    continuous_tokens = None
    continuous_hdt = None
    if config.run_continuous_baseline:
        cont_config = AttackConfig(
            **{**config.attack, "seed": rng_mod.derive_seed(trial_seed, "continuous")}
        )
        cont = continuous_baseline_attack(model, target, v0, cont_config)
        continuous_tokens = cont.tokens
        continuous_hdt = hamming_distance_per_token(canary.unknown_tokens, cont.tokens)

    report = TrialReport(
        trial=trial,
        canary=canary,
        reconstructed=result.tokens,
        hdt=hdt,
        exact_match=hdt == 0.0,
        defenses=tuple(defenses),
        v0_size=len(v0),
        seed=trial_seed,
        final_loss=result.final_loss,
        tie_positions=result.tie_positions,
        theta_frozen=result.theta_hash_before == result.theta_hash_after,
        continuous_reconstructed=continuous_tokens,
        continuous_hdt=continuous_hdt,
        train_stopped_epoch=train_report.stopped_epoch,
        train_best_epoch=train_report.best_epoch,
        intent_accuracy=train_report.intent_accuracy,
        tag_accuracy=train_report.tag_accuracy,
        runtime_s=time.perf_counter() - started,
    )

    checkpoint_bytes = None
    if config.save_checkpoints:
        buffer = io.BytesIO()
        _save_checkpoint_to_buffer(model, buffer)
        checkpoint_bytes = buffer.getvalue()
    logger.info(
        "trial %s/%s done in %.1fs (hdt=%.2f)",
        cell_identifier(pattern, n, r, defenses), trial, report.runtime_s, hdt,
    )
    return report.to_dict(), checkpoint_bytes


def _save_checkpoint_to_buffer(model, buffer) -> None:
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".ckpt") as tmp:
        save_checkpoint(model, tmp.name)
        buffer.write(Path(tmp.name).read_bytes())


def _trial_task(args) -> tuple[int, dict | None, bytes | None, str | None]:
    config_dict, pattern, n, r, defenses, trial = args
    try:
        config = ExperimentConfig.from_dict(config_dict)
        report, ckpt = run_single_trial(config, pattern, n, r, tuple(defenses), trial)
        return trial, report, ckpt, None
    except Exception:
        return trial, None, None, traceback.format_exc()


@dataclass
class ExperimentStatus:
    cells_total: int = 0
    cells_failed: int = 0  # every trial failed
    trials_failed: int = 0

    @property
    def exit_code(self) -> int:
        if self.cells_total and self.cells_failed == self.cells_total:
            return 3
        if self.cells_failed or self.trials_failed:
            return 2
        return 0


def _resolve_workers(config: ExperimentConfig) -> int:
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV_VAR}={env!r} is not an integer") from exc
        if value < 1:
            raise ConfigError(f"{WORKERS_ENV_VAR} must be >= 1")
        return value
    return config.workers


def _write_new(path: Path, content: str | bytes) -> None:
    if path.exists():
        raise ConfigError(f"refusing to overwrite existing artifact {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(content, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(content)


def run_experiment(config: ExperimentConfig, out_dir) -> ExperimentStatus:
    """Run the full (pattern x n x R x defenses) grid and persist artifacts.

    Layout: manifest.json (informational), summary.csv, and per cell
    cells/<id>/summary.json, cells/<id>/trials/trial-NN.json, optional
    checkpoints, failures.json when trials failed.
    """
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        raise ConfigError(
            f"{out} already holds an experiment (append-only store); "
            "pick a fresh output directory"
        )
    chash = config_hash(config)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "config_hash": chash,
        "master_seed": config.master_seed,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "created_unix": time.time(),
        "argv": sys.argv,
    }
    _write_new(manifest_path, json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    workers = _resolve_workers(config)
    status = ExperimentStatus()
    summaries: list[ExperimentSummary] = []

    cells = [
        (pattern, n, r, tuple(ds))
        for pattern in config.patterns
        for n in config.n_values
        for r in config.r_values
        for ds in config.defense_sets
    ]
    status.cells_total = len(cells)

    for pattern, n, r, defenses in cells:
        cell_id = cell_identifier(pattern, n, r, defenses)
        cell_dir = out / "cells" / cell_id
        tasks = [
            (config.to_dict(), pattern, n, r, list(defenses), trial)
            for trial in range(config.trials)
        ]
        results: dict[int, dict] = {}
        failures: dict[int, str] = {}

        if workers == 1:
            outcomes = map(_trial_task, tasks)
        else:
            pool = concurrent.futures.ProcessPoolExecutor(max_workers=workers)
            outcomes = pool.map(_trial_task, tasks)
        # single writer: results land from this process, flushed per trial
        for trial, report, ckpt, error in outcomes:
            if error is not None:
                failures[trial] = error
                continue
            results[trial] = report
            _write_new(
                cell_dir / "trials" / f"trial-{trial:02d}.json",
                json.dumps(report, sort_keys=True, indent=2) + "\n",
            )
            if ckpt is not None:
                _write_new(cell_dir / "checkpoints" / f"trial-{trial:02d}.ckpt", ckpt)
        if workers != 1:
            pool.shutdown()

        if failures:
            status.trials_failed += len(failures)
            _write_new(
                cell_dir / "failures.json",
                json.dumps(
                    {str(k): failures[k] for k in sorted(failures)},
                    sort_keys=True, indent=2,
                ) + "\n",
            )
            logger.error("cell %s: %d/%d trials failed", cell_id, len(failures),
                         config.trials)
        if not results:
            status.cells_failed += 1
            continue

        reports = [TrialReport.from_dict(results[t]) for t in sorted(results)]
        summary = aggregate_trials(reports)
        summaries.append(summary)
        _write_new(
            cell_dir / "summary.json",
            summary_to_json(
                summary,
                extra={"config_hash": chash, "master_seed": config.master_seed},
            ),
        )

    if summaries:
        write_trials_csv(summaries, out / "summary.csv")
    return status
