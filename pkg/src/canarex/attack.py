"""Canary extraction: discrete optimization over relaxed token choices.

Given open-box access to a trained model (architecture, parameters, loss,
label set, vocabulary) and a canary's known prefix and labels, the attack
trains one logit row per unknown position over a candidate set V0.  Each row
is pushed through a temperature-annealed softmax, attends into the embedding
matrix to produce an input vector, and the frozen model's loss on the
resulting utterance is minimized w.r.t. the logits alone.  Unknown tokens are
decoded as the arg-max activation per position.

The continuous variant (optimizing free input vectors, decoded by nearest
neighbor in the embedding rows) ships as a comparison baseline; it is expected
to perform at chance level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from . import rng as rng_mod
from .data import CanarySpec, ReducedVocabulary, candidate_set
from .errors import AttackDivergedError, ConfigError, ContractViolationError
from .model import NLUModel, RelaxedToken, char_rep_matrix
from .numerics import AdamState, GradTape, Tensor

__all__ = [
    "AttackConfig",
    "AttackTarget",
    "AttackState",
    "ReconstructionResult",
    "init_logits",
    "relax_embed",
    "attack_step",
    "run_attack",
    "continuous_baseline_attack",
    "temperature_at",
    "learning_rate_at",
]


@dataclass(frozen=True)
class AttackConfig:
    """Optimizer and annealing schedule for one extraction run.

    Schedules are evaluated in closed form at step t = 1..attack_epochs:
    temperature_init * temperature_decay**t and the same for the learning
    rate, so the value after the final step equals the printed formula
    exactly.
    """

    attack_epochs: int = 250
    learning_rate: float = 6.5e-3
    lr_decay: float = 0.995
    temperature_init: float = 0.1
    temperature_decay: float = 0.997
    init_scheme: str = "zeros"
    seed: int = 0
    use_full_vocab: bool = False

    def __post_init__(self):
        if self.attack_epochs < 0:
            raise ConfigError("attack_epochs must be >= 0")
        if self.temperature_init <= 0:
            raise ConfigError("temperature_init must be positive")
        for name in ("lr_decay", "temperature_decay"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.init_scheme not in ("zeros", "gaussian"):
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")

    def to_dict(self) -> dict:
        return {
            "attack_epochs": self.attack_epochs,
            "learning_rate": self.learning_rate,
            "lr_decay": self.lr_decay,
            "temperature_init": self.temperature_init,
            "temperature_decay": self.temperature_decay,
            "init_scheme": self.init_scheme,
            "seed": self.seed,
            "use_full_vocab": self.use_full_vocab,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AttackConfig":
        return cls(**obj)


def temperature_at(config: AttackConfig, step: int) -> float:
    return config.temperature_init * config.temperature_decay**step


def learning_rate_at(config: AttackConfig, step: int) -> float:
    return config.learning_rate * config.lr_decay**step


@dataclass(frozen=True)
class AttackTarget:
    """What the adversary knows: prefix tokens, unknown count, output labels.

    Labels default to the canary's true ones; pass overrides to study the
    attack under deliberately wrong label guesses.
    """

    prefix_tokens: tuple[str, ...]
    n_unknown: int
    intent: str
    ner_tags: tuple[str, ...]

    def __post_init__(self):
        if self.n_unknown < 1:
            raise ConfigError("attack target needs n_unknown >= 1")
        if len(self.ner_tags) != len(self.prefix_tokens) + self.n_unknown:
            raise ConfigError(
                f"{len(self.ner_tags)} tags for "
                f"{len(self.prefix_tokens)}+{self.n_unknown} positions"
            )

    @classmethod
    def from_canary(
        cls,
        spec: CanarySpec,
        intent: str | None = None,
        ner_tags: Sequence[str] | None = None,
    ) -> "AttackTarget":
        return cls(
            prefix_tokens=spec.prefix_tokens,
            n_unknown=spec.n_unknown,
            intent=intent if intent is not None else spec.intent,
            ner_tags=tuple(ner_tags) if ner_tags is not None else spec.ner_tags,
        )


@dataclass
class AttackState:
    logits: Tensor  # (n_unknown, |V0|)
    temperature: float
    adam: AdamState
    epoch: int = 0


@dataclass
class ReconstructionResult:
    tokens: list[str]
    exacted_from: str  # "discrete" | "continuous"
    final_loss: float
    loss_trace: list[float]
    tie_positions: list[int]
    theta_hash_before: str
    theta_hash_after: str
    epochs_run: int
    final_temperature: float | None
    final_learning_rate: float
    v0_name: str
    v0_size: int
    seed: int
    activations: np.ndarray | None = None  # (n, |V0|) for the discrete attack
    distances: np.ndarray | None = None  # (n, |V0|) for the continuous baseline

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "method": self.exacted_from,
            "final_loss": self.final_loss,
            "loss_trace": self.loss_trace,
            "tie_positions": self.tie_positions,
            "theta_hash_before": self.theta_hash_before,
            "theta_hash_after": self.theta_hash_after,
            "theta_frozen": self.theta_hash_before == self.theta_hash_after,
            "epochs_run": self.epochs_run,
            "final_temperature": self.final_temperature,
            "final_learning_rate": self.final_learning_rate,
            "v0_name": self.v0_name,
            "v0_size": self.v0_size,
            "seed": self.seed,
        }


def init_logits(n: int, v0_size: int, scheme: str, seed: int) -> Tensor:
    """Fresh (n, |V0|) logit matrix: 'zeros' (uniform activations) or
    'gaussian' (i.i.d. N(0, 0.01))."""
    if n < 1:
        raise ConfigError("need at least one unknown position")
    if v0_size < 2:
        raise ConfigError(
            f"candidate set of size {v0_size} makes the attack degenerate"
        )
    if scheme == "zeros":
        return nm.zeros((n, v0_size))
    if scheme == "gaussian":
        gen = rng_mod.stream(seed, "logit-init")
        return Tensor(gen.normal(0.0, 0.1, size=(n, v0_size)))
    raise ConfigError(f"unknown init scheme {scheme!r}")


def relax_embed(z_row: Tensor, temperature: float, w0: Tensor) -> Tensor:
    """Attended embedding: softmax_T(z) over candidates, times their rows."""
    a = nm.softmax_with_temperature(z_row, temperature)
    return nm.matmul(a, w0)


def check_registry_excludes_params(tape: GradTape, params: dict) -> None:
    """Hard error if any frozen model tensor is registered for gradients."""
    watched = tape.watched_ids()
    for name, p in params.items():
        if id(p) in watched:
            raise ContractViolationError(
                f"frozen model parameter {name!r} found in the gradient registry"
            )


def _relaxed_inputs(
    logits: Tensor,
    temperature: float,
    target: AttackTarget,
    w0: Tensor,
    char_reps: Tensor | None,
) -> tuple[list, list[Tensor]]:
    inputs: list = list(target.prefix_tokens)
    activations: list[Tensor] = []
    for i in range(target.n_unknown):
        z_i = nm.row(logits, i)
        a_i = nm.softmax_with_temperature(z_i, temperature)
        e_i = nm.matmul(a_i, w0)
        activations.append(a_i)
        inputs.append(
            RelaxedToken(embedding=e_i, activation=a_i, char_reps=char_reps)
        )
    return inputs, activations


def attack_step(
    state: AttackState,
    model: NLUModel,
    target: AttackTarget,
    w0: Tensor,
    char_reps: Tensor | None,
    temperature: float,
    learning_rate: float,
) -> tuple[AttackState, float]:
    """One forward/backward pass and Adam update on the logits alone."""
    with GradTape() as tape:
        tape.watch(state.logits, "Z")
        check_registry_excludes_params(tape, model.params)
        inputs, _ = _relaxed_inputs(state.logits, temperature, target, w0, char_reps)
        out = model.loss(inputs, target.intent, list(target.ner_tags))
    loss = float(out.loss)
    tape.backward(out.loss)
    grad = tape.grad(state.logits)
    adam = state.adam.with_learning_rate(learning_rate)
    new_params, adam = nm.adam_step(adam, {"Z": state.logits}, {"Z": grad})
    new_state = AttackState(
        logits=new_params["Z"],
        temperature=temperature,
        adam=adam,
        epoch=state.epoch + 1,
    )
    return new_state, loss


def _decode_rows(scores: np.ndarray) -> tuple[list[int], list[int]]:
    """Per-row argmax with tie positions recorded (lowest index wins)."""
    picks: list[int] = []
    ties: list[int] = []
    for i in range(scores.shape[0]):
        row_ = scores[i]
        best = int(row_.argmax())
        if np.count_nonzero(row_ == row_[best]) > 1:
            ties.append(i)
        picks.append(best)
    return picks, ties


def run_attack(
    model: NLUModel,
    target: AttackTarget,
    v0: ReducedVocabulary,
    config: AttackConfig,
) -> ReconstructionResult:
    """Full extraction run: anneal, optimize, decode arg-max tokens.

    The model is strictly read-only: a parameter hash is taken before and
    after and a mismatch is a hard error.
    """
    if config.use_full_vocab:
        v0 = candidate_set(model.vocab, "full")
    if len(v0) < 2:
        raise ConfigError("candidate set must have at least 2 tokens")

    hash_before = model.params_hash()
    # frozen inputs to the optimization; computed outside any tape
    w0 = model.word_rows(v0)
    char_reps = None
    if model.config.char_embeddings_enabled:
        char_reps = char_rep_matrix(
            list(v0.tokens), model.params, model.config, model.char_vocab
        )

    logits = init_logits(target.n_unknown, len(v0), config.init_scheme, config.seed)
    state = AttackState(
        logits=logits,
        temperature=config.temperature_init,
        adam=nm.adam_init({"Z": logits}, config.learning_rate),
        epoch=0,
    )

    trace: list[float] = []
    for t in range(1, config.attack_epochs + 1):
        temperature = temperature_at(config, t)
        lr = learning_rate_at(config, t)
        if not np.all(np.isfinite(state.logits.data)):
            raise AttackDivergedError(
                f"non-finite logit state entering epoch {t} "
                f"(previous losses: {trace[-3:]})"
            )
        state, loss = attack_step(
            state, model, target, w0, char_reps, temperature, lr
        )
        if not math.isfinite(loss):
            raise AttackDivergedError(
                f"non-finite attack loss at epoch {t} "
                f"(previous losses: {trace[-3:]})"
            )
        trace.append(loss)

    final_t = (
        temperature_at(config, config.attack_epochs)
        if config.attack_epochs > 0
        else config.temperature_init
    )
    final_lr = learning_rate_at(config, config.attack_epochs)
    activations = np.stack(
        [
            nm.softmax_with_temperature(nm.row(state.logits, i), final_t).data
            for i in range(target.n_unknown)
        ]
    )
    picks, ties = _decode_rows(activations)
    final_loss = trace[-1] if trace else _attack_loss_value(
        model, target, state.logits, final_t, w0, char_reps
    )

    hash_after = model.params_hash()
    if hash_after != hash_before:
        raise ContractViolationError(
            "model parameters changed during the attack "
            f"({hash_before[:12]} -> {hash_after[:12]})"
        )

    return ReconstructionResult(
        tokens=[v0.tokens[k] for k in picks],
        exacted_from="discrete",
        final_loss=final_loss,
        loss_trace=trace,
        tie_positions=ties,
        theta_hash_before=hash_before,
        theta_hash_after=hash_after,
        epochs_run=config.attack_epochs,
        final_temperature=final_t,
        final_learning_rate=final_lr,
        v0_name=v0.name,
        v0_size=len(v0),
        seed=config.seed,
        activations=activations,
    )


def _attack_loss_value(model, target, logits, temperature, w0, char_reps) -> float:
    inputs, _ = _relaxed_inputs(logits, temperature, target, w0, char_reps)
    return float(model.loss(inputs, target.intent, list(target.ner_tags)).loss)


def continuous_baseline_attack(
    model: NLUModel,
    target: AttackTarget,
    v0: ReducedVocabulary,
    config: AttackConfig,
    init_vectors: np.ndarray | None = None,
) -> ReconstructionResult:
    """Trivial variant: optimize free input vectors, decode by the nearest
    candidate row (Euclidean).  Vectors start at N(0, 1) unless given."""
    if config.use_full_vocab:
        v0 = candidate_set(model.vocab, "full")
    if len(v0) < 2:
        raise ConfigError("candidate set must have at least 2 tokens")

    hash_before = model.params_hash()
    width = model.config.input_width
    w0 = model.word_rows(v0)
    if model.config.char_embeddings_enabled:
        char_reps = char_rep_matrix(
            list(v0.tokens), model.params, model.config, model.char_vocab
        )
        candidates = np.concatenate([w0.data, char_reps.data], axis=1)
    else:
        candidates = w0.data

    if init_vectors is None:
        gen = rng_mod.stream(config.seed, "continuous-init")
        vectors = Tensor(gen.normal(0.0, 1.0, size=(target.n_unknown, width)))
    else:
        if init_vectors.shape != (target.n_unknown, width):
            raise ConfigError(
                f"init vectors shape {init_vectors.shape} != "
                f"({target.n_unknown}, {width})"
            )
        vectors = Tensor(np.array(init_vectors, dtype=np.float64))

    adam = nm.adam_init({"E": vectors}, config.learning_rate)
    trace: list[float] = []
    for t in range(1, config.attack_epochs + 1):
        lr = learning_rate_at(config, t)
        with GradTape() as tape:
            tape.watch(vectors, "E")
            check_registry_excludes_params(tape, model.params)
            inputs: list = list(target.prefix_tokens)
            inputs.extend(nm.row(vectors, i) for i in range(target.n_unknown))
            out = model.loss(inputs, target.intent, list(target.ner_tags))
        loss = float(out.loss)
        if not math.isfinite(loss):
            raise AttackDivergedError(
                f"non-finite baseline loss at epoch {t} "
                f"(previous losses: {trace[-3:]})"
            )
        trace.append(loss)
        tape.backward(out.loss)
        grad = tape.grad(vectors)
        adam = adam.with_learning_rate(lr)
        new_params, adam = nm.adam_step(adam, {"E": vectors}, {"E": grad})
        vectors = new_params["E"]

    diffs = vectors.data[:, None, :] - candidates[None, :, :]
    distances = np.sqrt((diffs * diffs).sum(axis=2))
    picks, ties = _decode_rows(-distances)

    hash_after = model.params_hash()
    if hash_after != hash_before:
        raise ContractViolationError("model parameters changed during the attack")

    return ReconstructionResult(
        tokens=[v0.tokens[k] for k in picks],
        exacted_from="continuous",
        final_loss=trace[-1] if trace else float("nan"),
        loss_trace=trace,
        tie_positions=ties,
        theta_hash_before=hash_before,
        theta_hash_after=hash_after,
        epochs_run=config.attack_epochs,
        final_temperature=None,
        final_learning_rate=learning_rate_at(config, config.attack_epochs),
        v0_name=v0.name,
        v0_size=len(v0),
        seed=config.seed,
        distances=distances,
    )
