"""Target-model training with toggleable defenses, plus the checkpoint format.

Defenses: dropout (20% on embeddings, 10% between the LSTM layers) and early
stopping (halt when validation loss has not decreased for `patience`
consecutive epochs, restoring the best-validation-epoch parameters).
Validation loss includes the canary's validation copies, since repetitions are
split 9:1 across train/val.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from . import rng as rng_mod
from .data import Corpus, Vocabulary, build_char_vocabulary, build_vocabulary
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .model import ModelConfig, NLUModel
from .numerics import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "train",
    "evaluate_model",
    "early_stop_schedule",
    "save_checkpoint",
    "load_checkpoint",
    "inspect_checkpoint",
]

_MAGIC = b"CANAREX\x01"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 60
    learning_rate: float = 1e-3
    early_stopping_enabled: bool = False
    patience: int = 20
    dropout_enabled: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return {
            "max_epochs": self.max_epochs,
            "learning_rate": self.learning_rate,
            "early_stopping_enabled": self.early_stopping_enabled,
            "patience": self.patience,
            "dropout_enabled": self.dropout_enabled,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int | None = None
    early_stopped: bool = False
    intent_accuracy: float | None = None
    tag_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "early_stopped": self.early_stopped,
            "intent_accuracy": self.intent_accuracy,
            "tag_accuracy": self.tag_accuracy,
        }


def early_stop_schedule(val_losses, patience: int) -> tuple[int, int | None]:
    """(best 1-based epoch, stopping epoch or None) for a validation curve.

    The counter tracks consecutive epochs without a strict decrease below the
    best seen; a plateau from epoch b stops at epoch b + patience.
    """
    best_epoch, best = 0, math.inf
    since_improve = 0
    for epoch, v in enumerate(val_losses, start=1):
        if v < best:
            best, best_epoch = v, epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= patience:
                return best_epoch, epoch
    return best_epoch, None


def _mean_loss(model: NLUModel, params, examples) -> float:
    total = 0.0
    scratch = model.with_params(params)
    for e in examples:
        total += float(scratch.loss(list(e.tokens), e.intent, list(e.ner_tags)).loss)
    return total / len(examples)


def train(
    corpus: Corpus,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int,
    pretrained_word: np.ndarray | None = None,
) -> tuple[NLUModel, TrainReport]:
    """Adam-train the joint model; deterministic given (corpus, configs, seed)."""
    if not corpus.train:
        raise ConfigError("training split is empty")
    if train_config.early_stopping_enabled and not corpus.val:
        raise ConfigError("early stopping needs a non-empty validation split")

    vocab = build_vocabulary(corpus)
    char_vocab = build_char_vocabulary(corpus)
    model = NLUModel.initialize(
        model_config, vocab, char_vocab,
        corpus.intent_labels, corpus.tag_labels,
        seed=rng_mod.derive_seed(seed, "model-init"),
        pretrained_word=pretrained_word,
    )
    params = model.params
    state = nm.adam_init(params, train_config.learning_rate)

    report = TrainReport()
    best_val = math.inf
    best_params = None
    since_improve = 0

    for epoch in range(1, train_config.max_epochs + 1):
        shuffle = rng_mod.stream(seed, "shuffle", epoch)
        dropout_gen = rng_mod.stream(seed, "dropout", epoch)
        order = shuffle.permutation(len(corpus.train))

        epoch_total = 0.0
        for pos, idx in enumerate(order):
            example = corpus.train[idx]
            with nm.GradTape() as tape:
                for name, p in params.items():
                    tape.watch(p, name)
                out = model.with_params(params).loss(
                    list(example.tokens), example.intent, list(example.ner_tags),
                    dropout_active=train_config.dropout_enabled,
                    rng=dropout_gen,
                )
            value = float(out.loss)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, example {pos} "
                    f"(last finite epoch means: {report.train_losses[-3:]})"
                )
            epoch_total += value
            tape.backward(out.loss)
            grads = {name: tape.grad(p) for name, p in params.items()}
            params, state = nm.adam_step(state, params, grads)

        report.train_losses.append(epoch_total / len(order))
        report.stopped_epoch = epoch

        if corpus.val:
            val_loss = _mean_loss(model, params, corpus.val)
            report.val_losses.append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                report.best_epoch = epoch
                since_improve = 0
                if train_config.early_stopping_enabled:
                    best_params = {k: v.copy() for k, v in params.items()}
            else:
                since_improve += 1
                if (
                    train_config.early_stopping_enabled
                    and since_improve >= train_config.patience
                ):
                    report.early_stopped = True
                    break

    if train_config.early_stopping_enabled and best_params is not None:
        params = best_params

    model = model.with_params(params)
    if corpus.val:
        report.intent_accuracy, report.tag_accuracy = evaluate_model(model, corpus.val)
    return model, report


def evaluate_model(model: NLUModel, examples) -> tuple[float, float]:
    """(intent accuracy, token-level Viterbi tag accuracy) over a split."""
    if not examples:
        raise ConfigError("cannot evaluate on an empty split")
    intent_hits = 0
    tag_hits = 0
    tag_total = 0
    for e in examples:
        intent, tags = model.predict(list(e.tokens))
        intent_hits += intent == e.intent
        tag_hits += sum(g == w for g, w in zip(tags, e.ner_tags))
        tag_total += len(e.ner_tags)
    return intent_hits / len(examples), tag_hits / tag_total


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 header length, JSON header, '<f8' blobs
# ---------------------------------------------------------------------------


def save_checkpoint(model: NLUModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = [
        {"name": name, "shape": list(model.params[name].shape)}
        for name in model.params
    ]
    header = {
        "format_version": _FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "vocab_tokens": model.vocab.tokens,
        "char_vocab_tokens": model.char_vocab.tokens,
        "intent_labels": model.intent_labels,
        "tag_labels": model.tag_labels,
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for spec in tensors:
            fh.write(model.params[spec["name"]].data.astype("<f8", copy=False).tobytes())


def _read_header(fh, path) -> dict:
    magic = fh.read(len(_MAGIC))
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    raw_len = fh.read(4)
    if len(raw_len) != 4:
        raise CheckpointError(f"{path}: truncated header length")
    (header_len,) = struct.unpack("<I", raw_len)
    blob = fh.read(header_len)
    if len(blob) != header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    return header


def _read_tensors(fh, header, path) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = fh.read(count * 8)
        if len(raw) != count * 8:
            raise CheckpointError(
                f"{path}: truncated tensor data for {spec['name']!r}"
            )
        params[spec["name"]] = Tensor(
            np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        )
    if fh.read(1):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return params


def load_checkpoint(path) -> NLUModel:
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        params = _read_tensors(fh, header, path)
    vocab = Vocabulary.from_token_list(header["vocab_tokens"])
    char_vocab = Vocabulary.from_token_list(header["char_vocab_tokens"])
    return NLUModel(
        config=ModelConfig.from_dict(header["model_config"]),
        vocab=vocab,
        char_vocab=char_vocab,
        intent_labels=list(header["intent_labels"]),
        tag_labels=list(header["tag_labels"]),
        params=params,
    )


def inspect_checkpoint(path) -> dict:
    """Config, vocabulary size, tensor shapes and a parameter hash."""
    model = load_checkpoint(path)
    return {
        "model_config": model.config.to_dict(),
        "vocab_size": len(model.vocab),
        "char_vocab_size": len(model.char_vocab),
        "intent_labels": model.intent_labels,
        "tag_labels": model.tag_labels,
        "tensor_shapes": {k: list(v.shape) for k, v in model.params.items()},
        "params_sha256": model.params_hash(),
    }
