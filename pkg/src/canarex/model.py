"""Joint intent-classification + NER tagger.

Architecture: word embeddings (optionally concatenated with a char-CNN
representation), two bi-LSTM layers, a softmax intent head reading the last
forward / first backward hidden states, and a linear-chain CRF tag head.
Total loss = intent cross-entropy + CRF negative log-likelihood.

Every forward entry point accepts, per position, either a discrete token
string or an externally supplied input vector; the extraction attack feeds
relaxed embeddings through the same code path the discrete pass uses, so a
one-hot relaxation reproduces the discrete loss bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nm
from . import rng as rng_mod
from .crf import crf_log_likelihood, crf_viterbi_decode
from .data import ReducedVocabulary, Vocabulary
from .errors import ConfigError, ContractViolationError
from .numerics import Tensor

__all__ = [
    "ModelConfig",
    "ModelOutput",
    "RelaxedToken",
    "NLUModel",
    "init_params",
    "embed_tokens",
    "char_cnn_embed",
    "char_rep_matrix",
    "bilstm_forward",
    "model_loss",
    "params_hash",
]


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 50
    hidden_dim: int = 64  # per direction
    num_bilstm_layers: int = 2
    char_embeddings_enabled: bool = False
    char_emb_dim: int = 16
    char_conv_width: int = 3
    char_filter_count: int = 30
    dropout_embed: float = 0.2
    dropout_interlayer: float = 0.1

    def __post_init__(self):
        if self.num_bilstm_layers != 2:
            raise ConfigError("this architecture fixes num_bilstm_layers at 2")
        for name in ("embedding_dim", "hidden_dim", "char_emb_dim",
                     "char_conv_width", "char_filter_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("dropout_embed", "dropout_interlayer"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {rate}")

    @property
    def input_width(self) -> int:
        if self.char_embeddings_enabled:
            return self.embedding_dim + self.char_filter_count
        return self.embedding_dim

    def to_dict(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim,
            "hidden_dim": self.hidden_dim,
            "num_bilstm_layers": self.num_bilstm_layers,
            "char_embeddings_enabled": self.char_embeddings_enabled,
            "char_emb_dim": self.char_emb_dim,
            "char_conv_width": self.char_conv_width,
            "char_filter_count": self.char_filter_count,
            "dropout_embed": self.dropout_embed,
            "dropout_interlayer": self.dropout_interlayer,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ModelOutput:
    intent_logits: np.ndarray
    emissions: np.ndarray
    ic_loss: Tensor
    crf_nll: Tensor
    loss: Tensor


@dataclass
class RelaxedToken:
    """Attack-mode position: a convex combination over candidate tokens.

    ``embedding`` is the attended word vector (candidate-weights @ candidate
    embedding rows); ``activation`` holds those weights, and ``char_reps`` the
    candidates' char-CNN rows so char-augmented models take the expectation
    under the activation.
    """

    embedding: Tensor
    activation: Tensor | None = None
    char_reps: Tensor | None = None


def init_params(
    config: ModelConfig,
    vocab_size: int,
    char_vocab_size: int,
    seed: int,
    pretrained_word: np.ndarray | None = None,
) -> dict[str, Tensor]:
    """All trainable tensors: uniform(-0.1, 0.1) weights, zero biases,
    LSTM forget-gate bias +1."""
    gen = rng_mod.stream(seed, "param-init")
    hid = config.hidden_dim

    def uniform(*shape):
        return Tensor(gen.uniform(-0.1, 0.1, size=shape))

    params: dict[str, Tensor] = {}
    if pretrained_word is not None:
        if pretrained_word.shape != (vocab_size, config.embedding_dim):
            raise ConfigError(
                f"pretrained matrix {pretrained_word.shape} does not match "
                f"({vocab_size}, {config.embedding_dim})"
            )
        params["embed.word"] = Tensor(np.array(pretrained_word, dtype=np.float64))
    else:
        params["embed.word"] = uniform(vocab_size, config.embedding_dim)

    if config.char_embeddings_enabled:
        params["embed.char"] = uniform(char_vocab_size, config.char_emb_dim)
        params["char.kernel"] = uniform(
            config.char_conv_width * config.char_emb_dim, config.char_filter_count
        )
        params["char.bias"] = nm.zeros(config.char_filter_count)

    in_dim = config.input_width
    for layer in range(config.num_bilstm_layers):
        for direction in ("fwd", "bwd"):
            prefix = f"lstm.{layer}.{direction}"
            params[f"{prefix}.wx"] = uniform(in_dim, 4 * hid)
            params[f"{prefix}.wh"] = uniform(hid, 4 * hid)
            bias = np.zeros(4 * hid)
            bias[hid : 2 * hid] = 1.0  # forget gate
            params[f"{prefix}.b"] = Tensor(bias)
        in_dim = 2 * hid

    return params


def add_head_params(
    params: dict[str, Tensor],
    config: ModelConfig,
    intent_count: int,
    tag_count: int,
    seed: int,
) -> dict[str, Tensor]:
    gen = rng_mod.stream(seed, "head-init")
    hid2 = 2 * config.hidden_dim
    params = dict(params)
    params["ic.weight"] = Tensor(gen.uniform(-0.1, 0.1, size=(hid2, intent_count)))
    params["ic.bias"] = nm.zeros(intent_count)
    params["ner.weight"] = Tensor(gen.uniform(-0.1, 0.1, size=(hid2, tag_count)))
    params["ner.bias"] = nm.zeros(tag_count)
    params["crf.transitions"] = Tensor(
        gen.uniform(-0.1, 0.1, size=(tag_count + 2, tag_count + 2))
    )
    return params


def char_cnn_embed(
    token: str,
    params: dict[str, Tensor],
    config: ModelConfig,
    char_vocab: Vocabulary,
) -> Tensor:
    """Width-w convolution over the zero-padded char embedding sequence,
    max-pooled over positions.  'Same' padding: a 1-char token sees exactly
    one window."""
    if not token:
        raise ContractViolationError("cannot char-embed an empty token")
    ids = char_vocab.encode(token)
    emb = nm.gather_rows(params["embed.char"], ids)
    w = config.char_conv_width
    padded = nm.pad_rows(emb, (w - 1) // 2, w // 2)
    windows = nm.unfold_rows(padded, w)
    conv = nm.add(nm.matmul(windows, params["char.kernel"]), params["char.bias"])
    return nm.max_over_rows(conv)


def char_rep_matrix(
    tokens: Sequence[str],
    params: dict[str, Tensor],
    config: ModelConfig,
    char_vocab: Vocabulary,
) -> Tensor:
    """Stacked char-CNN rows for a candidate token list."""
    return nm.stack_rows(
        [char_cnn_embed(t, params, config, char_vocab) for t in tokens]
    )


def _dropout(x: Tensor, rate: float, gen) -> Tensor:
    if rate <= 0.0:
        return x
    if gen is None:
        raise ContractViolationError("dropout requires a random generator")
    mask = (gen.random(x.shape) >= rate) / (1.0 - rate)
    return nm.mul(x, Tensor(mask))


def embed_tokens(
    inputs: Sequence,
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    char_vocab: Vocabulary | None = None,
    dropout_active: bool = False,
    rng=None,
    allow_unk: bool = True,
) -> Tensor:
    """(L, input_width) model inputs from a mixed position sequence.

    Positions may be token strings (embedding row + optional char-CNN part),
    RelaxedToken (attended embedding + expected char representation), or full
    input-width vectors passed through untouched.
    """
    if len(inputs) == 0:
        raise ContractViolationError("cannot embed an empty sequence")
    ce = config.char_embeddings_enabled
    if ce and char_vocab is None:
        raise ConfigError("char embeddings enabled but no char vocabulary given")

    if all(isinstance(t, str) for t in inputs):
        idx = vocab.encode(inputs, allow_unk=allow_unk)
        word = nm.gather_rows(params["embed.word"], idx)
        if ce:
            chars = nm.stack_rows(
                [char_cnn_embed(t, params, config, char_vocab) for t in inputs]
            )
            out = nm.concat_cols(word, chars)
        else:
            out = word
    else:
        vectors = []
        for pos, item in enumerate(inputs):
            if isinstance(item, str):
                vec = nm.row(params["embed.word"], vocab.index(item, allow_unk=allow_unk))
                if ce:
                    vec = nm.concat1d([vec, char_cnn_embed(item, params, config, char_vocab)])
            elif isinstance(item, RelaxedToken):
                vec = item.embedding
                if vec.shape != (config.embedding_dim,):
                    raise ContractViolationError(
                        f"relaxed embedding at position {pos} has width "
                        f"{vec.shape}, expected ({config.embedding_dim},)"
                    )
                if ce:
                    if item.activation is None or item.char_reps is None:
                        raise ContractViolationError(
                            "char-augmented model needs activation + char_reps "
                            f"on the relaxed position {pos}"
                        )
                    vec = nm.concat1d([vec, nm.matmul(item.activation, item.char_reps)])
            elif isinstance(item, Tensor):
                if item.shape != (config.input_width,):
                    raise ContractViolationError(
                        f"input vector at position {pos} has shape {item.shape}, "
                        f"expected ({config.input_width},)"
                    )
                vec = item
            else:
                raise ContractViolationError(
                    f"position {pos}: unsupported input type {type(item).__name__}"
                )
            vectors.append(vec)
        out = nm.stack_rows(vectors)

    if dropout_active:
        out = _dropout(out, config.dropout_embed, rng)
    return out


def bilstm_forward(
    inputs: Tensor,
    params: dict[str, Tensor],
    config: ModelConfig,
    dropout_active: bool = False,
    rng=None,
) -> Tensor:
    """(L, 2*hidden) contextual states; inter-layer dropout only when active."""
    xs = inputs
    for layer in range(config.num_bilstm_layers):
        if layer > 0 and dropout_active:
            xs = _dropout(xs, config.dropout_interlayer, rng)
        fwd = nm.lstm_sequence(
            xs,
            params[f"lstm.{layer}.fwd.wx"],
            params[f"lstm.{layer}.fwd.wh"],
            params[f"lstm.{layer}.fwd.b"],
        )
        bwd = nm.lstm_sequence(
            xs,
            params[f"lstm.{layer}.bwd.wx"],
            params[f"lstm.{layer}.bwd.wh"],
            params[f"lstm.{layer}.bwd.b"],
            reverse=True,
        )
        xs = nm.concat_cols(fwd, bwd)
    return xs


def model_loss(
    inputs: Sequence,
    intent: str,
    ner_tags: Sequence[str],
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    intent_labels: Sequence[str],
    tag_labels: Sequence[str],
    char_vocab: Vocabulary | None = None,
    dropout_active: bool = False,
    rng=None,
) -> ModelOutput:
    """Intent cross-entropy + CRF NLL; differentiable w.r.t. params and any
    relaxed/vector inputs."""
    if intent not in intent_labels:
        raise ContractViolationError(f"intent {intent!r} outside the label set")
    tag_index = {t: i for i, t in enumerate(tag_labels)}
    try:
        tags = [tag_index[t] for t in ner_tags]
    except KeyError as exc:
        raise ContractViolationError(f"tag {exc.args[0]!r} outside the label set") from exc
    if len(tags) != len(inputs):
        raise ContractViolationError(
            f"{len(inputs)} inputs vs {len(tags)} tags"
        )

    embedded = embed_tokens(
        inputs, params, config, vocab, char_vocab,
        dropout_active=dropout_active, rng=rng,
    )
    states = bilstm_forward(embedded, params, config, dropout_active, rng)

    hid = config.hidden_dim
    length = len(inputs)
    ic_input = nm.concat1d(
        [
            nm.slice1d(nm.row(states, length - 1), 0, hid),      # last forward state
            nm.slice1d(nm.row(states, 0), hid, 2 * hid),         # first backward state
        ]
    )
    logits = nm.add(nm.matmul(ic_input, params["ic.weight"]), params["ic.bias"])
    gold = list(intent_labels).index(intent)
    ic_loss = nm.sub(nm.log_sum_exp(logits), nm.index1d(logits, gold))

    emissions = nm.add(nm.matmul(states, params["ner.weight"]), params["ner.bias"])
    crf_nll = crf_log_likelihood(
        emissions, tags, params["crf.transitions"], len(tag_labels)
    )

    return ModelOutput(
        intent_logits=logits.data,
        emissions=emissions.data,
        ic_loss=ic_loss,
        crf_nll=crf_nll,
        loss=nm.add(ic_loss, crf_nll),
    )


def params_hash(params: dict[str, Tensor]) -> str:
    """sha256 over names, shapes and little-endian float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name].data
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.astype("<f8", copy=False).tobytes())
    return h.hexdigest()


@dataclass
class NLUModel:
    """A trained (or training) model: config, vocabularies, label sets, params."""

    config: ModelConfig
    vocab: Vocabulary
    char_vocab: Vocabulary
    intent_labels: list[str]
    tag_labels: list[str]
    params: dict[str, Tensor]

    @classmethod
    def initialize(
        cls,
        config: ModelConfig,
        vocab: Vocabulary,
        char_vocab: Vocabulary,
        intent_labels: Sequence[str],
        tag_labels: Sequence[str],
        seed: int,
        pretrained_word: np.ndarray | None = None,
    ) -> "NLUModel":
        params = init_params(
            config, len(vocab), len(char_vocab), seed, pretrained_word
        )
        params = add_head_params(
            params, config, len(intent_labels), len(tag_labels), seed
        )
        return cls(
            config=config,
            vocab=vocab,
            char_vocab=char_vocab,
            intent_labels=list(intent_labels),
            tag_labels=list(tag_labels),
            params=params,
        )

    def loss(self, inputs, intent, ner_tags, dropout_active=False, rng=None) -> ModelOutput:
        return model_loss(
            inputs, intent, ner_tags,
            self.params, self.config, self.vocab,
            self.intent_labels, self.tag_labels,
            char_vocab=self.char_vocab,
            dropout_active=dropout_active, rng=rng,
        )

    def predict(self, tokens: Sequence[str]) -> tuple[str, list[str]]:
        """Arg-max intent and Viterbi tags for a discrete utterance."""
        embedded = embed_tokens(
            tokens, self.params, self.config, self.vocab, self.char_vocab
        )
        states = bilstm_forward(embedded, self.params, self.config)
        hid = self.config.hidden_dim
        ic_input = nm.concat1d(
            [
                nm.slice1d(nm.row(states, len(tokens) - 1), 0, hid),
                nm.slice1d(nm.row(states, 0), hid, 2 * hid),
            ]
        )
        logits = nm.add(nm.matmul(ic_input, self.params["ic.weight"]), self.params["ic.bias"])
        emissions = nm.add(
            nm.matmul(states, self.params["ner.weight"]), self.params["ner.bias"]
        )
        path, _ = crf_viterbi_decode(
            emissions, self.params["crf.transitions"], len(self.tag_labels)
        )
        intent = self.intent_labels[int(logits.data.argmax())]
        return intent, [self.tag_labels[i] for i in path]

    def with_params(self, params: dict[str, Tensor]) -> "NLUModel":
        return replace(self, params=params)

    def params_hash(self) -> str:
        return params_hash(self.params)

    def copy_params(self) -> dict[str, Tensor]:
        return {k: v.copy() for k, v in self.params.items()}

    def word_rows(self, v0: ReducedVocabulary) -> Tensor:
        """Embedding rows restricted to a candidate set (in V0 order)."""
        return nm.gather_rows(self.params["embed.word"], list(v0.indices))
