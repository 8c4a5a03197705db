"""Corpus handling: the JSON-lines interchange format, vocabularies, canary
generation and injection, a synthetic desk-scale corpus generator, and the
pretrained-embedding text parser.

Interchange format: one JSON object per line with keys ``tokens`` (list of
strings), ``ner_tags`` (BIO strings, same length) and ``intent`` (string).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .errors import (
    ConfigError,
    ContractViolationError,
    CorpusFormatError,
    EmptyCorpusError,
    UnknownTokenError,
)

logger = logging.getLogger(__name__)

__all__ = [
    "LabeledExample",
    "Corpus",
    "Vocabulary",
    "ReducedVocabulary",
    "CanarySpec",
    "SynthConfig",
    "DIGIT_WORDS",
    "DIGIT_NUMERALS",
    "COLOR_WORDS",
    "CANARY_PATTERNS",
    "validate_bio",
    "load_corpus",
    "save_examples",
    "split_corpus",
    "build_vocabulary",
    "build_char_vocabulary",
    "generate_canary",
    "inject_canary",
    "synth_corpus",
    "load_pretrained_embeddings",
    "unknown_token_set",
]

DIGIT_WORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
)
DIGIT_NUMERALS = tuple(str(d) for d in range(10))
COLOR_WORDS = (
    "red", "green", "lilac", "blue", "yellow", "brown",
    "cyan", "magenta", "orange", "pink", "purple", "mauve",
)

# pattern -> (prefix tokens, unknown-token set selector)
CANARY_PATTERNS = {
    "call": (("call",), "digits"),
    "pin": (("my", "pin", "code", "is"), "digits"),
    "color": (("color",), "colors"),
}

CANARY_INTENTS = {"call": "CallIntent", "pin": "PinIntent", "color": "ColorIntent"}


# ---------------------------------------------------------------------------
# examples and corpora
# ---------------------------------------------------------------------------


def validate_bio(tags) -> None:
    """Reject I-x tags not preceded by B-x or I-x of the same type."""
    prev = "O"
    for tag in tags:
        if tag == "O" or tag.startswith("B-"):
            prev = tag
            continue
        if tag.startswith("I-"):
            entity = tag[2:]
            if prev not in (f"B-{entity}", f"I-{entity}"):
                raise ValueError(f"tag {tag!r} not preceded by B-{entity}/I-{entity}")
            prev = tag
            continue
        raise ValueError(f"tag {tag!r} is not O, B-<type> or I-<type>")


@dataclass(frozen=True)
class LabeledExample:
    tokens: tuple[str, ...]
    ner_tags: tuple[str, ...]
    intent: str

    def __post_init__(self):
        if len(self.tokens) != len(self.ner_tags) or len(self.tokens) < 1:
            raise ValueError(
                f"{len(self.tokens)} tokens vs {len(self.ner_tags)} tags"
            )
        validate_bio(self.ner_tags)


@dataclass
class Corpus:
    """Train/validation example lists; label sets derive from the contents."""

    train: list[LabeledExample] = field(default_factory=list)
    val: list[LabeledExample] = field(default_factory=list)

    def all_examples(self) -> list[LabeledExample]:
        return self.train + self.val

    @property
    def intent_labels(self) -> list[str]:
        return sorted({e.intent for e in self.all_examples()})

    @property
    def tag_labels(self) -> list[str]:
        return sorted({t for e in self.all_examples() for t in e.ner_tags})


def load_corpus(path) -> tuple[list[LabeledExample], list[str], list[str]]:
    """Parse a JSON-lines corpus file; returns (examples, intents, tags)."""
    examples: list[LabeledExample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                tokens = tuple(str(t) for t in obj["tokens"])
                tags = tuple(str(t) for t in obj["ner_tags"])
                intent = str(obj["intent"])
            except (KeyError, TypeError) as exc:
                raise CorpusFormatError(
                    f"{path}:{lineno}: record needs tokens/ner_tags/intent: {exc}"
                ) from exc
            try:
                examples.append(LabeledExample(tokens, tags, intent))
            except ValueError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    if not examples:
        raise EmptyCorpusError(f"{path}: no examples found")
    intents = sorted({e.intent for e in examples})
    tags = sorted({t for e in examples for t in e.ner_tags})
    return examples, intents, tags


def save_examples(examples, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(
                json.dumps(
                    {
                        "tokens": list(e.tokens),
                        "ner_tags": list(e.ner_tags),
                        "intent": e.intent,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def split_corpus(examples, val_fraction: float = 0.1, seed: int = 0) -> Corpus:
    """Shuffle and split a flat example list into train/val."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    order = rng_mod.stream(seed, "corpus-split").permutation(len(examples))
    shuffled = [examples[i] for i in order]
    n_val = int(round(len(examples) * val_fraction))
    return Corpus(train=shuffled[n_val:], val=shuffled[:n_val])


# ---------------------------------------------------------------------------
# vocabularies
# ---------------------------------------------------------------------------


class Vocabulary:
    """Bijective token <-> index map with an UNK fallback at index 0."""

    UNK = "<unk>"

    def __init__(self, tokens):
        uniq = sorted(set(tokens) - {self.UNK})
        self._tokens = [self.UNK] + uniq
        self._index = {t: i for i, t in enumerate(self._tokens)}

    @classmethod
    def from_token_list(cls, tokens) -> "Vocabulary":
        """Rebuild from an exact ordered token list (checkpoint round trip)."""
        vocab = cls.__new__(cls)
        vocab._tokens = list(tokens)
        vocab._index = {t: i for i, t in enumerate(vocab._tokens)}
        return vocab

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str, allow_unk: bool = True) -> int:
        idx = self._index.get(token)
        if idx is None:
            if not allow_unk:
                raise UnknownTokenError(token)
            return 0
        return idx

    def token(self, index: int) -> str:
        return self._tokens[index]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def encode(self, tokens, allow_unk: bool = True) -> np.ndarray:
        return np.array([self.index(t, allow_unk) for t in tokens], dtype=np.intp)


def build_vocabulary(corpus: Corpus) -> Vocabulary:
    return Vocabulary(t for e in corpus.all_examples() for t in e.tokens)


def build_char_vocabulary(corpus: Corpus) -> Vocabulary:
    return Vocabulary(c for e in corpus.all_examples() for t in e.tokens for c in t)


@dataclass(frozen=True)
class ReducedVocabulary:
    """Ordered candidate-token subset of a vocabulary (the attack's search set)."""

    name: str
    tokens: tuple[str, ...]
    indices: tuple[int, ...]  # positions in the full vocabulary

    def __len__(self) -> int:
        return len(self.tokens)


def unknown_token_set(selector: str, digit_style: str = "words") -> tuple[str, ...]:
    if selector == "digits":
        if digit_style == "words":
            return DIGIT_WORDS
        if digit_style == "numerals":
            return DIGIT_NUMERALS
        raise ConfigError(f"unknown digit_style {digit_style!r}")
    if selector == "colors":
        return COLOR_WORDS
    raise ConfigError(f"unknown token-set selector {selector!r}")


def reduce_vocabulary(vocab: Vocabulary, tokens, name: str = "custom") -> ReducedVocabulary:
    missing = [t for t in tokens if t not in vocab]
    if missing:
        raise UnknownTokenError(
            f"candidate tokens not in vocabulary: {missing[:5]}"
            + ("..." if len(missing) > 5 else "")
        )
    toks = tuple(tokens)
    if len(set(toks)) != len(toks):
        raise ConfigError("candidate token set contains duplicates")
    if len(toks) == 0:
        raise ConfigError("candidate token set is empty")
    return ReducedVocabulary(
        name=name,
        tokens=toks,
        indices=tuple(vocab.index(t, allow_unk=False) for t in toks),
    )


def candidate_set(
    vocab: Vocabulary, selector: str, digit_style: str = "words"
) -> ReducedVocabulary:
    """Build the candidate set 'digits', 'colors' or 'full' over a vocabulary."""
    if selector == "full":
        toks = tuple(t for t in vocab.tokens if t != Vocabulary.UNK)
        return reduce_vocabulary(vocab, toks, name="full")
    return reduce_vocabulary(
        vocab, unknown_token_set(selector, digit_style), name=selector
    )


# ---------------------------------------------------------------------------
# canaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CanarySpec:
    """A secret utterance with prefix, sampled unknown tokens and labels."""

    pattern: str
    prefix_tokens: tuple[str, ...]
    unknown_tokens: tuple[str, ...]
    intent: str
    ner_tags: tuple[str, ...]
    repetitions: int
    seed: int

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.prefix_tokens + self.unknown_tokens

    @property
    def n_unknown(self) -> int:
        return len(self.unknown_tokens)

    def example(self) -> LabeledExample:
        return LabeledExample(self.tokens, self.ner_tags, self.intent)

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern,
            "prefix_tokens": list(self.prefix_tokens),
            "unknown_tokens": list(self.unknown_tokens),
            "intent": self.intent,
            "ner_tags": list(self.ner_tags),
            "repetitions": self.repetitions,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CanarySpec":
        return cls(
            pattern=obj["pattern"],
            prefix_tokens=tuple(obj["prefix_tokens"]),
            unknown_tokens=tuple(obj["unknown_tokens"]),
            intent=obj["intent"],
            ner_tags=tuple(obj["ner_tags"]),
            repetitions=int(obj["repetitions"]),
            seed=int(obj["seed"]),
        )


def canary_tags(prefix_len: int, n_unknown: int) -> tuple[str, ...]:
    return ("O",) * prefix_len + ("B-canary",) + ("I-canary",) * (n_unknown - 1)


def generate_canary(
    pattern: str,
    n: int,
    seed: int,
    repetitions: int = 1,
    digit_style: str = "words",
) -> CanarySpec:
    """Sample a canary: unknown tokens drawn i.i.d. uniform from the pattern's set."""
    if pattern not in CANARY_PATTERNS:
        raise ConfigError(f"unknown canary pattern {pattern!r}")
    if n < 1:
        raise ConfigError(f"canary needs n >= 1 unknown tokens, got {n}")
    if repetitions < 1:
        raise ConfigError(f"repetitions must be >= 1, got {repetitions}")
    prefix, selector = CANARY_PATTERNS[pattern]
    pool = unknown_token_set(selector, digit_style)
    gen = rng_mod.stream(seed, "canary", pattern, n)
    unknown = tuple(pool[int(i)] for i in gen.integers(0, len(pool), size=n))
    return CanarySpec(
        pattern=pattern,
        prefix_tokens=prefix,
        unknown_tokens=unknown,
        intent=CANARY_INTENTS[pattern],
        ner_tags=canary_tags(len(prefix), n),
        repetitions=repetitions,
        seed=seed,
    )


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def inject_canary(corpus: Corpus, spec: CanarySpec) -> Corpus:
    """Append R copies of the canary, split 9:1 between train and val.

    Train receives round(0.9 * R) copies (round half up, so R=1 trains on the
    single copy) and val the remainder.  The input corpus is not mutated.
    """
    if spec.repetitions < 1:
        raise ContractViolationError("canary repetitions must be >= 1")
    example = spec.example()
    n_train = _round_half_up(0.9 * spec.repetitions)
    n_val = spec.repetitions - n_train
    return Corpus(
        train=corpus.train + [example] * n_train,
        val=corpus.val + [example] * n_val,
    )


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_FILLS: dict[str, tuple[tuple[str, ...], ...]] = {
    "artist": (
        ("coltrane",), ("nina", "simone"), ("mingus",), ("ella", "fitzgerald"),
        ("brubeck",), ("monk",), ("billie", "holiday"), ("armstrong",),
        ("django",), ("getz",), ("miles", "davis"), ("baker",),
        ("gillespie",), ("basie",), ("etta", "james"), ("parker",),
    ),
    "genre": (
        ("jazz",), ("rock",), ("folk",), ("blues",), ("techno",),
        ("classical",), ("reggae",), ("opera",),
    ),
    "city": (
        ("lisbon",), ("oslo",), ("madrid",), ("dublin",), ("vienna",),
        ("prague",), ("athens",), ("helsinki",), ("warsaw",), ("zagreb",),
        ("porto",), ("geneva",), ("turin",), ("ghent",), ("bergen",),
        ("seville",), ("krakow",), ("riga",), ("tallinn",), ("naples",),
    ),
    "day": (
        ("monday",), ("tuesday",), ("wednesday",), ("thursday",), ("friday",),
        ("saturday",), ("sunday",), ("today",), ("tomorrow",),
    ),
    "device": (
        ("lights",), ("heater",), ("fan",), ("speaker",), ("thermostat",),
        ("television",), ("kettle",), ("blinds",),
    ),
    "room": (
        ("kitchen",), ("bedroom",), ("bathroom",), ("garage",), ("office",),
        ("hallway",), ("attic",),
    ),
    "daypart": (
        ("morning",), ("noon",), ("afternoon",), ("evening",), ("midnight",),
    ),
    # number/color slots keep every candidate token trained a little, like the
    # times, dates and colour mentions of real assistant corpora, while each
    # word stays below 0.5% of total token mass (the extra count words widen
    # the pool so no single digit word crosses the bound)
    "number": tuple((w,) for w in DIGIT_WORDS)
    + (("ten",), ("twelve",), ("fifteen",), ("twenty",), ("thirty",), ("forty",)),
    "color": tuple((w,) for w in COLOR_WORDS),
}

_TEMPLATES: dict[str, tuple[str, ...]] = {
    "PlayMusic": (
        "play <artist>",
        "play some <genre> music",
        "put on <artist> please",
        "play track <number>",
        "queue up some <genre>",
    ),
    "GetWeather": (
        "what is the weather in <city>",
        "weather in <city>",
        "will it rain in <city> on <day>",
        "forecast for <city> in <number> days",
        "how cold is it in <city>",
    ),
    "BookRestaurant": (
        "book a table in <city> for <day>",
        "reserve dinner in <city>",
        "book a table for <number> people",
        "book lunch in <city> on <day>",
    ),
    "SmartHome": (
        "turn on the <device> in the <room>",
        "set the <device> to <number>",
        "dim the <device> in the <room>",
        "set the lights to <color>",
        "make the lamp <color>",
    ),
    "SetAlarm": (
        "set an alarm for the <daypart>",
        "wake me up on <day>",
        "set a timer for <number> minutes",
        "remind me in <number> hours",
        "cancel the alarm for <day>",
    ),
}

# rare-token coverage: mentions each digit and color word exactly once so the
# candidate sets are always in-vocabulary while staying far below 0.5% of
# token mass (mimicking out-of-distribution secrets)
_COVERAGE_TEMPLATES = (
    ("SetAlarm", "set a timer for {} minutes", "number"),
    ("SmartHome", "make the lamp {}", "color"),
)


@dataclass(frozen=True)
class SynthConfig:
    """Generator configuration; the default bank covers 5 intents, 7 slot types
    and roughly 200 distinct tokens."""

    size: int = 2000
    seed: int = 0
    val_fraction: float = 0.1
    templates: dict = field(default_factory=lambda: dict(_TEMPLATES))
    fills: dict = field(default_factory=lambda: dict(_FILLS))
    include_coverage: bool = True


def _render_template(template: str, fills: dict, gen) -> tuple[tuple, tuple]:
    tokens: list[str] = []
    tags: list[str] = []
    for piece in template.split():
        if piece.startswith("<") and piece.endswith(">"):
            slot = piece[1:-1]
            options = fills[slot]
            fill = options[int(gen.integers(0, len(options)))]
            tokens.extend(fill)
            tags.append(f"B-{slot}")
            tags.extend(f"I-{slot}" for _ in fill[1:])
        else:
            tokens.append(piece)
            tags.append("O")
    return tuple(tokens), tuple(tags)


def synth_corpus(config: SynthConfig | None = None, **overrides) -> Corpus:
    """Deterministic template-filled corpus; same config -> identical corpus."""
    if config is None:
        config = SynthConfig(**overrides)
    elif overrides:
        config = replace(config, **overrides)
    if config.size < 1:
        raise ConfigError(f"synth corpus size must be >= 1, got {config.size}")

    gen = rng_mod.stream(config.seed, "synth")
    examples: list[LabeledExample] = []

    coverage: list[LabeledExample] = []
    if config.include_coverage:
        for intent, template, entity in _COVERAGE_TEMPLATES:
            words = DIGIT_WORDS if entity == "number" else COLOR_WORDS
            for w in words:
                tokens = tuple(template.format(w).split())
                tags = tuple(
                    f"B-{entity}" if t == w else "O" for t in tokens
                )
                coverage.append(LabeledExample(tokens, tags, intent))
    if len(coverage) <= config.size:
        examples.extend(coverage)

    intents = sorted(config.templates)
    while len(examples) < config.size:
        intent = intents[int(gen.integers(0, len(intents)))]
        bank = config.templates[intent]
        template = bank[int(gen.integers(0, len(bank)))]
        tokens, tags = _render_template(template, config.fills, gen)
        examples.append(LabeledExample(tokens, tags, intent))

    order = gen.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    n_val = int(round(config.size * config.val_fraction))
    return Corpus(train=shuffled[n_val:], val=shuffled[:n_val])


# ---------------------------------------------------------------------------
# pretrained embeddings
# ---------------------------------------------------------------------------


def load_pretrained_embeddings(
    path, vocab: Vocabulary, seed: int = 0
) -> tuple[np.ndarray, list[str]]:
    """Parse a '<count> <dim>' header + '<token> <floats...>' lines file.

    Tokens absent from ``vocab`` are skipped; vocab tokens missing from the
    file (UNK included) are random-initialized from U(-0.1, 0.1) and reported
    back (and logged).  Returns (|V| x dim matrix, missing tokens).
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise CorpusFormatError(f"{path}:1: expected '<count> <dim>' header")
        try:
            _count, dim = int(header[0]), int(header[1])
        except ValueError as exc:
            raise CorpusFormatError(f"{path}:1: bad header: {exc}") from exc

        matrix = rng_mod.stream(seed, "pretrained-fill").uniform(
            -0.1, 0.1, size=(len(vocab), dim)
        )
        seen: set[str] = set()
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            token = parts[0]
            if token not in vocab:
                continue
            values = parts[1:]
            if len(values) != dim:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected {dim} values, got {len(values)}"
                )
            matrix[vocab.index(token)] = np.array(values, dtype=np.float64)
            seen.add(token)

    missing = [t for t in vocab.tokens if t not in seen]
    if missing:
        logger.warning(
            "%d/%d vocabulary tokens missing from %s; random-initialized (e.g. %s)",
            len(missing), len(vocab), path, missing[:5],
        )
    return matrix, missing
