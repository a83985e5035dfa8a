"""Latent-supervision dataset construction, serialization, and audits.

A response is a structured record: think text, an optional latent span of T
pad positions carrying continuous target vectors, a parser description of
the intended latent content, continued think text, and the answer. The token
stream serialization is bit-exact and reversible; the continuous targets
travel next to the token data, never inside it.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .numerics import Rng

LATENT_START = "<|latent_start|>"
LATENT_PAD = "<|latent_pad|>"
LATENT_END = "<|latent_end|>"
PARSER_OPEN = "<parser>"
PARSER_CLOSE = "</parser>"
SPECIAL_TOKENS = [LATENT_START, LATENT_PAD, LATENT_END, PARSER_OPEN, PARSER_CLOSE]

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
MARKER_TOKENS = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]

_WORDS = [
    "<query>", "<copy>", "inspect", "the", "hidden", "attribute", "grid",
    "region", "describe", "evidence", "so", "answer", "is", "recall", "value",
    "look", "at", "auxiliary", "view",
]


class Vocab:
    """Fixed toy vocabulary with stable token ids."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        if token not in self._ids:
            raise KeyError(f"token {token!r} not in vocabulary")
        return self._ids[token]

    def token(self, tid: int) -> str:
        return self.tokens[tid]

    def encode(self, tokens) -> list:
        return [self.id(t) for t in tokens]

    def decode(self, ids) -> list:
        return [self.token(i) for i in ids]


def default_vocab(n_classes: int = 10) -> Vocab:
    tokens = list(SPECIAL_TOKENS) + list(MARKER_TOKENS) + list(_WORDS)
    tokens += [f"a{i}" for i in range(n_classes)]
    tokens += [f"b{i}" for i in range(n_classes)]
    tokens += [f"ans{i}" for i in range(n_classes)]
    return Vocab(tokens)


def is_perfect_square(n: int) -> bool:
    if n < 0:
        return False
    r = math.isqrt(n)
    return r * r == n


@dataclass
class LatentSpan:
    """A span of `budget` pad positions; targets present only when supervised."""

    budget: int
    targets: list | None = None  # list of (d,) float arrays, length == budget

    def __post_init__(self):
        if self.budget < 1 or not is_perfect_square(self.budget):
            raise ValueError(f"latent budget must be a positive perfect square, got {self.budget}")
        if self.targets is not None:
            if len(self.targets) != self.budget:
                raise ValueError(
                    f"target count {len(self.targets)} does not match budget {self.budget}")
            self.targets = [np.asarray(t, dtype=np.float64) for t in self.targets]


@dataclass
class ResponseSegments:
    """Structured response: think -> latent -> parser -> continued think -> answer."""

    think_prefix: list
    latent_span: LatentSpan | None
    parser_text: list
    think_suffix: list
    answer: list

    def __post_init__(self):
        if self.latent_span is not None and len(self.parser_text) == 0:
            raise ValueError("latent-supervised segments require non-empty parser text")
        if self.latent_span is None:
            if self.parser_text:
                raise ValueError("parser text without a latent span")
            if self.think_suffix:
                # canonical stripped form keeps all think text in the prefix,
                # so the token stream determines the segments uniquely
                raise ValueError("text-only segments must keep think text in think_prefix")


@dataclass
class TrainingExample:
    query_tokens: list
    segments: ResponseSegments
    accuracy: Fraction
    supervision_mode: str  # "text-only" | "latent"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.supervision_mode not in ("text-only", "latent"):
            raise ValueError(f"unknown supervision mode {self.supervision_mode!r}")
        if self.supervision_mode == "text-only" and self.segments.latent_span is not None \
                and self.segments.latent_span.targets is not None:
            raise ValueError("text-only example must not carry latent targets")


class ParseError(ValueError):
    """Token stream does not follow the response serialization."""


def serialize_response(segments: ResponseSegments, vocab: Vocab) -> list:
    """Emit the canonical token stream for a response."""
    out = [vocab.id(THINK_OPEN)]
    out += list(segments.think_prefix)
    if segments.latent_span is not None:
        out.append(vocab.id(LATENT_START))
        out += [vocab.id(LATENT_PAD)] * segments.latent_span.budget
        out.append(vocab.id(LATENT_END))
        out.append(vocab.id(PARSER_OPEN))
        out += list(segments.parser_text)
        out.append(vocab.id(PARSER_CLOSE))
    out += list(segments.think_suffix)
    out.append(vocab.id(THINK_CLOSE))
    out.append(vocab.id(ANSWER_OPEN))
    out += list(segments.answer)
    out.append(vocab.id(ANSWER_CLOSE))
    return out


def parse_response(tokens, vocab: Vocab) -> ResponseSegments:
    """Exact inverse of serialize_response (targets are not part of the stream)."""
    ids = list(tokens)
    marker = {vocab.id(t): t for t in SPECIAL_TOKENS + MARKER_TOKENS}
    pos = 0

    def expect(name):
        nonlocal pos
        if pos >= len(ids) or marker.get(ids[pos]) != name:
            got = marker.get(ids[pos], ids[pos]) if pos < len(ids) else "<end of stream>"
            raise ParseError(f"expected {name} at position {pos}, got {got}")
        pos += 1

    def read_text(stop_names):
        nonlocal pos
        out = []
        stops = set(stop_names)
        while pos < len(ids):
            name = marker.get(ids[pos])
            if name in stops:
                return out, name
            if name is not None:
                raise ParseError(f"unexpected marker {name} at position {pos}")
            out.append(ids[pos])
            pos += 1
        raise ParseError(f"stream ended while looking for one of {sorted(stops)}")

    expect(THINK_OPEN)
    prefix, hit = read_text({LATENT_START, THINK_CLOSE})
    span = None
    parser_text = []
    if hit == LATENT_START:
        expect(LATENT_START)
        budget = 0
        while pos < len(ids) and marker.get(ids[pos]) == LATENT_PAD:
            budget += 1
            pos += 1
        expect(LATENT_END)
        if budget < 1 or not is_perfect_square(budget):
            raise ParseError(f"latent span has invalid pad count {budget}")
        span = LatentSpan(budget=budget)
        expect(PARSER_OPEN)
        parser_text, _ = read_text({PARSER_CLOSE})
        expect(PARSER_CLOSE)
    suffix, _ = read_text({THINK_CLOSE})
    expect(THINK_CLOSE)
    expect(ANSWER_OPEN)
    answer, _ = read_text({ANSWER_CLOSE})
    expect(ANSWER_CLOSE)
    if pos != len(ids):
        raise ParseError(f"trailing tokens after {ANSWER_CLOSE} at position {pos}")
    return ResponseSegments(think_prefix=prefix, latent_span=span,
                            parser_text=parser_text, think_suffix=suffix, answer=answer)


def estimate_accuracy(sampler, n: int) -> Fraction:
    """Empirical accuracy over n attempts of a deterministic answer oracle.

    sampler(attempt_index) -> bool. Failures propagate annotated with the
    attempt index.
    """
    if n < 1:
        raise ValueError("need at least one attempt")
    correct = 0
    for attempt in range(n):
        try:
            if sampler(attempt):
                correct += 1
        except Exception as exc:
            raise RuntimeError(f"answer oracle failed at attempt {attempt}") from exc
    return Fraction(correct, n)


def assign_supervision(accuracy, tau: float) -> str:
    """Difficulty-aware routing: latent iff accuracy <= tau (boundary inclusive)."""
    a = Fraction(accuracy) if not isinstance(accuracy, Fraction) else accuracy
    if not 0 <= a <= 1:
        raise ValueError(f"accuracy must be in [0, 1], got {a}")
    if not 0 <= tau < 1:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    return "latent" if a <= Fraction(tau).limit_denominator(10**9) else "text-only"


def strip_latent(example: TrainingExample) -> TrainingExample:
    """Drop the latent span, targets, and parser; keep think/answer text only."""
    if example.segments.latent_span is None:
        warnings.warn("strip_latent called on an already-stripped example", stacklevel=2)
        return example
    segments = ResponseSegments(
        think_prefix=list(example.segments.think_prefix) + list(example.segments.think_suffix),
        latent_span=None,
        parser_text=[],
        think_suffix=[],
        answer=list(example.segments.answer),
    )
    return replace(example, segments=segments, supervision_mode="text-only")


@dataclass(frozen=True)
class FilterResult:
    keep: bool
    reason: str | None = None


def quality_filter(example: TrainingExample, min_parser_len: int = 3,
                   max_parser_len: int = 512) -> FilterResult:
    """Reject degenerate latent targets and out-of-bounds parser lengths.

    Easy examples are not rejected here; difficulty routing already sent
    them to text-only supervision.
    """
    if example.supervision_mode == "text-only":
        return FilterResult(True)
    span = example.segments.latent_span
    if span is None or span.targets is None:
        return FilterResult(False, "missing-targets")
    for t in span.targets:
        if not np.all(np.isfinite(t)) or float(np.linalg.norm(t)) < 1e-8:
            return FilterResult(False, "degenerate-embedding")
    if not min_parser_len <= len(example.segments.parser_text) <= max_parser_len:
        return FilterResult(False, "parser-length")
    return FilterResult(True)


# -- leakage audit ----------------------------------------------------------

_PUNCT_RE = re.compile(r"[^\w\s]")
_WS_RE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    t = _PUNCT_RE.sub(" ", text.lower())
    return _WS_RE.sub(" ", t).strip()


def text_hash(text: str) -> str:
    return hashlib.sha256(normalize_text(text).encode()).hexdigest()


def image_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def leakage_audit(train_examples, eval_examples) -> dict:
    """Exact duplicate report across train/eval, per modality.

    Every example must carry `image_hash` and `text_hash` in its meta.
    Returns {"image_collisions": [...], "text_collisions": [...]}, one entry
    per colliding hash with the source ids on both sides.
    """
    def index(examples, key):
        table = {}
        for ex in examples:
            if key not in ex.meta:
                raise ValueError(f"example {ex.meta.get('source_id', '?')} missing {key}")
            table.setdefault(ex.meta[key], []).append(ex.meta.get("source_id", "?"))
        return table

    report = {}
    for key, out_name in (("image_hash", "image_collisions"), ("text_hash", "text_collisions")):
        train_idx = index(train_examples, key)
        eval_idx = index(eval_examples, key)
        collisions = []
        for h in sorted(set(train_idx) & set(eval_idx)):
            collisions.append({"hash": h, "train_ids": sorted(train_idx[h]),
                               "eval_ids": sorted(eval_idx[h])})
        report[out_name] = collisions
    return report


# -- synthetic desk-scale task ----------------------------------------------

@dataclass(frozen=True)
class SyntheticTaskConfig:
    d: int = 64
    budget: int = 16
    n_classes: int = 10
    target_norm: float = 8.0
    target_noise: float = 0.05
    text_only_fraction: float = 0.2
    n_attempts: int = 8
    prototype_seed: int = 777


def class_prototypes(config: SyntheticTaskConfig) -> np.ndarray:
    """Fixed per-class target directions, shared by every generated dataset."""
    rng = Rng(config.prototype_seed)
    protos = rng.gaussian((config.n_classes, config.d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos * config.target_norm


def hidden_class(a: int, b: int, n_classes: int) -> int:
    """Attribute pair -> hidden class; the composition the latent channel must carry."""
    return (3 * a + 7 * b) % n_classes


def answer_from_targets(targets, config: SyntheticTaskConfig) -> int:
    """Label oracle: nearest class prototype to the mean target vector."""
    protos = class_prototypes(config)
    mean = np.mean(np.stack([np.asarray(t) for t in targets]), axis=0)
    return int(np.argmax(protos @ mean))


def gen_synthetic_task(rng: Rng, count: int, config: SyntheticTaskConfig,
                       vocab: Vocab | None = None) -> list:
    """Generate examples whose answer is a function of the latent targets.

    Latent examples: the query names two attribute tokens whose hidden
    composition selects the class prototype carried by the targets; the
    answer token is determined by the targets (label oracle above), not by
    any text in the response. Matched text-only controls carry the answer
    token directly in the query and no latent span.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    vocab = vocab or default_vocab(config.n_classes)
    protos = class_prototypes(config)
    prefix = vocab.encode(["inspect", "hidden", "attribute"])
    parser = vocab.encode(["describe", "hidden", "evidence"])
    suffix = vocab.encode(["so", "answer", "is"])
    examples = []
    for i in range(count):
        text_only = bool(rng.uniform() < config.text_only_fraction)
        if text_only:
            y = int(rng.integers(0, config.n_classes))
            query = vocab.encode(["<query>", "<copy>", f"ans{y}"])
            segments = ResponseSegments(think_prefix=list(prefix) + list(suffix),
                                        latent_span=None, parser_text=[],
                                        think_suffix=[],
                                        answer=[vocab.id(f"ans{y}")])
            acc = Fraction(config.n_attempts, config.n_attempts)
            targets = None
        else:
            a = int(rng.integers(0, config.n_classes))
            b = int(rng.integers(0, config.n_classes))
            y = hidden_class(a, b, config.n_classes)
            query = vocab.encode(["<query>", f"a{a}", f"b{b}"])
            targets = [protos[y] + rng.gaussian(config.d, config.target_noise)
                       for _ in range(config.budget)]
            segments = ResponseSegments(
                think_prefix=list(prefix),
                latent_span=LatentSpan(budget=config.budget, targets=targets),
                parser_text=list(parser),
                think_suffix=list(suffix),
                answer=[vocab.id(f"ans{answer_from_targets(targets, config)}")],
            )
            acc = Fraction(0, config.n_attempts)
        mode = assign_supervision(acc, 0.0)
        tgt_bytes = b"" if targets is None else np.stack(targets).astype("<f8").tobytes()
        meta = {
            "source_id": f"syn-{i}",
            "image_hash": image_hash(tgt_bytes if targets is not None
                                     else f"text-only-{i}".encode()),
            "text_hash": text_hash(" ".join(vocab.decode(query)) + f" #{i}"),
            "hidden_class": y,
        }
        examples.append(TrainingExample(query_tokens=query, segments=segments,
                                        accuracy=acc, supervision_mode=mode, meta=meta))
    return examples


# -- dataset persistence ----------------------------------------------------

_DS_MAGIC = b"LLDS"
_DS_VERSION = 1


def save_dataset(examples, vocab: Vocab, d: int, path) -> None:
    """Length-prefixed records: JSON metadata + raw little-endian target doubles."""
    header = json.dumps({"count": len(examples), "d": d, "vocab": vocab.tokens},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_DS_MAGIC)
        f.write(struct.pack("<II", _DS_VERSION, len(header)))
        f.write(header)
        for ex in examples:
            span = ex.segments.latent_span
            rec = {
                "query_tokens": list(ex.query_tokens),
                "think_prefix": list(ex.segments.think_prefix),
                "budget": None if span is None else span.budget,
                "parser_text": list(ex.segments.parser_text),
                "think_suffix": list(ex.segments.think_suffix),
                "answer": list(ex.segments.answer),
                "accuracy": [ex.accuracy.numerator, ex.accuracy.denominator],
                "supervision_mode": ex.supervision_mode,
                "meta": ex.meta,
            }
            blob = json.dumps(rec, sort_keys=True).encode()
            targets = span.targets if span is not None and span.targets is not None else []
            f.write(struct.pack("<II", len(blob), len(targets)))
            f.write(blob)
            for t in targets:
                f.write(np.asarray(t, dtype="<f8").tobytes())


def load_dataset(path):
    """Returns (examples, vocab, d)."""
    with open(path, "rb") as f:
        if f.read(4) != _DS_MAGIC:
            raise ValueError("not a dataset file")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != _DS_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        header = json.loads(f.read(hlen).decode())
        vocab = Vocab(header["vocab"])
        d = header["d"]
        examples = []
        for _ in range(header["count"]):
            blob_len, n_targets = struct.unpack("<II", f.read(8))
            rec = json.loads(f.read(blob_len).decode())
            targets = None
            if n_targets:
                targets = [np.frombuffer(f.read(8 * d), dtype="<f8").copy()
                           for _ in range(n_targets)]
            span = None
            if rec["budget"] is not None:
                span = LatentSpan(budget=rec["budget"], targets=targets)
            segments = ResponseSegments(
                think_prefix=rec["think_prefix"], latent_span=span,
                parser_text=rec["parser_text"], think_suffix=rec["think_suffix"],
                answer=rec["answer"])
            examples.append(TrainingExample(
                query_tokens=rec["query_tokens"], segments=segments,
                accuracy=Fraction(*rec["accuracy"]),
                supervision_mode=rec["supervision_mode"], meta=rec["meta"]))
    return examples, vocab, d
