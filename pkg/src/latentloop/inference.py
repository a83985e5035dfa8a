"""Interleaved text/latent autoregressive decoding and intervention harnesses.

Text positions decode greedily through the LM head. When the model opens a
latent span, each latent step predicts PCA coefficients from the current
normalized state, reconstructs them through the basis (optionally EMA norm
calibrated, optionally intervened on), and injects the result as the next
input slot. Raw decoder states are never fed back directly: every injected
vector lies in the affine span of the basis by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import (ANSWER_CLOSE, ANSWER_OPEN, LATENT_END, LATENT_PAD, LATENT_START,
                   Vocab, is_perfect_square)
from .model import (DecoderParams, KvCache, forward_prefix, latent_coeffs,
                    lm_logits)
from .norm_diag import EmaState, ema_rescale, ema_update
from .numerics import Rng
from .pca import PcaBasis, reconstruct


@dataclass(frozen=True)
class InterventionMode:
    """Latent-content intervention: clean, suppressed span, or noise coefficients."""

    kind: str  # "clean" | "zero_latent" | "noise"
    noise_scale: float | None = None  # None -> per-coefficient sqrt(eigenvalue)
    norm_match: bool = True

    def __post_init__(self):
        if self.kind not in ("clean", "zero_latent", "noise"):
            raise ValueError(f"unknown intervention kind {self.kind!r}")


CLEAN = InterventionMode("clean")
ZERO_LATENT = InterventionMode("zero_latent")


def noise_mode(scale: float | None = None, norm_match: bool = True) -> InterventionMode:
    return InterventionMode("noise", noise_scale=scale, norm_match=norm_match)


def apply_intervention(mode: InterventionMode, c_t: np.ndarray, basis: PcaBasis,
                       rng: Rng | None) -> np.ndarray:
    """Map predicted coefficients to the vector actually injected.

    Noise mode replaces the coefficients with Gaussian draws (spectrum-matched
    by default) before the same reconstruction; with norm matching the
    centered noise reconstruction is rescaled to the centered norm of the
    clean reconstruction.
    """
    if mode.kind == "zero_latent":
        raise ValueError("zero_latent suppresses the span; no vector to intervene on")
    clean = reconstruct(basis, c_t)
    if mode.kind == "clean":
        return clean
    if rng is None:
        raise ValueError("noise intervention requires an rng")
    if mode.noise_scale is None:
        stds = np.sqrt(np.maximum(basis.eigenvalues[:basis.k], 0.0))
    else:
        stds = np.full(basis.k, mode.noise_scale)
    g = rng.gaussian(basis.k) * stds
    noisy = reconstruct(basis, g)
    if mode.norm_match:
        clean_c = clean - basis.mean
        noisy_c = noisy - basis.mean
        n = float(np.linalg.norm(noisy_c))
        if n <= 0.0:
            raise ValueError("noise reconstruction has zero centered norm")
        return basis.mean + noisy_c * (float(np.linalg.norm(clean_c)) / n)
    return noisy


@dataclass
class TextEvent:
    position: int
    token: int
    forced: bool = False


@dataclass
class LatentEvent:
    position: int
    coeffs: np.ndarray
    injected: np.ndarray


@dataclass
class Transcript:
    prompt_length: int
    mode: InterventionMode
    budget: int
    events: list = field(default_factory=list)
    stop_reason: str = ""

    def text_events(self):
        return [e for e in self.events if isinstance(e, TextEvent)]

    def latent_events(self):
        return [e for e in self.events if isinstance(e, LatentEvent)]

    def answer_tokens(self, vocab: Vocab) -> list | None:
        """Token ids between <answer> and </answer>, or None if absent."""
        ids = [e.token for e in self.text_events()]
        try:
            start = ids.index(vocab.id(ANSWER_OPEN))
        except ValueError:
            return None
        try:
            end = ids.index(vocab.id(ANSWER_CLOSE), start + 1)
        except ValueError:
            return None
        return ids[start + 1:end]


def transcript_to_jsonl(t: Transcript) -> str:
    lines = [json.dumps({"prompt_length": t.prompt_length, "mode": t.mode.kind,
                         "budget": t.budget, "stop_reason": t.stop_reason},
                        sort_keys=True)]
    for e in t.events:
        if isinstance(e, TextEvent):
            lines.append(json.dumps({"type": "text", "pos": e.position,
                                     "token": e.token, "forced": e.forced},
                                    sort_keys=True))
        else:
            lines.append(json.dumps({"type": "latent", "pos": e.position,
                                     "coeffs": list(e.coeffs),
                                     "injected": list(e.injected)}, sort_keys=True))
    return "\n".join(lines) + "\n"


def decode(params: DecoderParams, basis: PcaBasis, prompt_slots, budget: int,
           mode: InterventionMode, rng: Rng | None, max_tokens: int,
           vocab: Vocab, ema_state: EmaState | None = None,
           force_span_at: int | None = None) -> Transcript:
    """Greedy interleaved decode; every latent step feeds back a basis
    reconstruction. Stops at </answer>, max_tokens, or context exhaustion."""
    if mode.kind != "zero_latent":
        if budget < 1 or not is_perfect_square(budget):
            raise ValueError(f"budget must be a positive perfect square, got {budget}")
    torch.set_num_threads(1)
    cfg = params.config
    start_id = vocab.id(LATENT_START)
    end_id = vocab.id(LATENT_END)
    pad_id = vocab.id(LATENT_PAD)
    close_id = vocab.id(ANSWER_CLOSE)

    cache = KvCache(cfg)
    with torch.no_grad():
        _, h_bar, _ = forward_prefix(params, list(prompt_slots), cache)
    h_last = h_bar[-1]
    t = Transcript(prompt_length=len(prompt_slots), mode=mode, budget=budget)
    span_opened = False
    generated = 0

    def feed(slot):
        nonlocal h_last
        with torch.no_grad():
            _, hb, _ = forward_prefix(params, [slot], cache)
        h_last = hb[0]

    while generated < max_tokens:
        if cache.length >= cfg.max_seq_len:
            t.stop_reason = "context_exhausted"
            return t
        with torch.no_grad():
            logits = lm_logits(params, h_last).numpy().copy()
        # pads and span markers never decode freely; spans are entered below
        logits[pad_id] = -math.inf
        logits[end_id] = -math.inf
        if mode.kind == "zero_latent" or span_opened:
            logits[start_id] = -math.inf
        token = int(np.argmax(logits))
        forced = False
        if (force_span_at is not None and generated == force_span_at
                and not span_opened and mode.kind != "zero_latent"):
            token = start_id
            forced = True
        t.events.append(TextEvent(position=cache.length, token=token, forced=forced))
        feed(token)
        generated += 1
        if token == start_id and mode.kind != "zero_latent":
            span_opened = True
            if cache.length + budget + 1 > cfg.max_seq_len:
                raise ValueError("context overflow mid latent span")
            for _ in range(budget):
                with torch.no_grad():
                    c = latent_coeffs(params, h_last).numpy().copy()
                v = apply_intervention(mode, c, basis, rng)
                if ema_state is not None:
                    ema_state = ema_update(ema_state, float(np.linalg.norm(v)))
                    v = ema_rescale(ema_state, v)
                t.events.append(LatentEvent(position=cache.length, coeffs=c, injected=v))
                feed(v)
            t.events.append(TextEvent(position=cache.length, token=end_id, forced=True))
            feed(end_id)
            generated += 1
        if token == close_id:
            t.stop_reason = "answer_closed"
            return t
    t.stop_reason = "max_tokens"
    return t


def score_exact_match(transcript: Transcript, expected_answer, vocab: Vocab) -> bool:
    got = transcript.answer_tokens(vocab)
    return got is not None and got == list(expected_answer)


def evaluate(params: DecoderParams, basis: PcaBasis, examples, vocab: Vocab,
             mode: InterventionMode, budget: int, seed: int,
             max_tokens: int = 64, ema_state: EmaState | None = None) -> float:
    """Exact-match accuracy of greedy decodes over an example list."""
    if not examples:
        raise ValueError("empty evaluation set")
    base = Rng(seed)
    correct = 0
    for i, ex in enumerate(examples):
        t = decode(params, basis, list(ex.query_tokens), budget, mode,
                   base.spawn(i), max_tokens, vocab, ema_state=ema_state)
        if score_exact_match(t, ex.segments.answer, vocab):
            correct += 1
    return correct / len(examples)


def budget_sweep(params: DecoderParams, basis: PcaBasis, eval_set, vocab: Vocab,
                 budgets, seeds, max_tokens: int = 64):
    """Accuracy per (budget, seed); budget 0 decodes with the span suppressed.

    Returns (rows, summary): rows carry budget/seed/accuracy/n_examples,
    summary carries mean and std (population) per budget.
    """
    for b in budgets:
        if b != 0 and not is_perfect_square(b):
            raise ValueError(f"budget must be a perfect square, got {b}")
    rows = []
    for b in budgets:
        mode = ZERO_LATENT if b == 0 else CLEAN
        for seed in seeds:
            acc = evaluate(params, basis, eval_set, vocab, mode,
                           b if b else 1, seed, max_tokens=max_tokens)
            rows.append({"budget": b, "seed": seed, "accuracy": acc,
                         "n_examples": len(eval_set)})
    summary = []
    for b in budgets:
        accs = np.array([r["accuracy"] for r in rows if r["budget"] == b])
        summary.append({"budget": b, "mean_accuracy": float(accs.mean()),
                        "std_accuracy": float(accs.std())})
    return rows, summary


def sweep_csv(rows) -> str:
    lines = ["budget,seed,accuracy,n_examples"]
    for r in rows:
        lines.append(f"{r['budget']},{r['seed']},{r['accuracy']!r},{r['n_examples']}")
    return "\n".join(lines) + "\n"
