"""Layer-wise residual-stream norm profiling and EMA norm calibration.

The profile records mean/std of log-L2 norms per (layer boundary, token
class). Layer index 0 is the input-embedding row; index L is the state
entering the final RMSNorm. Log statistics use natural log; ratios are
base-independent.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import DecoderParams, KvCache, forward_prefix
from .numerics import log_l2

TEXT = "text"
LATENT = "latent"


@dataclass
class NormProfile:
    """Per (layer, class) log-norm statistics. cells: (layer, class) -> (mean, std, count)."""

    n_layers: int
    cells: dict = field(default_factory=dict)

    def mean_log(self, layer: int, cls: str) -> float:
        return self._cell(layer, cls)[0]

    def std_log(self, layer: int, cls: str) -> float:
        return self._cell(layer, cls)[1]

    def count(self, layer: int, cls: str) -> int:
        return self._cell(layer, cls)[2]

    def _cell(self, layer: int, cls: str):
        key = (layer, cls)
        if key not in self.cells:
            raise KeyError(f"no profile cell for layer {layer}, class {cls!r}")
        return self.cells[key]


def profile_norms(params: DecoderParams, batch) -> NormProfile:
    """Aggregate log-L2 norms over a batch of labeled slot sequences.

    batch: list of (slots, labels) pairs; labels are per-position class
    strings (TEXT or LATENT). Records every residual-stream boundary from
    the input embedding (layer 0) through layer L.
    """
    if not batch:
        raise ValueError("empty batch")
    n_layers = params.config.n_layers
    samples: dict = {}
    for slots, labels in batch:
        if len(slots) != len(labels):
            raise ValueError("slots and labels must have equal length")
        with torch.no_grad():
            _, _, _, trace = forward_prefix(params, slots, KvCache(params.config),
                                            return_trace=True)
        for layer, states in enumerate(trace["boundaries"]):
            arr = states.numpy()
            for pos, cls in enumerate(labels):
                samples.setdefault((layer, cls), []).append(log_l2(arr[pos]))
    profile = NormProfile(n_layers=n_layers)
    for key in sorted(samples):
        vals = np.asarray(samples[key])
        profile.cells[key] = (float(vals.mean()), float(vals.std()), int(vals.size))
    return profile


def norm_ratio(profile: NormProfile, layer_a: int, class_a: str,
               layer_b: int, class_b: str) -> float:
    """Geometric-mean L2 ratio between two profile cells: exp(mean_a - mean_b)."""
    return math.exp(profile.mean_log(layer_a, class_a) - profile.mean_log(layer_b, class_b))


def profile_to_csv(profile: NormProfile) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "class", "mean_log_norm", "std_log_norm", "count"])
    for (layer, cls) in sorted(profile.cells):
        mean, std, count = profile.cells[(layer, cls)]
        writer.writerow([layer, cls, repr(mean), repr(std), count])
    return buf.getvalue()


def accumulation_report(params: DecoderParams, batch) -> dict:
    """Check the squared-norm accumulation behaviour of the pre-norm stack.

    Per residual update u applied to state x the exact identity
    |x + u|^2 = |x|^2 + |u|^2 + 2<x, u> is evaluated directly; the report
    carries the worst absolute deviation (pure floating-point error) plus
    the relative gap between mean |x_L|^2 and |x_0|^2 + sum of mean |u|^2
    over all positions of the batch.
    """
    if not batch:
        raise ValueError("empty batch")
    identity_err = 0.0
    sq_in = []
    sq_out = []
    update_sums = None
    n_positions = 0
    for slots in batch:
        with torch.no_grad():
            _, _, _, trace = forward_prefix(params, slots, KvCache(params.config),
                                            return_trace=True)
        bounds = [b.numpy() for b in trace["boundaries"]]
        updates = [(ua.numpy(), um.numpy()) for ua, um in trace["updates"]]
        flat_updates = []
        x = bounds[0]
        for ua, um in updates:
            flat_updates.append(ua)
            flat_updates.append(um)
        if update_sums is None:
            update_sums = [0.0] * len(flat_updates)
        for u in flat_updates:
            x_next = x + u
            lhs = np.sum(x_next ** 2, axis=1)
            rhs = np.sum(x ** 2, axis=1) + np.sum(u ** 2, axis=1) \
                + 2.0 * np.sum(x * u, axis=1)
            denom = np.maximum(1.0, np.abs(lhs))
            identity_err = max(identity_err, float(np.max(np.abs(lhs - rhs) / denom)))
            x = x_next
        for j, u in enumerate(flat_updates):
            update_sums[j] += float(np.sum(u ** 2))
        sq_in.append(np.sum(bounds[0] ** 2, axis=1))
        sq_out.append(np.sum(bounds[-1] ** 2, axis=1))
        n_positions += bounds[0].shape[0]
    mean_sq_in = float(np.concatenate(sq_in).mean())
    mean_sq_out = float(np.concatenate(sq_out).mean())
    predicted = mean_sq_in + sum(s / n_positions for s in update_sums)
    return {
        "per_step_identity_max_err": identity_err,
        "mean_sq_input": mean_sq_in,
        "mean_sq_final": mean_sq_out,
        "predicted_final": predicted,
        "relative_gap": abs(mean_sq_out - predicted) / mean_sq_out,
        "n_positions": n_positions,
    }


# -- EMA norm calibration ---------------------------------------------------

@dataclass
class EmaState:
    mean_norm: float
    decay: float
    count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {self.decay}")
        if self.mean_norm <= 0.0:
            raise ValueError("running mean norm must be positive")


def ema_init(query_vision_norms, decay: float = 0.9) -> EmaState:
    """Initialize the running norm from reference (query-side) vision norms."""
    norms = list(query_vision_norms)
    if not norms:
        raise ValueError("need at least one reference norm")
    for n in norms:
        if n <= 0.0:
            raise ValueError(f"reference norms must be positive, got {n}")
    return EmaState(mean_norm=sum(norms) / len(norms), decay=decay, count=len(norms))


def ema_update(state: EmaState, observed_norm: float) -> EmaState:
    """Convex-combination update: n' = decay * n + (1 - decay) * observed."""
    if observed_norm <= 0.0:
        raise ValueError(f"observed norm must be positive, got {observed_norm}")
    new = state.decay * state.mean_norm + (1.0 - state.decay) * observed_norm
    return EmaState(mean_norm=new, decay=state.decay, count=state.count + 1)


def ema_rescale(state: EmaState, v_hat: np.ndarray) -> np.ndarray:
    """Rescale a predicted latent to the running norm, preserving direction.

    The input is first divided by its max-abs component, so inputs that are
    exact scalar multiples of each other follow a bitwise-identical path.
    """
    v = np.asarray(v_hat, dtype=np.float64)
    m = float(np.max(np.abs(v)))
    if m <= 0.0:
        raise ValueError("cannot rescale a zero-norm latent")
    u = v / m
    n = float(np.linalg.norm(u))
    return u * (state.mean_norm / n)
