"""Joint language-modeling + latent-alignment training.

Teacher forcing feeds the ground-truth target vectors at latent pad
positions; the model is supervised to predict (a) the next text token at
every text position and (b) PCA coefficients whose decoded reconstruction
matches the next pad's target. Scheduled sampling optionally replaces pad
inputs with the model's own decoded predictions in a second pass, treated
as constants for differentiation.

The optimizer is an adaptive-moment update with decoupled weight decay and
a linear-warmup + cosine-decay schedule. Gradients come from reverse-mode
autodiff and are verified against central finite differences by grad_check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import LATENT_PAD, TrainingExample, Vocab, serialize_response
from .model import (DTYPE, DecoderParams, KvCache, basis_tensors, forward_prefix,
                    latent_coeffs, lm_logits)
from .numerics import Rng
from .pca import PcaBasis


@dataclass(frozen=True)
class LossBreakdown:
    lm_loss: float
    latent_loss: float
    lambda_latent: float
    latent_position_count: int

    @property
    def total(self) -> float:
        return self.lm_loss + self.lambda_latent * self.latent_loss


def lm_loss(logit_rows: torch.Tensor, target_tokens, mask) -> torch.Tensor:
    """Mean negative log-likelihood over unmasked positions (stable log-sum-exp)."""
    mask_t = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask_t.any()):
        raise ValueError("all positions masked")
    targets = torch.as_tensor(target_tokens, dtype=torch.long)
    logits = logit_rows[mask_t]
    tgts = targets[mask_t]
    logz = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(1, tgts[:, None]).squeeze(1)
    return (logz - picked).mean()


def latent_loss(basis: PcaBasis, coeff_predictions: torch.Tensor,
                targets) -> torch.Tensor:
    """Mean squared error between PCA-decoded predictions and target vectors."""
    if len(targets) == 0:
        raise ValueError("no latent positions")
    if coeff_predictions.shape[0] != len(targets):
        raise ValueError("prediction/target count mismatch")
    comp, mu = basis_tensors(basis)
    tgt = torch.as_tensor(np.stack([np.asarray(t) for t in targets]), dtype=DTYPE)
    decoded = coeff_predictions @ comp.T + mu
    return (decoded - tgt).pow(2).sum(dim=1).mean()


@dataclass
class PreparedExample:
    """A training example resolved into input slots and supervision indices."""

    slots: list                    # token ids and (for pads) target vectors
    lm_positions: list             # positions i whose next-token target is supervised
    lm_targets: list               # token id at i+1 for each lm position
    latent_positions: list         # positions i predicting the pad input at i+1
    latent_targets: list           # target vector for each latent position
    pad_slots: list                # positions holding a pad input vector


def prepare_example(example: TrainingExample, vocab: Vocab) -> PreparedExample:
    """Teacher-forced layout: pads receive their target vectors as inputs."""
    response = serialize_response(example.segments, vocab)
    pad_id = vocab.id(LATENT_PAD)
    span = example.segments.latent_span
    targets = list(span.targets) if span is not None and span.targets is not None else []
    n_pads = sum(1 for t in response if t == pad_id)
    if n_pads and len(targets) != n_pads:
        raise ValueError(f"{n_pads} pad tokens but {len(targets)} target vectors")

    slots = list(example.query_tokens)
    is_pad = [False] * len(slots)
    t_idx = 0
    for tok in response:
        if tok == pad_id:
            slots.append(targets[t_idx])
            is_pad.append(True)
            t_idx += 1
        else:
            slots.append(tok)
            is_pad.append(False)

    q = len(example.query_tokens)
    lm_positions, lm_targets = [], []
    latent_positions, latent_targets = [], []
    pad_slots = [i for i, p in enumerate(is_pad) if p]
    t_idx = 0
    for i in range(q - 1, len(slots) - 1):
        if is_pad[i + 1]:
            latent_positions.append(i)
            latent_targets.append(targets[t_idx])
            t_idx += 1
        else:
            lm_positions.append(i)
            lm_targets.append(slots[i + 1])
    return PreparedExample(slots=slots, lm_positions=lm_positions,
                           lm_targets=lm_targets, latent_positions=latent_positions,
                           latent_targets=latent_targets, pad_slots=pad_slots)


def _example_losses(params: DecoderParams, basis: PcaBasis, prep: PreparedExample,
                    lambda_latent: float):
    """Forward a prepared example and return (loss tensor, LossBreakdown)."""
    _, h_bar, _ = forward_prefix(params, prep.slots, KvCache(params.config))
    logits = lm_logits(params, h_bar[prep.lm_positions])
    lm = lm_loss(logits, prep.lm_targets, [True] * len(prep.lm_targets))
    if prep.latent_positions:
        coeffs = latent_coeffs(params, h_bar[prep.latent_positions])
        lat = latent_loss(basis, coeffs, prep.latent_targets)
    else:
        lat = torch.zeros((), dtype=DTYPE)
    total = lm + lambda_latent * lat
    breakdown = LossBreakdown(lm_loss=float(lm.detach()), latent_loss=float(lat.detach()),
                              lambda_latent=lambda_latent,
                              latent_position_count=len(prep.latent_positions))
    return total, breakdown


def _grads_of(params: DecoderParams, loss: torch.Tensor) -> dict:
    names = params.param_groups()
    grads = torch.autograd.grad(loss, [t for _, t in names], allow_unused=True)
    return {name: (g if g is not None else torch.zeros_like(t))
            for (name, t), g in zip(names, grads)}


def teacher_forced_step(params: DecoderParams, basis: PcaBasis,
                        example: TrainingExample, vocab: Vocab,
                        lambda_latent: float = 1.0):
    """Single teacher-forced pass; returns (LossBreakdown, gradients by name)."""
    prep = prepare_example(example, vocab)
    loss, breakdown = _example_losses(params, basis, prep, lambda_latent)
    return breakdown, _grads_of(params, loss)


def predicted_pad_inputs(params: DecoderParams, basis: PcaBasis,
                         prep: PreparedExample) -> list:
    """PCA-decoded predictions for every pad input, from a teacher-forced pass."""
    with torch.no_grad():
        _, h_bar, _ = forward_prefix(params, prep.slots, KvCache(params.config))
        coeffs = latent_coeffs(params, h_bar[prep.latent_positions])
    comp, mu = basis_tensors(basis)
    decoded = coeffs @ comp.T + mu
    return [decoded[j].numpy().copy() for j in range(decoded.shape[0])]


def scheduled_sampling_step(params: DecoderParams, basis: PcaBasis,
                            example: TrainingExample, vocab: Vocab,
                            mix: float, rng: Rng, lambda_latent: float = 1.0):
    """Two-pass step: pad inputs are independently replaced (probability
    `mix`) by the model's own decoded predictions from pass one. The
    replacements are constants for differentiation."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must be in [0, 1], got {mix}")
    prep = prepare_example(example, vocab)
    if prep.pad_slots and mix > 0.0:
        preds = predicted_pad_inputs(params, basis, prep)
        draws = rng.uniform(len(prep.pad_slots))
        slots = list(prep.slots)
        for j, pos in enumerate(prep.pad_slots):
            if draws[j] < mix:
                slots[pos] = preds[j]
        prep = PreparedExample(slots=slots, lm_positions=prep.lm_positions,
                               lm_targets=prep.lm_targets,
                               latent_positions=prep.latent_positions,
                               latent_targets=prep.latent_targets,
                               pad_slots=prep.pad_slots)
    loss, breakdown = _example_losses(params, basis, prep, lambda_latent)
    return breakdown, _grads_of(params, loss)


# -- optimizer --------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 1e-5
    latent_head_lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_lr: float = 0.0


@dataclass
class OptimState:
    config: OptimizerConfig
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at(config: OptimizerConfig, step: int, peak: float) -> float:
    """Linear warmup over warmup_ratio of total steps, then cosine decay."""
    warmup = max(1, round(config.warmup_ratio * config.total_steps))
    if step < warmup:
        return peak * step / warmup
    span = max(1, config.total_steps - warmup)
    frac = min(1.0, (step - warmup) / span)
    return config.min_lr + 0.5 * (peak - config.min_lr) * (1.0 + np.cos(np.pi * frac))


def optimizer_step(params: DecoderParams, state: OptimState, grads: dict) -> OptimState:
    """Adaptive-moment update with decoupled weight decay; refuses non-finite grads."""
    cfg = state.config
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise ValueError(f"non-finite gradient in {name}: step refused")
    head = params.latent_head_names()
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    with torch.no_grad():
        for name, tensor in params.param_groups():
            g = grads[name]
            peak = cfg.latent_head_lr if name in head else cfg.base_lr
            lr = lr_at(cfg, state.step, peak)
            if name not in state.m:
                state.m[name] = torch.zeros_like(tensor)
                state.v[name] = torch.zeros_like(tensor)
            m = state.m[name]
            v = state.v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            tensor.addcdiv_(m / bc1, (v / bc2).sqrt().add_(cfg.eps), value=-lr)
            if cfg.weight_decay:
                tensor.add_(tensor, alpha=-lr * cfg.weight_decay)
    state.step = t
    return state


# -- training loop ----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 8
    lambda_latent: float = 1.0
    scheduled_mix: float = 0.0
    seed: int = 12345
    base_lr: float = 1e-5
    latent_head_lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03


def train_model(params: DecoderParams, basis: PcaBasis, examples, vocab: Vocab,
                train_cfg: TrainConfig):
    """Deterministic mini-batch training; returns the log as a list of row dicts.

    Gradients are averaged over the batch in a fixed order, so the result is
    independent of any worker-level parallelism.
    """
    torch.set_num_threads(1)
    n_batches = (len(examples) + train_cfg.batch_size - 1) // train_cfg.batch_size
    opt_cfg = OptimizerConfig(
        base_lr=train_cfg.base_lr, latent_head_lr=train_cfg.latent_head_lr,
        weight_decay=train_cfg.weight_decay, warmup_ratio=train_cfg.warmup_ratio,
        total_steps=train_cfg.epochs * n_batches)
    state = OptimState(config=opt_cfg)
    rng = Rng(train_cfg.seed)
    log = []
    for epoch in range(train_cfg.epochs):
        order = list(range(len(examples)))
        rng.shuffle(order)
        for b in range(n_batches):
            batch = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            acc = None
            lm_sum = lat_sum = 0.0
            lat_positions = 0
            for idx in batch:
                ex = examples[idx]
                if train_cfg.scheduled_mix > 0.0:
                    breakdown, grads = scheduled_sampling_step(
                        params, basis, ex, vocab, train_cfg.scheduled_mix,
                        rng.spawn(idx), train_cfg.lambda_latent)
                else:
                    breakdown, grads = teacher_forced_step(
                        params, basis, ex, vocab, train_cfg.lambda_latent)
                lm_sum += breakdown.lm_loss
                lat_sum += breakdown.latent_loss
                lat_positions += breakdown.latent_position_count
                if acc is None:
                    acc = {k: g.clone() for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        acc[k] += g
            scale = 1.0 / len(batch)
            for k in acc:
                acc[k] *= scale
            lr = lr_at(opt_cfg, state.step, opt_cfg.base_lr)
            state = optimizer_step(params, state, acc)
            log.append({
                "step": state.step,
                "lm_loss": lm_sum / len(batch),
                "latent_loss": lat_sum / len(batch),
                "total": (lm_sum + train_cfg.lambda_latent * lat_sum) / len(batch),
                "lr": lr,
            })
    return params, log


def training_log_csv(log) -> str:
    lines = ["step,lm_loss,latent_loss,total,lr"]
    for row in log:
        lines.append(f"{row['step']},{row['lm_loss']!r},{row['latent_loss']!r},"
                     f"{row['total']!r},{row['lr']!r}")
    return "\n".join(lines) + "\n"


# -- finite-difference gradient verification --------------------------------

def _total_loss(params: DecoderParams, basis: PcaBasis, preps, lambda_latent: float):
    total = torch.zeros((), dtype=DTYPE)
    for prep in preps:
        loss, _ = _example_losses(params, basis, prep, lambda_latent)
        total = total + loss
    return total


def grad_check(params: DecoderParams, basis: PcaBasis, examples, vocab: Vocab,
               fd_step: float = 1e-5, lambda_latent: float = 1.0,
               coords_per_group: int = 24, seed: int = 0) -> dict:
    """Analytic gradient vs central finite differences, per parameter group.

    Checks a deterministic random coordinate sample in each group (all
    coordinates for groups at most `coords_per_group` large). Returns
    {"max_rel_error": float, "per_group": {name: rel_error}}.
    """
    preps = [prepare_example(ex, vocab) for ex in examples]
    loss = _total_loss(params, basis, preps, lambda_latent)
    grads = _grads_of(params, loss)
    rng = Rng(seed)
    report = {}
    worst = 0.0
    for name, tensor in params.param_groups():
        flat = tensor.detach().view(-1)
        n = flat.shape[0]
        if n <= coords_per_group:
            coords = list(range(n))
        else:
            coords = sorted(set(int(c) for c in rng.integers(0, n, coords_per_group)))
        group_worst = 0.0
        g_flat = grads[name].view(-1)
        for c in coords:
            old = float(flat[c])
            with torch.no_grad():
                flat[c] = old + fd_step
            lp = float(_total_loss(params, basis, preps, lambda_latent).detach())
            with torch.no_grad():
                flat[c] = old - fd_step
            lm = float(_total_loss(params, basis, preps, lambda_latent).detach())
            with torch.no_grad():
                flat[c] = old
            fd = (lp - lm) / (2.0 * fd_step)
            a = float(g_flat[c])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            group_worst = max(group_worst, rel)
        report[name] = group_worst
        worst = max(worst, group_worst)
    return {"max_rel_error": worst, "per_group": report}
