"""Toy pre-norm transformer decoder with a PCA-coefficient latent head.

The decoder is deliberately small (defaults: d_model=64, 4 layers) and runs
entirely in float64 on CPU so that finite-difference gradient checks and
bitwise-reproducible runs are practical. Input positions are "slots": either
a token id looked up in the embedding table, or a raw d-dimensional latent
embedding injected directly into the residual stream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .numerics import DimensionError
from .pca import PcaBasis

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    latent_k: int = 16
    adapter_width: int = 0  # 0 -> defaults to latent_k
    max_seq_len: int = 512
    rms_eps: float = 1e-6
    rope_base: float = 10000.0
    init_seed: int = 12345

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.latent_k > self.d_model:
            raise ValueError("latent_k must not exceed d_model")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must at least cover the special tokens")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def adapter_dim(self) -> int:
        return self.adapter_width if self.adapter_width > 0 else self.latent_k


def _rms(x: torch.Tensor, gain: torch.Tensor, eps: float) -> torch.Tensor:
    ms = x.pow(2).mean(dim=-1, keepdim=True)
    return gain * x * torch.rsqrt(ms + eps)


def _rope(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotary position encoding over interleaved (even, odd) pairs.

    x: (n, heads, head_dim); positions: (n,) absolute indices.
    """
    hd = x.shape[-1]
    half = hd // 2
    inv = base ** (-torch.arange(half, dtype=DTYPE) * 2.0 / hd)
    ang = positions.to(DTYPE)[:, None] * inv[None, :]          # (n, half)
    cos = torch.cos(ang)[:, None, :]
    sin = torch.sin(ang)[:, None, :]
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class DecoderParams(torch.nn.Module):
    """All weights of the toy decoder, seeded scaled-normal initialization."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.init_seed)
        d, ff, v, k = config.d_model, config.d_ff, config.vocab_size, config.latent_k
        a = config.adapter_dim

        def w(rows, cols, fan_in):
            t = torch.empty(rows, cols, dtype=DTYPE)
            t.normal_(0.0, 1.0 / fan_in ** 0.5, generator=gen)
            return torch.nn.Parameter(t)

        self.embed = torch.nn.Parameter(
            torch.empty(v, d, dtype=DTYPE).normal_(0.0, 1.0, generator=gen))
        self.layers = torch.nn.ModuleList()
        for _ in range(config.n_layers):
            layer = torch.nn.Module()
            layer.gain_attn = torch.nn.Parameter(torch.ones(d, dtype=DTYPE))
            layer.wq = w(d, d, d)
            layer.wk = w(d, d, d)
            layer.wv = w(d, d, d)
            layer.wo = w(d, d, d)
            layer.gain_mlp = torch.nn.Parameter(torch.ones(d, dtype=DTYPE))
            layer.w_gate = w(ff, d, d)
            layer.w_up = w(ff, d, d)
            layer.w_down = w(d, ff, ff)
            self.layers.append(layer)
        self.final_gain = torch.nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.w_vocab = w(v, d, d)
        # latent head: down-projection to k coefficients + residual SwiGLU adapter
        self.latent_down = w(k, d, d)
        self.adapter_gate = w(a, k, k)
        self.adapter_up = w(a, k, k)
        self.adapter_down = torch.nn.Parameter(torch.zeros(k, a, dtype=DTYPE))

    def param_groups(self):
        """(name, tensor) pairs in a fixed, documented order."""
        items = [("embed", self.embed)]
        for i, layer in enumerate(self.layers):
            for nm in ("gain_attn", "wq", "wk", "wv", "wo", "gain_mlp",
                       "w_gate", "w_up", "w_down"):
                items.append((f"layers.{i}.{nm}", getattr(layer, nm)))
        items += [
            ("final_gain", self.final_gain),
            ("w_vocab", self.w_vocab),
            ("latent_down", self.latent_down),
            ("adapter_gate", self.adapter_gate),
            ("adapter_up", self.adapter_up),
            ("adapter_down", self.adapter_down),
        ]
        return items

    def latent_head_names(self):
        return {"latent_down", "adapter_gate", "adapter_up", "adapter_down"}


class KvCache:
    """Per-layer cached keys and values; append-only within one decode."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.keys = [None] * config.n_layers    # (len, heads, head_dim)
        self.values = [None] * config.n_layers
        self.length = 0

    def append(self, layer: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[layer] is None:
            self.keys[layer] = k
            self.values[layer] = v
        else:
            self.keys[layer] = torch.cat([self.keys[layer], k], dim=0)
            self.values[layer] = torch.cat([self.values[layer], v], dim=0)


def slots_to_embeddings(params: DecoderParams, slots) -> torch.Tensor:
    """Resolve a slot sequence to the (n, d) input matrix.

    Integer slots index the embedding table; array slots are injected as-is.
    """
    d = params.config.d_model
    rows = []
    for i, s in enumerate(slots):
        if isinstance(s, (int, np.integer)):
            if not 0 <= int(s) < params.config.vocab_size:
                raise ValueError(f"slot {i}: token id {s} out of vocabulary")
            rows.append(params.embed[int(s)])
        else:
            t = torch.as_tensor(np.asarray(s, dtype=np.float64), dtype=DTYPE) \
                if not isinstance(s, torch.Tensor) else s.to(DTYPE)
            if t.shape != (d,):
                raise DimensionError(f"slot {i}: latent embedding must have shape ({d},)")
            rows.append(t)
    return torch.stack(rows)


def forward_prefix(params: DecoderParams, slots, cache: KvCache,
                   return_trace: bool = False):
    """Run the pre-norm stack over new slots, extending the cache.

    Returns (h_last, h_bar, cache) where both outputs are (n_new, d):
    h_last is the residual-stream state before the final RMSNorm, h_bar
    after it. With return_trace=True also returns a dict with the per-layer
    boundary states and the per-sublayer residual updates.
    """
    cfg = params.config
    n_new = len(slots)
    if n_new == 0:
        raise ValueError("empty slot sequence")
    if cache.length + n_new > cfg.max_seq_len:
        raise ValueError(
            f"sequence overflow: {cache.length + n_new} > max_seq_len {cfg.max_seq_len}")
    x = slots_to_embeddings(params, slots)
    positions = torch.arange(cache.length, cache.length + n_new)
    boundaries = [x] if return_trace else None
    updates = [] if return_trace else None

    nh, hd = cfg.n_heads, cfg.head_dim
    scale = hd ** -0.5
    for li, layer in enumerate(params.layers):
        xn = _rms(x, layer.gain_attn, cfg.rms_eps)
        q = (xn @ layer.wq.T).view(n_new, nh, hd)
        k = (xn @ layer.wk.T).view(n_new, nh, hd)
        v = (xn @ layer.wv.T).view(n_new, nh, hd)
        q = _rope(q, positions, cfg.rope_base)
        k = _rope(k, positions, cfg.rope_base)
        cache.append(li, k, v)
        k_all = cache.keys[li]      # (total, nh, hd)
        v_all = cache.values[li]
        total = k_all.shape[0]
        # scores: (nh, n_new, total), causal within the new block
        scores = torch.einsum("qhd,khd->hqk", q, k_all) * scale
        key_pos = torch.arange(total)
        mask = key_pos[None, :] > positions[:, None]   # (n_new, total)
        scores = scores.masked_fill(mask[None, :, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = torch.einsum("hqk,khd->qhd", attn, v_all).reshape(n_new, cfg.d_model)
        u_attn = ctx @ layer.wo.T
        x = x + u_attn
        xn2 = _rms(x, layer.gain_mlp, cfg.rms_eps)
        gate = xn2 @ layer.w_gate.T
        u_mlp = (torch.nn.functional.silu(gate) * (xn2 @ layer.w_up.T)) @ layer.w_down.T
        x = x + u_mlp
        if return_trace:
            updates.append((u_attn, u_mlp))
            boundaries.append(x)

    cache.length += n_new
    h_last = x
    h_bar = _rms(x, params.final_gain, cfg.rms_eps)
    if return_trace:
        return h_last, h_bar, cache, {"boundaries": boundaries, "updates": updates}
    return h_last, h_bar, cache


def lm_logits(params: DecoderParams, h_bar: torch.Tensor) -> torch.Tensor:
    """Vocabulary logits W_vocab @ h_bar (no softmax)."""
    if h_bar.shape[-1] != params.config.d_model:
        raise DimensionError("h_bar has wrong hidden dimension")
    return h_bar @ params.w_vocab.T


def latent_coeffs(params: DecoderParams, h_bar: torch.Tensor) -> torch.Tensor:
    """PCA-coefficient prediction: down-projection plus residual SwiGLU adapter."""
    if h_bar.shape[-1] != params.config.d_model:
        raise DimensionError("h_bar has wrong hidden dimension")
    z = h_bar @ params.latent_down.T
    gate = z @ params.adapter_gate.T
    up = z @ params.adapter_up.T
    return z + (torch.nn.functional.silu(gate) * up) @ params.adapter_down.T


def init_latent_head(params: DecoderParams, basis: PcaBasis,
                     perturb_scale: float = 1e-3, seed: int = 0) -> None:
    """Set the down-projection to the basis transpose and re-seed the adapter
    near identity, so that initially latent_coeffs(h) ~= P_k^T h."""
    cfg = params.config
    if basis.d != cfg.d_model or basis.k != cfg.latent_k:
        raise DimensionError(
            f"basis (d={basis.d}, k={basis.k}) does not match config "
            f"(d={cfg.d_model}, k={cfg.latent_k})")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        params.latent_down.copy_(torch.as_tensor(basis.components.T.copy(), dtype=DTYPE))
        k, a = cfg.latent_k, cfg.adapter_dim
        params.adapter_gate.normal_(0.0, 1.0 / k ** 0.5, generator=gen)
        params.adapter_up.normal_(0.0, 1.0 / k ** 0.5, generator=gen)
        if perturb_scale > 0:
            params.adapter_down.normal_(0.0, perturb_scale / a ** 0.5, generator=gen)
        else:
            params.adapter_down.zero_()


_BASIS_TENSOR_CACHE: dict = {}


def basis_tensors(basis: PcaBasis):
    """(components, mean) as float64 tensors, cached per basis instance."""
    key = id(basis)
    if key not in _BASIS_TENSOR_CACHE:
        _BASIS_TENSOR_CACHE[key] = (
            torch.as_tensor(basis.components.copy(), dtype=DTYPE),
            torch.as_tensor(basis.mean.copy(), dtype=DTYPE),
        )
    return _BASIS_TENSOR_CACHE[key]


# -- checkpoint persistence -------------------------------------------------

_CKPT_MAGIC = b"LLCK"
_CKPT_VERSION = 1


def save_checkpoint(params: DecoderParams, path) -> None:
    """Versioned binary: JSON config header, then every parameter array
    (fixed order per param_groups) as little-endian doubles."""
    cfg_json = json.dumps(asdict(params.config), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(cfg_json)))
        f.write(cfg_json)
        for name, tensor in params.param_groups():
            arr = tensor.detach().numpy().astype("<f8")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> DecoderParams:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, cfg_len = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig(**json.loads(f.read(cfg_len).decode()))
        params = DecoderParams(config)
        with torch.no_grad():
            for name, tensor in params.param_groups():
                (nlen,) = struct.unpack("<H", f.read(2))
                stored = f.read(nlen).decode()
                if stored != name:
                    raise ValueError(f"checkpoint order mismatch: {stored} vs {name}")
                (ndim,) = struct.unpack("<B", f.read(1))
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                count = int(np.prod(shape))
                arr = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
                tensor.copy_(torch.as_tensor(arr.copy(), dtype=DTYPE))
    return params
