"""Numeric core: reverse-mode gradients, Adam, network building blocks, checkpoint container.

Tensors and autograd come from torch; everything here is a thin contract layer
over it so the rest of the package does not depend on torch.optim or torch.nn's
stock transformer modules (which have no incremental decoding).
"""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"SEGMTCKP"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    pass


def reverse_gradient(f: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor]) -> tuple[float, dict[str, torch.Tensor]]:
    """Evaluate scalar `f()` and return (value, d value / d param for every named param)."""
    for p in params.values():
        p.grad = None
    out = f()
    if out.dim() != 0 and out.numel() != 1:
        raise ValueError(f"reverse_gradient needs a scalar output, got shape {tuple(out.shape)}")
    out = out.reshape(())
    out.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    return float(out.detach()), grads


class Adam:
    """Adam with bias correction over a named parameter map."""

    def __init__(self, params: Mapping[str, torch.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.t = 0

    @torch.no_grad()
    def step(self, grads: Mapping[str, torch.Tensor]) -> None:
        for name, g in grads.items():
            if g.shape != self.params[name].shape:
                raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, "
                                 f"parameter has {tuple(self.params[name].shape)}")
            if not torch.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for parameter {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            step = (m / c1) / ((v / c2).sqrt() + self.eps)
            self.params[name].sub_(self.lr * step)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k].detach().cpu().numpy()
            out[f"adam.v.{k}"] = self.v[k].detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k].copy_(torch.from_numpy(arrays[f"adam.m.{k}"]))
            self.v[k].copy_(torch.from_numpy(arrays[f"adam.v.{k}"]))
        self.t = t


# --------------------------------------------------------------------------- #
# building blocks
# --------------------------------------------------------------------------- #


def fan_in_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """Re-initialize every Linear/Embedding/LSTMCell weight as U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                mod.weight.uniform_(-bound, bound, generator=generator)
                if mod.bias is not None:
                    mod.bias.uniform_(-bound, bound, generator=generator)
            elif isinstance(mod, nn.Embedding):
                bound = 1.0 / math.sqrt(mod.embedding_dim)
                mod.weight.uniform_(-bound, bound, generator=generator)
            elif isinstance(mod, nn.LSTMCell):
                bound = 1.0 / math.sqrt(mod.hidden_size)
                for p in mod.parameters():
                    p.uniform_(-bound, bound, generator=generator)


def sinusoidal_positions(n: int, d: int, dtype=DTYPE) -> torch.Tensor:
    pos = torch.arange(n, dtype=dtype).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=dtype)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), i / d)
    pe = torch.zeros(n, d, dtype=dtype)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.h = n_heads
        self.dk = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.h, self.dk).transpose(1, 2)

    def project_kv(self, kv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._split(self.k(kv)), self._split(self.v(kv))

    def forward(self, query, keys, values, mask=None):
        """query [B,Tq,d]; keys/values already split [B,h,Tk,dk]; mask [B or 1, Tq or 1, Tk] True = blocked."""
        q = self._split(self.q(query))
        scores = q @ keys.transpose(-1, -2) / math.sqrt(self.dk)
        if mask is not None:
            scores = scores.masked_fill(mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ values).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, x, pad_mask):
        h = self.ln1(x)
        k, v = self.attn.project_kv(h)
        x = x + self.attn(h, k, v, pad_mask.unsqueeze(1))
        return x + self.ff(self.ln2(x))


class DecoderLayer(nn.Module):
    """Pre-norm decoder layer; `step` runs it on new positions given a key/value cache."""

    def __init__(self, d_model, n_heads, d_ff):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ln3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, x, mem_kv, mem_mask, causal=True):
        h = self.ln1(x)
        k, v = self.self_attn.project_kv(h)
        mask = None
        if causal:
            t = x.shape[1]
            mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1).unsqueeze(0)
        x = x + self.self_attn(h, k, v, mask)
        x = x + self.cross_attn(self.ln2(x), *mem_kv, mem_mask.unsqueeze(1))
        return x + self.ff(self.ln3(x))

    def step(self, x, cache, mem_kv, mem_mask):
        """x [B,1,d]; cache (k,v) of earlier positions or None. Returns (out, new cache)."""
        h = self.ln1(x)
        k, v = self.self_attn.project_kv(h)
        if cache is not None:
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)
        x = x + self.self_attn(h, k, v, None)
        x = x + self.cross_attn(self.ln2(x), *mem_kv, mem_mask.unsqueeze(1))
        return x + self.ff(self.ln3(x)), (k, v)


def masked_log_softmax(logits: torch.Tensor, blocked: torch.Tensor | None) -> torch.Tensor:
    if blocked is not None:
        logits = logits.masked_fill(blocked, float("-inf"))
    return F.log_softmax(logits, dim=-1)


# --------------------------------------------------------------------------- #
# checkpoint container
# --------------------------------------------------------------------------- #
# layout: MAGIC | u32 version | u32 header_len | header (UTF-8 JSON) | arrays
# each array: u16 name_len | name | u8 dtype code | u8 ndim | u32 dims... | little-endian data

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(path: str | Path, header: dict, arrays: Mapping[str, np.ndarray], dtype="f4") -> None:
    """Write named arrays; floats are stored as `dtype` ("f4" or "f8"), integer arrays as i8."""
    hdr = json.dumps({"format_version": CHECKPOINT_VERSION, **header}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hdr)))
    buf.write(hdr)
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype("<i8")
        else:
            arr = arr.astype("<" + dtype)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    while off < len(data):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape).copy()
        off += count * dt.itemsize
    return header, arrays
