"""Transformer building blocks on top of torch tensors.

Attention takes an explicit boolean mask (True = may attend) so the same
code serves causal self-attention, padding and the bar-level cross mask.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tensorfile


@dataclass(frozen=True)
class TransformerConfig:
    hidden: int = 128
    ff: int = 512
    heads: int = 4
    dropout: float = 0.1
    activation: str = "gelu"
    encoder_layers: int = 2
    decoder_layers: int = 2
    controller_layers: int = 2
    linear_attention: bool = False

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


PROFILES = {
    "desk": TransformerConfig(),
    # hyper-parameters reported for the full-size model
    "paper": TransformerConfig(hidden=512, ff=2048, heads=8, dropout=0.1, encoder_layers=4,
                               decoder_layers=4, controller_layers=2),
}


# ---------------------------------------------------------------------------
# masks


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


def bar_cross_mask(decoder_bars, encoder_bars) -> torch.Tensor:
    """mask[i, j] is True iff decoder token i and encoder token j are at most one bar apart."""
    d = torch.as_tensor(np.asarray(decoder_bars), dtype=torch.long)
    e = torch.as_tensor(np.asarray(encoder_bars), dtype=torch.long)
    return (d.unsqueeze(-1) - e.unsqueeze(-2)).abs() <= 1


# ---------------------------------------------------------------------------
# attention


def _check_rows(mask: torch.Tensor):
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("attention mask leaves a query row with no allowed key")


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              mask: Optional[torch.Tensor] = None,
              dropout: float = 0.0, training: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over (..., L, d) tensors.

    Masked keys get exactly zero weight. Returns (output, weights).
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool, device=q.device)
        _check_rows(mask)
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    if dropout and training:
        weights = F.dropout(weights, dropout, training=True)
    return weights @ v, weights


def linear_attention(q, k, v, mask=None):
    """Kernelized attention with feature map elu(x) + 1 (masked keys contribute nothing)."""
    fq, fk = F.elu(q) + 1, F.elu(k) + 1
    w = fq @ fk.transpose(-2, -1)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool, device=q.device)
        _check_rows(mask)
        w = w * mask.to(w.dtype)
    w = w / w.sum(dim=-1, keepdim=True)
    return w @ v, w


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float = 0.0, linear: bool = False):
        super().__init__()
        if hidden % heads:
            raise ValueError("hidden must be divisible by heads")
        self.heads = heads
        self.dropout = dropout
        self.linear = linear
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)
        self.last_weights: Optional[torch.Tensor] = None

    def _split(self, x):
        b, n, h = x.shape
        return x.view(b, n, self.heads, h // self.heads).transpose(1, 2)

    def forward(self, x, memory=None, mask=None):
        memory = x if memory is None else memory
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=torch.bool)
            if mask.dim() == 3:  # (B, Lq, Lk) -> broadcast over heads
                mask = mask.unsqueeze(1)
        if self.linear:
            out, w = linear_attention(q, k, v, mask)
        else:
            out, w = attention(q, k, v, mask, self.dropout, self.training)
        self.last_weights = w.detach()
        b, _, n, d = out.shape
        return self.out(out.transpose(1, 2).reshape(b, n, self.heads * d))


class FeedForward(nn.Module):
    def __init__(self, hidden: int, ff: int, dropout: float = 0.0, activation: str = "gelu"):
        super().__init__()
        self.fc1 = nn.Linear(hidden, ff)
        self.fc2 = nn.Linear(ff, hidden)
        self.act = nn.GELU() if activation == "gelu" else nn.ReLU()
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(self.act(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.dropout, cfg.linear_attention)
        self.ff = FeedForward(cfg.hidden, cfg.ff, cfg.dropout, cfg.activation)
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.norm2 = nn.LayerNorm(cfg.hidden)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: TransformerConfig, cross: bool = True):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.dropout, cfg.linear_attention)
        self.cross_attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.dropout, cfg.linear_attention) \
            if cross else None
        self.ff = FeedForward(cfg.hidden, cfg.ff, cfg.dropout, cfg.activation)
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.norm2 = nn.LayerNorm(cfg.hidden) if cross else None
        self.norm3 = nn.LayerNorm(cfg.hidden)

    def forward(self, x, self_mask, memory=None, cross_mask=None):
        x = x + self.self_attn(self.norm1(x), mask=self_mask)
        if self.cross_attn is not None and memory is not None:
            x = x + self.cross_attn(self.norm2(x), memory=memory, mask=cross_mask)
        return x + self.ff(self.norm3(x))


class Encoder(nn.Module):
    def __init__(self, cfg: TransformerConfig, layers: int):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(layers))
        self.norm = nn.LayerNorm(cfg.hidden)

    def forward(self, x, mask=None):
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)


class Decoder(nn.Module):
    def __init__(self, cfg: TransformerConfig, layers: int, cross: bool = True):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(cfg, cross) for _ in range(layers))
        self.norm = nn.LayerNorm(cfg.hidden)

    def forward(self, x, self_mask, memory=None, cross_mask=None):
        for layer in self.layers:
            x = layer(x, self_mask, memory, cross_mask)
        return self.norm(x)


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    out = torch.zeros(n, dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(pos * freq)
    out[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return out


# ---------------------------------------------------------------------------
# loss


def multihead_ce_loss(logits: dict[str, torch.Tensor], targets: dict[str, torch.Tensor],
                      ignore_index: int = 0) -> torch.Tensor:
    """Mean over attributes of the token-averaged cross-entropy.

    Positions whose target equals ``ignore_index`` (the NA id) do not count.
    Attributes with no valid position are left out of the mean.
    """
    if set(logits) != set(targets):
        raise ValueError(f"attribute mismatch: {sorted(logits)} vs {sorted(targets)}")
    losses = []
    for attr, lg in logits.items():
        tg = targets[attr]
        if lg.shape[:-1] != tg.shape:
            raise ValueError(f"{attr}: logits {tuple(lg.shape)} do not match targets {tuple(tg.shape)}")
        valid = tg != ignore_index
        if not bool(valid.any()):
            continue
        losses.append(F.cross_entropy(lg[valid], tg[valid]))
    if not losses:
        return next(iter(logits.values())).sum() * 0.0
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# gradient check


def grad_check(module: nn.Module, *inputs, loss: Optional[Callable] = None,
               h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between autograd and central finite differences.

    The module is moved to float64 and put in eval mode. Per parameter
    tensor the error is ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, floor)
    where floor = 1e-6 times the largest gradient norm of any tensor, so a
    tensor whose gradient is analytically zero (e.g. the key bias under
    softmax shift invariance) is compared in absolute terms instead of
    ratio-of-noise. Returns 0 when every gradient vanishes.
    """
    module = module.double().eval()
    inputs = [x.double() if torch.is_tensor(x) and x.is_floating_point() else x for x in inputs]
    if loss is None:
        with torch.no_grad():
            out = module(*inputs)
        gen = torch.Generator().manual_seed(seed)
        proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)
        loss = lambda o: (o * proj).sum() + 0.5 * (o ** 2).sum()

    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    value = loss(module(*inputs))
    value.backward()
    pairs = []
    with torch.no_grad():
        for p in params:
            auto = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss(module(*inputs)).item()
                flat[i] = orig - h
                down = loss(module(*inputs)).item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * h)
            pairs.append((auto, numeric))
    floor = 1e-6 * max((max(a.norm().item(), n.norm().item()) for a, n in pairs), default=0.0)
    worst = 0.0
    for auto, numeric in pairs:
        scale = max(auto.norm().item(), numeric.norm().item(), floor)
        if scale > 0:
            worst = max(worst, (auto - numeric).norm().item() / scale)
    return worst


# ---------------------------------------------------------------------------
# sampling


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def nucleus_probs(logits, temperature: float, top_p: float,
                  allowed: Optional[Sequence[int]] = None) -> np.ndarray:
    """Temperature-scaled, top-p truncated, renormalized distribution."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    x = np.asarray(logits, dtype=np.float64) / temperature
    if allowed is not None:
        keep = np.full(x.shape, -np.inf)
        idx = np.asarray(list(allowed), dtype=np.int64)
        keep[idx] = x[idx]
        x = keep
    x = x - x.max()
    p = np.exp(x)
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    cut = int(np.searchsorted(cum, top_p - 1e-12)) + 1
    out = np.zeros_like(p)
    out[order[:cut]] = p[order[:cut]]
    return out / out.sum()


def sample_from_logits(logits, temperature: float = 1.0, top_p: float = 1.0, rng=None,
                       allowed: Optional[Sequence[int]] = None, greedy: bool = False) -> int:
    x = np.asarray(logits, dtype=np.float64)
    if greedy:
        if allowed is None:
            return int(np.argmax(x))
        allowed = list(allowed)
        return int(allowed[int(np.argmax(x[allowed]))])
    p = nucleus_probs(x, temperature, top_p, allowed)
    u = _as_rng(rng).random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))


class Constraint:
    """Tells :func:`sample_token` which ids are legal. ``None`` means anything goes."""

    def allowed(self, attr: str, partial: dict[str, int]) -> Optional[list[int]]:
        return None

    def attributes(self, type_id: int) -> Sequence[str]:
        raise NotImplementedError


MAX_TYPE_RETRIES = 8


def sample_token(logits: dict[str, Sequence[float]], temperature: float = 1.0, top_p: float = 1.0,
                 rng=None, constraint: Optional[Constraint] = None,
                 greedy: bool = False) -> dict[str, int]:
    """Sample one compound token, attribute by attribute.

    The type attribute is drawn first. An invalid type is redrawn up to
    8 times before falling back to the most likely valid type. The
    remaining attributes are drawn from their legal ids only.
    """
    rng = _as_rng(rng)
    if constraint is None:
        return {a: sample_from_logits(lg, temperature, top_p, rng, greedy=greedy) for a, lg in logits.items()}

    out = {a: 0 for a in logits}
    legal_types = constraint.allowed("type", {})
    t = sample_from_logits(logits["type"], temperature, top_p, rng, greedy=greedy)
    tries = 0
    while legal_types is not None and t not in legal_types and tries < MAX_TYPE_RETRIES:
        t = sample_from_logits(logits["type"], temperature, top_p, rng, greedy=greedy)
        tries += 1
    if legal_types is not None and t not in legal_types:
        t = sample_from_logits(logits["type"], rng=rng, allowed=legal_types, greedy=True)
    out["type"] = t
    for attr in constraint.attributes(t):
        allowed = constraint.allowed(attr, out)
        out[attr] = sample_from_logits(logits[attr], temperature, top_p, rng, allowed=allowed, greedy=greedy)
    return out


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"VMCK"


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """JSON header followed by VMFT tensors in the order listed under ``header['tensors']``."""
    names = list(tensors)
    head = dict(header, tensors=names)
    blob = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for name in names:
            f.write(tensorfile.dumps(tensors[name]))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n))
        tensors = {name: tensorfile.read_from(f) for name in header["tensors"]}
    return header, tensors


def state_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_numpy_state(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})


def config_dict(cfg: TransformerConfig) -> dict:
    return asdict(cfg)
