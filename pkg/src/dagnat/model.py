"""Tiny encoder-decoder producing one lattice per source, plus glancing, Adam and checkpoints.

Parameters live in a flat ``{name: tensor}`` dict so they serialize directly
into the checkpoint format. The decoder input is the encoder output
copy-upsampled ``upsample`` times plus learned decoder positions; glancing
overwrites selected decoder inputs with target-token embeddings.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path as FsPath
from typing import Optional, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .errors import CheckpointError, InfeasibleTargetError
from .lattice import NEG, PAD, Lattice

logger = logging.getLogger(__name__)

Params = dict[str, torch.Tensor]


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 128
    upsample: int = 4
    max_source_len: int = 64
    max_decoder_len: int = 96

    def decoder_length(self, m: int) -> int:
        return min(self.upsample * m, self.max_decoder_len)

    def to_strings(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_strings(cls, kv: dict[str, str]) -> "ModelConfig":
        return cls(**{f.name: int(kv[f"model.{f.name}"]) for f in fields(cls) if f"model.{f.name}" in kv})


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo")]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V, f = cfg.d_model, cfg.vocab_size, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (V, d),
        "embed.enc_pos": (cfg.max_source_len, d),
        "embed.dec_pos": (cfg.max_decoder_len, d),
    }

    def block(prefix: str, attns: Sequence[str]):
        for a in attns:
            for name in _attn_names(f"{prefix}.{a}"):
                shapes[name] = (d, d)
            for b in ("bq", "bk", "bv", "bo"):
                shapes[f"{prefix}.{a}.{b}"] = (d,)
        shapes[f"{prefix}.ffn.w1"] = (d, f)
        shapes[f"{prefix}.ffn.b1"] = (f,)
        shapes[f"{prefix}.ffn.w2"] = (f, d)
        shapes[f"{prefix}.ffn.b2"] = (d,)
        for k in range(len(attns) + 1):
            shapes[f"{prefix}.ln{k}.g"] = (d,)
            shapes[f"{prefix}.ln{k}.b"] = (d,)

    for layer in range(cfg.layers):
        block(f"enc.{layer}", ["self"])
    for layer in range(cfg.layers):
        block(f"dec.{layer}", ["self", "cross"])
    shapes["head.vocab"] = (d, V)
    shapes["head.trans_q"] = (d, d)
    shapes["head.trans_k"] = (d, d)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Params:
    gen = torch.Generator().manual_seed(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            t = torch.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            t = torch.zeros(shape, dtype=dtype)
        elif name.startswith("embed."):
            t = torch.randn(shape, generator=gen, dtype=dtype) * cfg.d_model**-0.5
        else:
            t = torch.randn(shape, generator=gen, dtype=dtype) * shape[0] ** -0.5
        params[name] = t.requires_grad_(True)
    return params


@dataclass
class GlancingPlan:
    """Decoder positions whose input is replaced by the embedding of an aligned target token."""

    reveal_ratio: float
    positions: np.ndarray
    tokens: np.ndarray


@dataclass
class GlancingSchedule:
    start: float = 0.5
    end: float = 0.1
    span: int = 3000

    def ratio(self, step: int) -> float:
        if self.span <= 0:
            return self.end
        frac = min(max(step, 0) / self.span, 1.0)
        return self.start + (self.end - self.start) * frac


def glancing_plan(viterbi_path: Sequence[int], target: Sequence[int], step: int,
                  schedule: GlancingSchedule, rng: np.random.Generator,
                  ratio: Optional[float] = None) -> GlancingPlan:
    """Reveal ``round(r * n)`` target tokens, chosen uniformly, at their Viterbi positions."""
    r = schedule.ratio(step) if ratio is None else ratio
    path = np.asarray(viterbi_path, dtype=np.int64)
    tgt = np.asarray(target, dtype=np.int64)
    n = len(tgt)
    k = int(round(r * n))
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    return GlancingPlan(reveal_ratio=r, positions=path[chosen], tokens=tgt[chosen])


@dataclass
class LatticeBatch:
    token_logits: torch.Tensor  # (B, L, V)
    transition_logits: torch.Tensor  # (B, L, L), forbidden entries NEG
    L_lens: np.ndarray

    def lattice(self, b: int, constraint: str = "anchored") -> Lattice:
        L = int(self.L_lens[b])
        tok = self.token_logits[b, :L].detach().cpu().numpy()
        trans = self.transition_logits[b, :L, :L].detach().cpu().numpy()
        return Lattice(tok, trans, constraint)


def _attention(p: Params, prefix: str, xq: torch.Tensor, xkv: torch.Tensor,
               key_ok: torch.Tensor, heads: int) -> torch.Tensor:
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dh = d // heads

    def proj(x, w, b, L):
        y = ad.add(ad.matmul(x, p[f"{prefix}.{w}"]), p[f"{prefix}.{b}"])
        return y.view(B, L, heads, dh).transpose(1, 2)

    q = proj(xq, "wq", "bq", Lq)
    k = proj(xkv, "wk", "bk", Lk)
    v = proj(xkv, "wv", "bv", Lk)
    scores = ad.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
    scores = ad.masked_fill(scores, ~key_ok[:, None, None, :], NEG)
    ctx = ad.matmul(ad.softmax(scores, dim=-1), v)
    ctx = ctx.transpose(1, 2).reshape(B, Lq, d)
    return ad.add(ad.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def _ffn(p: Params, prefix: str, x: torch.Tensor) -> torch.Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, p[f"{prefix}.ffn.w1"]), p[f"{prefix}.ffn.b1"]))
    return ad.add(ad.matmul(h, p[f"{prefix}.ffn.w2"]), p[f"{prefix}.ffn.b2"])


def _ln(p: Params, prefix: str, k: int, x: torch.Tensor) -> torch.Tensor:
    return ad.layer_norm(x, p[f"{prefix}.ln{k}.g"], p[f"{prefix}.ln{k}.b"])


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[torch.Tensor, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = torch.full((len(seqs), int(lens.max())), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lens


def forward(params: Params, cfg: ModelConfig, sources: Sequence[Sequence[int]],
            glancing: Optional[Sequence[Optional[GlancingPlan]]] = None,
            targets: Optional[Sequence[Sequence[int]]] = None) -> LatticeBatch:
    """Map a batch of framed sources to lattice logits.

    When ``targets`` is given, every target must fit its lattice.
    """
    src, src_lens = pad_batch(sources)
    if (src_lens < 1).any():
        raise InfeasibleTargetError("empty source")
    B, m = src.shape
    if m > cfg.max_source_len:
        raise InfeasibleTargetError(f"source length {m} exceeds max_source_len={cfg.max_source_len}")
    d = cfg.d_model
    L_lens = np.minimum(cfg.upsample * src_lens, cfg.max_decoder_len)
    if targets is not None:
        for b, t in enumerate(targets):
            if len(t) > L_lens[b]:
                raise InfeasibleTargetError(f"target of length {len(t)} does not fit lattice of length {L_lens[b]}")
    L = int(L_lens.max())
    scale = math.sqrt(d)
    emb = params["embed.token"]

    src_ok = torch.as_tensor(np.arange(m)[None, :] < src_lens[:, None])
    x = ad.add(ad.embedding(emb, src) * scale, params["embed.enc_pos"][:m])
    for layer in range(cfg.layers):
        pre = f"enc.{layer}"
        x = _ln(p=params, prefix=pre, k=0, x=ad.add(x, _attention(params, f"{pre}.self", x, x, src_ok, cfg.heads)))
        x = _ln(params, pre, 1, ad.add(x, _ffn(params, pre, x)))

    # Copy-upsampling: decoder position u reads encoder state floor(u / upsample).
    up = np.minimum(np.arange(L)[None, :] // cfg.upsample, src_lens[:, None] - 1)
    h = x[torch.arange(B)[:, None], torch.as_tensor(up)]
    h = ad.add(h, params["embed.dec_pos"][:L])
    if glancing is not None and any(g is not None and len(g.positions) for g in glancing):
        reveal = np.zeros((B, L), dtype=bool)
        toks = np.zeros((B, L), dtype=np.int64)
        for b, g in enumerate(glancing):
            if g is not None and len(g.positions):
                reveal[b, g.positions] = True
                toks[b, g.positions] = g.tokens
        glanced = ad.add(ad.embedding(emb, torch.as_tensor(toks)) * scale, params["embed.dec_pos"][:L])
        h = torch.where(torch.as_tensor(reveal)[:, :, None], glanced, h)

    dec_ok = torch.as_tensor(np.arange(L)[None, :] < L_lens[:, None])
    for layer in range(cfg.layers):
        pre = f"dec.{layer}"
        h = _ln(params, pre, 0, ad.add(h, _attention(params, f"{pre}.self", h, h, dec_ok, cfg.heads)))
        h = _ln(params, pre, 1, ad.add(h, _attention(params, f"{pre}.cross", h, x, src_ok, cfg.heads)))
        h = _ln(params, pre, 2, ad.add(h, _ffn(params, pre, h)))

    token_logits = ad.matmul(h, params["head.vocab"])
    q = ad.matmul(h, params["head.trans_q"])
    k = ad.matmul(h, params["head.trans_k"])
    trans = ad.matmul(q, k.transpose(-1, -2)) / math.sqrt(d)
    pos = np.arange(L)
    allowed = (pos[None, :, None] < pos[None, None, :]) & (pos[None, None, :] < L_lens[:, None, None])
    trans = ad.masked_fill(trans, torch.as_tensor(~allowed), NEG)
    return LatticeBatch(token_logits, trans, L_lens)


@dataclass
class AdamHyper:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float = 1.0


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def clip_by_global_norm(grads: dict[str, torch.Tensor], clip_norm: float) -> tuple[dict[str, torch.Tensor], float]:
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if clip_norm > 0 and norm > clip_norm:
        s = clip_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return grads, norm


@torch.no_grad()
def adam_step(params: Params, grads: dict[str, torch.Tensor], state: AdamState, hyper: AdamHyper,
              lr: Optional[float] = None) -> bool:
    """Bias-corrected Adam after global-norm clipping; returns False if the update was skipped."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(params[name].shape)}")
    grads, norm = clip_by_global_norm(grads, hyper.clip_norm)
    if not math.isfinite(norm):
        logger.warning("non-finite gradient norm at step %d; update skipped", state.step)
        return False
    lr = hyper.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1 - hyper.beta1**t
    c2 = 1 - hyper.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(hyper.beta1).add_(g, alpha=1 - hyper.beta1)
        v.mul_(hyper.beta2).addcmul_(g, g, value=1 - hyper.beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + hyper.eps))
    return True


_CDAT_MAGIC = b"CDAT"
_CDAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, torch.Tensor | np.ndarray], meta: dict[str, str]) -> None:
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"config entry {k!r} cannot be encoded as a key=value line")
        lines.append(f"{k}={v}")
    block = "\n".join(lines).encode("utf-8")
    out = bytearray()
    out += _CDAT_MAGIC
    out += struct.pack("<I", _CDAT_VERSION)
    out += struct.pack("<I", len(block)) + block
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    tmp = FsPath(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = FsPath(path).read_bytes()
    if data[:4] != _CDAT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CDAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (blen,) = struct.unpack_from("<I", data, 8)
    off = 12 + blen
    meta = {}
    for line in data[12:off].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    tensors: dict[str, np.ndarray] = {}
    while off < len(data):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
    return meta, tensors


def params_from_arrays(arrays: dict[str, np.ndarray], cfg: ModelConfig,
                       dtype: torch.dtype = torch.float32) -> Params:
    expected = param_shapes(cfg)
    params: Params = {}
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if tuple(arrays[name].shape) != shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != {shape}")
        params[name] = torch.tensor(arrays[name], dtype=dtype).requires_grad_(True)
    return params


def average_params(snapshots: Sequence[dict[str, torch.Tensor]]) -> Params:
    if not snapshots:
        raise ValueError("nothing to average")
    out: Params = {}
    for name in snapshots[0]:
        # accumulate in double so that averaging identical snapshots is exact
        stacked = torch.stack([s[name].detach().double() for s in snapshots])
        out[name] = stacked.mean(dim=0).to(snapshots[0][name].dtype).requires_grad_(True)
    return out
