"""Embedder, encoder, instance aggregators and decoder.

Instances of all systems in a batch pass through the embedder and encoder as
one flat mini-batch.  They are regrouped per system (padded to the largest
group, with a validity mask) before aggregation, so each aggregator only
ever mixes instances of the same system.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import build_vocab

AGGREGATORS = ("mean", "attentive", "xattn", "timeaware")
_AGG_ALIASES = {"xattn_time_agnostic": "xattn", "attn_time_aware": "timeaware"}
CHECKPOINT_FORMAT = "odemil-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_enc: int = 256
    enc_layers: int = 4
    enc_heads: int = 16
    d_dec: int = 512
    dec_layers: int = 12
    dec_heads: int = 16
    aggregator: str = "mean"
    agg_layers: int = 4
    agg_heads: int = 8
    d_max: int = 4
    ffn_mult: int = 4
    dropout: float = 0.0
    max_target_len: int = 256
    vocab_size: int = len(build_vocab())

    def __post_init__(self):
        agg = _AGG_ALIASES.get(self.aggregator, self.aggregator)
        object.__setattr__(self, "aggregator", agg)
        if agg not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        for d, h in ((self.d_enc, self.enc_heads), (self.d_dec, self.dec_heads),
                     (self.d_enc, self.agg_heads)):
            if d % h:
                raise ValueError(f"embedding width {d} not divisible by {h} heads")
        if min(self.enc_layers, self.dec_layers, self.agg_layers, self.d_max) < 1:
            raise ValueError("depths and d_max must be positive")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(d_enc=64, enc_layers=2, enc_heads=4, d_dec=64, dec_layers=2, dec_heads=4,
                    agg_layers=2, agg_heads=4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def preset(cls, experiment: int = 1, **overrides) -> "ModelConfig":
        base = dict(dec_layers=12 if experiment == 1 else 16)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sinusoidal(length: int, d: int, device=None, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, device=device, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, device=device, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(length, d, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.d, self.h = d, heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem=None, key_mask=None, causal=False):
        """``key_mask``: (B, Lk) bool, True where the key is valid."""
        mem = x if mem is None else mem
        B, Lq, _ = x.shape
        Lk = mem.shape[1]
        dh = self.d // self.h
        q = self.q(x).view(B, Lq, self.h, dh).transpose(1, 2)
        k = self.k(mem).view(B, Lk, self.h, dh).transpose(1, 2)
        v = self.v(mem).view(B, Lk, self.h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            tri = torch.ones(Lq, Lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(tri, float("-inf"))
        att = self.drop(torch.softmax(scores, dim=-1))
        out = (att @ v).transpose(1, 2).reshape(B, Lq, self.d)
        return self.o(out)


class FeedForward(nn.Sequential):
    def __init__(self, d: int, hidden: int, dropout: float = 0.0):
        super().__init__(nn.Linear(d, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, d))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, mult=4, dropout=0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.ln2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, mult * d, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        x = x + self.drop(self.attn(self.ln1(x), key_mask=key_mask))
        return x + self.drop(self.ff(self.ln2(x)))


class Encoder(nn.Module):
    """Pre-norm transformer encoder stack with a final LayerNorm."""

    def __init__(self, d, layers, heads, mult=4, dropout=0.0):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d, heads, mult, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, x, key_mask=None):
        for layer in self.layers:
            x = layer(x, key_mask)
        return self.norm(x)


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, mult=4, dropout=0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, dropout)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, dropout)
        self.ln3 = nn.LayerNorm(d)
        self.ff = FeedForward(d, mult * d, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem):
        x = x + self.drop(self.self_attn(self.ln1(x), causal=True))
        x = x + self.drop(self.cross_attn(self.ln2(x), mem))
        return x + self.drop(self.ff(self.ln3(x)))


class TrajectoryEmbedder(nn.Module):
    """Token slots of one time point -> one ``d``-vector.

    Each of the ``3 (d_max + 1)`` slots is embedded separately; slots of
    absent dimensions are zero vectors.  The concatenation goes through a
    2-layer feedforward map back to ``d``.
    """

    def __init__(self, vocab_size, d, d_max):
        super().__init__()
        self.n_slots = 3 * (d_max + 1)
        self.tok = nn.Embedding(vocab_size, d)
        self.ff = nn.Sequential(nn.Linear(self.n_slots * d, d), nn.GELU(), nn.Linear(d, d))

    def forward(self, ids, slot_mask):
        """ids, slot_mask: (N, s, n_slots)."""
        if ids.shape[-1] != self.n_slots:
            raise ValueError(f"expected {self.n_slots} token slots per time point, got {ids.shape[-1]}")
        e = self.tok(ids) * slot_mask[..., None].to(self.tok.weight.dtype)
        return self.ff(e.flatten(-2))


class TimeCondenser(nn.Module):
    """Prepends a class token, encodes along time, returns the class-token output."""

    def __init__(self, d, layers, heads, mult=4, dropout=0.0):
        super().__init__()
        self.cls = nn.Parameter(torch.randn(d) * 0.02)
        self.encoder = Encoder(d, layers, heads, mult, dropout)

    def forward(self, z):
        """z: (..., s, d) -> (..., d)."""
        lead, (s, d) = z.shape[:-2], z.shape[-2:]
        z = z.reshape(-1, s, d)
        x = torch.cat([self.cls.expand(z.shape[0], 1, d), z], dim=1)
        x = x + sinusoidal(s + 1, d, z.device, z.dtype)
        return self.encoder(x)[:, 0].reshape(*lead, d)


class MeanAggregator(nn.Module):
    def forward(self, zg, mask):
        """zg: (B, n, s, d); mask: (B, n) -> (B, s, d)."""
        m = mask.to(zg.dtype)[:, :, None, None]
        return (zg * m).sum(1) / m.sum(1)


class AttentiveAggregator(nn.Module):
    def __init__(self, d, layers, heads, mult=4, dropout=0.0, condenser=None):
        super().__init__()
        self.condenser = condenser or TimeCondenser(d, layers, heads, mult, dropout)
        self.w = nn.Parameter(torch.randn(d) / math.sqrt(d))
        self.last_weights = None

    def weights(self, zg, mask):
        scores = self.condenser(zg) @ self.w
        return torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=1)

    def forward(self, zg, mask):
        w = self.weights(zg, mask)
        self.last_weights = w.detach()
        return torch.einsum("bn,bnsd->bsd", w, zg)


class TimeAgnosticAggregator(nn.Module):
    """Single learned query cross-attending over the instances, per time index."""

    def __init__(self, d, heads, dropout=0.0):
        super().__init__()
        self.query = nn.Parameter(torch.randn(d) * 0.02)
        self.attn = MultiHeadAttention(d, heads, dropout)

    def forward(self, zg, mask):
        B, n, s, d = zg.shape
        keys = zg.permute(0, 2, 1, 3).reshape(B * s, n, d)
        km = mask[:, None, :].expand(B, s, n).reshape(B * s, n)
        q = self.query.expand(B * s, 1, d)
        return self.attn(q, keys, key_mask=km).view(B, s, d)


class TimeAwareAggregator(nn.Module):
    """Per time index, self-attention over [class, z_1..z_n, condensed_1..condensed_n].

    The instance axis carries no positional encoding.
    """

    def __init__(self, d, layers, heads, mult=4, dropout=0.0, condenser=None):
        super().__init__()
        self.condenser = condenser or TimeCondenser(d, layers, heads, mult, dropout)
        self.cls = nn.Parameter(torch.randn(d) * 0.02)
        self.fusion = Encoder(d, layers, heads, mult, dropout)

    def build_input(self, zg, mask):
        B, n, s, d = zg.shape
        zc = self.condenser(zg)  # (B, n, d)
        inst = zg.permute(0, 2, 1, 3)  # (B, s, n, d)
        cond = zc[:, None].expand(B, s, n, d)
        cls = self.cls.expand(B, s, 1, d)
        x = torch.cat([cls, inst, cond], dim=2).reshape(B * s, 2 * n + 1, d)
        valid = torch.cat([torch.ones(B, 1, dtype=torch.bool, device=mask.device), mask, mask], 1)
        km = valid[:, None].expand(B, s, 2 * n + 1).reshape(B * s, 2 * n + 1)
        return x, km

    def forward(self, zg, mask):
        B, n, s, d = zg.shape
        x, km = self.build_input(zg, mask)
        return self.fusion(x, km)[:, 0].view(B, s, d)


def make_aggregator(cfg: ModelConfig) -> nn.Module:
    d, L, H = cfg.d_enc, cfg.agg_layers, cfg.agg_heads
    if cfg.aggregator == "mean":
        return MeanAggregator()
    if cfg.aggregator == "attentive":
        return AttentiveAggregator(d, L, H, cfg.ffn_mult, cfg.dropout)
    if cfg.aggregator == "xattn":
        return TimeAgnosticAggregator(d, H, cfg.dropout)
    return TimeAwareAggregator(d, L, H, cfg.ffn_mult, cfg.dropout)


def group_instances(z: torch.Tensor, counts) -> tuple[torch.Tensor, torch.Tensor]:
    """Flat (N, s, d) instance latents -> padded (B, n_max, s, d) plus validity mask."""
    counts = [int(c) for c in counts]
    if any(c < 1 for c in counts):
        raise ValueError("every system needs at least one instance")
    if sum(counts) != z.shape[0]:
        raise ValueError(f"counts sum to {sum(counts)} but {z.shape[0]} instances were encoded")
    B, n_max = len(counts), max(counts)
    zg = z.new_zeros((B, n_max) + tuple(z.shape[1:]))
    mask = torch.zeros(B, n_max, dtype=torch.bool, device=z.device)
    start = 0
    for b, c in enumerate(counts):
        zg[b, :c] = z[start:start + c]
        mask[b, :c] = True
        start += c
    return zg, mask


def ungroup_instances(zg: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return zg[mask]


class MultiInstanceSeq2Seq(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedder = TrajectoryEmbedder(cfg.vocab_size, cfg.d_enc, cfg.d_max)
        self.encoder = Encoder(cfg.d_enc, cfg.enc_layers, cfg.enc_heads, cfg.ffn_mult, cfg.dropout)
        self.aggregator = make_aggregator(cfg)
        self.bridge = nn.Linear(cfg.d_enc, cfg.d_dec)
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_dec)
        self.decoder = nn.ModuleList(
            DecoderLayer(cfg.d_dec, cfg.dec_heads, cfg.ffn_mult, cfg.dropout)
            for _ in range(cfg.dec_layers)
        )
        self.dec_norm = nn.LayerNorm(cfg.d_dec)
        self.out = nn.Linear(cfg.d_dec, cfg.vocab_size)

    # encoder side
    def embed(self, ids, slot_mask):
        h = self.embedder(ids, slot_mask)
        return h + sinusoidal(h.shape[1], h.shape[2], h.device, h.dtype)

    def encode(self, h):
        return self.encoder(h)

    def aggregate(self, z, counts):
        zg, mask = group_instances(z, counts)
        return self.aggregator(zg, mask)

    def system_latent(self, ids, slot_mask, counts):
        """Aggregated latent per system, (B, s, d_enc)."""
        return self.aggregate(self.encode(self.embed(ids, slot_mask)), counts)

    def memory(self, zbar):
        return self.bridge(zbar)

    # decoder side
    def decode_logits(self, mem, tgt):
        """Teacher-forced logits (B, L, V) for targets ``tgt`` (B, L) starting with BOS."""
        L = tgt.shape[1]
        if L > self.cfg.max_target_len:
            raise ValueError(f"target length {L} exceeds maximum {self.cfg.max_target_len}")
        d = self.cfg.d_dec
        x = self.tok(tgt) * math.sqrt(d) + sinusoidal(L, d, tgt.device, mem.dtype)
        for layer in self.decoder:
            x = layer(x, mem)
        return self.out(self.dec_norm(x))

    def forward(self, ids, slot_mask, counts, tgt):
        return self.decode_logits(self.memory(self.system_latent(ids, slot_mask, counts)), tgt)


def sequence_loss(logits: torch.Tensor, target: torch.Tensor, pad_id: int) -> torch.Tensor:
    """Token cross-entropy averaged over non-PAD target positions."""
    valid = target != pad_id
    if not bool(valid.any()):
        raise ValueError("target contains only PAD tokens")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1),
                           ignore_index=pad_id, reduction="mean")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: MultiInstanceSeq2Seq, step: int = 0, optimizer=None,
                    extra: dict | None = None) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab_digest": build_vocab().digest(),
        "state_dict": model.state_dict(),
        "step": step,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(blob, path)


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Returns ``(model, blob)``; rejects foreign files and config mismatches."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')}")
    if blob.get("vocab_digest") != build_vocab().digest():
        raise CheckpointError("checkpoint was built with a different vocabulary")
    cfg = ModelConfig.from_dict(blob["config"])
    if expected is not None and expected != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in expected.to_dict().items() if getattr(cfg, k) != v}
        raise CheckpointError(f"checkpoint config mismatch: {diff}")
    model = MultiInstanceSeq2Seq(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
