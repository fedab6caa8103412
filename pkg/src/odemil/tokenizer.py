"""Three-token float codec, trajectory/system token sequences and the vocabulary.

A nonzero float is rounded to four significant digits and written as
``sign * m * 10**q`` with an integer mantissa ``m`` in ``[1000, 9999]``;
zero is ``(+, 0, 0)``.  Numeric tokens come first in the vocabulary
(``+``, ``-``, ``0``..``9999``, ``E-100``..``E100``, 10,203 in all),
symbolic tokens after them.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .exprtree import (
    BINARY_OPS,
    SEP,
    UNARY_OPS,
    VARIABLES,
    OdeSystem,
    ParseError,
    Token,
    parse_prefix,
    to_prefix,
)

MANTISSA_MAX = 9999
EXP_MIN, EXP_MAX = -100, 100
# magnitudes below this are flushed to zero when tokenizing trajectories
UNDERFLOW = 1000 * 10.0 ** EXP_MIN

CONST = "CONST"
BOS, EOS, PAD, CLS = "BOS", "EOS", "PAD", "CLS"


class TokenRangeError(ValueError):
    """Value whose exponent falls outside E-100..E100."""


@dataclass(frozen=True)
class TokenTriple:
    sign: str
    mantissa: int
    exponent: int

    def __post_init__(self):
        if self.sign not in "+-" or len(self.sign) != 1:
            raise ValueError(f"bad sign {self.sign!r}")
        if not 0 <= self.mantissa <= MANTISSA_MAX:
            raise ValueError(f"mantissa {self.mantissa} out of range")
        if not EXP_MIN <= self.exponent <= EXP_MAX:
            raise TokenRangeError(f"exponent {self.exponent} out of range")
        if self.mantissa == 0:
            if self.exponent != 0 or self.sign != "+":
                raise ValueError("zero must be encoded as (+, 0, 0)")
        elif self.mantissa < 1000:
            raise ValueError(f"mantissa {self.mantissa} not normalized")

    def tokens(self) -> tuple[str, str, str]:
        return self.sign, str(self.mantissa), f"E{self.exponent}"


_ONE = Decimal(1)


def encode_float(v: float) -> TokenTriple:
    v = float(v)
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError(f"cannot encode non-finite value {v}")
    if v == 0:
        return TokenTriple("+", 0, 0)
    sign = "-" if v < 0 else "+"
    d = Decimal(repr(abs(v)))
    q = d.adjusted() - 3
    m = int(d.scaleb(-q).quantize(_ONE, rounding=ROUND_HALF_UP))
    if m == 10000:
        m, q = 1000, q + 1
    if not EXP_MIN <= q <= EXP_MAX:
        raise TokenRangeError(f"{v!r} needs exponent {q}, outside [{EXP_MIN}, {EXP_MAX}]")
    return TokenTriple(sign, m, q)


def decode_float(t: TokenTriple) -> float:
    return float(f"{t.sign}{t.mantissa}e{t.exponent}")


def round_sig(v: float) -> float:
    """``v`` quantized to what the codec can represent."""
    return decode_float(encode_float(v))


class Vocab:
    """Dense, deterministic token <-> id maps."""

    def __init__(self):
        numeric = ["+", "-"]
        numeric += [str(i) for i in range(MANTISSA_MAX + 1)]
        numeric += [f"E{q}" for q in range(EXP_MIN, EXP_MAX + 1)]
        symbolic = list(BINARY_OPS) + list(UNARY_OPS) + list(VARIABLES)
        symbolic += [SEP, CONST, BOS, EOS, PAD, CLS]
        self.n_numeric = len(numeric)
        self.itos: list[str] = numeric + symbolic
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        self.sign_offset = 0
        self.mantissa_offset = 2
        self.exponent_offset = 2 + MANTISSA_MAX + 1

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi[token]

    @property
    def pad(self) -> int:
        return self.stoi[PAD]

    @property
    def bos(self) -> int:
        return self.stoi[BOS]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]

    def is_numeric(self, idx: int) -> bool:
        return idx < self.n_numeric

    def triple_ids(self, t: TokenTriple) -> tuple[int, int, int]:
        return (
            self.sign_offset + (0 if t.sign == "+" else 1),
            self.mantissa_offset + t.mantissa,
            self.exponent_offset + t.exponent - EXP_MIN,
        )

    def ids_to_triple(self, ids: Sequence[int]) -> TokenTriple:
        s, m, e = (int(i) for i in ids)
        if not (0 <= s < 2):
            raise ParseError(f"token {self.itos[s] if 0 <= s < len(self) else s} is not a sign")
        if not (self.mantissa_offset <= m < self.exponent_offset):
            raise ParseError(f"token {self.itos[m]} is not a mantissa")
        if not (self.exponent_offset <= e < self.n_numeric):
            raise ParseError(f"token {self.itos[e]} is not an exponent")
        try:
            return TokenTriple(
                "+-"[s], m - self.mantissa_offset, e - self.exponent_offset + EXP_MIN
            )
        except ValueError as exc:
            raise ParseError(str(exc)) from None

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()

    def dump(self, path) -> None:
        """One token per line; the id is the zero-based line number."""
        Path(path).write_text("\n".join(self.itos) + "\n")


@lru_cache(maxsize=1)
def build_vocab() -> Vocab:
    return Vocab()


def encode_trajectory(times, states, vocab: Vocab | None = None) -> np.ndarray:
    """Token ids of shape ``(s, 3 * (D + 1))``: time triple then one triple per dimension.

    Flatten for the ``s * 3(D+1)`` sequence view.  Magnitudes below the
    representable range are flushed to zero.
    """
    vocab = vocab or build_vocab()
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    values = np.concatenate([times[:, None], states], axis=1)
    values = np.where(np.abs(values) < UNDERFLOW, 0.0, values)
    sign, mant, expo = encode_array(values)
    out = np.stack(
        [
            vocab.sign_offset + sign,
            vocab.mantissa_offset + mant,
            vocab.exponent_offset + expo - EXP_MIN,
        ],
        axis=-1,
    )
    return out.reshape(values.shape[0], -1)


def encode_array(values) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`encode_float`: (sign index, mantissa, exponent) arrays.

    Entries within float noise of a rounding tie go through the scalar codec so
    both paths agree exactly.
    """
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite values")
    a = np.abs(v)
    nz = a > 0
    safe = np.where(nz, a, 1.0)
    q = np.floor(np.log10(safe)).astype(np.int64) - 3
    m = safe / 10.0 ** q.astype(float)
    # log10 can be off by one ulp near powers of ten
    low, high = m < 1000, m >= 10000
    q = q - low + high
    m = safe / 10.0 ** q.astype(float)
    frac = m - np.floor(m)
    tie = nz & (np.abs(frac - 0.5) < 1e-6)
    mi = np.floor(m + 0.5).astype(np.int64)
    carry = mi >= 10000
    mi = np.where(carry, 1000, mi)
    q = q + carry
    sign = (v < 0).astype(np.int64)
    mi = np.where(nz, mi, 0)
    q = np.where(nz, q, 0)
    sign = np.where(nz, sign, 0)
    for idx in zip(*np.nonzero(tie)):
        t = encode_float(v[idx])
        sign[idx], mi[idx], q[idx] = (t.sign == "-"), t.mantissa, t.exponent
    if np.any(q < EXP_MIN) or np.any(q > EXP_MAX):
        raise TokenRangeError("value exponent outside [E-100, E100]")
    return sign, mi, q


def expand_prefix(tokens: Sequence[Token]) -> list[str]:
    """Symbolic prefix with each constant replaced by ``CONST`` and its three tokens."""
    out: list[str] = []
    for t in tokens:
        if isinstance(t, str):
            out.append(t)
        else:
            out.append(CONST)
            out.extend(encode_float(t).tokens())
    return out


def encode_system(system: OdeSystem, vocab: Vocab | None = None) -> list[int]:
    vocab = vocab or build_vocab()
    return [vocab.bos] + [vocab[t] for t in expand_prefix(to_prefix(system))] + [vocab.eos]


def ids_to_prefix(ids: Sequence[int], vocab: Vocab | None = None) -> list[Token]:
    """Framed id sequence (``BOS ... EOS``) back to exprtree prefix tokens."""
    vocab = vocab or build_vocab()
    ids = [int(i) for i in ids]
    if not ids or ids[0] != vocab.bos:
        raise ParseError("sequence must start with BOS")
    if vocab.eos not in ids:
        raise ParseError("sequence is missing EOS")
    end = ids.index(vocab.eos)
    if any(i != vocab.pad for i in ids[end + 1:]):
        raise ParseError("tokens after EOS")
    body = ids[1:end]
    const_id = vocab[CONST]
    out: list[Token] = []
    i = 0
    while i < len(body):
        tid = body[i]
        if tid == const_id:
            if i + 4 > len(body):
                raise ParseError("truncated constant")
            out.append(decode_float(vocab.ids_to_triple(body[i + 1:i + 4])))
            i += 4
            continue
        if not 0 <= tid < len(vocab):
            raise ParseError(f"unknown token id {tid}")
        if vocab.is_numeric(tid):
            raise ParseError(f"numeric token {vocab.itos[tid]} outside a constant")
        tok = vocab.itos[tid]
        if tok in (BOS, EOS, PAD, CLS):
            raise ParseError(f"framing token {tok} inside the body")
        out.append(tok)
        i += 1
    return out


def decode_system(ids: Sequence[int], dim: int, vocab: Vocab | None = None) -> OdeSystem:
    return parse_prefix(ids_to_prefix(ids, vocab), dim)


def infer_dim(ids: Sequence[int], vocab: Vocab | None = None) -> int:
    """Number of SEP-delimited segments in a framed sequence."""
    vocab = vocab or build_vocab()
    return 1 + sum(1 for i in ids if int(i) == vocab[SEP])
