import numpy as np
import pytest
from hypothesis import given, strategies as st

from odemil.datagen import PolyGenConfig, sample_polynomial_system
from odemil.exprtree import OdeSystem, ParseError, mul, const, var, to_prefix
from odemil.tokenizer import (
    TokenRangeError,
    TokenTriple,
    build_vocab,
    decode_float,
    decode_system,
    encode_array,
    encode_float,
    encode_system,
    encode_trajectory,
    ids_to_prefix,
)
from oracles import codec_oracle


def triple(v):
    t = encode_float(v)
    return t.sign, t.mantissa, t.exponent


@pytest.mark.parametrize("v, want", [
    (3.14159, ("+", 3142, -3)),
    (0.0, ("+", 0, 0)),
    (-0.05, ("-", 5000, -5)),
    (1.0, ("+", 1000, -3)),
    (9999.5, ("+", 1000, 1)),
    (0.00012345, ("+", 1235, -7)),
    (-2.5e-7, ("-", 2500, -10)),
])
def test_encode_examples(v, want):
    assert triple(v) == want


def test_decode_examples():
    assert decode_float(TokenTriple("+", 1234, -3)) == 1.234
    assert decode_float(TokenTriple("-", 9999, 100)) == -9.999e103
    assert decode_float(encode_float(123456.7)) == 123500.0
    assert abs(123500 - 123456.7) / 123456.7 <= 5e-4


@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e90, max_value=1e90))
def test_encode_matches_rational_oracle(v):
    if v != 0 and abs(v) < 1e-90:
        return
    assert triple(v) == codec_oracle(v)


def test_range_errors():
    with pytest.raises(TokenRangeError):
        encode_float(1e105)
    with pytest.raises(TokenRangeError):
        encode_float(1e-98)
    with pytest.raises(ValueError):
        encode_float(float("nan"))
    # the extreme representable magnitudes are exact
    assert triple(9.999e103) == ("+", 9999, 100)
    assert triple(1e-97) == ("+", 1000, -100)


def test_triple_validation():
    for bad in [("*", 1000, 0), ("+", 999, 0), ("+", 0, 3), ("-", 0, 0), ("+", 10000, 0)]:
        with pytest.raises(ValueError):
            TokenTriple(*bad)


def test_mantissa_order_is_monotone():
    vals = np.linspace(1.0, 9.999, 2000)
    ms = [encode_float(v).mantissa for v in vals]
    assert all(a <= b for a, b in zip(ms, ms[1:]))


def test_vectorized_matches_scalar_including_ties():
    rng = np.random.default_rng(0)
    v = rng.choice([-1, 1], 5000) * 10 ** rng.uniform(-30, 30, 5000)
    ties = np.array([1.2345, 0.00012345, 2.5e-5, 9999.5, 99995.0, -1.0005])
    v = np.concatenate([v, ties, [0.0]])
    s, m, q = encode_array(v)
    for x, a, b, c in zip(v, s, m, q):
        t = encode_float(x)
        assert ("+-"[int(a)], int(b), int(c)) == (t.sign, t.mantissa, t.exponent)


def test_vocab_layout():
    v = build_vocab()
    assert v.n_numeric == 10_203
    assert sum(1 for t in v.itos[: v.n_numeric] if t.startswith("E")) == 201
    assert v.itos[:3] == ["+", "-", "0"]
    assert v.itos[v.n_numeric - 1] == "E100"
    assert len(set(v.itos)) == len(v)
    assert v.digest() == type(v)().digest()


def test_vocab_dump(tmp_path):
    v = build_vocab()
    p = tmp_path / "vocab.txt"
    v.dump(p)
    lines = p.read_text().splitlines()
    assert lines == v.itos
    assert lines.index("BOS") == v.bos


def test_trajectory_token_counts():
    v = build_vocab()
    t = np.linspace(1, 10, 100)
    ids = encode_trajectory(t, np.zeros((100, 2)), v)
    assert ids.size == 900
    ids1 = encode_trajectory(np.array([1.0]), np.array([[0.0]]), v)
    assert ids1.shape == (1, 6)
    assert [v.itos[i] for i in ids1[0]] == ["+", "1000", "E-3", "+", "0", "E0"]
    assert encode_trajectory(t, np.full((100, 2), 3.3), v).shape == ids.shape


def test_trajectory_flushes_underflow():
    v = build_vocab()
    ids = encode_trajectory(np.array([1.0]), np.array([[1e-120]]), v)
    assert [v.itos[i] for i in ids[0, 3:]] == ["+", "0", "E0"]


def test_system_framing():
    v = build_vocab()
    ids = encode_system(OdeSystem((var(0),)), v)
    assert [v.itos[i] for i in ids] == ["BOS", "x0", "EOS"]
    with pytest.raises(ParseError):
        decode_system(ids[:-1], 1, v)
    with pytest.raises(ParseError):
        decode_system(ids[1:], 1, v)
    with pytest.raises(ParseError):
        decode_system(ids + [v["x0"]], 1, v)
    assert decode_system(ids + [v.pad, v.pad], 1, v) == OdeSystem((var(0),))


def test_constants_expand_to_marker_and_triple():
    v = build_vocab()
    ids = encode_system(OdeSystem((mul(const(-0.05), var(0)),)), v)
    assert [v.itos[i] for i in ids] == ["BOS", "mul", "CONST", "-", "5000", "E-5", "x0", "EOS"]


def test_invalid_triple_placement():
    v = build_vocab()
    bad = [v.bos, v["mul"], v["CONST"], v["5000"], v["-"], v["E-5"], v["x0"], v.eos]
    with pytest.raises(ParseError):
        ids_to_prefix(bad, v)
    truncated = [v.bos, v["CONST"], v["+"], v["5000"], v.eos]
    with pytest.raises(ParseError):
        ids_to_prefix(truncated, v)
    stray = [v.bos, v["add"], v["x0"], v["1234"], v.eos]
    with pytest.raises(ParseError):
        decode_system(stray, 1, v)


def test_system_round_trip_preserves_constants():
    v = build_vocab()
    rng = np.random.default_rng(5)
    for _ in range(300):
        dim = int(rng.integers(1, 5))
        s = sample_polynomial_system(dim, rng, PolyGenConfig())
        back = decode_system(encode_system(s, v), dim, v)
        a, b = to_prefix(s), to_prefix(back)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            if isinstance(x, float):
                assert abs(x - y) <= 5e-4 * abs(x)
            else:
                assert x == y
