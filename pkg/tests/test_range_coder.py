import math

import numpy as np
import pytest

from latentshift import entropy_models as em
from latentshift import range_coder as rc


def random_pmf(rng, max_len=40):
    """A valid table with random shape, built independently of ``discretize``."""
    n = int(rng.integers(1, max_len))
    weights = rng.exponential(size=n) ** 3
    budget = em.PMF_TOTAL - em.ESCAPE_FREQ - n
    extra = np.floor(weights / weights.sum() * budget).astype(int)
    extra[int(np.argmax(weights))] += budget - extra.sum()
    return em.DiscretePMF(int(rng.integers(-20, 20)), tuple(int(f) for f in extra + 1))


def sample(pmf, rng, escape_rate=0.0):
    if rng.random() < escape_rate:
        return int(rng.choice([pmf.lo - 1 - int(rng.integers(0, 30000)), pmf.hi + 1 + int(rng.integers(0, 30000))]))
    return pmf.lo + int(rng.choice(len(pmf.freqs), p=np.asarray(pmf.freqs) / sum(pmf.freqs)))


def test_round_trip_ten_thousand_cases():
    rng = np.random.default_rng(99)
    tables = [random_pmf(rng) for _ in range(64)]
    for case in range(10_000):
        n = int(rng.integers(0, 12))
        pmfs = [tables[int(i)] for i in rng.integers(0, len(tables), n)]
        symbols = [sample(p, rng, escape_rate=0.05) for p in pmfs]
        data = rc.encode_symbols(symbols, pmfs)
        assert rc.decode_symbols(data, pmfs) == symbols, case


def test_long_stream_size_near_ideal():
    rng = np.random.default_rng(5)
    tables = [random_pmf(rng) for _ in range(16)]
    pmfs = [tables[int(i)] for i in rng.integers(0, 16, 20_000)]
    symbols = [sample(p, rng) for p in pmfs]
    data = rc.encode_symbols(symbols, pmfs)
    ideal = rc.ideal_bits(symbols, pmfs)
    assert 8 * len(data) <= ideal * 1.002 + 64
    assert rc.decode_symbols(data, pmfs) == symbols


def test_skewed_table_near_ideal():
    pmf = em.discretize(0.0, 0.11)
    rng = np.random.default_rng(3)
    symbols = [sample(pmf, rng) for _ in range(5000)]
    data = rc.encode_symbols(symbols, [pmf] * len(symbols))
    ideal = rc.ideal_bits(symbols, [pmf] * len(symbols))
    assert 8 * len(data) <= ideal * 1.005 + 64


def test_escape_values():
    pmf = em.discretize(0.0, 1.0)
    symbols = [-(1 << 15), (1 << 15) - 1, pmf.hi + 1, pmf.lo - 1, 0]
    data = rc.encode_symbols(symbols, [pmf] * 5)
    assert rc.decode_symbols(data, [pmf] * 5) == symbols


def test_escape_out_of_range():
    pmf = em.discretize(0.0, 1.0)
    with pytest.raises(rc.CoderError):
        rc.encode_symbols([1 << 15], [pmf])


def test_empty_stream():
    data = rc.encode_symbols([], [])
    assert rc.decode_symbols(data, []) == []


def test_ideal_bits_oracle():
    pmf = em.DiscretePMF(3, (32768, 32767))
    assert rc.ideal_bits([3], [pmf]) == pytest.approx(1.0)
    assert rc.ideal_bits([100], [pmf]) == pytest.approx(16.0 + 16.0)
    assert rc.ideal_bits([4], [pmf]) == pytest.approx(-math.log2(32767 / 65536))


def test_length_mismatch():
    with pytest.raises(rc.CoderError):
        rc.encode_symbols([0, 1], [em.discretize(0.0, 1.0)])


def test_truncated_payload_detected():
    pmf = em.discretize(0.0, 5.0)
    rng = np.random.default_rng(1)
    symbols = [sample(pmf, rng) for _ in range(200)]
    data = rc.encode_symbols(symbols, [pmf] * 200)
    with pytest.raises(rc.CoderError):
        rc.decode_symbols(data[: len(data) // 2], [pmf] * 200)


def test_wrong_table_does_not_round_trip():
    # Decoding under a different model must not silently reproduce the symbols.
    rng = np.random.default_rng(2)
    a, b = em.discretize(0.0, 3.0), em.discretize(2.0, 0.5)
    symbols = [sample(a, rng) for _ in range(300)]
    data = rc.encode_symbols(symbols, [a] * 300)
    try:
        decoded = rc.decode_symbols(data, [b] * 300)
    except rc.CoderError:
        return
    assert decoded != symbols


def test_deterministic_bytes():
    pmf = em.discretize(0.3, 2.0)
    symbols = list(range(-5, 6)) * 20
    assert rc.encode_symbols(symbols, [pmf] * len(symbols)) == rc.encode_symbols(symbols, [pmf] * len(symbols))
