import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossmatch import retrieval as R
from crossmatch.errors import ContractError, DegenerateInputError


# -- independent oracles: no sorting, only pairwise comparisons

def oracle_position(row, labels, target):
    """0-based rank of the best-placed correct item; ties broken by ascending index."""
    best = None
    for j, s in enumerate(row):
        if labels[j] != target:
            continue
        pos = sum(1 for k, t in enumerate(row) if t > s or (t == s and k < j))
        best = pos if best is None else min(best, pos)
    return -1 if best is None else best


def oracle_rank_k(S, pl, gl, k):
    return sum(1 for i in range(len(pl)) if 0 <= oracle_position(S[i], gl, pl[i]) < k) / len(pl)


def oracle_ap50(S, pl, gl):
    N = len(gl)
    k = min(50, N)
    per_probe = []
    for i in range(len(pl)):
        row = S[i]
        top = [j for j in range(N) if sum(1 for m, t in enumerate(row) if t > row[j] or (t == row[j] and m < j)) < k]
        per_probe.append(sum(1 for j in top if gl[j] == pl[i]) / k)
    by_class = {}
    for c, v in zip(pl, per_probe):
        by_class.setdefault(c, []).append(v)
    return sum(sum(v) / len(v) for v in by_class.values()) / len(by_class)


def random_instance(seed):
    rng = np.random.default_rng(seed)
    M, N = rng.integers(1, 20, 2)
    C = int(rng.integers(1, 6))
    S = rng.integers(-3, 4, (M, N)).astype(float) if rng.random() < 0.5 else rng.standard_normal((M, N))
    return S, rng.integers(0, C, M), rng.integers(0, C, N)


def test_similarity_examples():
    s = R.similarity_matrix(np.array([[1.0, 1.0], [2.0, 0.0], [0.0, 3.0]]), np.array([[1.0, 0.0], [1.0, 1.0]]))
    assert s[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert s[2, 0] == 0.0
    assert s[0, 0] == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    with pytest.raises(DegenerateInputError):
        R.similarity_matrix(np.zeros((1, 2)), np.ones((1, 2)))


def test_similarity_matches_double_loop(rng):
    p, g = rng.standard_normal((7, 5)), rng.standard_normal((4, 5))
    S = R.similarity_matrix(p, g)
    for i in range(7):
        for j in range(4):
            dot = sum(p[i, k] * g[j, k] for k in range(5))
            want = dot / (math.sqrt(sum(x * x for x in p[i])) * math.sqrt(sum(x * x for x in g[j])))
            assert abs(S[i, j] - want) <= 1e-12


@given(st.integers(0, 2 ** 31))
def test_similarity_symmetry_and_scale(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
    np.testing.assert_allclose(R.similarity_matrix(p, g), R.similarity_matrix(g, p).T, atol=1e-12)
    scale = rng.uniform(0.1, 10, (5, 1))
    np.testing.assert_allclose(R.similarity_matrix(p * scale, g), R.similarity_matrix(p, g), atol=1e-12)


def test_rank_k_examples():
    S = np.array([[0.9, 0.1, 0.2]])
    assert R.rank_k(S, [0], [0, 1, 2], 1) == 1.0
    row = np.linspace(1.0, 0.0, 12)[None]  # item j at position j
    gl = np.arange(12)
    assert R.rank_k(row, [5], gl, 5) == 0.0 and R.rank_k(row, [5], gl, 10) == 1.0
    with pytest.raises(ContractError):
        R.rank_k(row, [5], gl, 13)
    with pytest.raises(ContractError):
        R.rank_k(row, [5], gl, 0)


def test_tie_break_ascending_index():
    S = np.array([[0.5, 0.5, 0.5]])
    assert R.first_hit_positions(S, [7], [1, 7, 7])[0] == 1
    np.testing.assert_array_equal(R.ranked_lists(S)[0], [0, 1, 2])


@given(st.integers(0, 2 ** 31))
def test_metrics_match_oracles(seed):
    S, pl, gl = random_instance(seed)
    N = len(gl)
    cmc = R.cmc_curve(S, pl, gl)
    for k in range(1, N + 1):
        want = oracle_rank_k(S, pl, gl, k)
        assert R.rank_k(S, pl, gl, k) == want
        assert cmc[k - 1] == want
    assert abs(R.ap_at_50(S, pl, gl) - oracle_ap50(S, pl, gl)) <= 1e-12


def test_cmc_step_function():
    row = np.linspace(1.0, 0.0, 6)[None]
    np.testing.assert_array_equal(R.cmc_curve(row, [3], np.arange(6)), [0, 0, 0, 1, 1, 1])


@given(st.integers(0, 2 ** 31))
def test_cmc_monotone_and_complete(seed):
    S, pl, gl = random_instance(seed)
    gl[: len(np.unique(pl))] = np.unique(pl)[: len(gl)]
    cmc = R.cmc_curve(S, pl, gl)
    assert (np.diff(cmc) >= 0).all()
    if set(pl) <= set(gl):
        assert cmc[-1] == 1.0


@given(st.integers(0, 2 ** 31), st.sampled_from(["cube", "exp", "affine", "arctan"]))
def test_rank_k_invariant_under_monotone_transform(seed, kind):
    S, pl, gl = random_instance(seed)
    f = {"cube": lambda x: x ** 3 + x, "exp": np.exp, "affine": lambda x: 3.0 * x - 2.0,
         "arctan": np.arctan}[kind]
    for k in range(1, len(gl) + 1):
        assert R.rank_k(f(S), pl, gl, k) == R.rank_k(S, pl, gl, k)


def test_ap50_extremes():
    S = np.random.default_rng(0).standard_normal((4, 60))
    assert R.ap_at_50(S, [1, 1, 2, 2], np.full(60, 3)) == 0.0
    assert R.ap_at_50(S, [3, 3, 3, 3], np.full(60, 3)) == 1.0


def test_reports_and_files(tmp_path, rng):
    probe, gallery = rng.standard_normal((10, 4)), rng.standard_normal((10, 4))
    labels = np.arange(10) % 3
    rep = R.evaluate(probe, gallery, labels, labels, "t2i", keep_ranked=True)
    assert rep.rank[1] == rep.cmc[0] and (np.diff(rep.cmc) >= 0).all()
    written = R.write_reports([rep, R.evaluate(gallery, probe, labels, labels, "i2t")], tmp_path / "m.csv", True)
    rows = R.read_metrics(tmp_path / "m.csv")
    assert [r["direction"] for r in rows] == ["t2i", "i2t"]
    assert float(rows[0]["rank1"]) == rep.rank[1]
    cmc_lines = (tmp_path / "m.cmc_t2i.csv").read_text().splitlines()
    assert cmc_lines[0] == "k,value" and len(cmc_lines) == 11
    assert (tmp_path / "m.ranked_t2i.tsv") in written
