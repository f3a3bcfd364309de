import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ctxaug.clause import (
    CELLS,
    MANIFEST,
    Aggregation,
    ScoreCache,
    ScoreCacheManifest,
    ScoreMatrix,
    aggregate_str,
    build_matrix,
    compact,
    fill_and_score,
    load_matrix,
    pair_texts,
    read_cells,
    score_pair_max,
    score_pair_orders,
)
from ctxaug.contexts import ContextTemplate, gen_two_sample_contexts
from ctxaug.contexts.variants import informative_variant
from ctxaug.errors import AlignmentError, ConfigError, EmptyAggregationError, ManifestMismatchError
from ctxaug.records import StringRecord


def _matrix(values, groups=("A", "A", "B", "B")):
    n = len(groups)
    rows = [f"s{i}" for i in range(n)]
    return ScoreMatrix(rows, [f"s{i}#0" for i in range(n)], list(groups), rows, np.asarray(values, float))


# aggregation ---------------------------------------------------------------------

@pytest.mark.parametrize("spec,method,alpha", [("mean", "mean", 0.0), ("median", "median", 0.0),
                                               ("trimmed:0.1", "trimmed_mean", 0.1),
                                               ("trimmed_mean(0.25)", "trimmed_mean", 0.25)])
def test_aggregation_parse(spec, method, alpha):
    a = Aggregation.parse(spec)
    assert (a.method, a.alpha) == (method, alpha)
    assert Aggregation.parse(str(a)) == a


@pytest.mark.parametrize("spec", ["mode", "trimmed:0.5", "trimmed:-1", ""])
def test_aggregation_rejects(spec):
    with pytest.raises(ConfigError):
        Aggregation.parse(spec)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(0, 0.45))
@settings(max_examples=200)
def test_aggregation_matches_scipy(xs, alpha):
    x = np.array(xs)
    assert Aggregation.parse("mean")(x) == pytest.approx(np.mean(x))
    assert Aggregation.parse("median")(x) == pytest.approx(np.median(x))
    assert Aggregation("trimmed_mean", alpha)(x) == pytest.approx(stats.trim_mean(x, alpha))
    assert min(xs) - 1e-9 <= Aggregation("trimmed_mean", alpha)(x) <= max(xs) + 1e-9


def test_aggregate_str_excludes_self():
    m = ScoreMatrix(["a", "b", "c"], ["a#0", "b#0", "c#0"], ["A", "A", "B"], ["a", "b", "c"],
                    [[100.0, 2.0, 5.0], [4.0, 100.0, 6.0], [1.0, 1.0, 100.0]])
    assert aggregate_str(m, "a", "A") == 2.0
    assert aggregate_str(m, "a", "A", exclude_self=False) == 51.0
    with pytest.raises(EmptyAggregationError, match="self-pair"):
        aggregate_str(m, "c", "B")
    with pytest.raises(EmptyAggregationError, match="fold mask"):
        aggregate_str(m, "a", "A", mask=[True, False, True])


def test_matrix_validation():
    with pytest.raises(ValueError):
        _matrix(np.zeros((4, 3)))
    bad = np.zeros((4, 4))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        _matrix(bad)


def test_matrix_self_pairs_and_subset():
    m = _matrix(np.arange(16.0).reshape(4, 4))
    assert m.self_pairs() == {(i, i) for i in range(4)}
    s = m.subset(rows=[1, 3], cols=[0, 3])
    assert s.row_ids == ("s1", "s3") and s.values.tolist() == [[4.0, 7.0], [12.0, 15.0]]
    assert s.self_pairs() == {(1, 1)}


# scoring --------------------------------------------------------------------------

def test_fill_and_score_uses_span(mock):
    t = ContextTemplate("x#0", "x", "A", "about animals", "and more")
    v = fill_and_score(StringRecord("s", "animals here"), t, mock)
    assert v == mock.logprob("animals here", "about animals  and more")


def test_alignment_error_names_ids():
    class Splitter:
        def score(self, text, span):
            raise AlignmentError("split", boundary=span[0])
    t = ContextTemplate("ctx#3", "ctx", "A", "L", "R")
    with pytest.raises(AlignmentError, match="ctx#3"):
        fill_and_score(StringRecord("str9", "w"), t, Splitter())


def test_pair_texts_orders():
    t = ContextTemplate("p#0", "p", None, "reflection text", "")
    out = pair_texts("outcome", "predictor", t, "Eval:")
    for order, (text, (a, b)) in out.items():
        assert text[a:b] == "outcome"
    assert out["PX"][0].index("predictor") < out["PX"][0].index("outcome")
    assert out["XP"][0].index("outcome") < out["XP"][0].index("predictor")


def test_score_pair_max_is_max_of_orders(mock):
    t = ContextTemplate("p#0", "p", None, "about food", "")
    v = informative_variant("animals run", "p")
    both = score_pair_orders("food stuff", v, t, mock)
    assert set(both) == {"PX", "XP"}
    assert score_pair_max("food stuff", v, t, mock) == max(both.values())


# build + cache -------------------------------------------------------------------------

def _setup(mock, profile, n=4, J=2):
    ss = [StringRecord(f"a{i}", f"animals {i}", "A") for i in range(n)] + \
         [StringRecord(f"b{i}", f"food {i}", "B") for i in range(n)]
    return ss, gen_two_sample_contexts(ss, J, profile, profile.params(seed=3), mock)


def test_build_matrix_counts_and_workers(mock, profile):
    ss, tt = _setup(mock, profile)
    m = build_matrix(ss, tt, mock)
    assert m.evaluation_count == len(ss) * len(tt) == m.new_evaluations
    assert m.to_bytes() == build_matrix(ss, tt, mock, workers=4).to_bytes()
    assert len(m.self_pairs()) == len(tt)


def test_build_matrix_rejects_unknown_source(mock, profile):
    ss, tt = _setup(mock, profile)
    with pytest.raises(ValueError):
        build_matrix(ss[:-1], tt, mock)


def test_cache_roundtrip_and_resume(tmp_path, mock, profile):
    ss, tt = _setup(mock, profile)
    m1 = build_matrix(ss, tt, mock, cache_dir=tmp_path, profile_hash=profile.digest(), seeds={"s": 1})
    manifest = json.loads((tmp_path / MANIFEST).read_text())
    assert manifest["completed_cells"] == manifest["total_cells"] == m1.evaluation_count
    assert load_matrix(tmp_path).to_bytes() == m1.to_bytes()
    m2 = build_matrix(ss, tt, mock, cache_dir=tmp_path, resume=True, profile_hash=profile.digest(), seeds={"s": 1})
    assert m2.new_evaluations == 0 and m2.to_bytes() == m1.to_bytes()
    with pytest.raises(ConfigError):
        build_matrix(ss, tt, mock, cache_dir=tmp_path, profile_hash=profile.digest(), seeds={"s": 1})
    with pytest.raises(ManifestMismatchError):
        build_matrix(ss, tt, mock, cache_dir=tmp_path, resume=True, profile_hash=profile.digest(), seeds={"s": 2})
    with pytest.raises(ManifestMismatchError):
        build_matrix(ss, tt, mock, cache_dir=tmp_path, resume=True, profile_hash="other", seeds={"s": 1})
    with pytest.raises(ManifestMismatchError):
        build_matrix(ss, tt, mock, cache_dir=tmp_path, resume=True, profile_hash=profile.digest(),
                     seeds={"s": 1}, scoring="mean")


class _Dying:
    def __init__(self, inner, budget):
        self.inner, self.budget, self.calls = inner, budget, 0

    def score(self, text, span):
        self.calls += 1
        if self.calls > self.budget:
            raise RuntimeError("killed")
        return self.inner.score(text, span)

    def capabilities(self):
        return self.inner.capabilities()


def test_interrupted_build_resumes_identically(tmp_path, mock, profile):
    ss, tt = _setup(mock, profile)
    full = build_matrix(ss, tt, mock)
    half = full.evaluation_count // 2
    with pytest.raises(RuntimeError):
        build_matrix(ss, tt, _Dying(mock, half), cache_dir=tmp_path)
    assert len(read_cells(tmp_path / CELLS)) == half
    counter = _Dying(mock, 10**9)
    resumed = build_matrix(ss, tt, counter, cache_dir=tmp_path, resume=True)
    assert counter.calls == full.evaluation_count - half
    assert resumed.to_bytes() == full.to_bytes()


def test_torn_line_and_compact(tmp_path, mock, profile):
    ss, tt = _setup(mock, profile, n=4, J=1)
    m = build_matrix(ss, tt, mock, cache_dir=tmp_path)
    with open(tmp_path / CELLS, "a") as fh:
        fh.write("a0\ta0#0\t\t\n")  # duplicate key, torn value
        fh.write("a0\tb0#0")  # torn line, no newline
    cells = read_cells(tmp_path / CELLS)
    assert len(cells) == m.evaluation_count
    assert compact(tmp_path) == m.evaluation_count
    lines = (tmp_path / CELLS).read_text().splitlines()
    assert lines[0].split("\t") == ["string_id", "context_id", "variant", "order", "logprob"]
    assert lines[1:] == sorted(lines[1:])
    assert load_matrix(tmp_path).to_bytes() == m.to_bytes()


def test_load_incomplete_cache(tmp_path, mock, profile):
    ss, tt = _setup(mock, profile)
    with pytest.raises(RuntimeError):
        build_matrix(ss, tt, _Dying(mock, 5), cache_dir=tmp_path)
    with pytest.raises(ConfigError, match="incomplete"):
        load_matrix(tmp_path)


def test_manifest_roundtrip():
    m = ScoreCacheManifest("m", "h", "sum", {"seed": 1}, 3, 4, ["a"], [["a#0", "A", "a"]])
    assert ScoreCacheManifest.from_dict(m.as_dict()) == m
