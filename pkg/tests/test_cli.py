import json

import pytest
import yaml

from ctxaug import cli
from ctxaug.clause import CELLS, read_cells
from ctxaug.errors import ConfigError, TransportError
from ctxaug.io import IngestError, RunConfig, ingest_pairs, ingest_strings, write_jsonl
from ctxaug.sim import make_strings


def _strings_file(path, n=4):
    recs = make_strings("animals", n, 1, "A", "a") + make_strings("food", n, 1, "B", "b")
    write_jsonl(path, [{"id": r.id, "text": r.text, "group": r.group} for r in recs])
    return path


def _pairs_file(path, n_pred=3, n_out=3):
    rows = []
    for i, p in enumerate(make_strings("animals", n_pred, 2, None, "p")):
        for j, o in enumerate(make_strings("animals", n_out, 5 + i, None, f"o{i}_")):
            rows.append({"predictor_id": p.id, "predictor_text": p.text, "outcome_id": o.id,
                         "outcome_text": o.text, "covariates": [float(j)], "groupings": {"observation": p.id}})
    write_jsonl(path, rows)
    return path


@pytest.fixture
def workdir(tmp_path):
    _strings_file(tmp_path / "strings.jsonl")
    cfg = {"inputs": {"strings": "strings.jsonl"}, "budgets": {"J": 2, "R": 5}, "variance_splits": 20,
           "output_dir": "out"}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(cfg))
    return tmp_path


def _run(*argv):
    return cli.main([str(a) for a in argv])


# ingestion --------------------------------------------------------------------------------

def test_ingest_strings_roundtrip(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('{"id": "x", "text": "hello", "group": "A", "covariates": [1, 2.5], '
                 '"moderators": {"m": 1}, "groupings": {"g": 3}}\n\n{"id": 7, "text": "bye"}\n')
    a, b = ingest_strings(p)
    assert a.covariates == (1.0, 2.5) and a.moderators == {"m": 1.0} and a.groupings == {"g": "3"}
    assert b.id == "7" and b.group is None


@pytest.mark.parametrize("body,line,needle", [
    ('{"id": "x", "text": "a"}\n{"id": "x", "text": "b"}\n', 2, "duplicate id 'x'"),
    ('{"id": "x", "text": "a"}\nnot json\n', 2, "malformed"),
    ('{"id": "x"}\n', 1, "missing field 'text'"),
    ('{"id": "x", "text": "a", "covariates": ["q"]}\n', 1, "covariates"),
    ('[1, 2]\n', 1, "JSON object"),
])
def test_ingest_errors_name_line(tmp_path, body, line, needle):
    p = tmp_path / "s.jsonl"
    p.write_text(body)
    with pytest.raises(IngestError) as ei:
        ingest_strings(p)
    assert ei.value.line == line and needle in str(ei.value)


def test_ingest_pairs(tmp_path):
    pairs = ingest_pairs(_pairs_file(tmp_path / "p.jsonl"))
    assert len(pairs) == 9
    x, y = pairs[4]
    assert y.covariates == (1.0,) and y.groupings == {"observation": x.id}
    p = tmp_path / "dup.jsonl"
    row = {"predictor_id": "p", "predictor_text": "t", "outcome_id": "o", "outcome_text": "u"}
    write_jsonl(p, [row, row])
    with pytest.raises(IngestError, match="first on line 1"):
        ingest_pairs(p)
    write_jsonl(p, [row, {**row, "outcome_id": "o2", "predictor_text": "other"}])
    with pytest.raises(IngestError, match="reused"):
        ingest_pairs(p)


# configuration ----------------------------------------------------------------------------

def test_config_rejects_unknown_and_missing(tmp_path):
    (tmp_path / "a.yaml").write_text("budgets: {J: 2}\nbogus: 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.load(tmp_path / "a.yaml")
    (tmp_path / "b.yaml").write_text("inputs: {strings: nowhere.jsonl}\n")
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig.load(tmp_path / "b.yaml")
    with pytest.raises(ConfigError):
        RunConfig.load(None, {"profile": "no-such-profile"})
    with pytest.raises(ConfigError):
        RunConfig.load(None, {"budgets": {"J": 0}})


def test_config_hash_stable_and_scoped(workdir):
    a = RunConfig.load(workdir / "run.yaml")
    b = RunConfig.load(workdir / "run.yaml", {"output_dir": "/elsewhere", "cache_dir": "/c"})
    assert a.config_hash() == b.config_hash() and a.scoring_hash() == b.scoring_hash()
    c = RunConfig.load(workdir / "run.yaml", {"budgets": {"R": 9}})
    assert c.config_hash() != a.config_hash() and c.scoring_hash() == a.scoring_hash()
    d = RunConfig.load(workdir / "run.yaml", {"seed": 1})
    assert d.scoring_hash() != a.scoring_hash()
    # input contents, not paths, enter the hash
    before = a.config_hash()
    _strings_file(workdir / "strings.jsonl", n=5)
    assert RunConfig.load(workdir / "run.yaml").config_hash() != before


# verbs ------------------------------------------------------------------------------------

def test_two_sample_reports_deterministic(workdir, capsys):
    out1, out2 = workdir / "o1", workdir / "o2"
    assert _run("two-sample", "--config", workdir / "run.yaml", "--output-dir", out1, "--loo", "both") == 0
    assert _run("two-sample", "--config", workdir / "run.yaml", "--output-dir", out2, "--loo", "both") == 0
    for name in ("crossfit_report.json", "loo_context.json", "loo_string.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    rep = json.loads((out1 / "crossfit_report.json").read_text())
    assert rep["provenance"]["config_hash"] == RunConfig.load(workdir / "run.yaml", {"loo": "both"}).config_hash()
    assert "crossfit_report.json" in capsys.readouterr().out


def test_second_run_reuses_cache(workdir, monkeypatch):
    assert _run("score", "--config", workdir / "run.yaml") == 0
    calls = []

    def counting(spec):
        inner = cli.MockLM(cli.MockLmConfig())

        class B(type(inner)):
            def score(self, text, span):
                calls.append(1)
                return inner.score(text, span)
        return B(inner.config)
    monkeypatch.setattr(cli, "make_backend", counting)
    assert _run("score", "--config", workdir / "run.yaml") == 0
    assert calls == []


class _Dying:
    """Wraps the mock and fails after ``budget`` score calls."""

    def __init__(self, inner, budget):
        self.inner, self.budget, self.calls = inner, budget, 0

    def generate(self, prompt, params):
        return self.inner.generate(prompt, params)

    def score(self, text, span):
        self.calls += 1
        if self.calls > self.budget:
            raise TransportError("connection lost")
        return self.inner.score(text, span)

    def capabilities(self):
        return self.inner.capabilities()


def test_resume_at_half_matches(workdir, monkeypatch, capsys):
    ref = workdir / "ref"
    assert _run("two-sample", "--config", workdir / "run.yaml", "--output-dir", ref) == 0
    total = sum(1 for _ in read_cells(ref / "cache" / "scores" / CELLS))
    real = cli.make_backend
    monkeypatch.setattr(cli, "make_backend", lambda spec: _Dying(real(spec), total // 2))
    out = workdir / "resumed"
    assert _run("two-sample", "--config", workdir / "run.yaml", "--output-dir", out) == 3
    assert "error [scoring]" in capsys.readouterr().err
    assert len(read_cells(out / "cache" / "scores" / CELLS)) == total // 2
    counter = _Dying(real({"kind": "mock"}), 10**9)
    monkeypatch.setattr(cli, "make_backend", lambda spec: counter)
    assert _run("two-sample", "--config", workdir / "run.yaml", "--output-dir", out, "--resume") == 0
    assert counter.calls == total - total // 2
    assert (out / "crossfit_report.json").read_bytes() == (ref / "crossfit_report.json").read_bytes()


def test_settings_change_aborts_on_cache(workdir, capsys):
    assert _run("score", "--config", workdir / "run.yaml") == 0
    assert _run("score", "--config", workdir / "run.yaml", "--seed", 4) == 2
    assert "ManifestMismatchError" in capsys.readouterr().err


def test_interrupted_cache_needs_resume(workdir, monkeypatch):
    real = cli.make_backend
    monkeypatch.setattr(cli, "make_backend", lambda spec: _Dying(real(spec), 5))
    assert _run("score", "--config", workdir / "run.yaml") == 3
    monkeypatch.setattr(cli, "make_backend", real)
    assert _run("score", "--config", workdir / "run.yaml") == 3
    assert _run("score", "--config", workdir / "run.yaml", "--resume") == 0


def test_compact_verb(workdir, capsys):
    assert _run("score", "--config", workdir / "run.yaml") == 0
    capsys.readouterr()
    assert _run("compact", workdir / "out" / "cache" / "scores") == 0
    assert capsys.readouterr().out.strip().endswith("cells")
    assert _run("compact", workdir / "nowhere") == 2


def test_config_errors_exit_2(workdir, capsys):
    assert _run("two-sample", "--config", workdir / "missing.yaml") == 2
    assert _run("two-sample", "--config", workdir / "run.yaml", "--workers", 0) == 2
    (workdir / "empty.yaml").write_text("budgets: {J: 2}\n")
    assert _run("two-sample", "--config", workdir / "empty.yaml") == 2
    assert "inputs.strings" in capsys.readouterr().err


def test_regress_end_to_end(tmp_path):
    _pairs_file(tmp_path / "pairs.jsonl", n_pred=6, n_out=2)
    cfg = {"task": "regress", "inputs": {"pairs": "pairs.jsonl"}, "budgets": {"J": 2},
           "regression": {"model": {"estimation": "ols_cluster", "random": ["observation"]}}}
    (tmp_path / "r.yaml").write_text(yaml.safe_dump(cfg))
    assert _run("run", "--config", tmp_path / "r.yaml") == 0
    rep = json.loads((tmp_path / "out" / "regression_report.json").read_text())
    # 12 pairs x 2 own-predictor contexts x (informative + 3 baselines) x 2 orders
    assert rep["evaluation_count"] == 12 * 2 * 4 * 2
    assert {t["term"] for t in rep["terms"]} >= {"shuffle", "jabberwocky", "mask"}
    assert (tmp_path / "out" / "regression_table.txt").read_text().startswith("# config_hash")
    rows = (tmp_path / "out" / "rows.jsonl").read_text().splitlines()
    assert "config_hash" in json.loads(rows[0])


def test_capability_failure_before_any_call(tmp_path, monkeypatch, capsys):
    _pairs_file(tmp_path / "pairs.jsonl")
    calls = []

    class NoMask(_Dying):
        def capabilities(self):
            c = self.inner.capabilities()
            return type(c)(False, None, c.supports_bidirectional_scoring, c.model_identifier)

        def generate(self, prompt, params):
            calls.append(prompt)
            return super().generate(prompt, params)

        def score(self, text, span):
            calls.append(text)
            return super().score(text, span)

    monkeypatch.setattr(cli, "make_backend", lambda spec: NoMask(cli.MockLM(cli.MockLmConfig()), 10**9))
    assert _run("regress", "--pairs", tmp_path / "pairs.jsonl", "--output-dir", tmp_path / "o") == 3
    assert "CapabilityError" in capsys.readouterr().err
    assert calls == []


def test_simulate_verb_writes_tables(tmp_path):
    out = tmp_path / "sim"
    assert _run("simulate", "--study", "null", "--runs", 3, "--reps", 3, "--output-dir", out) == 0
    rep = json.loads((out / "sim_null.json").read_text())
    assert rep["runs"] == 3 and rep["config"]["R"] == 3
    head, cols = (out / "null_qq.tsv").read_text().splitlines()[:2]
    meta = json.loads(head[2:])
    assert meta["sim"]["R"] == 3 and "config_hash" in meta and cols == "x\ty\tseries"
    first = (out / "null_qq.tsv").read_bytes()
    assert _run("simulate", "--study", "null", "--runs", 3, "--reps", 3, "--output-dir", out) == 0
    assert (out / "null_qq.tsv").read_bytes() == first
