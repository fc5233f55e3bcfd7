"""Aggregation, verdicts, bands, record serialization, runs, and reports."""

import json
import random
import statistics

import pytest

from ragmark.agent import get_profile
from ragmark.dataset import QAPair
from ragmark.evaluation import (
    BANDS,
    Configuration,
    aggregate_score,
    build_report,
    classify_band,
    evaluate_pair,
    load_completed_keys,
    load_records,
    record_to_json,
    run_evaluation,
    verdict,
    write_report,
)
from ragmark.metrics import METRIC_SPECS, MetricScore, PRIMARY_METRICS
from ragmark.modelgw import MockEmbedder, MockLLM, MockReranker, PortSet, ScriptedLLM
from ragmark.retrieval import RetrievalConfig

PAIR = QAPair(
    qa_id="q01",
    question="How many megawatts does the Meadowbrook power station generate?",
    ground_truth="The Meadowbrook power station generates 42 megawatts.",
    is_numeric=True,
)


def make_configuration(strategy="naive", profile="react_base", fusion="OR") -> Configuration:
    return Configuration(
        retrieval=RetrievalConfig(strategy=strategy, fusion_mode=fusion, top_k_final=2, candidate_k=4),
        profile=get_profile(profile),
    )


def make_scores(passed_map=None, value: float = 0.9) -> dict[str, MetricScore]:
    passed_map = passed_map or {}
    return {
        m: MetricScore(metric_id=m, value=value, passed=passed_map.get(m, True), evidence={})
        for m in METRIC_SPECS
    }


# --------------------------------------------------------------------------
# aggregate_score
# --------------------------------------------------------------------------


def test_aggregate_all_ones_is_one():
    assert aggregate_score({m: 1.0 for m in METRIC_SPECS}) == pytest.approx(1.0, abs=1e-12)


def test_aggregate_uniform_half():
    assert aggregate_score({m: 0.5 for m in METRIC_SPECS}) == pytest.approx(0.5, abs=1e-12)


def test_aggregate_weighted_example():
    values = {m: 1.0 for m in METRIC_SPECS}
    values["truthfulness"] = 0.0
    assert aggregate_score(values) == pytest.approx(0.80, abs=1e-12)
    only_ktp = {m: 0.0 for m in METRIC_SPECS}
    only_ktp["key_terms_precision"] = 1.0
    assert aggregate_score(only_ktp) == pytest.approx(0.15, abs=1e-12)


def test_aggregate_missing_metric():
    values = {m: 1.0 for m in METRIC_SPECS}
    del values["semantic_f1"]
    with pytest.raises(ValueError, match="missing metric: semantic_f1"):
        aggregate_score(values)


def test_aggregate_range_check():
    values = {m: 1.0 for m in METRIC_SPECS}
    values["truthfulness"] = 1.2
    with pytest.raises(ValueError, match="outside"):
        aggregate_score(values)


def test_aggregate_is_monotone_in_each_metric():
    rng = random.Random(3)
    base = {m: rng.random() for m in METRIC_SPECS}
    score = aggregate_score(base)
    for metric_id in METRIC_SPECS:
        bumped = dict(base)
        bumped[metric_id] = min(1.0, base[metric_id] + 0.1)
        assert aggregate_score(bumped) >= score - 1e-15


# --------------------------------------------------------------------------
# verdict
# --------------------------------------------------------------------------


def test_verdict_all_pass():
    assert verdict(make_scores()) == "pass"


def test_verdict_six_of_eight_boundary():
    two_failed = {PRIMARY_METRICS[0]: False, PRIMARY_METRICS[1]: False}
    assert verdict(make_scores(two_failed)) == "pass"
    three_failed = dict(two_failed, **{PRIMARY_METRICS[2]: False})
    assert verdict(make_scores(three_failed)) == "fail"


def test_verdict_ignores_completeness_gain():
    assert verdict(make_scores({"completeness_gain": False})) == "pass"
    # A passing completeness_gain cannot rescue a failing record.
    five_primary = {m: False for m in PRIMARY_METRICS[:3]}
    five_primary["completeness_gain"] = True
    assert verdict(make_scores(five_primary)) == "fail"


def test_verdict_missing_primary_metric():
    scores = make_scores()
    del scores["truthfulness"]
    with pytest.raises(ValueError, match="missing primary metric"):
        verdict(scores)


def test_verdict_failed_sentinel_counts_as_not_passed():
    scores = make_scores()
    for m in PRIMARY_METRICS[:3]:
        scores[m] = MetricScore(metric_id=m, value=None, passed=None, evidence={}, failed=True)
    assert verdict(scores) == "fail"


# --------------------------------------------------------------------------
# bands
# --------------------------------------------------------------------------

STANDARD_TABLE = [
    (1.0, "excellent"),
    (0.81, "excellent"),
    (0.8, "good"),
    (0.7, "good"),
    (0.6, "good"),
    (0.59, "fair"),
    (0.4, "fair"),
    (0.39, "poor"),
    (0.0, "poor"),
]

SEMANTIC_TABLE = [
    (1.0, "excellent"),
    (0.71, "excellent"),
    (0.7, "good"),
    (0.5, "good"),
    (0.49, "fair"),
    (0.2, "fair"),
    (0.19, "poor"),
    (0.0, "poor"),
]


@pytest.mark.parametrize(("value", "band"), STANDARD_TABLE)
def test_classify_band_standard_scale(value, band):
    assert classify_band("truthfulness", value) == band
    assert classify_band("aggregate", value) == band


@pytest.mark.parametrize(("value", "band"), SEMANTIC_TABLE)
def test_classify_band_semantic_scale(value, band):
    assert classify_band("semantic_f1", value) == band


def test_classify_band_range_check():
    with pytest.raises(ValueError, match="outside"):
        classify_band("truthfulness", 1.1)
    assert set(BANDS) == {"excellent", "good", "fair", "poor"}


# --------------------------------------------------------------------------
# configuration ids
# --------------------------------------------------------------------------


def test_configuration_ids():
    assert make_configuration("naive", "react_base").configuration_id == "naive-react_base"
    assert make_configuration("rerank", "react_custom").configuration_id == "rerank-react_custom"
    assert make_configuration("hybrid", "react_base", "OR").configuration_id == "hybrid-or-react_base"
    assert make_configuration("hybrid", "react_custom", "AND").configuration_id == "hybrid-and-react_custom"


# --------------------------------------------------------------------------
# evaluate_pair
# --------------------------------------------------------------------------


def test_evaluate_pair_record_is_internally_consistent(bundle, mock_ports):
    record = evaluate_pair(PAIR, make_configuration(), bundle, mock_ports)
    assert record.error_status is None
    assert record.qa_id == "q01"
    assert record.configuration_id == "naive-react_base"
    assert record.response == record.trace.final_answer
    recomputed = aggregate_score({m: s.value for m, s in record.metric_scores.items()})
    assert record.aggregate_score == pytest.approx(recomputed, abs=1e-12)
    assert record.verdict == verdict(record.metric_scores)
    assert record.numerical_accuracy is not None


def test_evaluate_pair_serialization_roundtrip(bundle, mock_ports):
    record = evaluate_pair(PAIR, make_configuration(), bundle, mock_ports)
    line = record_to_json(record)
    row = json.loads(line)
    assert row["qa_id"] == "q01"
    assert set(row["metric_scores"]) == set(METRIC_SPECS)
    assert row["agent_trace"]["final_answer"] == record.response
    # Timing never reaches the serialized record, keeping runs byte-stable.
    assert '"timing"' not in line
    assert row["retrieval"][0]["chunks"]
    # Keys are sorted for reproducible bytes.
    assert line == json.dumps(row, sort_keys=True, separators=(",", ":"))


def test_evaluate_pair_agent_failure_record(bundle):
    ports = PortSet(
        embedder=MockEmbedder(dim=16, seed=0),
        reranker=MockReranker(),
        generator=ScriptedLLM([]),
        judge=MockLLM(seed=0),
    )
    record = evaluate_pair(PAIR, make_configuration(), bundle, ports)
    assert record.error_status.startswith("agent_failure: GatewayError")
    assert record.trace is None
    assert record.response == ""
    assert record.metric_scores == {}
    assert record.aggregate_score is None
    assert record.verdict is None


def test_evaluate_pair_metric_failure_record(bundle):
    ports = PortSet(
        embedder=MockEmbedder(dim=16, seed=0),
        reranker=MockReranker(),
        generator=MockLLM(seed=0),
        judge=ScriptedLLM(["not a score"], repeat_last=True),
    )
    record = evaluate_pair(PAIR, make_configuration(), bundle, ports)
    assert record.error_status.startswith("metric_failure: ")
    failed = record.error_status[len("metric_failure: ") :].split(",")
    assert "truthfulness" in failed
    assert failed == sorted(failed)
    assert record.aggregate_score is None
    assert record.verdict is None
    # Programmatic metrics still carry their values.
    assert record.metric_scores["token_recall"].value is not None
    assert record.trace is not None


def test_evaluate_pair_context_deduplicates_chunks(bundle, mock_ports):
    record = evaluate_pair(PAIR, make_configuration(), bundle, mock_ports)
    chunk_ids = [c["chunk_id"] for r in json.loads(record_to_json(record))["retrieval"] for c in r["chunks"]]
    # source_relevance saw one judge call per unique chunk.
    unique = len(dict.fromkeys(chunk_ids))
    assert len(record.metric_scores["source_relevance"].evidence["chunk_scores"]) == unique


# --------------------------------------------------------------------------
# run_evaluation
# --------------------------------------------------------------------------


def fixture_pairs(n: int = 3) -> list[QAPair]:
    base = [
        ("q01", "How many megawatts does the Meadowbrook power station generate?",
         "The Meadowbrook power station generates 42 megawatts."),
        ("q02", "What is the largest tributary of the Silver River?",
         "The Quill River is the largest tributary of the Silver River."),
        ("q03", "How many hectares does Greenfield Orchard cover?",
         "Greenfield Orchard covers 120 hectares."),
    ]
    return [QAPair(qa_id=q, question=question, ground_truth=truth) for q, question, truth in base[:n]]


def run_once(tmp_path, bundle, mock_ports, name="records.jsonl", workers=1, pairs=None, configs=None):
    records_path = tmp_path / name
    records, report = run_evaluation(
        pairs or fixture_pairs(),
        configs or [make_configuration(), make_configuration("rerank", "react_custom")],
        bundle,
        mock_ports,
        records_path,
        workers=workers,
    )
    return records_path, records, report


def test_run_evaluation_covers_the_grid(tmp_path, bundle, mock_ports):
    path, records, report = run_once(tmp_path, bundle, mock_ports)
    assert len(records) == 6
    keys = [(r["qa_id"], r["configuration_id"]) for r in records]
    assert keys == [
        ("q01", "naive-react_base"),
        ("q02", "naive-react_base"),
        ("q03", "naive-react_base"),
        ("q01", "rerank-react_custom"),
        ("q02", "rerank-react_custom"),
        ("q03", "rerank-react_custom"),
    ]
    assert report["totals"]["records"] == 6
    assert report["totals"]["errors"] == 0
    assert set(report["configurations"]) == {"naive-react_base", "rerank-react_custom"}


def test_run_evaluation_deterministic_across_runs_and_workers(tmp_path, bundle, mock_ports):
    path_a, _, report_a = run_once(tmp_path, bundle, mock_ports, name="a.jsonl", workers=1)
    path_b, _, report_b = run_once(tmp_path, bundle, mock_ports, name="b.jsonl", workers=3)
    assert path_a.read_bytes() == path_b.read_bytes()
    assert report_a == report_b


def test_run_evaluation_resumes_from_prefix(tmp_path, bundle, mock_ports):
    path, _, _ = run_once(tmp_path, bundle, mock_ports, name="full.jsonl")
    full_bytes = path.read_bytes()
    lines = full_bytes.decode("utf-8").splitlines(keepends=True)

    resumed = tmp_path / "resumed.jsonl"
    resumed.write_bytes("".join(lines[:3]).encode("utf-8"))
    assert len(load_completed_keys(resumed)) == 3
    run_once(tmp_path, bundle, mock_ports, name="resumed.jsonl")
    assert resumed.read_bytes() == full_bytes


def test_run_evaluation_repairs_partial_trailing_line(tmp_path, bundle, mock_ports):
    path = tmp_path / "records.jsonl"
    path.write_text('{"qa_id": "q99", "configuration_id"', encoding="utf-8")
    _, records, report = run_once(tmp_path, bundle, mock_ports)
    assert len(records) == 6
    raw_lines = path.read_text(encoding="utf-8").splitlines()
    assert len(raw_lines) == 7  # the corrupt stub keeps its own line
    assert report["totals"]["records"] == 6


def test_run_evaluation_skips_already_completed_work(tmp_path, bundle, mock_ports):
    path, _, _ = run_once(tmp_path, bundle, mock_ports)
    before = path.read_bytes()
    generator_calls = len(mock_ports.generator.calls)
    run_once(tmp_path, bundle, mock_ports)
    assert path.read_bytes() == before
    assert len(mock_ports.generator.calls) == generator_calls


def test_run_evaluation_validation(tmp_path, bundle, mock_ports):
    with pytest.raises(ValueError, match="workers"):
        run_once(tmp_path, bundle, mock_ports, workers=0)
    with pytest.raises(ValueError, match="no QA pairs"):
        run_evaluation([], [make_configuration()], bundle, mock_ports, tmp_path / "r.jsonl")
    with pytest.raises(ValueError, match="no configurations"):
        run_evaluation(fixture_pairs(), [], bundle, mock_ports, tmp_path / "r.jsonl")
    with pytest.raises(ValueError, match="duplicate configuration_id"):
        run_evaluation(
            fixture_pairs(),
            [make_configuration(), make_configuration()],
            bundle,
            mock_ports,
            tmp_path / "r.jsonl",
        )


# --------------------------------------------------------------------------
# records file handling
# --------------------------------------------------------------------------


def test_load_records_skips_corrupt_and_malformed_lines(tmp_path, caplog):
    path = tmp_path / "records.jsonl"
    good = {"qa_id": "a", "configuration_id": "c", "error_status": None}
    path.write_text(
        json.dumps(good) + "\n" + "{broken json\n" + json.dumps({"no": "keys"}) + "\n",
        encoding="utf-8",
    )
    with caplog.at_level("WARNING"):
        records = load_records(path)
    assert len(records) == 1
    messages = [r.getMessage() for r in caplog.records]
    assert any("corrupt record" in m for m in messages)
    assert any("malformed record" in m for m in messages)


def test_load_records_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_records(tmp_path / "absent.jsonl")
    assert load_records(tmp_path / "absent.jsonl", missing_ok=True) == []


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def fake_record(qa_id, cid, value, passed, agg, rec_verdict, numeric=None, error=None):
    metric_scores = {
        m: {"value": value, "passed": passed, "failed": False, "evidence": {}}
        for m in METRIC_SPECS
    }
    return {
        "qa_id": qa_id,
        "configuration_id": cid,
        "question": "q",
        "ground_truth": "g",
        "response": "r",
        "agent_trace": None,
        "retrieval": [],
        "metric_scores": {} if error else metric_scores,
        "numerical_accuracy": numeric,
        "aggregate_score": None if error else agg,
        "verdict": None if error else rec_verdict,
        "error_status": error,
    }


def test_build_report_statistics():
    records = [
        fake_record("q1", "naive-react_base", 0.9, True, 0.9, "pass", numeric=1.0),
        fake_record("q2", "naive-react_base", 0.7, False, 0.7, "fail", numeric=0.5),
        fake_record("q3", "naive-react_base", None, None, None, None, error="agent_failure: boom"),
    ]
    report = build_report(records)
    config = report["configurations"]["naive-react_base"]
    assert config["records"] == 3
    assert config["scored"] == 2
    assert config["errors"] == 1
    assert config["pass_rate"] == 0.5
    assert config["aggregate_mean"] == pytest.approx(0.8, abs=1e-12)
    assert config["aggregate_stdev"] == pytest.approx(statistics.pstdev([0.9, 0.7]), abs=1e-12)
    assert config["aggregate_bands"] == {"excellent": 1, "good": 1, "fair": 0, "poor": 0}
    assert config["numerical_accuracy_mean"] == pytest.approx(0.75)
    truthfulness = config["metrics"]["truthfulness"]
    assert truthfulness["mean"] == pytest.approx(0.8, abs=1e-12)
    assert truthfulness["pass_rate"] == 0.5
    assert truthfulness["failures"] == 0
    assert report["totals"] == {
        "records": 3,
        "scored": 2,
        "errors": 1,
        "pass_rate": 0.5,
    }


def test_build_report_empty_config_has_none_stats():
    records = [fake_record("q1", "c", None, None, None, None, error="agent_failure: x")]
    config = build_report(records)["configurations"]["c"]
    assert config["pass_rate"] is None
    assert config["aggregate_mean"] is None
    assert config["metrics"]["truthfulness"]["mean"] is None


def test_write_report_files(tmp_path, bundle, mock_ports):
    _, _, report = run_once(tmp_path, bundle, mock_ports)
    paths = write_report(report, tmp_path / "out")
    assert set(paths) == {"report", "metrics_means", "pass_rates", "bands"}
    assert json.loads(paths["report"].read_text(encoding="utf-8")) == report

    means_lines = paths["metrics_means"].read_text(encoding="utf-8").splitlines()
    assert means_lines[0] == "configuration_id,metric_id,mean"
    assert len(means_lines) == 1 + 2 * len(METRIC_SPECS)

    rates_lines = paths["pass_rates"].read_text(encoding="utf-8").splitlines()
    assert len(rates_lines) == 1 + 2 * (1 + len(METRIC_SPECS))
    assert any(line.startswith("naive-react_base,overall,") for line in rates_lines)

    bands_lines = paths["bands"].read_text(encoding="utf-8").splitlines()
    assert len(bands_lines) == 1 + 2 * 4 * (1 + len(METRIC_SPECS))


def test_report_recompute_from_file_matches(tmp_path, bundle, mock_ports):
    path, records, report = run_once(tmp_path, bundle, mock_ports)
    assert build_report(load_records(path)) == report
