#!/usr/bin/env python3
"""
基准套件测试（缩小规模）
"""

import json

import numpy as np
import pytest

from bench import rel_error, run_bench, zipf_workload
from config import EngineConfig
from errors import BenchIOError, InvalidArgumentError


@pytest.fixture
def config(tmp_path):
    return EngineConfig(home=tmp_path / "home", seed=7)


def test_optimizer_suite_writes_json_lines(tmp_path, config):
    out = tmp_path / "optimizer.jsonl"
    records = run_bench("optimizer", out, config, quick=True)
    lines = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert lines == records
    assert {r["suite"] for r in records} == {"optimizer"}
    assert all(r["config"] == {"seed": 7, "quick": True} for r in records)
    verdicts = {r["case"]: r["verdict"] for r in records}
    for case in ("amazon-14k-fc layer-1", "amazon-14k-fc hybrid", "fraud-fc-256 all-udf",
                 "encoder-fc all-udf", "threshold monotonicity"):
        assert verdicts[case] == "pass"


@pytest.mark.parametrize("suite", ["matmul", "conv", "pushdown", "oom", "cache", "e2e"])
def test_quick_suite_passes(tmp_path, config, suite):
    out = tmp_path / f"{suite}.jsonl"
    records = run_bench(suite, out, config, quick=True, timings=False)
    assert records
    assert {r["suite"] for r in records} == {suite}
    failed = [r["case"] for r in records if r["verdict"] != "pass"]
    assert failed == []
    assert len(out.read_text(encoding="utf-8").splitlines()) == len(records)


def test_reports_without_timings_are_reproducible(tmp_path, config):
    first = tmp_path / "a.jsonl"
    second = tmp_path / "b.jsonl"
    run_bench("optimizer", first, config, quick=True, timings=False)
    run_bench("optimizer", second, config, quick=True, timings=False)
    assert first.read_bytes() == second.read_bytes()
    assert all("timings" not in json.loads(line) for line in first.read_text(encoding="utf-8").splitlines())


def test_unknown_suite(tmp_path, config):
    with pytest.raises(InvalidArgumentError):
        run_bench("nope", tmp_path / "out.jsonl", config, quick=True)
    assert not (tmp_path / "out.jsonl").exists()


def test_unwritable_report_path(tmp_path, config):
    with pytest.raises(BenchIOError):
        run_bench("optimizer", tmp_path / "missing" / "out.jsonl", config, quick=True)


def test_rel_error():
    expected = np.array([[0.5, 2.0]])
    assert rel_error(expected, expected) == 0.0
    assert rel_error(np.array([[0.5, 2.5]]), expected) == pytest.approx(0.25)
    assert rel_error(np.zeros((1, 3)), expected) == float("inf")


def test_zipf_workload_draws_from_universe():
    rng = np.random.default_rng(0)
    universe = rng.standard_normal((20, 3))
    queries = zipf_workload(rng, universe, 200, exact_fraction=1.0)
    assert queries.shape == (200, 3)
    assert all(any(np.array_equal(q, u) for u in universe) for q in queries)
