#!/usr/bin/env python3
"""
查询引擎端到端测试：CSV 导入、查询执行、下推等价、缓存、目录持久化、溢出目录锁
"""

import math
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from buffer_pool import BufferPool
from config import CacheConfig, EngineConfig, OptimizerConfig
from errors import IngestError, SpillDirLockedError
from model_io import Catalog, DenseLayer, Model, init_random_weights, save_model
from query_engine import InferenceSession, infer_column_type, ingest_csv, run_query
from relational_engine import ColumnType
from report_formatter import parse_explain
from tensor_core import Activation
from udfs import coerce_predictions, model_forward_udf

TX_CSV = """tx_id,card,amount,hour,merchant
1,10,5.0,3,m1
2,11,7.5,4,"big, corp"
3,10,12.25,3,m2
4,12,0.5,9,m1
5,11,99.0,4,m3
"""


def write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def config_for(home: Path, threshold: float = 2 * 1024 ** 3, **changes) -> EngineConfig:
    optimizer = OptimizerConfig(memory_threshold_bytes=threshold, block_rows=4, block_cols=4,
                                pushdown_enabled=changes.pop("pushdown_enabled", True))
    return EngineConfig(optimizer=optimizer, buffer_pool_bytes=1 << 20, home=home, **changes)


def fraud_model(tmp_path: Path) -> Path:
    model = Model("fraud", (3,), [DenseLayer(4, Activation.RELU), DenseLayer(2, Activation.SOFTMAX)])
    init_random_weights(model, seed=9, scale=0.5)
    return save_model(model, tmp_path / "models")


@pytest.fixture
def session(tmp_path):
    with InferenceSession(config_for(tmp_path / "home")) as session:
        session.ingest_csv(write(tmp_path / "tx.csv", TX_CSV), "tx", {"keys": "tx_id"})
        yield session


def test_ingest_infers_types_and_keys(session):
    relation = session.catalog.tables["tx"].relation
    assert [c.type for c in relation.schema] == [ColumnType.INT, ColumnType.INT, ColumnType.FLOAT,
                                                 ColumnType.INT, ColumnType.STRING]
    assert relation.key_columns == ("tx_id",)
    assert list(relation.values("merchant"))[1] == "big, corp"
    assert relation.pages > 0


def test_infer_column_type():
    assert infer_column_type(["1", "-2"]) is ColumnType.INT
    assert infer_column_type(["1", "2.5"]) is ColumnType.FLOAT
    assert infer_column_type(["1", "x"]) is ColumnType.STRING
    assert infer_column_type([]) is ColumnType.INT


def test_header_only_csv_gives_empty_table(tmp_path):
    catalog = Catalog()
    entry = ingest_csv(write(tmp_path / "e.csv", "a,b\n"), "e", catalog=catalog)
    assert len(entry.relation) == 0
    assert [c.type for c in entry.relation.schema] == [ColumnType.INT, ColumnType.INT]


@pytest.mark.parametrize("text,options,row", [
    ("a,b\n1,2\n3\n", None, 3),
    ("a,b\n1,2\nx,4\n", {"schema": "a:int"}, 3),
    ("a,b\n1,2\n1,3\n", {"keys": "a"}, None),
    ("a,a\n1,2\n", None, 1),
    ("a,b\n1,2\n", {"keys": "c"}, None),
    ("a,b\n1,2\n", {"schema": "a:vector"}, None),
])
def test_ingest_errors(tmp_path, text, options, row):
    with pytest.raises(IngestError) as info:
        ingest_csv(write(tmp_path / "bad.csv", text), "bad", options, catalog=Catalog())
    assert info.value.row_number == row
    assert info.value.phase == "ingest"


@pytest.mark.parametrize("budget", [1 << 20, 24])
def test_ingest_through_pool_keeps_large_ints_exact(tmp_path, budget):
    big = 2 ** 53 + 1
    text = f"id,amount\n{big},0.1\n{-big},2.5\n{2 ** 63 - 1},-3.75\n"
    pool = BufferPool(budget, tmp_path / "spill")
    entry = ingest_csv(write(tmp_path / "big.csv", text), "big", catalog=Catalog(), pool=pool)
    ids = entry.relation.values("id")
    assert [int(v) for v in ids] == [big, -big, 2 ** 63 - 1]
    assert_array_equal(entry.relation.values("amount"), [0.1, 2.5, -3.75])
    assert pool.resident_bytes == 0


def test_ingest_missing_file_and_duplicate_table(session, tmp_path):
    with pytest.raises(IngestError):
        session.ingest_csv(tmp_path / "none.csv", "other")
    with pytest.raises(IngestError):
        session.ingest_csv(tmp_path / "tx.csv", "tx")
    session.ingest_csv(tmp_path / "tx.csv", "tx", {"keys": "tx_id"}, replace=True)


def test_predict_matches_offline_forward(session, tmp_path):
    model = session.load_model("fraud", fraud_model(tmp_path))
    result = session.run_query("SELECT fraud.predict(*) FROM tx")
    relation = session.catalog.tables["tx"].relation
    features = np.column_stack([relation.values(c).astype(np.float64) for c in ("card", "amount", "hour")])
    outputs = model_forward_udf(model, features)
    assert_allclose(result.model_outputs, outputs, rtol=1e-12)
    assert_array_equal(result.relation.values("predict"), coerce_predictions(outputs))
    assert result.report.inference_calls == 1
    assert result.report.inference_rows == 5
    assert result.report.result_rows == 5


def test_count_queries(session, tmp_path):
    session.load_model("fraud", fraud_model(tmp_path))
    grouped = session.run_query("SELECT count(*) FROM tx GROUP BY hour").relation
    assert list(grouped.rows()) == [(3, 2), (4, 2), (9, 1)]
    empty = session.run_query("SELECT count(*) FROM tx WHERE amount > 1000").relation
    assert list(empty.rows()) == [(0,)]
    assert len(session.run_query("SELECT count(*) FROM tx WHERE amount > 1000 GROUP BY hour").relation) == 0
    result = session.run_query("SELECT count(*) FROM tx WHERE amount > 1000 AND fraud.predict(*) = 1")
    assert list(result.relation.rows()) == [(0,)]
    assert result.report.inference_calls == 0


def test_parameters_and_column_output(session):
    result = session.run_query("SELECT tx_id, merchant FROM tx WHERE hour = $h AND amount < $a",
                               {"h": "3", "a": "10"})
    assert list(result.relation.rows()) == [(1, "m1")]
    text = result.format(limit=5)
    assert text.splitlines() == ["tx_id\tmerchant", "1\tm1"]


@pytest.mark.parametrize("threshold", [0, math.inf])
def test_predictions_do_not_depend_on_representation(tmp_path, threshold):
    write(tmp_path / "tx.csv", TX_CSV)
    manifest = fraud_model(tmp_path)
    with InferenceSession(config_for(tmp_path / "auto")) as session:
        session.ingest_csv(tmp_path / "tx.csv", "tx", {"keys": "tx_id"})
        session.load_model("fraud", manifest)
        baseline = session.run_query("SELECT fraud.predict(*) FROM tx")
    with InferenceSession(config_for(tmp_path / "forced", threshold)) as session:
        session.ingest_csv(tmp_path / "tx.csv", "tx", {"keys": "tx_id"})
        session.load_model("fraud", manifest)
        forced = session.run_query("SELECT fraud.predict(*) FROM tx")
    assert_allclose(forced.model_outputs, baseline.model_outputs, rtol=1e-12, atol=1e-12)
    assert_array_equal(forced.relation.values("predict"), baseline.relation.values("predict"))


USERS_CSV = """uid,u1,u2
1,0.5,1.0
2,-1.0,2.0
3,0.25,0.0
"""
EVENTS_CSV = """eid,uid,e1
10,2,1.5
11,1,-0.5
12,2,3.0
13,4,1.0
"""
JOIN_QUERY = "SELECT joint.predict(*) FROM events, users WHERE events.uid = users.uid"


def run_join(tmp_path: Path, name: str, pushdown: bool):
    model = Model("joint", (3,), [DenseLayer(2, Activation.RELU), DenseLayer(2, Activation.SOFTMAX)])
    manifest = save_model(init_random_weights(model, seed=3), tmp_path / "joint")
    with InferenceSession(config_for(tmp_path / name, pushdown_enabled=pushdown)) as session:
        session.ingest_csv(write(tmp_path / "users.csv", USERS_CSV), "users", {"keys": "uid"})
        session.ingest_csv(write(tmp_path / "events.csv", EVENTS_CSV), "events", {"keys": "eid"})
        session.load_model("joint", manifest)
        return session.run_query(JOIN_QUERY)


def test_pushdown_gives_the_same_answer(tmp_path):
    plain = run_join(tmp_path, "plain", pushdown=False)
    pushed = run_join(tmp_path, "pushed", pushdown=True)
    assert "EquiJoin:sum_partial" in [n["kind"] for n in pushed.report.nodes]
    assert "EquiJoin:sum_partial" not in [n["kind"] for n in plain.report.nodes]
    assert len(pushed.relation) == len(plain.relation) == 3
    assert_allclose(pushed.model_outputs, plain.model_outputs, rtol=1e-12, atol=1e-12)
    assert_array_equal(pushed.relation.values("predict"), plain.relation.values("predict"))


def test_exact_cache_skips_repeat_inference(tmp_path):
    write(tmp_path / "tx.csv", TX_CSV)
    config = config_for(tmp_path / "home", cache=CacheConfig(mode="exact"))
    with InferenceSession(config) as session:
        session.ingest_csv(tmp_path / "tx.csv", "tx", {"keys": "tx_id"})
        session.load_model("fraud", fraud_model(tmp_path))
        first = session.run_query("SELECT fraud.predict(*) FROM tx")
        second = session.run_query("SELECT fraud.predict(*) FROM tx")
    assert first.report.inference_calls == 1
    assert second.report.inference_calls == 0
    assert second.report.cache_stats["hits"] == 5
    assert_array_equal(first.relation.values("predict"), second.relation.values("predict"))


def test_explain_lists_every_node(session, tmp_path):
    session.load_model("fraud", fraud_model(tmp_path))
    rows = parse_explain(session.explain("SELECT fraud.predict(*) FROM tx WHERE hour = 3"))
    kinds = [row.kind for row in rows]
    assert kinds[0] == "TableScan" and "Filter" in kinds and kinds[-1] == "Project:output"
    assert "MapUDF:fused_linalg" in kinds


def test_report_without_timings_is_reproducible(tmp_path):
    write(tmp_path / "tx.csv", TX_CSV)
    manifest = fraud_model(tmp_path)
    texts = []
    for name in ("one", "two"):
        with InferenceSession(config_for(tmp_path / name, threshold=0)) as session:
            session.ingest_csv(tmp_path / "tx.csv", "tx", {"keys": "tx_id"})
            session.load_model("fraud", manifest)
            texts.append(session.run_query("SELECT fraud.predict(*) FROM tx").report.format(timings=False))
    assert texts[0] == texts[1]
    assert "stage" not in texts[0]


def test_catalog_persists_between_sessions(tmp_path):
    csv_path = write(tmp_path / "tx.csv", TX_CSV)
    manifest = fraud_model(tmp_path)
    config = config_for(tmp_path / "home")
    with InferenceSession(config, persist=True) as session:
        session.ingest_csv(csv_path, "tx", {"keys": "tx_id"})
        session.load_model("fraud", manifest)
        session.create_model("shape_only", "fraud-fc-256")
    assert (tmp_path / "home" / "catalog.json").exists()

    with InferenceSession(config, persist=True) as session:
        assert session.catalog.tables["tx"].key_columns == ("tx_id",)
        assert session.catalog.models["fraud"].weights_loaded
        assert not session.catalog.models["shape_only"].weights_loaded
        assert len(session.run_query("SELECT fraud.predict(*) FROM tx").relation) == 5

    csv_path.unlink()
    with InferenceSession(config, persist=True) as session:
        assert "tx" not in session.catalog.tables
        assert "fraud" in session.catalog.models


def test_spill_directory_is_exclusive(tmp_path):
    config = config_for(tmp_path / "home")
    with InferenceSession(config):
        with pytest.raises(SpillDirLockedError):
            InferenceSession(config).open()
    with InferenceSession(config):
        pass


def test_run_query_helper_uses_given_catalog(tmp_path):
    catalog = Catalog()
    ingest_csv(write(tmp_path / "tx.csv", TX_CSV), "tx", {"keys": "tx_id"}, catalog=catalog)
    result = run_query("SELECT count(*) FROM tx", config_for(tmp_path / "home"), catalog=catalog)
    assert list(result.relation.rows()) == [(5,)]
