#!/usr/bin/env python3
"""
基准与验收实验
每个套件运行一组实验，把结构化记录（套件、用例、配置、结论、确定性指标、计时）
逐行写成 JSON；计时字段单独存放，--no-timings 时省略，同一种子下重复运行逐字节一致
"""

import csv
import itertools
import json
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from buffer_pool import BufferPool
from config import CacheConfig, EngineConfig, OptimizerConfig, load_engine_config
from errors import BenchIOError, CapacityError, InvalidArgumentError
from inference_cache import InferenceCache, estimate_cache_error
from ir_optimizer import LINALG_KINDS, Representation, build_model_plan, optimize, select_representation
from linalg_lowering import conv2d_lowered, matmul_as_join_agg, release_blocked, to_blocked
from model_io import MODEL_PRESETS, Catalog, DenseLayer, Model, init_random_weights, parse_manifest, save_model
from plan_executor import ExecutionContext, execute_plan
from query_engine import InferenceSession
from relational_engine import Column, ColumnType, RowRelation
from report_formatter import parse_explain
from tensor_core import Activation, DenseTensor, reassemble
from udfs import coerce_predictions, model_forward_udf, scalar_forward

logger = logging.getLogger(__name__)

SUITES = ("matmul", "conv", "optimizer", "pushdown", "oom", "cache", "e2e")
GIB = 1024 ** 3
MIB = 1024 ** 2
EQUALITY_TOLERANCE = 1e-9


@dataclass
class BenchRecord:
    """一条基准记录"""
    suite: str
    case: str
    passed: bool
    metrics: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self, config: Dict[str, Any], timings: bool = True) -> Dict[str, Any]:
        record = {
            "suite": self.suite,
            "case": self.case,
            "config": config,
            "verdict": "pass" if self.passed else "fail",
            "metrics": self.metrics,
        }
        if timings:
            record["timings"] = self.timings
        return record


def rel_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max|actual − expected| / max(1, max|expected|)"""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        return math.inf
    if expected.size == 0:
        return 0.0
    scale = max(1.0, float(np.max(np.abs(expected))))
    return float(np.max(np.abs(actual - expected))) / scale


def direct_conv(image: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """滑动窗口直接卷积（对照实现）"""
    out_channels, kernel_h, kernel_w, _ = kernels.shape
    height, width, _ = image.shape
    out = np.empty((height - kernel_h + 1, width - kernel_w + 1, out_channels))
    for y in range(out.shape[0]):
        for x in range(out.shape[1]):
            window = image[y:y + kernel_h, x:x + kernel_w, :]
            out[y, x] = np.tensordot(kernels, window, axes=([1, 2, 3], [0, 1, 2])) + bias
    return out


def dense_model(name: str, input_dim: int, layers: List[Tuple[int, str]], seed: int) -> Model:
    """带随机权重的全连接模型"""
    model = Model(name, (input_dim,), [DenseLayer(units, Activation(act)) for units, act in layers])
    return init_random_weights(model, seed)


def zipf_workload(rng: np.random.Generator, universe: np.ndarray, n: int, exponent: float = 1.3,
                  noise: float = 0.05, exact_fraction: float = 0.5) -> np.ndarray:
    """
    重复查询负载：按 Zipf 分布从基向量中抽取，

    exact_fraction 的查询原样重复，其余加高斯噪声
    """
    index = (rng.zipf(exponent, size=n) - 1) % len(universe)
    queries = universe[index].copy()
    noisy = rng.random(n) >= exact_fraction
    queries[noisy] += rng.normal(0.0, noise, size=(int(noisy.sum()), universe.shape[1]))
    return queries


class BenchContext:
    """一次基准运行的共享状态：配置、种子、临时工作目录"""

    def __init__(self, config: EngineConfig, workdir: Path, seed: int, quick: bool):
        self.config = config
        self.workdir = workdir
        self.seed = seed
        self.quick = quick
        self._dirs = itertools.count()

    def rng(self, salt: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, salt])

    def scratch(self, name: str) -> Path:
        path = self.workdir / f"{name}-{next(self._dirs)}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def engine_config(self, name: str, optimizer: Optional[Dict[str, Any]] = None, **changes) -> EngineConfig:
        """每个会话独立的 home 与溢出目录；optimizer 中的字段覆盖优化器配置"""
        home = self.scratch(name)
        if optimizer:
            changes["optimizer"] = replace(self.config.optimizer, **optimizer)
        return self.config.with_overrides(home=home, spill_dir=home / "spill", **changes)

    def pool(self, name: str, budget: int = 256 * MIB) -> BufferPool:
        return BufferPool(budget, self.scratch(name))


# ---- matmul ----

def bench_matmul(ctx: BenchContext) -> List[BenchRecord]:
    """块矩阵乘（连接 + 聚合）对照稠密乘"""
    rng = ctx.rng(1)
    per_config = 5 if ctx.quick else 50
    configs = (("block=1", 1, 8), ("block=7", 7, 60), ("block=64", 64, 300), ("block=mixed", None, 150))
    pool = ctx.pool("matmul")
    records = []
    for case, block, max_dim in configs:
        worst, passed = 0.0, 0
        started = time.perf_counter()
        for _ in range(per_config):
            m, k, n = (int(v) for v in rng.integers(1, max_dim + 1, size=3))
            if block is None:
                br, bk, bc = (int(v) for v in rng.integers(8, 41, size=3))
            else:
                br = bk = bc = block
            a_dense = rng.standard_normal((m, k))
            b_dense = rng.standard_normal((k, n))
            a = to_blocked(DenseTensor(a_dense), br, bk, pool)
            b = to_blocked(DenseTensor(b_dense), bk, bc, pool)
            out = matmul_as_join_agg(a, b, pool, ctx.config.workers)
            error = rel_error(reassemble(out).data, a_dense @ b_dense)
            for blocked in (a, b, out):
                release_blocked(blocked)
            worst = max(worst, error)
            passed += error <= EQUALITY_TOLERANCE
        records.append(BenchRecord("matmul", case, passed == per_config,
                                   {"cases": per_config, "oracle_equal": passed, "max_rel_err": worst},
                                   {"seconds": time.perf_counter() - started}))
    return records


# ---- conv ----

def bench_conv(ctx: BenchContext) -> List[BenchRecord]:
    """卷积两种表示对照直接卷积；每第 5 个用例为 2 张图像的批量"""
    rng = ctx.rng(2)
    cases = 10 if ctx.quick else 100
    pool = ctx.pool("conv")
    worst = {"UDF": 0.0, "RELATION": 0.0}
    passed = {"UDF": 0, "RELATION": 0}
    started = time.perf_counter()
    for index in range(cases):
        kernel_h, kernel_w = (int(v) for v in rng.integers(1, 4, size=2))
        height = int(rng.integers(kernel_h, 17))
        width = int(rng.integers(kernel_w, 17))
        channels = int(rng.integers(1, 5))
        out_channels = int(rng.integers(1, 9))
        batch = 2 if index % 5 == 4 else 1
        images = rng.standard_normal((batch, height, width, channels))
        kernels = rng.standard_normal((out_channels, kernel_h, kernel_w, channels))
        bias = rng.standard_normal(out_channels)
        expected = np.stack([direct_conv(image, kernels, bias) for image in images])
        block_rows, block_cols = (int(v) for v in rng.integers(3, 21, size=2))
        for representation in ("UDF", "RELATION"):
            image = DenseTensor(images if batch > 1 else images[0])
            out = conv2d_lowered(image, DenseTensor(kernels), DenseTensor(bias), representation,
                                 block_rows, block_cols, pool, ctx.config.workers).data
            error = rel_error(out.reshape(expected.shape), expected)
            worst[representation] = max(worst[representation], error)
            passed[representation] += error <= EQUALITY_TOLERANCE
    seconds = time.perf_counter() - started
    return [BenchRecord("conv", f"representation={rep}", passed[rep] == cases,
                        {"cases": cases, "oracle_equal": passed[rep], "max_rel_err": worst[rep]},
                        {"seconds": seconds})
            for rep in ("UDF", "RELATION")]


# ---- optimizer ----

def _verdicts(plan, threshold: float) -> Dict[int, str]:
    selected = select_representation(plan, OptimizerConfig(memory_threshold_bytes=threshold))
    return {n.id: n.representation.value for n in selected.nodes.values() if n.is_linalg}


def _preset_model(name: str) -> Model:
    return parse_manifest(dict(MODEL_PRESETS[name]), name=name.replace("-", "_"))


def _small_model(rng: np.random.Generator, name: str, seed: int) -> Model:
    input_dim = int(rng.integers(1, 25))
    depth = int(rng.integers(1, 4))
    layers = []
    for position in range(depth):
        last = position == depth - 1
        choices = ("relu", "sigmoid", "identity", "softmax") if last else ("relu", "sigmoid", "identity")
        layers.append((int(rng.integers(1, 25)), str(rng.choice(choices))))
    return dense_model(name, input_dim, layers, seed)


def _execute_model(model: Model, features: np.ndarray, config: EngineConfig, catalog: Catalog,
                   pool: BufferPool):
    executable = optimize(build_model_plan(model, len(features)), config)
    context = ExecutionContext(catalog, pool, config)
    try:
        return execute_plan(executable, context, feed=features), executable
    finally:
        context.close()


def bench_optimizer(ctx: BenchContext) -> List[BenchRecord]:
    """阈值规则、单调性、极端阈值与融合正确性"""
    records = []
    two_gib = OptimizerConfig().memory_threshold_bytes

    amazon = build_model_plan(_preset_model("amazon-14k-fc"), 1000)
    selected = select_representation(amazon, OptimizerConfig())
    linalg = [selected.nodes[nid] for nid in selected.topological() if selected.nodes[nid].is_linalg]
    first = linalg[0]
    weight_bytes = first.params["u"] * first.params["k"] * 8
    records.append(BenchRecord("optimizer", "amazon-14k-fc layer-1", first.representation is Representation.RELATION
                               and weight_bytes > two_gib,
                               {"est_bytes": first.est_bytes, "weight_bytes": weight_bytes,
                                "representation": first.representation.value}))
    reps = {n.representation.value for n in linalg}
    records.append(BenchRecord("optimizer", "amazon-14k-fc hybrid", reps == {"UDF", "RELATION"},
                               {"representations": [f"{n.label}={n.representation.value}" for n in linalg]}))
    lowered = optimize(amazon, OptimizerConfig())
    kinds = lowered.plan.kinds()
    explain_rows = parse_explain(lowered.explain())
    records.append(BenchRecord("optimizer", "amazon-14k-fc lowered", "EquiJoin:block_matmul" in kinds
                               and "GroupAggregate:block_sum" in kinds and kinds[-1] == "MapUDF:fused_linalg"
                               and len(explain_rows) == len(lowered.plan.nodes),
                               {"kinds": kinds}))

    for preset in ("fraud-fc-256", "encoder-fc"):
        plan = build_model_plan(_preset_model(preset), 1000)
        selected = select_representation(plan, OptimizerConfig())
        verdicts = {n.id: n.representation.value for n in selected.nodes.values() if n.is_linalg}
        lowered = optimize(plan, OptimizerConfig())
        fused = [k for k in lowered.plan.kinds() if k == "MapUDF:fused_linalg"]
        records.append(BenchRecord("optimizer", f"{preset} all-udf",
                                   set(verdicts.values()) == {"UDF"} and len(fused) == 1,
                                   {"nodes": len(verdicts), "fused_udfs": len(fused),
                                    "max_est_bytes": max(n.est_bytes for n in selected.nodes.values()
                                                         if n.is_linalg)}))

    rng = ctx.rng(3)
    instances = 10 if ctx.quick else 50
    monotone = extremes = 0
    started = time.perf_counter()
    for index in range(instances):
        depth = int(rng.integers(1, 5))
        model = Model(f"random_{index}", (int(rng.integers(1, 5000)),),
                      [DenseLayer(int(rng.integers(1, 8193)), Activation.RELU) for _ in range(depth)])
        plan = build_model_plan(model, int(rng.integers(1, 20001)))
        thresholds = sorted(float(t) for t in rng.uniform(0, 4 * GIB, size=6))
        relation_sets = [{nid for nid, rep in _verdicts(plan, t).items() if rep == "RELATION"} for t in thresholds]
        monotone += all(high <= low for low, high in zip(relation_sets, relation_sets[1:]))
        extremes += set(_verdicts(plan, 0).values()) == {"RELATION"} and \
            set(_verdicts(plan, math.inf).values()) == {"UDF"}
    records.append(BenchRecord("optimizer", "threshold monotonicity", monotone == instances and extremes == instances,
                               {"plans": instances, "monotone": monotone, "extremes": extremes},
                               {"seconds": time.perf_counter() - started}))

    catalog = Catalog()
    pool = ctx.pool("optimizer", 64 * MIB)
    oracle_equal = fusion_equal = mixed = 0
    worst = 0.0
    started = time.perf_counter()
    for index in range(instances):
        model = catalog.register_model(_small_model(rng, f"small_{index}", ctx.seed + index))
        features = rng.standard_normal((int(rng.integers(1, 41)), model.input_dim))
        expected = model_forward_udf(model, features)
        block = tuple(int(v) for v in rng.integers(3, 17, size=2))
        base = EngineConfig(optimizer=OptimizerConfig(block_rows=block[0], block_cols=block[1]),
                            buffer_pool_bytes=64 * MIB, workers=ctx.config.workers)
        errors = []
        for threshold in (0, math.inf):
            config = replace(base, optimizer=replace(base.optimizer, memory_threshold_bytes=threshold))
            out, _ = _execute_model(model, features, config, catalog, pool)
            errors.append(rel_error(out, expected))
        worst = max(worst, *errors)
        oracle_equal += all(e <= EQUALITY_TOLERANCE for e in errors)

        estimates = sorted(n.est_bytes for n in select_representation(
            build_model_plan(model, len(features)), OptimizerConfig(memory_threshold_bytes=math.inf)).nodes.values()
            if n.kind in LINALG_KINDS)
        threshold = float(estimates[int(rng.integers(0, len(estimates)))])
        fused_config = replace(base, optimizer=replace(base.optimizer, memory_threshold_bytes=threshold))
        unfused_config = replace(fused_config, optimizer=replace(fused_config.optimizer, fusion_enabled=False))
        fused_out, fused_plan = _execute_model(model, features, fused_config, catalog, pool)
        unfused_out, _ = _execute_model(model, features, unfused_config, catalog, pool)
        fusion_equal += bool(np.array_equal(fused_out, unfused_out))
        reps = {n.representation for n in fused_plan.plan.nodes.values()}
        mixed += Representation.UDF in reps and Representation.RELATION in reps
    records.append(BenchRecord("optimizer", "extreme thresholds oracle", oracle_equal == instances,
                               {"instances": instances, "oracle_equal": oracle_equal, "max_rel_err": worst}))
    records.append(BenchRecord("optimizer", "fusion soundness", fusion_equal == instances,
                               {"instances": instances, "bitwise_equal": fusion_equal, "mixed_plans": mixed},
                               {"seconds": time.perf_counter() - started}))
    return records


# ---- pushdown ----

def _vector_table(ids: np.ndarray, name: str, values: np.ndarray) -> RowRelation:
    schema = (Column("id", ColumnType.INT), Column(name, ColumnType.VECTOR, values.shape[1]))
    return RowRelation(schema, {"id": ids, name: values}, key_columns=("id",))


def _pushdown_case(ctx: BenchContext, case: str, rows: int, width: int, hidden: int,
                   repeats: int) -> BenchRecord:
    rng = ctx.rng(4 + rows)
    ids = np.arange(rows)
    d1 = _vector_table(ids, "x", rng.standard_normal((rows, width)))
    order = rng.permutation(rows)
    d2 = _vector_table(ids[order], "y", rng.standard_normal((rows, width)))
    model = dense_model("pd", 2 * width, [(hidden, "relu"), (2, "softmax")], ctx.seed)
    query = "SELECT pd.predict(*) FROM d1, d2 WHERE d1.id = d2.id"

    outputs, seconds, kinds = {}, {}, {}
    for label, enabled in (("rewritten", True), ("baseline", False)):
        config = ctx.engine_config(f"pushdown-{label}", optimizer={"pushdown_enabled": enabled},
                                   cache=CacheConfig())
        catalog = Catalog()
        catalog.register_table("d1", d1)
        catalog.register_table("d2", d2)
        catalog.register_model(model)
        with InferenceSession(config, catalog) as session:
            best = math.inf
            for _ in range(repeats):
                result = session.run_query(query)
                best = min(best, result.report.stage_seconds["execute"])
            outputs[label] = result.model_outputs
            seconds[label] = best
            kinds[label] = result.plan.plan.kinds()
    error = rel_error(outputs["rewritten"], outputs["baseline"])
    rewritten = "EquiJoin:sum_partial" in kinds["rewritten"] and "EquiJoin:sum_partial" not in kinds["baseline"]
    speedup = seconds["baseline"] / seconds["rewritten"] if seconds["rewritten"] > 0 else math.inf
    return BenchRecord("pushdown", case, rewritten and error <= EQUALITY_TOLERANCE,
                       {"rows": rows, "f1": width, "f2": width, "h": hidden, "rewritten": rewritten,
                        "max_rel_err": error},
                       {"rewritten_seconds": seconds["rewritten"], "baseline_seconds": seconds["baseline"],
                        "speedup": speedup, "speedup_gt_1": speedup > 1.0})


def bench_pushdown(ctx: BenchContext) -> List[BenchRecord]:
    """模型分解下推：改写前后结果一致，并报告加速比"""
    records = [_pushdown_case(ctx, "identity 8 rows", 8, 4, 4, 1)]
    if ctx.quick:
        records.append(_pushdown_case(ctx, "scaled analogue", 2000, 16, 8, 1))
    else:
        records.append(_pushdown_case(ctx, "scaled analogue", 50000, 484, 256, 3))
    return records


# ---- oom ----

def bench_oom(ctx: BenchContext) -> List[BenchRecord]:
    """超出内存的矩阵乘：关系表示在缓冲池预算内溢出完成；稠密 UDF 在同样的上限下报告容量不足"""
    n, block = (256, 64) if ctx.quick else (4096, 1024)
    budget = 6 * block * block * 8 if ctx.quick else 64 * MIB
    rng = ctx.rng(5)
    model = Model("oom", (n,), [DenseLayer(n, Activation.IDENTITY)])
    model.layers[0].weights = DenseTensor(rng.standard_normal((n, n)))
    model.layers[0].bias = DenseTensor(np.zeros(n))
    features = rng.standard_normal((n, n))
    catalog = Catalog()
    catalog.register_model(model)

    blocks = {"block_rows": block, "block_cols": block}
    config = ctx.engine_config("oom-relation", optimizer=blocks, buffer_pool_bytes=budget,
                               force_representation="relation", dense_memory_cap_bytes=None, cache=CacheConfig())
    pool = BufferPool(budget, config.resolved_spill_dir)
    started = time.perf_counter()
    result, _ = _execute_model(model, features, config, catalog, pool)
    seconds = time.perf_counter() - started
    weights = model.layers[0].weights.data
    error = 0.0
    for start in range(0, n, block):
        stripe = features[start:start + block] @ weights.T
        error = max(error, rel_error(result[start:start + block], stripe))
    peak = pool.stats.peak_resident_bytes
    records = [BenchRecord("oom", "relation under budget", peak <= budget and error <= EQUALITY_TOLERANCE,
                           {"n": n, "block": block, "budget_bytes": budget, "within_budget": peak <= budget,
                            "max_rel_err": error},
                           {"seconds": seconds, "peak_resident_bytes": peak, "spills": pool.stats.spills,
                            "reloads": pool.stats.reloads})]
    pool.clear()

    dense_config = ctx.engine_config("oom-dense", optimizer=blocks, buffer_pool_bytes=budget,
                                     force_representation="udf", dense_memory_cap_bytes=budget, cache=CacheConfig())
    dense_pool = BufferPool(budget, dense_config.resolved_spill_dir)
    try:
        _execute_model(model, features, dense_config, catalog, dense_pool)
        message = None
    except CapacityError as e:
        message = e.message
    records.append(BenchRecord("oom", "fused dense udf under cap", message is not None,
                               {"capacity_error": message is not None, "message": message}))
    return records


# ---- cache ----

def bench_cache(ctx: BenchContext) -> List[BenchRecord]:
    """推理缓存：exact 不改变答案、命中率随 τ 单调、approx 加速、错误率估计的区间覆盖"""
    rng = ctx.rng(6)
    dim, hidden = (16, 64) if ctx.quick else (32, 1024)
    queries_n = 2000 if ctx.quick else 20000
    batch = 500 if ctx.quick else 1000
    model = dense_model("cache_model", dim, [(hidden, "relu"), (hidden, "relu"), (2, "softmax")], ctx.seed)

    def predict(x: np.ndarray) -> np.ndarray:
        return model_forward_udf(model, x)

    universe = rng.standard_normal((200 if ctx.quick else 500, dim))
    queries = zipf_workload(rng, universe, queries_n)
    records = []

    def run(cache: Optional[InferenceCache]) -> Tuple[np.ndarray, float]:
        labels, started = [], time.perf_counter()
        for start in range(0, queries_n, batch):
            chunk = queries[start:start + batch]
            labels.append(coerce_predictions(cache.get_or_compute(chunk, predict) if cache is not None else predict(chunk)))
        return np.concatenate(labels), time.perf_counter() - started

    off_labels, off_seconds = run(None)
    exact = InferenceCache(CacheConfig(mode="exact"))
    exact_labels, exact_seconds = run(exact)
    records.append(BenchRecord("cache", "exact mode", bool(np.array_equal(exact_labels, off_labels))
                               and exact.stats.hit_rate > 0,
                               {"queries": queries_n, "answers_equal": bool(np.array_equal(exact_labels, off_labels)),
                                "hit_rate": exact.stats.hit_rate, "entries": len(exact)},
                               {"seconds": exact_seconds}))

    approx = InferenceCache(CacheConfig(mode="approx", tau=0.5))
    approx_labels, approx_seconds = run(approx)
    speedup = off_seconds / approx_seconds if approx_seconds > 0 else math.inf
    records.append(BenchRecord("cache", "approx speedup", approx.stats.hit_rate > 0,
                               {"tau": 0.5, "hit_rate": approx.stats.hit_rate,
                                "accuracy": float(np.mean(approx_labels == off_labels)),
                                "accuracy_delta": float(1.0 - np.mean(approx_labels == off_labels))},
                               {"off_seconds": off_seconds, "approx_seconds": approx_seconds,
                                "speedup": speedup, "speedup_gt_1": speedup > 1.0}))

    fixed = InferenceCache(CacheConfig(mode="exact", capacity=len(universe)))
    for vector, output in zip(universe, predict(universe)):
        fixed.put(vector, output)
    rates = []
    for tau in (0.0, 0.1, 0.5, 1.0):
        hits, _ = fixed.lookup_batch(queries, CacheConfig(mode="approx", tau=tau), record=False)
        rates.append(float(hits.mean()))
    records.append(BenchRecord("cache", "hit rate monotone in tau", all(a <= b for a, b in zip(rates, rates[1:])),
                               {"taus": [0.0, 0.1, 0.5, 1.0], "hit_rates": rates}))

    zero = estimate_cache_error(predict, lambda r, k: universe[r.integers(0, len(universe), k)], fixed,
                                n=1000, config=CacheConfig(mode="approx", tau=0.0), seed=ctx.seed)
    records.append(BenchRecord("cache", "error estimate tau=0", zero.error_rate == 0 and zero.ci_high == 0,
                               zero.to_dict()))

    planted_rate, entries = 0.05, 1000
    stored = rng.standard_normal((entries, dim))
    outputs = predict(stored)
    flipped = rng.choice(entries, size=int(planted_rate * entries), replace=False)
    outputs[flipped] = outputs[flipped][:, ::-1]
    planted = InferenceCache(CacheConfig(mode="exact", capacity=entries))
    for vector, output in zip(stored, outputs):
        planted.put(vector, output)
    trials, covered = 100, 0
    for trial in range(trials):
        estimate = estimate_cache_error(predict, lambda r, k: stored[r.integers(0, entries, k)], planted,
                                        n=1000, seed=ctx.seed * 1000 + trial)
        covered += estimate.ci_low <= planted_rate <= estimate.ci_high
    records.append(BenchRecord("cache", "error interval coverage", covered >= 90,
                               {"planted_rate": planted_rate, "trials": trials, "covered": covered}))
    return records


# ---- e2e ----

E2E_QUERY = "SELECT count(*) FROM transactions WHERE fraud_dnn.predict(*) = True GROUP BY day"
E2E_FEATURES = ["amount"] + [f"f{i}" for i in range(1, 8)]


def write_transactions_csv(path: Path, rows: int, rng: np.random.Generator) -> None:
    """合成交易表：id（键）、day（分组列）与 8 个数值特征"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "day"] + E2E_FEATURES)
        for index in range(rows):
            values = rng.standard_normal(len(E2E_FEATURES))
            writer.writerow([index, f"d{int(rng.integers(0, 7))}"] + [f"{v:.6f}" for v in values])


def scalar_pipeline_counts(csv_path: Path, model: Model) -> Dict[str, int]:
    """独立对照：逐行读 CSV → 单行前向 → 计数"""
    counts: Dict[str, int] = {}
    with open(csv_path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            features = np.array([float(row[name]) for name in E2E_FEATURES])
            if coerce_predictions(scalar_forward(model, features).reshape(1, -1))[0] == 1:
                counts[row["day"]] = counts.get(row["day"], 0) + 1
    return counts


def bench_e2e(ctx: BenchContext) -> List[BenchRecord]:
    """端到端查询在四种配置下与逐行对照计数完全一致"""
    rng = ctx.rng(7)
    rows = 1000 if ctx.quick else 10000
    data_dir = ctx.scratch("e2e-data")
    csv_path = data_dir / "transactions.csv"
    write_transactions_csv(csv_path, rows, rng)
    model = dense_model("fraud_dnn", len(E2E_FEATURES), [(16, "relu"), (2, "softmax")], ctx.seed)
    manifest = save_model(model, data_dir / "model")
    expected = scalar_pipeline_counts(csv_path, model)

    # 查询中模型段的批大小就是表的行数，按模型计划取估计的中位数作为混合阈值
    estimates = sorted(n.est_bytes for n in select_representation(
        build_model_plan(model, rows), OptimizerConfig(memory_threshold_bytes=math.inf)).nodes.values()
        if n.is_linalg)
    hybrid = {"memory_threshold_bytes": float(estimates[len(estimates) // 2])}

    variants = [
        ("udf-forced", None, {"force_representation": "udf", "cache": CacheConfig()}),
        ("relation-forced", None, {"force_representation": "relation", "cache": CacheConfig()}),
        ("hybrid", hybrid, {"cache": CacheConfig()}),
        ("hybrid+exact-cache", hybrid, {"cache": CacheConfig(mode="exact")}),
    ]
    records = []
    for case, optimizer, changes in variants:
        config = ctx.engine_config(f"e2e-{case}", optimizer=optimizer, **changes)
        with InferenceSession(config, Catalog()) as session:
            session.ingest_csv(csv_path, "transactions", {"keys": "id"})
            session.load_model("fraud_dnn", manifest)
            result = session.run_query(E2E_QUERY)
        counts = {day: count for day, count in result.relation.rows()}
        reps = sorted({n.representation.value for n in result.plan.plan.nodes.values()} - {"-"})
        records.append(BenchRecord("e2e", case, counts == expected,
                                   {"rows": rows, "groups": len(counts), "counts_equal": counts == expected,
                                    "representations": reps},
                                   {"seconds": sum(result.report.stage_seconds.values())}))

    empty_path = data_dir / "empty.csv"
    empty_path.write_text(",".join(["id", "day"] + E2E_FEATURES) + "\n", encoding="utf-8")
    config = ctx.engine_config("e2e-empty", cache=CacheConfig())
    with InferenceSession(config, Catalog()) as session:
        declared = {"id": "int", "day": "string", **{name: "float" for name in E2E_FEATURES}}
        session.ingest_csv(empty_path, "transactions", {"keys": "id", "schema": declared})
        session.load_model("fraud_dnn", manifest)
        result = session.run_query(E2E_QUERY)
    records.append(BenchRecord("e2e", "empty table", len(result.relation) == 0 and result.report.inference_calls == 0,
                               {"result_rows": len(result.relation), "inference_calls": result.report.inference_calls}))
    return records


SUITE_RUNNERS: Dict[str, Callable[[BenchContext], List[BenchRecord]]] = {
    "matmul": bench_matmul,
    "conv": bench_conv,
    "optimizer": bench_optimizer,
    "pushdown": bench_pushdown,
    "oom": bench_oom,
    "cache": bench_cache,
    "e2e": bench_e2e,
}


def run_bench(suite: str, out_path: Union[str, Path], config: Optional[EngineConfig] = None,
              quick: bool = False, timings: bool = True, seed: Optional[int] = None) -> List[Dict[str, Any]]:
    """
    运行基准套件并写出报告

    Args:
        suite: matmul / conv / optimizer / pushdown / oom / cache / e2e，或 all
        out_path: JSON lines 报告路径
        quick: 缩小规模（测试用）
        timings: 是否写出计时字段

    Returns:
        写出的记录
    """
    names = list(SUITES) if suite == "all" else [suite]
    for name in names:
        if name not in SUITE_RUNNERS:
            raise InvalidArgumentError(f"unknown bench suite {name!r}; choose from {', '.join(SUITES)}")
    config = config or load_engine_config()
    seed = config.seed if seed is None else seed
    out_path = Path(out_path)
    try:
        out = open(out_path, "w", encoding="utf-8")
    except OSError as e:
        raise BenchIOError(f"cannot write bench report {out_path}: {e}")

    written = []
    report_config = {"seed": seed, "quick": quick}
    with out, tempfile.TemporaryDirectory(prefix="inferdb-bench-") as workdir:
        ctx = BenchContext(config, Path(workdir), seed, quick)
        for name in names:
            logger.info(f"🔧 运行基准套件: {name}")
            records = SUITE_RUNNERS[name](ctx)
            for record in records:
                line = record.to_dict(report_config, timings)
                out.write(json.dumps(line, sort_keys=True, ensure_ascii=False) + "\n")
                written.append(line)
            passed = sum(r.passed for r in records)
            status = "✅" if passed == len(records) else "❌"
            logger.info(f"{status} 套件 {name}: {passed}/{len(records)} 通过")
    return written
