#!/usr/bin/env python3
"""
命令行入口
ingest / create-model / load-model / query / plan-model / bench
目录保存在 INFERDB_HOME 下，各命令可以分开运行
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional

from bench import SUITES, run_bench
from config import LOG_CONFIG, load_engine_config
from errors import InferDBError, InvalidArgumentError
from model_io import MODEL_PRESETS
from query_engine import InferenceSession

logger = logging.getLogger(__name__)


def parse_params(items: Optional[List[str]]) -> Dict[str, str]:
    """--param name=value，值在绑定时按列类型转换"""
    params = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise InvalidArgumentError(f"--param expects name=value, got {item!r}", phase="bind")
        params[name.lstrip("$")] = value
    return params


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inferdb", description="数据库内的 DNN 推理引擎")
    parser.add_argument("--memory-threshold", type=int, dest="memory_threshold_bytes",
                        help="RELATION / UDF 表示的内存阈值（字节）")
    parser.add_argument("--buffer-pool", type=int, dest="buffer_pool_bytes", help="缓冲池预算（字节）")
    parser.add_argument("--block-size", dest="block_size", help="块大小 RxC")
    parser.add_argument("--spill-dir", dest="spill_dir", help="溢出目录")
    parser.add_argument("--workers", type=int, help="工作线程数")
    parser.add_argument("--cache", help="off | exact | approx:TAU")
    parser.add_argument("--seed", type=int, help="随机种子")
    parser.add_argument("--home", help="目录与默认溢出目录所在位置")
    parser.add_argument("--force-representation", dest="force_representation",
                        choices=("auto", "udf", "relation"), help="强制所有线性代数节点的表示")
    parser.add_argument("--dense-cap", type=int, dest="dense_memory_cap_bytes", help="UDF 表示的稠密内存上限（字节）")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="导入 CSV 为表")
    ingest.add_argument("--table", required=True)
    ingest.add_argument("--csv", required=True)
    ingest.add_argument("--schema", help="列类型，例如 id:int,amount:float")
    ingest.add_argument("--keys", help="键列，逗号分隔")
    ingest.add_argument("--replace", action="store_true")

    create = sub.add_parser("create-model", help="按元数据注册只有形状的模型")
    create.add_argument("--name", required=True)
    source = create.add_mutually_exclusive_group(required=True)
    source.add_argument("--meta", help="JSON 文本或 JSON 文件路径")
    source.add_argument("--preset", choices=sorted(MODEL_PRESETS))

    load = sub.add_parser("load-model", help="从清单加载带权重的模型")
    load.add_argument("--name", required=True)
    load.add_argument("--manifest", required=True)

    query = sub.add_parser("query", help="执行 SQL")
    query.add_argument("sql")
    query.add_argument("--explain", action="store_true", help="只输出计划")
    query.add_argument("--param", action="append", help="查询参数 name=value，可重复")
    query.add_argument("--no-timings", action="store_true", help="报告中省略计时")
    query.add_argument("--limit", type=int, default=50, help="最多打印的结果行数")

    plan = sub.add_parser("plan-model", help="单独为模型生成计划")
    plan.add_argument("--name", required=True)
    plan.add_argument("--batch", type=int, default=1000)

    bench = sub.add_parser("bench", help="运行基准套件")
    bench.add_argument("--suite", required=True, choices=SUITES + ("all",))
    bench.add_argument("--out", required=True)
    bench.add_argument("--no-timings", action="store_true")
    bench.add_argument("--quick", action="store_true", help="缩小规模")
    return parser


def run(args: argparse.Namespace) -> int:
    config = load_engine_config(
        memory_threshold_bytes=args.memory_threshold_bytes,
        buffer_pool_bytes=args.buffer_pool_bytes,
        block_size=args.block_size,
        spill_dir=args.spill_dir,
        workers=args.workers,
        cache=args.cache,
        seed=args.seed,
        home=args.home,
        force_representation=args.force_representation,
        dense_memory_cap_bytes=args.dense_memory_cap_bytes,
    )

    if args.command == "bench":
        records = run_bench(args.suite, args.out, config, quick=args.quick, timings=not args.no_timings)
        failed = [r for r in records if r["verdict"] != "pass"]
        print(f"{len(records) - len(failed)}/{len(records)} passed -> {args.out}")
        for record in failed:
            print(f"FAIL\t{record['suite']}\t{record['case']}", file=sys.stderr)
        return 1 if failed else 0

    with InferenceSession(config, persist=True) as session:
        if args.command == "ingest":
            entry = session.ingest_csv(args.csv, args.table, {"schema": args.schema, "keys": args.keys},
                                       replace=args.replace)
            print(f"{entry.name}\t{len(entry.relation)} rows\t{','.join(entry.relation.column_names)}")
        elif args.command == "create-model":
            model = session.create_model(args.name, args.preset or args.meta)
            print(f"{model.name}\tinput {model.input_shape}\t{len(model.layers)} layers")
        elif args.command == "load-model":
            model = session.load_model(args.name, args.manifest)
            print(f"{model.name}\tinput {model.input_shape}\t{len(model.layers)} layers\tweights loaded")
        elif args.command == "plan-model":
            print(session.plan_model(args.name, args.batch).explain())
        elif args.command == "query":
            params = parse_params(args.param)
            if args.explain:
                print(session.explain(args.sql, params))
            else:
                result = session.run_query(args.sql, params)
                print(result.format(args.limit))
                print(result.report.format(timings=not args.no_timings))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=LOG_CONFIG["level"], format=LOG_CONFIG["format"])
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except InferDBError as e:
        logger.error(f"❌ {e}")
        print(str(e), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
