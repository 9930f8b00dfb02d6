import os
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

from dotenv import load_dotenv

from errors import InvalidArgumentError

# 加载环境变量
load_dotenv()

logger = logging.getLogger(__name__)

# 引擎配置
ENGINE_CONFIG = {
    "memory_threshold_bytes": int(os.getenv("INFERDB_MEMORY_THRESHOLD", "2147483648")),
    "buffer_pool_bytes": int(os.getenv("INFERDB_BUFFER_POOL", "268435456")),
    "block_size": os.getenv("INFERDB_BLOCK_SIZE", "1000x1000"),
    "home": os.getenv("INFERDB_HOME", "./.inferdb"),
    "spill_dir": os.getenv("INFERDB_SPILL_DIR", ""),  # 为空时使用 <home>/spill
    "workers": int(os.getenv("INFERDB_WORKERS", "1")),
    "seed": int(os.getenv("INFERDB_SEED", "0")),
    "dense_memory_cap": os.getenv("INFERDB_DENSE_MEMORY_CAP", ""),  # 为空表示不限制
    "force_representation": os.getenv("INFERDB_FORCE_REPRESENTATION", "auto").lower(),
}

# 优化器配置
OPTIMIZER_CONFIG = {
    "pushdown_enabled": os.getenv("INFERDB_PUSHDOWN", "true").lower() == "true",
    "pushdown_width_ratio": float(os.getenv("INFERDB_PUSHDOWN_ALPHA", "1.0")),
    "fusion_enabled": os.getenv("INFERDB_FUSION", "true").lower() == "true",
}

# 推理结果缓存配置
CACHE_CONFIG = {
    "mode": os.getenv("INFERDB_CACHE", "off"),
    "decimals": int(os.getenv("INFERDB_CACHE_DECIMALS", "6")),
    "capacity": int(os.getenv("INFERDB_CACHE_CAPACITY", "10000")),
}

# 日志配置
LOG_CONFIG = {
    "level": os.getenv("LOG_LEVEL", "INFO"),
    "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
}

ELEMENT_SIZE_BYTES = 8
MIN_POOL_PAGES = 3
REPRESENTATION_MODES = ("auto", "udf", "relation")


def parse_block_size(text: str) -> Tuple[int, int]:
    """解析 "RxC" 形式的块大小"""
    try:
        rows, cols = text.lower().split("x")
        block = (int(rows), int(cols))
    except ValueError:
        raise InvalidArgumentError(f"block size must look like RxC, got {text!r}", phase="config")
    if block[0] <= 0 or block[1] <= 0:
        raise InvalidArgumentError(f"block size must be positive, got {text!r}", phase="config")
    return block


@dataclass(frozen=True)
class OptimizerConfig:
    """优化器配置"""
    memory_threshold_bytes: float = 2 * 1024 ** 3
    element_size_bytes: int = ELEMENT_SIZE_BYTES
    block_rows: int = 1000
    block_cols: int = 1000
    pushdown_enabled: bool = True
    pushdown_width_ratio: float = 1.0
    fusion_enabled: bool = True

    def __post_init__(self):
        if self.memory_threshold_bytes < 0:
            raise InvalidArgumentError("memory_threshold_bytes must be >= 0", phase="config")
        if self.pushdown_width_ratio <= 0:
            raise InvalidArgumentError("pushdown_width_ratio must be > 0", phase="config")
        if self.pushdown_width_ratio > 1:
            logger.warning(f"⚠️ 下推宽度比 α={self.pushdown_width_ratio} 大于 1，输出比输入更宽时也会下推")
        if self.block_rows <= 0 or self.block_cols <= 0:
            raise InvalidArgumentError("block sizes must be positive", phase="config")


@dataclass(frozen=True)
class CacheConfig:
    """推理结果缓存配置"""
    mode: str = "off"  # off / exact / approx
    tau: float = 0.0
    decimals: int = 6
    capacity: int = 10000

    def __post_init__(self):
        if self.mode not in ("off", "exact", "approx"):
            raise InvalidArgumentError(f"unknown cache mode {self.mode!r}", phase="config")
        if self.tau < 0:
            raise InvalidArgumentError("cache tau must be >= 0", phase="config")
        if self.capacity < 1:
            raise InvalidArgumentError("cache capacity must be >= 1", phase="config")


def parse_cache_mode(text: str, decimals: int = 6, capacity: int = 10000) -> CacheConfig:
    """解析 off / exact / approx:TAU"""
    text = text.strip().lower()
    if text.startswith("approx"):
        _, _, tau = text.partition(":")
        try:
            return CacheConfig(mode="approx", tau=float(tau or "0"), decimals=decimals, capacity=capacity)
        except ValueError:
            raise InvalidArgumentError(f"bad cache tau in {text!r}", phase="config")
    return CacheConfig(mode=text, decimals=decimals, capacity=capacity)


@dataclass(frozen=True)
class EngineConfig:
    """引擎运行配置，汇总优化器、缓冲池和缓存设置"""
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    buffer_pool_bytes: int = 256 * 1024 * 1024
    home: Path = Path("./.inferdb")
    spill_dir: Optional[Path] = None
    workers: int = 1
    seed: int = 0
    dense_memory_cap_bytes: Optional[int] = None
    force_representation: str = "auto"

    def __post_init__(self):
        if self.workers < 1:
            raise InvalidArgumentError("workers must be >= 1", phase="config")
        if self.force_representation not in REPRESENTATION_MODES:
            raise InvalidArgumentError(
                f"force_representation must be one of {REPRESENTATION_MODES}", phase="config")
        page = self.optimizer.block_rows * self.optimizer.block_cols * self.optimizer.element_size_bytes
        if self.buffer_pool_bytes < MIN_POOL_PAGES * page:
            raise InvalidArgumentError(
                f"buffer pool of {self.buffer_pool_bytes} bytes holds fewer than "
                f"{MIN_POOL_PAGES} pages of {page} bytes", phase="config")

    @property
    def resolved_spill_dir(self) -> Path:
        return Path(self.spill_dir) if self.spill_dir else Path(self.home) / "spill"

    @property
    def effective_threshold(self) -> float:
        """考虑强制表示后的实际阈值"""
        if self.force_representation == "udf":
            return float("inf")
        if self.force_representation == "relation":
            return 0
        return self.optimizer.memory_threshold_bytes

    def with_overrides(self, **changes) -> "EngineConfig":
        return replace(self, **changes)


def load_engine_config(**overrides) -> EngineConfig:
    """
    从环境变量加载引擎配置，命令行参数通过 overrides 覆盖

    Args:
        overrides: memory_threshold_bytes, buffer_pool_bytes, block_size, spill_dir,
            workers, cache, seed, dense_memory_cap_bytes, force_representation, home,
            pushdown_enabled, pushdown_width_ratio, fusion_enabled

    Returns:
        EngineConfig
    """
    merged = {**ENGINE_CONFIG, **OPTIMIZER_CONFIG}
    merged["cache"] = CACHE_CONFIG["mode"]
    merged["dense_memory_cap_bytes"] = int(ENGINE_CONFIG["dense_memory_cap"]) if ENGINE_CONFIG["dense_memory_cap"] else None
    merged.update({k: v for k, v in overrides.items() if v is not None})

    block_rows, block_cols = parse_block_size(merged["block_size"])
    optimizer = OptimizerConfig(
        memory_threshold_bytes=merged["memory_threshold_bytes"],
        block_rows=block_rows,
        block_cols=block_cols,
        pushdown_enabled=merged["pushdown_enabled"],
        pushdown_width_ratio=merged["pushdown_width_ratio"],
        fusion_enabled=merged["fusion_enabled"],
    )
    cache = merged["cache"]
    if isinstance(cache, str):
        cache = parse_cache_mode(cache, CACHE_CONFIG["decimals"], CACHE_CONFIG["capacity"])

    return EngineConfig(
        optimizer=optimizer,
        cache=cache,
        buffer_pool_bytes=merged["buffer_pool_bytes"],
        home=Path(merged["home"]),
        spill_dir=Path(merged["spill_dir"]) if merged["spill_dir"] else None,
        workers=merged["workers"],
        seed=merged["seed"],
        dense_memory_cap_bytes=merged["dense_memory_cap_bytes"],
        force_representation=merged["force_representation"],
    )
