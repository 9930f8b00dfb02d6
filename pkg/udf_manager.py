#!/usr/bin/env python3
"""
UDF 管理器
负责注册和调用引擎内的命名 UDF（融合模型 UDF、块级激活等）
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional

from errors import InferDBError, PlanError

logger = logging.getLogger(__name__)


@dataclass
class UdfMetadata:
    """UDF 元数据"""
    name: str
    description: str
    handler: Callable
    params_schema: Dict[str, Any] = field(default_factory=dict)
    enabled: bool = True


class UdfManager:
    """UDF 管理器；注册串行，调用可并发"""

    def __init__(self):
        self.udfs: Dict[str, UdfMetadata] = {}
        self._lock = threading.Lock()
        logger.info("🎯 UDF 管理器初始化")

    def register_udf(self, name: str, handler: Callable, description: str = "",
                     params_schema: Optional[Dict[str, Any]] = None, enabled: bool = True) -> None:
        """
        注册一个 UDF

        Args:
            name: UDF 名称（计划中 MapUDF 节点的 udf 参数）
            handler: 处理函数
            description: 描述
            params_schema: 参数说明
            enabled: 是否启用
        """
        with self._lock:
            self.udfs[name] = UdfMetadata(name, description, handler, params_schema or {}, enabled)
        logger.debug(f"✅ 注册 UDF: {name} - {description}")

    def invoke_udf(self, name: str, **params) -> Any:
        """按名称调用 UDF；未注册或已禁用的 UDF 视为计划错误"""
        udf = self.udfs.get(name)
        if udf is None:
            logger.error(f"❌ UDF 不存在: {name}")
            raise PlanError(f"udf {name!r} is not registered")
        if not udf.enabled:
            logger.warning(f"⚠️ UDF 未启用: {name}")
            raise PlanError(f"udf {name!r} is disabled")
        try:
            return udf.handler(**params)
        except InferDBError:
            raise
        except Exception as e:
            logger.error(f"❌ UDF 执行失败: {name} - {e}")
            raise

    def list_udfs(self) -> Dict[str, UdfMetadata]:
        return dict(self.udfs)

    def get_udf(self, name: str) -> Optional[UdfMetadata]:
        return self.udfs.get(name)

    def enable_udf(self, name: str) -> None:
        if name in self.udfs:
            self.udfs[name].enabled = True
            logger.info(f"✅ 启用 UDF: {name}")

    def disable_udf(self, name: str) -> None:
        if name in self.udfs:
            self.udfs[name].enabled = False
            logger.info(f"⏸️ 禁用 UDF: {name}")


# 全局 UDF 管理器实例
_udf_manager = None


def get_udf_manager() -> UdfManager:
    """获取全局 UDF 管理器，首次调用时注册内置 UDF"""
    global _udf_manager
    if _udf_manager is None:
        manager = UdfManager()
        from udfs import BUILTIN_UDFS
        for metadata in BUILTIN_UDFS:
            manager.register_udf(**metadata)
        _udf_manager = manager
    return _udf_manager


def invoke_udf(name: str, **params) -> Any:
    """快捷函数：调用一个 UDF"""
    return get_udf_manager().invoke_udf(name, **params)
