#!/usr/bin/env python3
"""
模型清单加载、权重读写与目录（CREATE MODEL / LOAD MODEL）

清单为 JSON 文档：
    {"name": ..., "input_dim": 28 | "input_shape": [H, W, C],
     "layers": [{"type": "dense", "units": 256, "activation": "relu",
                 "weights": "l0_w.bin", "bias": "l0_b.bin"}, ...]}
权重文件为无文件头的小端 float64，行主序，形状由清单推出
"""

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional, Tuple, Union

import numpy as np

from errors import InferDBError, InvalidArgumentError, LoadError
from relational_engine import RowRelation
from tensor_core import Activation, DenseTensor

logger = logging.getLogger(__name__)

WEIGHT_DTYPE = np.dtype("<f8")
Shape = Tuple[int, ...]


class LayerType(str, Enum):
    DENSE = "dense"
    CONV2D = "conv2d"
    FLATTEN = "flatten"
    EMBEDDING = "embedding"


@dataclass
class DenseLayer:
    """全连接层：output = input × weightsᵀ + bias，再激活"""
    units: int
    activation: Activation = Activation.IDENTITY
    weights: Optional[DenseTensor] = None  # units × in
    bias: Optional[DenseTensor] = None  # units
    type: ClassVar[LayerType] = LayerType.DENSE

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 1:
            raise ValueError(f"dense layer needs a flat input, got {in_shape}")
        return (self.units,)

    def weight_shapes(self, in_shape: Shape) -> Dict[str, Shape]:
        return {"weights": (self.units, in_shape[0]), "bias": (self.units,)}


@dataclass
class Conv2DLayer:
    """卷积层（步长 1、无填充），通道在最后"""
    out_channels: int
    kernel_h: int
    kernel_w: int
    activation: Activation = Activation.IDENTITY
    kernels: Optional[DenseTensor] = None  # outC × kh × kw × C
    bias: Optional[DenseTensor] = None
    type: ClassVar[LayerType] = LayerType.CONV2D

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise ValueError(f"conv2d needs an H×W×C input, got {in_shape}")
        height, width, _ = in_shape
        if self.kernel_h > height or self.kernel_w > width:
            raise ValueError(f"kernel {self.kernel_h}x{self.kernel_w} larger than input {height}x{width}")
        return (height - self.kernel_h + 1, width - self.kernel_w + 1, self.out_channels)

    def weight_shapes(self, in_shape: Shape) -> Dict[str, Shape]:
        return {"kernels": (self.out_channels, self.kernel_h, self.kernel_w, in_shape[2]),
                "bias": (self.out_channels,)}


@dataclass
class FlattenLayer:
    type: ClassVar[LayerType] = LayerType.FLATTEN

    def output_shape(self, in_shape: Shape) -> Shape:
        return (math.prod(in_shape),)

    def weight_shapes(self, in_shape: Shape) -> Dict[str, Shape]:
        return {}


@dataclass
class EmbeddingLayer:
    """嵌入层：输入为 id 序列；reduce=sum 时输出 d 维，否则输出 L·d 维"""
    dict_size: int
    dim: int
    reduce: str = "none"
    table: Optional[DenseTensor] = None  # dict_size × dim
    type: ClassVar[LayerType] = LayerType.EMBEDDING

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 1:
            raise ValueError(f"embedding needs a flat id sequence, got {in_shape}")
        return (self.dim,) if self.reduce == "sum" else (in_shape[0] * self.dim,)

    def weight_shapes(self, in_shape: Shape) -> Dict[str, Shape]:
        return {"table": (self.dict_size, self.dim)}


Layer = Union[DenseLayer, Conv2DLayer, FlattenLayer, EmbeddingLayer]


@dataclass
class Model:
    """有序层列表；weights_loaded 为 False 时只有形状（CREATE MODEL 之后、LOAD MODEL 之前）"""
    name: str
    input_shape: Shape
    layers: List[Layer] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        """查询中 predict(*) 需要绑定的特征列数"""
        return math.prod(self.input_shape)

    @property
    def output_dim(self) -> int:
        return math.prod(self.shape_chain()[-1])

    @property
    def weights_loaded(self) -> bool:
        return all(tensor is not None for _, _, tensor in self.param_arrays())

    def shape_chain(self) -> List[Shape]:
        """[输入形状, 第 0 层输出, 第 1 层输出, ...]；断链时抛出 LoadError"""
        shapes = [tuple(self.input_shape)]
        for index, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ValueError as e:
                raise LoadError(str(e), layer_index=index)
        return shapes

    def param_arrays(self) -> List[Tuple[int, str, Optional[DenseTensor]]]:
        chain = self.shape_chain()
        out = []
        for index, layer in enumerate(self.layers):
            for name in layer.weight_shapes(chain[index]):
                out.append((index, name, getattr(layer, name)))
        return out


# 常用模型的形状（仅元数据，供规划与 EXPLAIN 使用）
MODEL_PRESETS: Dict[str, Dict[str, Any]] = {
    "fraud-fc-256": {"input_dim": 28, "layers": [
        {"type": "dense", "units": 256, "activation": "relu"},
        {"type": "dense", "units": 2, "activation": "softmax"}]},
    "fraud-fc-512": {"input_dim": 28, "layers": [
        {"type": "dense", "units": 512, "activation": "relu"},
        {"type": "dense", "units": 2, "activation": "softmax"}]},
    "encoder-fc": {"input_dim": 76, "layers": [
        {"type": "dense", "units": 3072, "activation": "relu"},
        {"type": "dense", "units": 768, "activation": "identity"}]},
    "amazon-14k-fc": {"input_dim": 597540, "layers": [
        {"type": "dense", "units": 1024, "activation": "relu"},
        {"type": "dense", "units": 14588, "activation": "softmax"}]},
    "deepbench-conv1": {"input_shape": [112, 112, 64], "layers": [
        {"type": "conv2d", "out_channels": 64, "kernel_h": 1, "kernel_w": 1, "activation": "relu"},
        {"type": "flatten"}]},
    "deepbench-conv2": {"input_shape": [56, 56, 256], "layers": [
        {"type": "conv2d", "out_channels": 128, "kernel_h": 1, "kernel_w": 1, "activation": "relu"},
        {"type": "flatten"}]},
    "deepbench-conv3": {"input_shape": [7, 7, 512], "layers": [
        {"type": "conv2d", "out_channels": 2048, "kernel_h": 1, "kernel_w": 1, "activation": "relu"},
        {"type": "flatten"}]},
    "landcover": {"input_shape": [2500, 2500, 3], "layers": [
        {"type": "conv2d", "out_channels": 2048, "kernel_h": 1, "kernel_w": 1, "activation": "relu"},
        {"type": "flatten"}]},
    "word2vec-fc": {"input_dim": 8, "layers": [
        {"type": "embedding", "dict_size": 1000000, "dim": 500, "reduce": "sum"},
        {"type": "dense", "units": 16, "activation": "relu"},
        {"type": "dense", "units": 2, "activation": "softmax"}]},
}

_WEIGHT_FIELDS = {
    LayerType.DENSE: ("weights", "bias"),
    LayerType.CONV2D: ("kernels", "bias"),
    LayerType.FLATTEN: (),
    LayerType.EMBEDDING: ("table",),
}


def _require(spec: Dict[str, Any], key: str, index: int, kind: type = int) -> Any:
    if key not in spec:
        raise LoadError("missing field", layer_index=index, field=key)
    value = spec[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int) or value < 1):
        raise LoadError(f"expected a positive integer, got {value!r}", layer_index=index, field=key)
    return value


def _activation(spec: Dict[str, Any], index: int) -> Activation:
    try:
        return Activation(spec.get("activation", "identity"))
    except ValueError:
        raise LoadError(f"unknown activation {spec.get('activation')!r}", layer_index=index, field="activation")


def _parse_layer(spec: Dict[str, Any], index: int) -> Layer:
    try:
        layer_type = LayerType(spec.get("type"))
    except ValueError:
        raise LoadError(f"unknown layer type {spec.get('type')!r}", layer_index=index, field="type")
    if layer_type is LayerType.DENSE:
        return DenseLayer(_require(spec, "units", index), _activation(spec, index))
    if layer_type is LayerType.CONV2D:
        return Conv2DLayer(_require(spec, "out_channels", index), _require(spec, "kernel_h", index),
                           _require(spec, "kernel_w", index), _activation(spec, index))
    if layer_type is LayerType.FLATTEN:
        return FlattenLayer()
    reduce = spec.get("reduce", "none")
    if reduce not in ("none", "sum"):
        raise LoadError(f"unknown reduce {reduce!r}", layer_index=index, field="reduce")
    return EmbeddingLayer(_require(spec, "dict_size", index), _require(spec, "dim", index), reduce)


def parse_manifest(document: Dict[str, Any], name: Optional[str] = None) -> Model:
    """解析清单（不读权重），校验形状链"""
    if not isinstance(document, dict):
        raise LoadError("manifest must be an object")
    name = name or document.get("name")
    if not name:
        raise LoadError("manifest has no model name")
    if "input_shape" in document:
        input_shape = tuple(document["input_shape"])
    elif "input_dim" in document:
        input_shape = (document["input_dim"],)
    else:
        raise LoadError("manifest needs input_dim or input_shape")
    if not input_shape or any(not isinstance(d, int) or isinstance(d, bool) or d < 1 for d in input_shape):
        raise LoadError(f"invalid input shape {list(input_shape)}")
    layers = document.get("layers")
    if not isinstance(layers, list) or not layers:
        raise LoadError("manifest needs a non-empty layer list")
    model = Model(name, input_shape, [_parse_layer(spec, i) for i, spec in enumerate(layers)])
    model.shape_chain()
    return model


def read_weight_file(path: Path, shape: Shape, layer_index: int, field_name: str) -> DenseTensor:
    """读取原始小端 float64 权重，字节数必须与形状完全一致"""
    expected = math.prod(shape) * WEIGHT_DTYPE.itemsize
    if not path.is_file():
        raise LoadError(f"weight file {path} not found", layer_index=layer_index, field=field_name)
    actual = path.stat().st_size
    if actual != expected:
        raise LoadError(f"weight file {path.name} has {actual} bytes, expected {expected}",
                        layer_index=layer_index, field=field_name)
    data = np.fromfile(path, dtype=WEIGHT_DTYPE).astype(np.float64).reshape(shape)
    return DenseTensor(data)


def write_weight_file(path: Path, tensor: DenseTensor) -> None:
    path.write_bytes(np.ascontiguousarray(tensor.data, dtype=WEIGHT_DTYPE).tobytes())


def attach_weights(model: Model, document: Dict[str, Any], base_dir: Path) -> Model:
    """按清单读取每层权重文件并挂到模型上；任何一层失败都不修改模型"""
    chain = model.shape_chain()
    loaded: List[Tuple[Layer, str, DenseTensor]] = []
    for index, (layer, spec) in enumerate(zip(model.layers, document["layers"])):
        for field_name, shape in layer.weight_shapes(chain[index]).items():
            if field_name not in spec:
                raise LoadError("missing weight file", layer_index=index, field=field_name)
            loaded.append((layer, field_name, read_weight_file(base_dir / spec[field_name], shape, index, field_name)))
    for layer, field_name, tensor in loaded:
        setattr(layer, field_name, tensor)
    return model


def _layer_document(layer: Layer) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"type": layer.type.value}
    if isinstance(layer, DenseLayer):
        doc.update(units=layer.units, activation=layer.activation.value)
    elif isinstance(layer, Conv2DLayer):
        doc.update(out_channels=layer.out_channels, kernel_h=layer.kernel_h, kernel_w=layer.kernel_w,
                   activation=layer.activation.value)
    elif isinstance(layer, EmbeddingLayer):
        doc.update(dict_size=layer.dict_size, dim=layer.dim, reduce=layer.reduce)
    return doc


def model_document(model: Model) -> Dict[str, Any]:
    """模型的清单形式（不含权重文件名）"""
    doc: Dict[str, Any] = {"name": model.name}
    if len(model.input_shape) == 1:
        doc["input_dim"] = model.input_shape[0]
    else:
        doc["input_shape"] = list(model.input_shape)
    doc["layers"] = [_layer_document(layer) for layer in model.layers]
    return doc


def save_model(model: Model, directory: Union[str, Path]) -> Path:
    """
    写出清单与权重文件（load_model 的逆）

    Returns:
        清单路径 <directory>/<name>.json
    """
    if not model.weights_loaded:
        raise LoadError(f"model {model.name} has no weights to save")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = model_document(model)
    for index, layer in enumerate(model.layers):
        for field_name in _WEIGHT_FIELDS[layer.type]:
            file_name = f"{model.name}_l{index}_{field_name}.bin"
            write_weight_file(directory / file_name, getattr(layer, field_name))
            doc["layers"][index][field_name] = file_name
    manifest = directory / f"{model.name}.json"
    manifest.write_text(json.dumps(doc, ensure_ascii=False, indent=2), encoding="utf-8")
    logger.info(f"💾 模型已保存: {model.name} → {manifest}")
    return manifest


def init_random_weights(model: Model, seed: int = 0, scale: Optional[float] = None) -> Model:
    """
    用固定种子的正态随机数填充全部权重（合成模型与基准测试用）

    scale 为空时按 1/sqrt(fan_in) 缩放；嵌入表与偏置使用相同的缩放
    """
    rng = np.random.default_rng(seed)
    chain = model.shape_chain()
    for index, layer in enumerate(model.layers):
        fan_in = math.prod(chain[index]) if not isinstance(layer, Conv2DLayer) else \
            layer.kernel_h * layer.kernel_w * chain[index][2]
        std = scale if scale is not None else 1.0 / math.sqrt(max(1, fan_in))
        for field_name, shape in layer.weight_shapes(chain[index]).items():
            setattr(layer, field_name, DenseTensor(rng.normal(0.0, std, size=shape)))
    return model


@dataclass
class TableEntry:
    """目录中的表：关系 + 来源（用于持久化后重新导入）"""
    name: str
    relation: RowRelation
    source: Optional[str] = None
    options: Dict[str, Any] = field(default_factory=dict)

    @property
    def key_columns(self) -> Tuple[str, ...]:
        return self.relation.key_columns


class Catalog:
    """
    表与模型目录

    读操作可并发；注册操作串行，且先校验后插入（不会留下半注册状态）
    """

    def __init__(self):
        self.tables: Dict[str, TableEntry] = {}
        self.models: Dict[str, Model] = {}
        self.model_sources: Dict[str, Dict[str, Any]] = {}
        self._lock = threading.RLock()

    def register_table(self, name: str, relation: RowRelation, source: Optional[str] = None,
                       options: Optional[Dict[str, Any]] = None, replace: bool = False) -> TableEntry:
        with self._lock:
            if name in self.tables and not replace:
                raise InvalidArgumentError(f"table {name!r} already exists")
            entry = TableEntry(name, relation, source, dict(options or {}))
            self.tables[name] = entry
            logger.info(f"✅ 注册表: {name} ({len(relation)} 行, 列 {relation.column_names})")
            return entry

    def get_table(self, name: str) -> TableEntry:
        if name not in self.tables:
            raise KeyError(name)
        return self.tables[name]

    def register_model(self, model: Model, source: Optional[Dict[str, Any]] = None, replace: bool = False) -> Model:
        with self._lock:
            if model.name in self.models and not replace:
                raise LoadError(f"model {model.name!r} already exists")
            model.shape_chain()
            self.models[model.name] = model
            self.model_sources[model.name] = dict(source or {})
            logger.info(f"✅ 注册模型: {model.name} (输入 {model.input_shape}, {len(model.layers)} 层, "
                        f"权重{'已' if model.weights_loaded else '未'}加载)")
            return model

    def get_model(self, name: str) -> Model:
        if name not in self.models:
            raise KeyError(name)
        return self.models[name]

    def drop_table(self, name: str) -> None:
        with self._lock:
            self.tables.pop(name, None)

    def drop_model(self, name: str) -> None:
        with self._lock:
            self.models.pop(name, None)
            self.model_sources.pop(name, None)


_catalog: Optional[Catalog] = None


def get_catalog() -> Catalog:
    """进程级默认目录"""
    global _catalog
    if _catalog is None:
        _catalog = Catalog()
    return _catalog


def _resolve_metadata(metadata: Union[str, Dict[str, Any]]) -> Dict[str, Any]:
    if isinstance(metadata, dict):
        return metadata
    text = str(metadata).strip()
    if text.lower() in MODEL_PRESETS:
        return MODEL_PRESETS[text.lower()]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    path = Path(text)
    if path.is_file():
        return json.loads(path.read_text(encoding="utf-8"))
    raise LoadError(f"model metadata {text!r} is neither a preset, JSON nor a file")


def create_model(name: str, metadata: Union[str, Dict[str, Any]], catalog: Optional[Catalog] = None) -> Model:
    """
    CREATE MODEL：按元数据注册只有形状的模型

    Args:
        name: 模型名（SQL 中的 <name>.predict(*)）
        metadata: 预置名（如 fraud-fc-256）、JSON 文本、JSON 文件路径或字典
    """
    catalog = catalog or get_catalog()
    document = dict(_resolve_metadata(metadata))
    model = parse_manifest(document, name=name)
    source = {"metadata": model_document(model)}
    return catalog.register_model(model, source=source)


def load_model(name: str, manifest_path: Union[str, Path], catalog: Optional[Catalog] = None) -> Model:
    """
    LOAD MODEL：读取清单与权重文件并注册

    已经 CREATE MODEL 过的同名模型，形状必须一致，加载后替换为带权重的模型；
    已带权重的同名模型视为重复
    """
    catalog = catalog or get_catalog()
    manifest_path = Path(manifest_path)
    try:
        document = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LoadError(f"manifest {manifest_path} not found")
    except json.JSONDecodeError as e:
        raise LoadError(f"manifest {manifest_path} is not valid JSON: {e}")
    try:
        model = parse_manifest(document, name=name)
        attach_weights(model, document, manifest_path.parent)
    except InferDBError:
        logger.error(f"❌ 模型加载失败: {name} ({manifest_path})")
        raise
    with catalog._lock:
        existing = catalog.models.get(name)
        replace = False
        if existing is not None:
            if existing.weights_loaded:
                raise LoadError(f"model {name!r} already exists")
            if model_document(existing)["layers"] != model_document(model)["layers"] or \
                    tuple(existing.input_shape) != tuple(model.input_shape):
                raise LoadError(f"manifest for {name!r} does not match its CREATE MODEL metadata")
            replace = True
        catalog.register_model(model, source={"manifest": str(manifest_path.resolve())}, replace=replace)
    return model


@dataclass
class LayerDiagnostics:
    index: int
    type: str
    in_shape: Shape
    out_shape: Shape
    param_count: int
    weight_bytes: int
    est_bytes: int


@dataclass
class ModelDiagnostics:
    name: str
    shape_chain: List[Shape]
    layers: List[LayerDiagnostics]
    batch: int

    @property
    def total_params(self) -> int:
        return sum(layer.param_count for layer in self.layers)


def validate_model(model: Model, batch: int = 1, element_size: int = 8) -> ModelDiagnostics:
    """形状链、每层参数量与参数字节数、每层在给定批大小下的内存估计"""
    from ir_optimizer import layer_memory_estimate

    chain = model.shape_chain()
    layers = []
    for index, layer in enumerate(model.layers):
        params = sum(math.prod(shape) for shape in layer.weight_shapes(chain[index]).values())
        layers.append(LayerDiagnostics(
            index=index, type=layer.type.value, in_shape=chain[index], out_shape=chain[index + 1],
            param_count=params, weight_bytes=params * element_size,
            est_bytes=layer_memory_estimate(layer, chain[index], batch, element_size)))
    return ModelDiagnostics(model.name, chain, layers, batch)
