#!/usr/bin/env python3
"""
推理查询的 SQL 子集

语法:
    SELECT (count(*) | <model>.predict(*) | col [, col]*)
    FROM table [, table]
    [WHERE cmp [AND cmp]*]
    [GROUP BY col] [;]
    cmp := operand (= | != | < | <= | > | >=) operand
    operand := col | <model>.predict(*) | literal | $param
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, Union

from errors import BindError, InferDBError, ParseError
from relational_engine import ColumnType

logger = logging.getLogger(__name__)

KEYWORDS = {"SELECT", "FROM", "WHERE", "AND", "GROUP", "BY", "TRUE", "FALSE", "COUNT", "PREDICT"}
UNSUPPORTED = {"BEGIN", "COMMIT", "ROLLBACK", "INSERT", "UPDATE", "DELETE", "CREATE", "DROP"}
COMPARISON_OPS = ("=", "!=", "<", "<=", ">", ">=")
_FLIPPED = {"=": "=", "!=": "!=", "<": ">", "<=": ">=", ">": "<", ">=": "<="}

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)
  | (?P<string>'(?:[^']|'')*')
  | (?P<param>\$[A-Za-z_][A-Za-z0-9_]*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|!=|<>|=|<|>)
  | (?P<punct>[(),.*;\-])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # ident / keyword / number / string / param / op / punct / eof
    text: str
    line: int
    column: int
    index: int  # 从 1 开始的词法单元序号


def tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    position, line, line_start = 0, 1, 0
    while position < len(text):
        match = _TOKEN_RE.match(text, position)
        column = position - line_start + 1
        if not match:
            raise ParseError(f"unexpected character {text[position]!r}", line, column, len(tokens) + 1)
        kind = match.lastgroup
        value = match.group()
        if kind == "ws":
            newlines = value.count("\n")
            if newlines:
                line += newlines
                line_start = position + value.rfind("\n") + 1
        else:
            if kind == "ident" and value.upper() in KEYWORDS:
                kind = "keyword"
            if kind == "op" and value == "<>":
                value = "!="
            tokens.append(Token(kind, value, line, column, len(tokens) + 1))
        position = match.end()
    tokens.append(Token("eof", "", line, position - line_start + 1, len(tokens) + 1))
    return tokens


# ---- AST ----

@dataclass(frozen=True)
class ColumnRef:
    name: str
    table: Optional[str] = None

    def render(self) -> str:
        return f"{self.table}.{self.name}" if self.table else self.name


@dataclass(frozen=True)
class PredictCall:
    model: str

    def render(self) -> str:
        return f"{self.model}.predict(*)"


@dataclass(frozen=True)
class CountStar:
    def render(self) -> str:
        return "count(*)"


@dataclass(frozen=True)
class Literal:
    value: Union[int, float, str, bool]

    def render(self) -> str:
        if isinstance(self.value, bool):
            return "True" if self.value else "False"
        if isinstance(self.value, str):
            return "'" + self.value.replace("'", "''") + "'"
        return repr(self.value)


@dataclass(frozen=True)
class Param:
    name: str

    def render(self) -> str:
        return f"${self.name}"


Operand = Union[ColumnRef, PredictCall, Literal, Param]
SelectItem = Union[CountStar, PredictCall, ColumnRef]


@dataclass(frozen=True)
class Comparison:
    left: Operand
    op: str
    right: Operand

    def render(self) -> str:
        return f"{self.left.render()} {self.op} {self.right.render()}"


@dataclass(frozen=True)
class QueryAst:
    select: Tuple[SelectItem, ...]
    tables: Tuple[str, ...]
    where: Tuple[Comparison, ...] = ()
    group_by: Optional[ColumnRef] = None

    def render(self) -> str:
        """规范文本形式；parse(render(ast)) == ast"""
        text = "SELECT " + ", ".join(item.render() for item in self.select)
        text += " FROM " + ", ".join(self.tables)
        if self.where:
            text += " WHERE " + " AND ".join(c.render() for c in self.where)
        if self.group_by is not None:
            text += " GROUP BY " + self.group_by.render()
        return text

    @property
    def predict_calls(self) -> List[PredictCall]:
        calls = [item for item in self.select if isinstance(item, PredictCall)]
        for cmp in self.where:
            calls += [o for o in (cmp.left, cmp.right) if isinstance(o, PredictCall)]
        return calls


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def _peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def _error(self, expected: str) -> ParseError:
        token = self.current
        found = "end of input" if token.kind == "eof" else repr(token.text)
        return ParseError(f"expected {expected}, got {found}", token.line, token.column, token.index)

    def _advance(self) -> Token:
        token = self.current
        self.pos += 1
        return token

    def _is_keyword(self, word: str) -> bool:
        return self.current.kind == "keyword" and self.current.text.upper() == word

    def _expect_keyword(self, word: str) -> Token:
        if not self._is_keyword(word):
            raise self._error(word)
        return self._advance()

    def _expect_punct(self, text: str) -> Token:
        if self.current.kind != "punct" or self.current.text != text:
            raise self._error(repr(text))
        return self._advance()

    def _ident(self, what: str) -> str:
        if self.current.kind != "ident":
            raise self._error(what)
        return self._advance().text

    def parse(self) -> QueryAst:
        first = self.current
        if first.kind in ("ident", "keyword") and first.text.upper() in UNSUPPORTED:
            raise ParseError(f"unsupported statement {first.text.upper()}", first.line, first.column, first.index)
        self._expect_keyword("SELECT")
        select = self._select_list()
        self._expect_keyword("FROM")
        tables = [self._ident("table name")]
        if self.current.kind == "punct" and self.current.text == ",":
            self._advance()
            tables.append(self._ident("table name"))
        where: List[Comparison] = []
        if self._is_keyword("WHERE"):
            self._advance()
            where.append(self._comparison())
            while self._is_keyword("AND"):
                self._advance()
                where.append(self._comparison())
        group_by = None
        if self._is_keyword("GROUP"):
            self._advance()
            self._expect_keyword("BY")
            group_by = self._column_ref()
        if self.current.kind == "punct" and self.current.text == ";":
            self._advance()
        if self.current.kind != "eof":
            raise self._error("end of query")
        return QueryAst(tuple(select), tuple(tables), tuple(where), group_by)

    def _is_predict_ahead(self) -> bool:
        return (self.current.kind == "ident" and self._peek().text == "."
                and self._peek(2).kind == "keyword" and self._peek(2).text.upper() == "PREDICT")

    def _predict_call(self) -> PredictCall:
        model = self._advance().text
        self._expect_punct(".")
        self._advance()
        self._expect_punct("(")
        self._expect_punct("*")
        self._expect_punct(")")
        return PredictCall(model)

    def _column_ref(self) -> ColumnRef:
        name = self._ident("column name")
        if self.current.kind == "punct" and self.current.text == ".":
            self._advance()
            return ColumnRef(self._ident("column name"), table=name)
        return ColumnRef(name)

    def _select_list(self) -> List[SelectItem]:
        if self._is_keyword("COUNT"):
            self._advance()
            self._expect_punct("(")
            self._expect_punct("*")
            self._expect_punct(")")
            return [CountStar()]
        if self._is_predict_ahead():
            return [self._predict_call()]
        if self.current.kind != "ident":
            raise self._error("select item")
        items: List[SelectItem] = [self._column_ref()]
        while self.current.kind == "punct" and self.current.text == ",":
            self._advance()
            items.append(self._column_ref())
        return items

    def _operand(self) -> Operand:
        token = self.current
        if token.kind == "param":
            self._advance()
            return Param(token.text[1:])
        if token.kind == "string":
            self._advance()
            return Literal(token.text[1:-1].replace("''", "'"))
        if token.kind == "keyword" and token.text.upper() in ("TRUE", "FALSE"):
            self._advance()
            return Literal(token.text.upper() == "TRUE")
        negative = False
        if token.kind == "punct" and token.text == "-" and self._peek().kind == "number":
            self._advance()
            negative = True
        if self.current.kind == "number":
            text = self._advance().text
            value: Union[int, float] = float(text) if any(c in text for c in ".eE") else int(text)
            return Literal(-value if negative else value)
        if self._is_predict_ahead():
            return self._predict_call()
        if self.current.kind == "ident":
            return self._column_ref()
        raise self._error("column, literal or parameter")

    def _comparison(self) -> Comparison:
        left = self._operand()
        if self.current.kind != "op":
            raise self._error("comparison operator")
        op = self._advance().text
        return Comparison(left, op, self._operand())


def parse_query(text: str) -> QueryAst:
    """
    解析查询文本

    Raises:
        ParseError: 语法错误，带行列与词法单元序号
    """
    return _Parser(text).parse()


# ---- 绑定 ----

@dataclass(frozen=True)
class BoundPredicate:
    """绑定后的谓词：column op (value | other_column)；column == PREDICT_COLUMN 时作用于预测标签"""
    column: str
    op: str
    value: Any = None
    other_column: Optional[str] = None


PREDICT_COLUMN = "predict"


@dataclass
class BoundQuery:
    ast: QueryAst
    tables: List[str]
    column_names: Dict[str, List[str]]  # 表 → 扫描输出列名（两表查询时带表名前缀）
    table_filters: Dict[str, List[BoundPredicate]] = field(default_factory=dict)
    join: Optional[Tuple[str, str]] = None
    post_join_filters: List[BoundPredicate] = field(default_factory=list)
    predict_filters: List[BoundPredicate] = field(default_factory=list)
    model_name: Optional[str] = None
    feature_columns: List[str] = field(default_factory=list)
    feature_sides: List[int] = field(default_factory=list)  # 每个特征列来自第几个表
    select_kind: str = "columns"  # count / predict / columns
    output_columns: List[str] = field(default_factory=list)
    group_by: Optional[str] = None


def _qualify(table: str, column: str, two_tables: bool) -> str:
    return f"{table}.{column}" if two_tables else column


def _coerce(value: Any, column_type: ColumnType, where: str, error_cls: Type[InferDBError]) -> Any:
    if column_type is ColumnType.STRING:
        if isinstance(value, bool) or not isinstance(value, str):
            raise error_cls(f"{where}: cannot compare string column with {value!r}")
        return value
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, str):
        try:
            return int(value) if column_type is ColumnType.INT and re.fullmatch(r"-?\d+", value) else float(value)
        except ValueError:
            raise error_cls(f"{where}: cannot compare numeric column with {value!r}")
    return value


def bind_query(ast: QueryAst, catalog, params: Optional[Dict[str, Any]] = None,
               error_cls: Type[InferDBError] = BindError) -> BoundQuery:
    """
    把 AST 中的表、列、模型、参数解析到目录上

    predict(*) 绑定到（连接后）输入中的全部数值列，按模式顺序，
    排除声明的键列、连接列和 GROUP BY 列；VECTOR 列按宽度计入
    """
    params = params or {}
    for name in ast.tables:
        if name not in catalog.tables:
            raise error_cls(f"unknown table {name!r}")
    if len(set(ast.tables)) != len(ast.tables):
        raise error_cls("self-joins are not supported")
    two = len(ast.tables) == 2
    schemas = {t: catalog.tables[t].relation.schema for t in ast.tables}
    types: Dict[str, Tuple[ColumnType, int, str]] = {}
    column_names: Dict[str, List[str]] = {}
    for table in ast.tables:
        column_names[table] = []
        for column in schemas[table]:
            qualified = _qualify(table, column.name, two)
            column_names[table].append(qualified)
            types[qualified] = (column.type, column.width, table)

    def resolve(ref: ColumnRef) -> str:
        if ref.table is not None:
            if ref.table not in ast.tables:
                raise error_cls(f"unknown table {ref.table!r} in {ref.render()}")
            qualified = _qualify(ref.table, ref.name, two)
            if qualified not in types:
                raise error_cls(f"unknown column {ref.render()}")
            return qualified
        matches = [_qualify(t, ref.name, two) for t in ast.tables if _qualify(t, ref.name, two) in types]
        if not matches:
            raise error_cls(f"unknown column {ref.name!r}")
        if len(matches) > 1:
            raise error_cls(f"ambiguous column {ref.name!r}")
        return matches[0]

    models = {call.model for call in ast.predict_calls}
    if len(models) > 1:
        raise error_cls(f"at most one model per query, got {sorted(models)}")
    bound = BoundQuery(ast, list(ast.tables), column_names, {t: [] for t in ast.tables})
    if models:
        bound.model_name = models.pop()
        if bound.model_name not in catalog.models:
            raise error_cls(f"unknown model {bound.model_name!r}")

    def value_of(operand: Operand, column_type: ColumnType, where: str) -> Any:
        if isinstance(operand, Param):
            if operand.name not in params:
                raise error_cls(f"unbound parameter ${operand.name}")
            return _coerce(params[operand.name], column_type, where, error_cls)
        return _coerce(operand.value, column_type, where, error_cls)

    join_columns: List[str] = []
    for cmp in ast.where:
        left, op, right = cmp.left, cmp.op, cmp.right
        if isinstance(left, (Literal, Param)) and not isinstance(right, (Literal, Param)):
            left, op, right = right, _FLIPPED[op], left
        text = cmp.render()
        if isinstance(left, PredictCall):
            if not isinstance(right, (Literal, Param)):
                raise error_cls(f"{text}: predict(*) can only be compared with a literal")
            bound.predict_filters.append(BoundPredicate(PREDICT_COLUMN, op, value_of(right, ColumnType.FLOAT, text)))
            continue
        if not isinstance(left, ColumnRef):
            raise error_cls(f"{text}: comparison needs a column")
        column = resolve(left)
        column_type, width, table = types[column]
        if column_type is ColumnType.VECTOR:
            raise error_cls(f"{text}: vector columns cannot be compared")
        if isinstance(right, ColumnRef):
            other = resolve(right)
            other_type, _, other_table = types[other]
            if (column_type is ColumnType.STRING) != (other_type is ColumnType.STRING):
                raise error_cls(f"{text}: incompatible column types")
            if other_table != table and op == "=" and bound.join is None:
                if ast.tables.index(table) == 0:
                    bound.join = (column, other)
                else:
                    bound.join = (other, column)
                join_columns += [column, other]
            elif other_table != table:
                bound.post_join_filters.append(BoundPredicate(column, op, other_column=other))
            else:
                bound.table_filters[table].append(BoundPredicate(column, op, other_column=other))
        elif isinstance(right, PredictCall):
            raise error_cls(f"{text}: predict(*) can only be compared with a literal")
        else:
            bound.table_filters[table].append(BoundPredicate(column, op, value_of(right, column_type, text)))
    if two and bound.join is None:
        raise error_cls("two-table query needs an equality join condition")

    if ast.group_by is not None:
        bound.group_by = resolve(ast.group_by)
    item = ast.select[0]
    if isinstance(item, CountStar):
        bound.select_kind = "count"
    elif isinstance(item, PredictCall):
        bound.select_kind = "predict"
        if bound.group_by is not None:
            raise error_cls("GROUP BY needs count(*)")
    else:
        bound.select_kind = "columns"
        bound.output_columns = [resolve(ref) for ref in ast.select]
        if bound.group_by is not None:
            raise error_cls("GROUP BY needs count(*)")

    if bound.model_name is not None:
        model = catalog.models[bound.model_name]
        excluded = set(join_columns)
        if bound.group_by is not None:
            excluded.add(bound.group_by)
        for table in ast.tables:
            excluded.update(_qualify(table, k, two) for k in catalog.tables[table].key_columns)
        arity = 0
        for side, table in enumerate(ast.tables):
            for qualified in column_names[table]:
                column_type, width, _ = types[qualified]
                if column_type.numeric and qualified not in excluded:
                    bound.feature_columns.append(qualified)
                    bound.feature_sides.append(side)
                    arity += width if column_type is ColumnType.VECTOR else 1
        if arity != model.input_dim:
            raise error_cls(f"model {model.name} expects {model.input_dim} features, "
                            f"input provides {arity} ({', '.join(bound.feature_columns) or 'none'})")
    logger.debug(f"🎯 绑定完成: 表 {bound.tables}, 模型 {bound.model_name}, 特征 {len(bound.feature_columns)} 列")
    return bound
