"""Candidate tool definitions and deterministic argument validation.

Tools arrive in the corpus dialect::

    [{"name": "forecast_weather_api",
      "description": "...",
      "parameters": {"q": {"type": "str", "default": "London"},
                     "days": {"type": "int", "default": "3"}}}]

A parameter is optional iff it declares a default (or its type string is
suffixed with ``, optional``).  Defaults are often string-encoded in the
corpus (``"default": "3"`` for an ``int``); they are coerced to the declared
type when that is lossless and kept raw with a warning otherwise.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from .checks import FAIL, FUNC_PARAM, PASS, GateCheckResult
from .fcall import CallList, FunctionCall

__all__ = [
    "ParamSpec",
    "ToolSpec",
    "ToolCatalog",
    "CatalogError",
    "load_catalog",
    "validate_call",
    "validate_calls",
    "type_matches",
]

UNKNOWN_FUNCTION = "UNKNOWN_FUNCTION"
UNKNOWN_PARAM = "UNKNOWN_PARAM"
MISSING_REQUIRED = "MISSING_REQUIRED"
TYPE_MISMATCH = "TYPE_MISMATCH"
UNKNOWN_TYPE = "UNKNOWN_TYPE"
DEFAULT_TYPE = "DEFAULT_TYPE"

TYPES = ("str", "int", "float", "bool", "list", "dict", "any")

_TYPE_ALIASES = {
    "str": "str", "string": "str", "text": "str",
    "int": "int", "integer": "int", "long": "int",
    "float": "float", "number": "float", "double": "float", "decimal": "float",
    "bool": "bool", "boolean": "bool",
    "list": "list", "array": "list", "tuple": "list", "set": "list",
    "dict": "dict", "object": "dict", "mapping": "dict", "map": "dict",
    "any": "any", "none": "any",
}
_OPTIONAL_SUFFIX = re.compile(r"\s*,\s*optional\s*$", re.I)
_GENERIC = re.compile(r"^(\w+)\s*\[.*\]$")
_INT_TEXT = re.compile(r"[+-]?\d+")
_MISSING = object()


class CatalogError(ValueError):
    pass


def normalize_type(declared: Any) -> tuple[str, bool, bool]:
    """Map a corpus type string to ``(type, optional_marker, known)``."""
    if not isinstance(declared, str):
        return "any", False, declared is None
    text = declared.strip()
    optional = bool(_OPTIONAL_SUFFIX.search(text))
    text = _OPTIONAL_SUFFIX.sub("", text)
    if text.lower().startswith("optional[") and text.endswith("]"):
        text, optional = text[9:-1], True
    generic = _GENERIC.match(text)
    if generic:
        text = generic.group(1)
    name = _TYPE_ALIASES.get(text.lower())
    if name is None:
        return "any", optional, False
    return name, optional, True


def type_matches(value: Any, declared: str) -> bool:
    """Whether ``value`` satisfies ``declared``.  int widens to float; nothing else is coerced."""
    if declared == "any":
        return True
    if declared == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if declared == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if declared == "bool":
        return isinstance(value, bool)
    if declared == "str":
        return isinstance(value, str)
    if declared == "list":
        return isinstance(value, (list, tuple))
    if declared == "dict":
        return isinstance(value, dict)
    raise ValueError(f"unknown declared type {declared!r}")


def coerce_default(raw: Any, declared: str) -> tuple[Any, bool]:
    """Coerce a corpus default to ``declared``; returns ``(value, ok)``."""
    if raw is None or type_matches(raw, declared):
        if declared == "float" and isinstance(raw, int):
            return float(raw), True
        return raw, True
    if declared == "int":
        if isinstance(raw, str) and _INT_TEXT.fullmatch(raw.strip()):
            return int(raw), True
        if isinstance(raw, float) and raw.is_integer():
            return int(raw), True
    elif declared == "float" and isinstance(raw, str):
        try:
            return float(raw), True
        except ValueError:
            pass
    elif declared == "bool" and isinstance(raw, str) and raw.strip().lower() in ("true", "false"):
        return raw.strip().lower() == "true", True
    elif declared == "str" and isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return str(raw), True
    elif declared in ("list", "dict") and isinstance(raw, str):
        try:
            parsed = json.loads(raw)
        except ValueError:
            parsed = None
        if type_matches(parsed, declared):
            return parsed, True
    return raw, False


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str = "any"
    description: str = ""
    default: Any = _MISSING
    default_ok: bool = True  # False when the corpus default did not coerce
    optional_marker: bool = False

    @property
    def has_default(self) -> bool:
        return self.default is not _MISSING

    @property
    def required(self) -> bool:
        return not (self.has_default or self.optional_marker)

    def accepts(self, value: Any) -> bool:
        if value is None and self.has_default and self.default is None:
            return True
        return type_matches(value, self.type)


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str = ""
    params: tuple[ParamSpec, ...] = ()

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise CatalogError(f"tool {self.name!r} declares a parameter twice")

    def param(self, name: str) -> ParamSpec | None:
        for p in self.params:
            if p.name == name:
                return p
        return None

    def default_call(self) -> FunctionCall:
        """A call passing every parameter whose default is usable."""
        args = tuple((p.name, p.default) for p in self.params if p.has_default and p.default_ok)
        return FunctionCall(self.name, args)


@dataclass(frozen=True)
class ToolCatalog:
    tools: tuple[ToolSpec, ...] = ()
    warnings: tuple[dict, ...] = field(default=(), compare=False)

    def __post_init__(self):
        names = [t.name for t in self.tools]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise CatalogError(f"duplicate tool names: {', '.join(dupes)}")

    def __len__(self):
        return len(self.tools)

    def __iter__(self):
        return iter(self.tools)

    def get(self, name: str) -> ToolSpec | None:
        for t in self.tools:
            if t.name == name:
                return t
        return None

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tools]


def _load_param(tool: str, name: str, body: Any, warnings: list) -> ParamSpec:
    if not isinstance(body, dict):
        body = {"type": body}
    declared, optional, known = normalize_type(body.get("type"))
    if not known:
        warnings.append({"code": UNKNOWN_TYPE, "tool": tool, "param": name,
                         "message": f"unknown type {body.get('type')!r}; treated as any"})
    kwargs = {}
    if "default" in body:
        value, ok = coerce_default(body["default"], declared)
        if not ok:
            warnings.append({"code": DEFAULT_TYPE, "tool": tool, "param": name,
                             "message": f"default {body['default']!r} does not coerce to {declared}"})
        kwargs.update(default=value, default_ok=ok)
    return ParamSpec(name=name, type=declared, description=str(body.get("description", "")),
                     optional_marker=optional, **kwargs)


def load_catalog(source: str | list | dict) -> ToolCatalog:
    """Build a catalog from tool JSON text (or an already-decoded list)."""
    if isinstance(source, (str, bytes)):
        try:
            data = json.loads(source)
        except ValueError as exc:
            raise CatalogError(f"malformed tool JSON: {exc}") from None
    else:
        data = source
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise CatalogError("tool JSON must be a list of tool objects")
    warnings: list[dict] = []
    tools = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            raise CatalogError(f"tool #{i} has no name")
        params = entry.get("parameters") or {}
        if not isinstance(params, dict):
            raise CatalogError(f"tool {entry['name']!r}: parameters must be an object")
        specs = tuple(_load_param(entry["name"], k, v, warnings) for k, v in params.items())
        tools.append(ToolSpec(entry["name"], str(entry.get("description", "")), specs))
    return ToolCatalog(tuple(tools), tuple(warnings))


def _check_call(call: FunctionCall, catalog: ToolCatalog, result: GateCheckResult, index: int | None) -> None:
    where = {} if index is None else {"call": index}
    tool = catalog.get(call.name)
    if tool is None:
        result.add(UNKNOWN_FUNCTION, f"{call.name!r} is not among the candidate tools", function=call.name, **where)
        return
    supplied = dict(call.args)
    for name, value in call.args:
        spec = tool.param(name)
        if spec is None:
            result.add(UNKNOWN_PARAM, f"{call.name} has no parameter {name!r}", function=call.name, param=name, **where)
        elif not spec.accepts(value):
            result.add(TYPE_MISMATCH, f"{call.name}.{name} expects {spec.type}, got {type(value).__name__}",
                       function=call.name, param=name, **where)
    for spec in tool.params:
        if spec.required and spec.name not in supplied:
            result.add(MISSING_REQUIRED, f"{call.name} requires {spec.name!r}", function=call.name,
                       param=spec.name, **where)


def validate_call(call: FunctionCall, catalog: ToolCatalog) -> GateCheckResult:
    """Check one call against the catalog.  Failures are recorded, never raised."""
    result = GateCheckResult(FUNC_PARAM, PASS)
    _check_call(call, catalog, result, None)
    if result.evidence:
        result.verdict = FAIL
    return result


def validate_calls(calls: CallList | Iterable[FunctionCall], catalog: ToolCatalog) -> GateCheckResult:
    result = GateCheckResult(FUNC_PARAM, PASS)
    for i, call in enumerate(calls):
        _check_call(call, catalog, result, i)
    if result.evidence:
        result.verdict = FAIL
    return result
