"""Grammar, AST and serializer for bracketed function-call answers.

The canonical form is::

    [name(param=value, param=value), other(param=value)]

with no whitespace other than a single space after each comma (and after
the colon of a map entry).  Values use keyword-argument literal syntax:
double-quoted strings, integers, floats, ``True``/``False``/``None``, lists
``[...]`` and string-keyed maps ``{...}``.

Two entry points share one recursive-descent parser:

* :func:`parse_strict` accepts only the canonical grammar.  Every deviation
  is reported as a fatal :class:`Diagnostic`.
* :func:`parse_lenient` tolerates format-only defects (stray whitespace,
  quoted parameter names, single quotes, JSON literals, missing outer
  brackets, trailing commas), records one repairable diagnostic per defect
  and returns the repaired AST.  Names and values are never rewritten.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterator

__all__ = [
    "Grammar",
    "DEFAULT_GRAMMAR",
    "JSON_GRAMMAR",
    "Diagnostic",
    "FCallSyntaxError",
    "FunctionCall",
    "CallList",
    "parse_strict",
    "parse_lenient",
    "serialize",
    "serialize_value",
    "ast_equal",
    "values_equal",
    "to_json",
    "from_json",
]

# diagnostic codes
LEADING_SPACE = "LEADING_SPACE"
TRAILING_SPACE = "TRAILING_SPACE"
WHITESPACE = "WHITESPACE"
QUOTED_PARAM_NAME = "QUOTED_PARAM_NAME"
QUOTE_STYLE = "QUOTE_STYLE"
LITERAL_STYLE = "LITERAL_STYLE"
NUMBER_FORMAT = "NUMBER_FORMAT"
STRING_ESCAPE = "STRING_ESCAPE"
TRAILING_COMMA = "TRAILING_COMMA"
MISSING_BRACKET = "MISSING_BRACKET"
UNBALANCED = "UNBALANCED"
BAD_VALUE_LITERAL = "BAD_VALUE_LITERAL"
BAD_IDENTIFIER = "BAD_IDENTIFIER"
DUPLICATE_PARAM = "DUPLICATE_PARAM"
EMPTY_CALL_LIST = "EMPTY_CALL_LIST"
EMPTY_INPUT = "EMPTY_INPUT"
DEPTH_EXCEEDED = "DEPTH_EXCEEDED"
UNEXPECTED = "UNEXPECTED"

FATAL = "fatal"
REPAIRABLE = "repairable"

_IDENT_PROFILES = {
    "default": (re.compile(r"[A-Za-z_]"), re.compile(r"[A-Za-z0-9_]")),
    "extended": (re.compile(r"[A-Za-z_]"), re.compile(r"[A-Za-z0-9_.\-]")),
}

_CANONICAL_NUMBER = re.compile(r"-?(?:0|[1-9][0-9]*)(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?")
_LOOSE_NUMBER = re.compile(r"[+-]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?")
_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

_SIMPLE_ESCAPES = {'"': '"', "\\": "\\", "/": "/", "'": "'", "n": "\n", "t": "\t", "r": "\r", "b": "\b", "f": "\f"}


@dataclass(frozen=True)
class Grammar:
    """Configurable lexical profile.

    ``identifiers`` selects the character set for function and parameter
    names (``"default"`` is alnum + underscore, ``"extended"`` also allows
    ``.`` and ``-``).  ``literals`` names the canonical boolean/null
    spelling: ``"python"`` (True/False/None) or ``"json"`` (true/false/null).
    """

    identifiers: str = "default"
    literals: str = "python"
    max_depth: int = 32

    def __post_init__(self):
        if self.identifiers not in _IDENT_PROFILES:
            raise ValueError(f"unknown identifier profile {self.identifiers!r}")
        if self.literals not in ("python", "json"):
            raise ValueError(f"unknown literal set {self.literals!r}")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    @property
    def literal_words(self) -> dict[str, Any]:
        if self.literals == "json":
            return {"true": True, "false": False, "null": None}
        return {"True": True, "False": False, "None": None}

    @property
    def foreign_literal_words(self) -> dict[str, Any]:
        if self.literals == "json":
            return {"True": True, "False": False, "None": None}
        return {"true": True, "false": False, "null": None}

    def is_identifier(self, name: str) -> bool:
        first, rest = _IDENT_PROFILES[self.identifiers]
        return bool(name) and bool(first.fullmatch(name[0])) and all(rest.fullmatch(c) for c in name[1:])


DEFAULT_GRAMMAR = Grammar()
JSON_GRAMMAR = Grammar(literals="json")


@dataclass(frozen=True)
class Diagnostic:
    offset: int  # byte offset into the UTF-8 encoded input
    severity: str
    code: str
    message: str

    def to_dict(self) -> dict:
        return {"offset": self.offset, "severity": self.severity, "code": self.code, "message": self.message}


class FCallSyntaxError(ValueError):
    """Raised when a call list cannot be parsed.  Carries the diagnostics."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        first = self.diagnostics[0] if self.diagnostics else None
        msg = f"{first.code} at byte {first.offset}: {first.message}" if first else "syntax error"
        if len(self.diagnostics) > 1:
            msg += f" (+{len(self.diagnostics) - 1} more)"
        super().__init__(msg)

    @property
    def codes(self) -> list[str]:
        return [d.code for d in self.diagnostics]


def values_equal(a: Any, b: Any) -> bool:
    """Type-exact structural equality (``1``, ``1.0`` and ``True`` all differ)."""
    if type(a) is not type(b):
        return False
    if isinstance(a, list):
        return len(a) == len(b) and all(values_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(values_equal(a[k], b[k]) for k in a)
    if isinstance(a, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


@dataclass(frozen=True, eq=False)
class FunctionCall:
    name: str
    args: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "args", tuple((k, v) for k, v in self.args))
        names = [k for k, _ in self.args]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter in call to {self.name}")

    @classmethod
    def of(cls, name: str, **kwargs) -> "FunctionCall":
        return cls(name, tuple(kwargs.items()))

    @property
    def kwargs(self) -> dict[str, Any]:
        return dict(self.args)

    def equals(self, other: "FunctionCall", order_insensitive_args: bool = False) -> bool:
        if self.name != other.name or len(self.args) != len(other.args):
            return False
        if order_insensitive_args:
            mine, theirs = dict(self.args), dict(other.args)
            return mine.keys() == theirs.keys() and all(values_equal(mine[k], theirs[k]) for k in mine)
        return all(k1 == k2 and values_equal(v1, v2) for (k1, v1), (k2, v2) in zip(self.args, other.args))

    def __eq__(self, other):
        if not isinstance(other, FunctionCall):
            return NotImplemented
        return self.equals(other)

    __hash__ = None

    def __str__(self):
        return _serialize_call(self, DEFAULT_GRAMMAR)


@dataclass(frozen=True, eq=False)
class CallList:
    calls: tuple[FunctionCall, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "calls", tuple(self.calls))
        if not self.calls:
            raise ValueError("a call list holds at least one call")

    def __iter__(self) -> Iterator[FunctionCall]:
        return iter(self.calls)

    def __len__(self):
        return len(self.calls)

    def __getitem__(self, i):
        return self.calls[i]

    def __eq__(self, other):
        if not isinstance(other, CallList):
            return NotImplemented
        return ast_equal(self, other)

    __hash__ = None

    def __str__(self):
        return serialize(self)


def ast_equal(a: CallList, b: CallList, order_insensitive_args: bool = False) -> bool:
    """Structural equality.  Call order always matters; argument order only
    when ``order_insensitive_args`` is false."""
    if len(a.calls) != len(b.calls):
        return False
    return all(x.equals(y, order_insensitive_args) for x, y in zip(a.calls, b.calls))


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite float {x!r} has no literal form")
    text = repr(x)
    mantissa, sep, exponent = text.partition("e")
    if "." not in mantissa:
        mantissa += ".0"
    return mantissa + sep + exponent


def _quote(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "\r":
            out.append("\\r")
        elif ord(ch) < 0x20 or ord(ch) == 0x7F:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def serialize_value(value: Any, grammar: Grammar = DEFAULT_GRAMMAR) -> str:
    if value is None or isinstance(value, bool):
        words = {v: k for k, v in grammar.literal_words.items() if v is value}
        return words[value]
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return _format_float(value)
    if isinstance(value, str):
        return _quote(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(serialize_value(v, grammar) for v in value) + "]"
    if isinstance(value, dict):
        items = (f"{_quote(str(k))}: {serialize_value(v, grammar)}" for k, v in value.items())
        return "{" + ", ".join(items) + "}"
    raise TypeError(f"unsupported argument value type {type(value).__name__}")


def _serialize_call(call: FunctionCall, grammar: Grammar) -> str:
    args = ", ".join(f"{k}={serialize_value(v, grammar)}" for k, v in call.args)
    return f"{call.name}({args})"


def serialize(calls: CallList, grammar: Grammar = DEFAULT_GRAMMAR) -> str:
    """Emit the canonical text form of ``calls``."""
    return "[" + ", ".join(_serialize_call(c, grammar) for c in calls.calls) + "]"


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


class _Fatal(Exception):
    pass


class _Parser:
    def __init__(self, text: str, grammar: Grammar, strict: bool):
        self.text = text
        self.grammar = grammar
        self.strict = strict
        self.pos = 0
        self.diagnostics: list[Diagnostic] = []

    # diagnostics ---------------------------------------------------------

    def _offset(self, pos: int) -> int:
        pos = min(max(pos, 0), len(self.text))
        return len(self.text[:pos].encode("utf-8"))

    def repair(self, code: str, message: str, pos: int | None = None) -> None:
        """Record a format-only defect.  Fatal under strict parsing."""
        severity = FATAL if self.strict else REPAIRABLE
        self.diagnostics.append(Diagnostic(self._offset(self.pos if pos is None else pos), severity, code, message))

    def fail(self, code: str, message: str, pos: int | None = None):
        self.diagnostics.append(Diagnostic(self._offset(self.pos if pos is None else pos), FATAL, code, message))
        raise _Fatal()

    # lexical helpers -----------------------------------------------------

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def ws(self, canonical: str = "", code: str = WHITESPACE, where: str = "") -> None:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1
        run = self.text[start : self.pos]
        if run != canonical:
            if canonical and not run:
                msg = f"expected a single space {where}".rstrip()
            elif canonical:
                msg = f"expected a single space, found {run!r} {where}".rstrip()
            else:
                msg = f"unexpected whitespace {run!r} {where}".rstrip()
            self.repair(code, msg, start)

    def expect(self, ch: str, code: str = UNEXPECTED) -> None:
        if self.peek() != ch:
            found = self.peek() or "end of input"
            self.fail(code, f"expected {ch!r}, found {found!r}")
        self.pos += 1

    def read_identifier(self, what: str) -> str:
        start = self.pos
        first, rest = _IDENT_PROFILES[self.grammar.identifiers]
        if self.at_end() or not first.fullmatch(self.peek()):
            found = self.peek() or "end of input"
            self.fail(BAD_IDENTIFIER, f"expected {what}, found {found!r}")
        self.pos += 1
        while not self.at_end() and rest.fullmatch(self.peek()):
            self.pos += 1
        return self.text[start : self.pos]

    # grammar -------------------------------------------------------------

    def parse(self) -> CallList:
        if not self.text.strip():
            self.fail(EMPTY_INPUT, "empty input", 0)
        self.ws("", WHITESPACE, "before the call list")
        bracketed = self.peek() == "["
        if bracketed:
            self.pos += 1
            self.ws("", LEADING_SPACE, "between '[' and the function name")
            if self.peek() == "]":
                self.fail(EMPTY_CALL_LIST, "a call list holds at least one call")
        else:
            self.repair(MISSING_BRACKET, "call list is not enclosed in '[' ... ']'")
        calls = [self.parse_call()]
        while True:
            self.ws("", TRAILING_SPACE if self._next_is("]") else WHITESPACE, "after a call")
            if self.peek() != ",":
                break
            comma = self.pos
            self.pos += 1
            if self.trailing_comma("]", comma, "after the last call", allow_end=not bracketed):
                break
            self.ws(" ", WHITESPACE, "after ','")
            calls.append(self.parse_call())
        if bracketed:
            if self.at_end():
                self.repair(MISSING_BRACKET, "missing closing ']'")
            else:
                self.expect("]", UNBALANCED)
        self.ws("", WHITESPACE, "after the call list")
        if not self.at_end():
            self.fail(UNEXPECTED, f"unexpected trailing text {self.text[self.pos:self.pos + 20]!r}")
        return CallList(tuple(calls))

    def trailing_comma(self, closer: str, comma: int, where: str, allow_end: bool = False) -> bool:
        if not (self._next_is(closer) or (allow_end and not self.text[self.pos :].strip())):
            return False
        while not self.at_end() and self.peek().isspace():
            self.pos += 1
        self.repair(TRAILING_COMMA, f"trailing ',' {where}", comma)
        return True

    def unclosed(self, opener: str, closer: str, open_pos: int):
        if self.at_end():
            self.fail(UNBALANCED, f"unclosed {opener!r}", open_pos)
        if self.peek() in ")]}":
            self.fail(UNBALANCED, f"{self.peek()!r} closes {opener!r}; expected {closer!r}")
        self.fail(UNEXPECTED, f"expected ',' or {closer!r}, found {self.peek()!r}")

    def _next_is(self, ch: str) -> bool:
        j = self.pos
        while j < len(self.text) and self.text[j].isspace():
            j += 1
        return self.text[j : j + 1] == ch

    def parse_call(self) -> FunctionCall:
        name_pos = self.pos
        name = self.read_identifier("a function name")
        self.ws("", WHITESPACE, "between the function name and '('")
        if self.peek() != "(":
            found = self.peek() or "end of input"
            if found in ".-":
                self.fail(BAD_IDENTIFIER, f"{found!r} in function name {name!r} needs the extended identifier profile")
            self.fail(UNBALANCED if self.at_end() else UNEXPECTED, f"expected '(' after {name!r}, found {found!r}")
        self.pos += 1
        self.ws("", WHITESPACE, "after '('")
        args: list[tuple[str, Any]] = []
        seen: set[str] = set()
        if self.peek() != ")":
            while True:
                param_pos = self.pos
                key, value = self.parse_arg()
                if key in seen:
                    self.fail(DUPLICATE_PARAM, f"parameter {key!r} given twice in call to {name!r}", param_pos)
                seen.add(key)
                args.append((key, value))
                self.ws("", WHITESPACE, "after an argument")
                if self.peek() != ",":
                    break
                comma = self.pos
                self.pos += 1
                if self.trailing_comma(")", comma, "after the last argument"):
                    break
                self.ws(" ", WHITESPACE, "after ','")
        if self.peek() != ")":
            self.unclosed("(", ")", name_pos)
        self.pos += 1
        return FunctionCall(name, tuple(args))

    def parse_arg(self) -> tuple[str, Any]:
        if self.peek() in ("'", '"'):
            quote_pos = self.pos
            key = self.parse_string(quote_note=False)
            if not self.grammar.is_identifier(key):
                self.fail(BAD_IDENTIFIER, f"quoted parameter name {key!r} is not an identifier", quote_pos)
            self.repair(QUOTED_PARAM_NAME, f"parameter name {key!r} must not be quoted", quote_pos)
        else:
            key = self.read_identifier("a parameter name")
        self.ws("", WHITESPACE, "before '='")
        self.expect("=")
        self.ws("", WHITESPACE, "after '='")
        return key, self.parse_value(1)

    def parse_value(self, depth: int) -> Any:
        if depth > self.grammar.max_depth:
            self.fail(DEPTH_EXCEEDED, f"nesting deeper than {self.grammar.max_depth}")
        ch = self.peek()
        if ch in ("'", '"'):
            return self.parse_string()
        if ch == "[":
            return self.parse_list(depth)
        if ch == "{":
            return self.parse_map(depth)
        if ch and (ch.isdigit() or ch in "+-."):
            return self.parse_number()
        word = _WORD.match(self.text, self.pos)
        if word:
            lexeme = word.group()
            if lexeme in self.grammar.literal_words:
                self.pos = word.end()
                return self.grammar.literal_words[lexeme]
            if lexeme in self.grammar.foreign_literal_words:
                self.repair(LITERAL_STYLE, f"literal {lexeme!r} is not in the configured literal set")
                self.pos = word.end()
                return self.grammar.foreign_literal_words[lexeme]
            self.fail(BAD_VALUE_LITERAL, f"bare word {lexeme!r} is not a value literal")
        if self.at_end():
            self.fail(UNBALANCED, "input ends where a value was expected")
        self.fail(BAD_VALUE_LITERAL, f"unexpected {ch!r} where a value was expected")

    def parse_number(self) -> int | float:
        start = self.pos
        m = _LOOSE_NUMBER.match(self.text, self.pos)
        if not m:
            self.fail(BAD_VALUE_LITERAL, f"malformed number near {self.text[start:start + 10]!r}")
        lexeme = m.group()
        self.pos = m.end()
        follow = self.peek()
        if follow and (follow.isalnum() or follow in "_."):
            self.fail(BAD_VALUE_LITERAL, f"malformed number {lexeme + follow!r}", start)
        if not _CANONICAL_NUMBER.fullmatch(lexeme):
            self.repair(NUMBER_FORMAT, f"non-canonical number {lexeme!r}", start)
        if any(c in lexeme for c in ".eE"):
            value = float(lexeme)
            if not math.isfinite(value):
                self.fail(BAD_VALUE_LITERAL, f"number {lexeme!r} overflows", start)
            return value
        return int(lexeme)

    def parse_string(self, quote_note: bool = True) -> str:
        start = self.pos
        quote = self.peek()
        if quote == "'" and quote_note:
            self.repair(QUOTE_STYLE, "strings are double-quoted", start)
        self.pos += 1
        out = []
        text = self.text
        while True:
            if self.pos >= len(text):
                self.fail(UNBALANCED, "unterminated string", start)
            ch = text[self.pos]
            if ch == quote:
                self.pos += 1
                return "".join(out)
            if ch == "\\":
                esc = text[self.pos + 1 : self.pos + 2]
                if esc == "u" and re.fullmatch(r"[0-9a-fA-F]{4}", text[self.pos + 2 : self.pos + 6]):
                    out.append(chr(int(text[self.pos + 2 : self.pos + 6], 16)))
                    self.pos += 6
                    continue
                if esc in _SIMPLE_ESCAPES:
                    if esc == "'" and quote == '"' or esc == "/":
                        self.repair(STRING_ESCAPE, f"needless escape '\\{esc}'")
                    out.append(_SIMPLE_ESCAPES[esc])
                    self.pos += 2
                    continue
                if not esc:
                    self.fail(UNBALANCED, "unterminated string", start)
                # unknown escape keeps its backslash, as in Python source
                self.repair(STRING_ESCAPE, f"unknown escape '\\{esc}'")
                out.append("\\")
                self.pos += 1
                continue
            if ord(ch) < 0x20 or ord(ch) == 0x7F:
                self.repair(STRING_ESCAPE, f"raw control character {ch!r} inside a string")
            out.append(ch)
            self.pos += 1

    def parse_list(self, depth: int) -> list:
        open_pos = self.pos
        self.pos += 1
        self.ws("", WHITESPACE, "after '['")
        items: list = []
        if self.peek() != "]":
            while True:
                items.append(self.parse_value(depth + 1))
                self.ws("", WHITESPACE, "after a list item")
                if self.peek() != ",":
                    break
                comma = self.pos
                self.pos += 1
                if self.trailing_comma("]", comma, "in list"):
                    break
                self.ws(" ", WHITESPACE, "after ','")
        if self.peek() != "]":
            self.unclosed("[", "]", open_pos)
        self.pos += 1
        return items

    def parse_map(self, depth: int) -> dict:
        open_pos = self.pos
        self.pos += 1
        self.ws("", WHITESPACE, "after '{'")
        items: dict = {}
        if self.peek() != "}":
            while True:
                key_pos = self.pos
                if self.peek() not in ("'", '"'):
                    if self.at_end():
                        self.fail(UNBALANCED, "unclosed '{'", open_pos)
                    self.fail(BAD_VALUE_LITERAL, "map keys are quoted strings")
                key = self.parse_string()
                if key in items:
                    self.fail(DUPLICATE_PARAM, f"map key {key!r} given twice", key_pos)
                self.ws("", WHITESPACE, "before ':'")
                self.expect(":")
                self.ws(" ", WHITESPACE, "after ':'")
                items[key] = self.parse_value(depth + 1)
                self.ws("", WHITESPACE, "after a map entry")
                if self.peek() != ",":
                    break
                comma = self.pos
                self.pos += 1
                if self.trailing_comma("}", comma, "in map"):
                    break
                self.ws(" ", WHITESPACE, "after ','")
        if self.peek() != "}":
            self.unclosed("{", "}", open_pos)
        self.pos += 1
        return items


def _run(text: str, grammar: Grammar, strict: bool) -> tuple[CallList, list[Diagnostic]]:
    parser = _Parser(text, grammar, strict)
    try:
        calls = parser.parse()
    except _Fatal:
        raise FCallSyntaxError(parser.diagnostics) from None
    return calls, parser.diagnostics


def parse_strict(text: str, grammar: Grammar = DEFAULT_GRAMMAR) -> CallList:
    """Parse ``text`` if and only if it is in canonical form.

    Raises :class:`FCallSyntaxError` listing every deviation found.
    """
    calls, diagnostics = _run(text, grammar, strict=True)
    if diagnostics:
        raise FCallSyntaxError(diagnostics)
    return calls


def parse_lenient(text: str, grammar: Grammar = DEFAULT_GRAMMAR) -> tuple[CallList, list[Diagnostic]]:
    """Parse ``text`` repairing format-only defects.

    Returns the repaired AST and one repairable diagnostic per repair (empty
    for canonical input).  Unrepairable input raises
    :class:`FCallSyntaxError`.
    """
    calls, diagnostics = _run(text, grammar, strict=False)
    # the repaired form must itself be canonical
    again = parse_strict(serialize(calls, grammar), grammar)
    assert ast_equal(again, calls)
    return calls, diagnostics


# --------------------------------------------------------------------------
# JSON AST form (CLI output)
# --------------------------------------------------------------------------


def to_json(calls: CallList) -> list[dict]:
    return [{"name": c.name, "arguments": dict(c.args)} for c in calls.calls]


def from_json(data: list[dict]) -> CallList:
    return CallList(tuple(FunctionCall(d["name"], tuple(d.get("arguments", {}).items())) for d in data))


def dumps_ast(calls: CallList) -> str:
    return json.dumps(to_json(calls), ensure_ascii=False)
