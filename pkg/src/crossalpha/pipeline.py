"""Factor pipeline expressions and chunked evaluation.

Grammar (whitespace-insensitive, ``#`` starts a comment)::

    program   := { statement (NEWLINE | ";") }
    statement := "factor" STRING "=" expr
    expr      := sum { "|>" IDENT [ "(" args ")" ] }
    sum       := product { ("+" | "-") product }
    product   := unary { ("*" | "/") unary }
    unary     := "-" unary | atom
    atom      := NUMBER | FIELD | IDENT "(" args ")" | "(" expr ")"
    args      := expr { "," expr }

``a |> f(b)`` means ``f(a, b)``. Fields: ``open high low close volume
market_cap returns`` (``returns`` is the trailing one-day simple return).
Functions and their numeric parameters:

    lag(x, w)  delta(x, w)
    rolling_mean(x, w)  rolling_std(x, w)  rolling_sum(x, w)
    rolling_min(x, w)  rolling_max(x, w)
    ewma(x, alpha)
    cross_rank(x)  cross_rank_norm(x)     rank is an alias of cross_rank
    abs(x)  log(x)  sign(x)

Window and alpha parameters must be numeric literals. Example::

    factor "mom20" = delta(close, 20) / lag(close, 20) |> cross_rank
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError
from .factors import FactorPanel
from .panel import PricePanel, trailing_returns

FIELDS = ("open", "high", "low", "close", "volume", "market_cap", "returns")

# name -> (number of expression operands, names of literal parameters)
FUNCTIONS = {
    "lag": (1, ("window",)),
    "delta": (1, ("window",)),
    "rolling_mean": (1, ("window",)),
    "rolling_std": (1, ("window",)),
    "rolling_sum": (1, ("window",)),
    "rolling_min": (1, ("window",)),
    "rolling_max": (1, ("window",)),
    "ewma": (1, ("alpha",)),
    "cross_rank": (1, ()),
    "cross_rank_norm": (1, ()),
    "abs": (1, ()),
    "log": (1, ()),
    "sign": (1, ()),
}
ALIASES = {"rank": "cross_rank"}


class PipelineSyntaxError(ConfigError):
    def __init__(self, message, pos, text):
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        self.pos, self.line, self.col = pos, line, col
        super().__init__(f"line {line}, column {col}: {message}")


# --------------------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+|\#[^\n]*)
  | (?P<newline>\n)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<string>"[^"\n]*")
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\|>|[-+*/(),=;])
    """,
    re.VERBOSE,
)


@dataclass
class Token:
    kind: str
    text: str
    pos: int


def tokenize(text):
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise PipelineSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            out.append(Token(kind, m.group(), pos))
        pos = m.end()
    out.append(Token("eof", "", len(text)))
    return out


# --------------------------------------------------------------------------- AST


class Node:
    lookback = 0

    def evaluate(self, env):
        """Whole-panel evaluation."""
        raise NotImplementedError

    def step(self, env, states):
        """Evaluate the rows in ``env`` continuing from per-node ``states``."""
        raise NotImplementedError


@dataclass(eq=False)
class Field(Node):
    name: str

    def evaluate(self, env):
        return env[self.name]

    def step(self, env, states):
        return env[self.name]

    def __str__(self):
        return self.name


@dataclass(eq=False)
class Const(Node):
    value: float

    def evaluate(self, env):
        shape = env["close"][0].shape
        return np.full(shape, self.value), np.ones(shape, dtype=bool)

    def step(self, env, states):
        return self.evaluate(env)

    def __str__(self):
        return repr(self.value)


def _finish(values, mask):
    with np.errstate(invalid="ignore"):
        mask = mask & np.isfinite(values)
    return np.where(mask, values, np.nan), mask


@dataclass(eq=False)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    @property
    def lookback(self):
        return max(self.left.lookback, self.right.lookback)

    def _combine(self, a, b):
        (x, mx), (y, my) = a, b
        with np.errstate(all="ignore"):
            if self.op == "+":
                v = x + y
            elif self.op == "-":
                v = x - y
            elif self.op == "*":
                v = x * y
            else:
                v = x / y
        return _finish(v, mx & my)

    def evaluate(self, env):
        return self._combine(self.left.evaluate(env), self.right.evaluate(env))

    def step(self, env, states):
        return self._combine(self.left.step(env, states), self.right.step(env, states))

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(eq=False)
class Neg(Node):
    operand: Node

    @property
    def lookback(self):
        return self.operand.lookback

    def evaluate(self, env):
        x, m = self.operand.evaluate(env)
        return -x, m

    def step(self, env, states):
        x, m = self.operand.step(env, states)
        return -x, m

    def __str__(self):
        return f"-{self.operand}"


@dataclass(eq=False)
class Call(Node):
    fn: str
    arg: Node
    params: tuple = field(default=())

    def __post_init__(self):
        if self.fn in kernels.ROLLING_KINDS or self.fn in ("lag", "delta"):
            w = self.params[0]
            if w != int(w) or w < 1:
                raise ConfigError(f"{self.fn}: window must be a positive integer, got {w}")
            self.params = (int(w),)
            kernels.KernelSpec(self.fn, window=self.params[0])
        elif self.fn == "ewma":
            kernels.KernelSpec("ewma", alpha=float(self.params[0]))

    @property
    def window_cache(self):
        if self.fn in kernels.ROLLING_KINDS:
            return self.params[0] - 1
        if self.fn in ("lag", "delta"):
            return self.params[0]
        return 0

    @property
    def lookback(self):
        return self.arg.lookback + self.window_cache

    def _pointwise(self, x, m):
        if self.fn in ("cross_rank", "cross_rank_norm"):
            return kernels.cross_rank(x, m, normalized=self.fn == "cross_rank_norm")
        with np.errstate(all="ignore"):
            if self.fn == "abs":
                v = np.abs(x)
            elif self.fn == "log":
                v = np.log(x)
            else:
                v = np.sign(x)
        return _finish(v, m)

    def _windowed(self, x, m):
        if self.fn in kernels.ROLLING_KINDS:
            out = kernels._rolling_core(np.where(m, x, np.nan), self.fn, self.params[0])
            return _finish(out, np.isfinite(out))
        if self.fn == "lag":
            return kernels.lag(x, m, self.params[0])
        return kernels.delta(x, m, self.params[0])

    def evaluate(self, env):
        x, m = self.arg.evaluate(env)
        if self.fn in kernels.ROLLING_KINDS:
            return kernels.rolling_apply(x, m, kernels.KernelSpec(self.fn, self.params[0]))
        if self.fn in ("lag", "delta"):
            return self._windowed(x, m)
        if self.fn == "ewma":
            return kernels.ewma(x, m, self.params[0])
        return self._pointwise(x, m)

    def step(self, env, states):
        x, m = self.arg.step(env, states)
        key = id(self)
        if self.fn == "ewma":
            out, valid, states[key] = kernels.ewma_stream(x, m, self.params[0], states.get(key))
            return out, valid
        L = self.window_cache
        if L == 0:
            return self._pointwise(x, m)
        cache = states.get(key)
        if cache is not None:
            x = np.concatenate([cache[0], x])
            m = np.concatenate([cache[1], m])
        n_new = len(env["close"][0])
        out, valid = self._windowed(x, m)
        states[key] = (x[-L:], m[-L:])
        return out[-n_new:], valid[-n_new:]

    def __str__(self):
        extra = "".join(f", {p}" for p in self.params)
        return f"{self.fn}({self.arg}{extra})"


# --------------------------------------------------------------------------- parser


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self):
        return self.toks[self.i]

    def error(self, msg, tok=None):
        tok = tok or self.tok
        raise PipelineSyntaxError(msg, tok.pos, self.text)

    def next(self):
        t = self.tok
        self.i += 1
        return t

    def accept(self, text):
        if self.tok.kind in ("op", "ident") and self.tok.text == text:
            return self.next()
        return None

    def expect(self, text):
        if not self.accept(text):
            found = self.tok.text or "end of input"
            self.error(f"expected {text!r}, found {found!r}")

    def skip_separators(self):
        while self.tok.kind == "newline" or (self.tok.kind == "op" and self.tok.text == ";"):
            self.next()

    def program(self):
        out = []
        self.skip_separators()
        while self.tok.kind != "eof":
            if not (self.tok.kind == "ident" and self.tok.text == "factor"):
                self.error("expected 'factor'")
            self.next()
            if self.tok.kind != "string":
                self.error("expected a quoted factor name")
            name_tok = self.next()
            name = name_tok.text[1:-1]
            if not name:
                self.error("empty factor name", name_tok)
            if any(n == name for n, _ in out):
                self.error(f"duplicate factor name {name!r}", name_tok)
            self.expect("=")
            out.append((name, self.expr()))
            if self.tok.kind not in ("newline", "eof") and self.tok.text != ";":
                self.error(f"unexpected {self.tok.text!r} after expression")
            self.skip_separators()
        return out

    def expr(self):
        node = self.sum()
        while self.accept("|>"):
            if self.tok.kind != "ident":
                self.error("expected a function name after '|>'")
            fn_tok = self.next()
            extra = []
            if self.accept("("):
                extra = self.args()
                self.expect(")")
            node = self.make_call(fn_tok, [node] + extra)
        return node

    def sum(self):
        node = self.product()
        while self.tok.kind == "op" and self.tok.text in ("+", "-"):
            op = self.next().text
            node = BinOp(op, node, self.product())
        return node

    def product(self):
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in ("*", "/"):
            op = self.next().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.accept("-"):
            inner = self.unary()
            if isinstance(inner, Const):
                return Const(-inner.value)
            return Neg(inner)
        return self.atom()

    def atom(self):
        tok = self.tok
        if tok.kind == "number":
            self.next()
            return Const(float(tok.text))
        if tok.kind == "ident":
            self.next()
            if self.accept("("):
                args = self.args()
                self.expect(")")
                return self.make_call(tok, args)
            if tok.text in FIELDS:
                return Field(tok.text)
            self.error(f"unknown field {tok.text!r}", tok)
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        self.error(f"unexpected {tok.text or 'end of input'!r}")

    def args(self):
        out = [self.expr()]
        while self.accept(","):
            out.append(self.expr())
        return out

    def make_call(self, tok, args):
        fn = ALIASES.get(tok.text, tok.text)
        if fn not in FUNCTIONS:
            self.error(f"unknown function {tok.text!r}", tok)
        n_ops, pnames = FUNCTIONS[fn]
        if len(args) != n_ops + len(pnames):
            self.error(f"{fn} takes {n_ops + len(pnames)} argument(s), got {len(args)}", tok)
        params = []
        for a, pname in zip(args[n_ops:], pnames):
            if not isinstance(a, Const):
                self.error(f"{fn}: {pname} must be a numeric literal", tok)
            params.append(a.value)
        try:
            return Call(fn, args[0], tuple(params))
        except ConfigError as exc:
            self.error(str(exc), tok)


def parse_expression(text) -> Node:
    p = _Parser(text)
    node = p.expr()
    p.skip_separators()
    if p.tok.kind != "eof":
        p.error(f"unexpected {p.tok.text!r}")
    return node


def parse_program(text):
    """Parse ``factor "name" = expr`` statements into ``[(name, Node), ...]``."""
    return _Parser(text).program()


# --------------------------------------------------------------------------- evaluation


def field_env(panel: PricePanel, rows=slice(None)):
    env = {f: (getattr(panel, f)[rows], panel.mask[rows]) for f in FIELDS if f != "returns"}
    if panel.shape[0] > 1:
        r = trailing_returns(panel, 1)
        env["returns"] = (r.returns[rows], r.mask[rows])
    else:
        shape = panel.close[rows].shape
        env["returns"] = (np.full(shape, np.nan), np.zeros(shape, dtype=bool))
    return env


def _to_factor(name, node, result):
    values, mask = result
    return FactorPanel(name=name, values=values, mask=mask, lineage=(str(node),))


def evaluate(panel: PricePanel, specs):
    """Evaluate pipelines over the whole panel in one pass.

    ``specs`` holds ``(name, node_or_text)`` pairs and/or program statements.
    """
    specs = _normalize(specs)
    env = field_env(panel)
    return [_to_factor(name, node, node.evaluate(env)) for name, node in specs]


def _normalize(specs):
    """Accept ``(name, node_or_text)`` pairs and whole ``factor "name" = expr`` statements."""
    if isinstance(specs, str):
        specs = [specs]
    pairs = []
    for item in specs:
        if isinstance(item, str):
            pairs.extend(parse_program(item))
        else:
            pairs.append(tuple(item))
    out = []
    for name, node in pairs:
        if isinstance(node, str):
            node = parse_expression(node)
        out.append((name, node))
    return out


def max_lookback(specs):
    return max((node.lookback for _, node in _normalize(specs)), default=0)


def evaluate_chunked(panel: PricePanel, specs, chunk_days: int):
    """Evaluate pipelines over consecutive date chunks.

    Every windowed node keeps the trailing rows of its input from the previous
    chunk, and EWMA nodes keep their recursion state, so the result is
    bit-identical to :func:`evaluate`.

    Raises
    ------
    ConfigError
        ``chunk_days`` is smaller than the deepest lookback of any pipeline.
    """
    specs = _normalize(specs)
    need = max_lookback(specs)
    if chunk_days < max(need, 1):
        raise ConfigError(f"chunk_days={chunk_days} is smaller than the maximum lookback {need}")
    T = panel.shape[0]
    env_full = field_env(panel)
    states = {}
    parts = {name: ([], []) for name, _ in specs}
    for start in range(0, T, chunk_days):
        rows = slice(start, min(start + chunk_days, T))
        env = {k: (v[rows], m[rows]) for k, (v, m) in env_full.items()}
        for name, node in specs:
            vals, mask = node.step(env, states)
            parts[name][0].append(vals)
            parts[name][1].append(mask)
    return [
        _to_factor(name, node, (np.concatenate(parts[name][0]), np.concatenate(parts[name][1])))
        for name, node in specs
    ]
