"""Small arithmetic expression language with vectorised values and gradients.

Grammar::

    expr   := term (("+"|"-") term)*
    term   := factor (("*"|"/") factor)*
    factor := number | var | func "(" expr ("," expr)? ")" | "(" expr ")" | "-" factor
    var    := "x" | "y" | "z" | "x1" .. "x9"
    func   := sin | cos | exp | abs | min | max

Gradients are forward-mode. At kinks of ``abs``/``min``/``max`` (exact ties)
the derivative is taken from the positive side and the point is flagged.
"""

import re

import numpy as np

FUNCS = {"sin": 1, "cos": 1, "exp": 1, "abs": 1, "min": 2, "max": 2}
_VARS = {"x": 0, "y": 1, "z": 2, **{f"x{k}": k - 1 for k in range(1, 10)}}
_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/(),]))"
)


class ParseError(ValueError):
    def __init__(self, message, col, line=None):
        self.col = col
        self.line = line
        where = f"line {line}, column {col}" if line is not None else f"column {col}"
        super().__init__(f"{where}: {message}")
        self.message = message

    def at_line(self, line, offset=0):
        return ParseError(self.message, self.col + offset, line)


class EvaluationError(ArithmeticError):
    pass


def _tokenize(text):
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            col = pos + len(text[pos:]) - len(text[pos:].lstrip()) + 1
            raise ParseError(f"unexpected character {text[col - 1]!r}", col)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    tokens.append(("end", "", len(text) + 1))
    return tokens


# ---------------------------------------------------------------------------
# nodes: each returns (value, grad, kink) from ``dual(X)``


class Node:
    def eval(self, X):
        return self.dual(X, False)[0]

    def vars(self):
        return set()


class Num(Node):
    def __init__(self, value):
        self.value = float(value)

    def dual(self, X, grad):
        n, d = X.shape
        v = np.full(n, self.value)
        return v, (np.zeros((n, d)) if grad else None), np.zeros(n, bool)

    def text(self):
        s = repr(self.value)
        return f"({s})" if self.value < 0 or s.startswith("-") else s


class Var(Node):
    def __init__(self, index, name):
        self.index = index
        self.name = name

    def dual(self, X, grad):
        n, d = X.shape
        if self.index >= d:
            raise EvaluationError(f"variable {self.name} needs dimension > {self.index}, got {d}")
        g = None
        if grad:
            g = np.zeros((n, d))
            g[:, self.index] = 1.0
        return X[:, self.index].copy(), g, np.zeros(n, bool)

    def vars(self):
        return {self.index}

    def text(self):
        return self.name


class Neg(Node):
    def __init__(self, a):
        self.a = a

    def dual(self, X, grad):
        v, g, k = self.a.dual(X, grad)
        return -v, (-g if grad else None), k

    def vars(self):
        return self.a.vars()

    def text(self):
        return f"(-{self.a.text()})"


class Bin(Node):
    def __init__(self, op, a, b, col=0):
        self.op = op
        self.a = a
        self.b = b
        self.col = col

    def vars(self):
        return self.a.vars() | self.b.vars()

    def dual(self, X, grad):
        va, ga, ka = self.a.dual(X, grad)
        vb, gb, kb = self.b.dual(X, grad)
        k = ka | kb
        op = self.op
        g = None
        if op == "+":
            v = va + vb
            if grad:
                g = ga + gb
        elif op == "-":
            v = va - vb
            if grad:
                g = ga - gb
        elif op == "*":
            v = va * vb
            if grad:
                g = ga * vb[:, None] + gb * va[:, None]
        else:
            zero = vb == 0.0
            if np.any(zero):
                x = X[np.argmax(zero)]
                pt = ", ".join(f"{c:.17g}" for c in x)
                raise EvaluationError(f"division by zero at x = ({pt}) for '/' at column {self.col}")
            v = va / vb
            if grad:
                g = (ga * vb[:, None] - gb * va[:, None]) / (vb * vb)[:, None]
        return v, g, k

    def text(self):
        return f"({self.a.text()} {self.op} {self.b.text()})"


class Call(Node):
    def __init__(self, fn, args):
        self.fn = fn
        self.args = args

    def vars(self):
        out = set()
        for a in self.args:
            out |= a.vars()
        return out

    def dual(self, X, grad):
        fn = self.fn
        if fn in ("min", "max"):
            va, ga, ka = self.args[0].dual(X, grad)
            vb, gb, kb = self.args[1].dual(X, grad)
            tie = va == vb
            if fn == "max":
                v = np.maximum(va, vb)
                pick_a = va > vb
            else:
                v = np.minimum(va, vb)
                pick_a = va < vb
            g = None
            if grad:
                g = np.where(pick_a[:, None], ga, gb)
                if np.any(tie):
                    # one-sided from the positive first axis: the branch that
                    # wins just to the right of the tie
                    sa, sb = ga[tie, 0], gb[tie, 0]
                    if fn == "max":
                        use_a = sa >= sb
                    else:
                        use_a = sa <= sb
                    g[tie] = np.where(use_a[:, None], ga[tie], gb[tie])
            return v, g, ka | kb | tie
        va, ga, k = self.args[0].dual(X, grad)
        g = None
        if fn == "sin":
            v = np.sin(va)
            if grad:
                g = ga * np.cos(va)[:, None]
        elif fn == "cos":
            v = np.cos(va)
            if grad:
                g = -ga * np.sin(va)[:, None]
        elif fn == "exp":
            v = np.exp(va)
            if grad:
                g = ga * v[:, None]
        else:  # abs
            v = np.abs(va)
            zero = va == 0.0
            if grad:
                sign = np.where(va < 0.0, -1.0, 1.0)
                if np.any(zero):
                    sign[zero] = np.where(ga[zero, 0] < 0.0, -1.0, 1.0)
                g = ga * sign[:, None]
            k = k | zero
        return v, g, k

    def text(self):
        return f"{self.fn}({', '.join(a.text() for a in self.args)})"


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, col = self.take()
        if val != value:
            got = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {value!r}, got {got}", col)

    def parse(self):
        node = self.expr()
        kind, val, col = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {val!r}", col)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, col = self.take()
            node = Bin(op, node, self.term(), col)
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, col = self.take()
            node = Bin(op, node, self.factor(), col)
        return node

    def factor(self):
        kind, val, col = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "op" and val == "-":
            return Neg(self.factor())
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if val in _VARS:
                return Var(_VARS[val], val)
            if val in FUNCS:
                self.expect("(")
                args = [self.expr()]
                if FUNCS[val] == 2:
                    self.expect(",")
                    args.append(self.expr())
                self.expect(")")
                return Call(val, args)
            raise ParseError(f"unknown name {val!r}", col)
        got = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"unexpected {got}", col)


def parse_expr(text):
    """Parse one scalar expression into a node tree."""
    return _Parser(text).parse()


class MapExpr:
    """A map R^d -> R^D given by one expression tree per output component."""

    def __init__(self, components, d):
        comps = [parse_expr(c) if isinstance(c, str) else c for c in components]
        if not comps:
            raise ValueError("a map needs at least one component")
        self.components = comps
        self.d = int(d)
        if self.d < 1:
            raise ValueError("dimension must be positive")
        used = set().union(*(c.vars() for c in comps))
        if used and max(used) >= self.d:
            raise ValueError(f"expression uses variable index {max(used) + 1} beyond dimension {self.d}")

    @classmethod
    def parse(cls, texts, d):
        if isinstance(texts, str):
            texts = [texts]
        return cls([parse_expr(t) for t in texts], d)

    @classmethod
    def constant(cls, value, d, D=1):
        return cls([Num(value)] * D, d)

    @property
    def D(self):
        return len(self.components)

    def texts(self):
        return [c.text() for c in self.components]

    def to_text(self):
        return "; ".join(self.texts())

    def __call__(self, x):
        X = np.asarray(x, float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        out = np.column_stack([c.eval(X) for c in self.components])
        return out[0] if single else out

    def scalar(self, x):
        """Values of the first component, shape (n,)."""
        X = np.atleast_2d(np.asarray(x, float))
        return self.components[0].eval(X)

    def jacobian(self, x):
        """Return ``(J, kink)`` with J of shape (n, D, d) (or (D, d) for one point)."""
        X = np.asarray(x, float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        rows = []
        kink = np.zeros(len(X), bool)
        for c in self.components:
            _, g, k = c.dual(X, True)
            rows.append(g)
            kink |= k
        J = np.stack(rows, axis=1)
        if single:
            return J[0], bool(kink[0])
        return J, kink

    def value_and_jacobian(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        vals, rows = [], []
        kink = np.zeros(len(X), bool)
        for c in self.components:
            v, g, k = c.dual(X, True)
            vals.append(v)
            rows.append(g)
            kink |= k
        return np.column_stack(vals), np.stack(rows, axis=1), kink

    def is_constant(self):
        return all(not c.vars() for c in self.components)

    # arithmetic used by property tests --------------------------------

    def _combine(self, other, op):
        if isinstance(other, MapExpr):
            if other.D != self.D or other.d != self.d:
                raise ValueError("maps must share dimensions")
            return MapExpr([Bin(op, a, b) for a, b in zip(self.components, other.components)], self.d)
        return MapExpr([Bin(op, a, Num(other)) for a in self.components], self.d)

    def __add__(self, other):
        return self._combine(other, "+")

    def __sub__(self, other):
        return self._combine(other, "-")

    def __mul__(self, other):
        if isinstance(other, MapExpr):
            return self._combine(other, "*")
        return MapExpr([Bin("*", Num(other), a) for a in self.components], self.d)

    __rmul__ = __mul__

    def __neg__(self):
        return MapExpr([Neg(a) for a in self.components], self.d)

    def __repr__(self):
        return f"MapExpr({self.to_text()!r}, d={self.d})"


def max_combine(f, g):
    """Pointwise maximum of two scalar maps."""
    if f.D != 1 or g.D != 1:
        raise ValueError("max_combine needs scalar maps")
    if f.d != g.d:
        raise ValueError("maps must share the input dimension")
    return MapExpr([Call("max", [f.components[0], g.components[0]])], f.d)
