"""Kernel expression language and compositional Gram matrices.

A kernel expression is a binary tree whose leaves are one-dimensional base
kernels tagged with the input coordinate they act on (``a`` for age, ``y``
for calendar year, ``c`` for birth cohort) and whose internal nodes are
``add`` or ``mul``.  The textual form is

    expr := leaf | ("add" | "mul") "(" expr "," expr ")"
    leaf := FAMILY "_" ("a" | "y" | "c") [ "(" number { "," number } ")" ]

for example ``add(mul(Min_a, M12_y), M52_c)``.

Amplitude coefficients ("scales") are not part of the tree.  They follow a
fixed layout: every child of an ``add`` node owns one positive scale, and a
tree whose root is not ``add`` gets one extra scale at the root.  The kernel
parameter vector is ``[scales..., leaf params in left-to-right leaf order]``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

COORDS = ("a", "y", "c")
COORD_INDEX = {"a": 0, "y": 1, "c": 2}
COORD_NAMES = {"a": "age", "y": "year", "c": "cohort"}

ALIASES = {"Exp": "M12", "Mat": "M52"}


@dataclass(frozen=True)
class Family:
    name: str
    param_names: tuple[str, ...]
    stationary: bool
    rough: bool
    restricted: bool  # member of the restricted search set

    @property
    def n_params(self) -> int:
        return len(self.param_names)


FAMILIES: dict[str, Family] = {
    f.name: f
    for f in (
        Family("M12", ("lengthscale",), True, True, True),
        Family("M32", ("lengthscale",), True, True, False),
        Family("M52", ("lengthscale",), True, False, True),
        Family("Chy", ("lengthscale",), True, False, False),
        Family("RBF", ("lengthscale",), True, False, True),
        Family("AR2", ("lengthscale", "period"), True, True, False),
        Family("Lin", ("sigma0",), False, False, True),
        Family("Min", ("t0",), False, True, True),
        Family("Meh", ("rho",), False, False, False),
    )
}

STATIONARY = frozenset(n for n, f in FAMILIES.items() if f.stationary)
NONSTATIONARY = frozenset(n for n, f in FAMILIES.items() if not f.stationary)
ROUGH = frozenset(n for n, f in FAMILIES.items() if f.rough)


class KernelError(ValueError):
    """Invalid kernel expression or parameter."""


class KernelSyntaxError(KernelError):
    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at position {pos}: {text[:pos]}>>>{text[pos:]}")
        self.text = text
        self.pos = pos


@dataclass(frozen=True)
class Leaf:
    family: str
    coord: str
    params: tuple[float, ...] | None = None

    def __post_init__(self):
        fam = ALIASES.get(self.family, self.family)
        if fam not in FAMILIES:
            raise KernelError(f"unknown kernel family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if self.coord not in COORD_INDEX:
            raise KernelError(f"unknown coordinate {self.coord!r}")
        if fam == "Lin" and self.coord != "y":
            raise KernelError("Lin is only available on the year coordinate (Lin_y)")
        if self.params is not None:
            params = tuple(float(p) for p in self.params)
            if len(params) != FAMILIES[fam].n_params:
                raise KernelError(
                    f"{fam} takes {FAMILIES[fam].n_params} parameter(s), got {len(params)}"
                )
            object.__setattr__(self, "params", params)

    @property
    def name(self) -> str:
        return f"{self.family}_{self.coord}"

    @property
    def info(self) -> Family:
        return FAMILIES[self.family]


@dataclass(frozen=True)
class Op:
    kind: str
    left: "Expr"
    right: "Expr"

    def __post_init__(self):
        if self.kind not in ("add", "mul"):
            raise KernelError(f"unknown operator {self.kind!r}")


Expr = Union[Leaf, Op]


# --------------------------------------------------------------------------
# traversal helpers
# --------------------------------------------------------------------------


def iter_nodes(expr: Expr) -> Iterator[Expr]:
    """Pre-order traversal."""
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Op):
            stack.append(node.right)
            stack.append(node.left)


def leaves(expr: Expr) -> list[Leaf]:
    return [n for n in iter_nodes(expr) if isinstance(n, Leaf)]


def length(expr: Expr) -> int:
    return sum(1 for _ in iter_nodes(expr))


def subtree(expr: Expr, index: int) -> Expr:
    """Return the node at pre-order position ``index``."""
    for i, node in enumerate(iter_nodes(expr)):
        if i == index:
            return node
    raise IndexError(f"node index {index} out of range")


def replace_subtree(expr: Expr, index: int, new: Expr) -> Expr:
    """Return a copy of ``expr`` with the pre-order node ``index`` replaced."""

    def rec(node: Expr, start: int) -> tuple[Expr, int]:
        # returns (new node, size of the original subtree)
        if start == index:
            return new, length(node)
        if isinstance(node, Leaf):
            return node, 1
        left, nl = rec(node.left, start + 1)
        right, nr = rec(node.right, start + 1 + nl)
        if left is node.left and right is node.right:
            return node, 1 + nl + nr
        return Op(node.kind, left, right), 1 + nl + nr

    if not 0 <= index < length(expr):
        raise IndexError(f"node index {index} out of range")
    return rec(expr, 0)[0]


def strip_params(expr: Expr) -> Expr:
    if isinstance(expr, Leaf):
        return expr if expr.params is None else Leaf(expr.family, expr.coord)
    return Op(expr.kind, strip_params(expr.left), strip_params(expr.right))


def bind_params(expr: Expr, kparams: Sequence[float]) -> Expr:
    """Attach leaf parameters from a kernel parameter vector to the tree."""
    layout = ScaleLayout.of(expr)
    values = list(np.asarray(kparams, dtype=float)[layout.n_scales:])
    if len(values) != layout.n_leaf_params:
        raise KernelError("parameter vector does not match expression layout")

    def rec(node: Expr) -> Expr:
        if isinstance(node, Leaf):
            k = node.info.n_params
            p = tuple(values[:k])
            del values[:k]
            return Leaf(node.family, node.coord, p)
        return Op(node.kind, rec(node.left), rec(node.right))

    return rec(expr)


# --------------------------------------------------------------------------
# scale layout
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleLayout:
    """Positions of the amplitude coefficients of an expression.

    ``slots`` lists ``(node_index, side)`` pairs in parameter order, where
    ``side`` is ``"L"``/``"R"`` for the children of an add node and
    ``"root"`` for the root coefficient of a non-additive root.
    """

    slots: tuple[tuple[int, str], ...]
    n_leaf_params: int

    @property
    def n_scales(self) -> int:
        return len(self.slots)

    @property
    def size(self) -> int:
        return self.n_scales + self.n_leaf_params

    @classmethod
    def of(cls, expr: Expr) -> "ScaleLayout":
        slots: list[tuple[int, str]] = []
        nodes = list(iter_nodes(expr))
        if not (isinstance(expr, Op) and expr.kind == "add"):
            slots.append((0, "root"))
        for i, node in enumerate(nodes):
            if isinstance(node, Op) and node.kind == "add":
                slots.append((i, "L"))
                slots.append((i, "R"))
        n_leaf = sum(n.info.n_params for n in nodes if isinstance(n, Leaf))
        return cls(tuple(slots), n_leaf)


def kernel_param_names(expr: Expr) -> list[str]:
    layout = ScaleLayout.of(expr)
    names = [f"scale[{i}]" for i in range(layout.n_scales)]
    for j, leaf in enumerate(leaves(expr)):
        names.extend(f"{leaf.name}#{j}.{p}" for p in leaf.info.param_names)
    return names


# --------------------------------------------------------------------------
# parsing and printing
# --------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z][A-Za-z0-9]*(?:_[A-Za-z]+)?)|(?P<punct>[(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise KernelSyntaxError("unexpected character", text, pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


def parse_kernel(text: str) -> Expr:
    """Parse the bracketed kernel DSL, e.g. ``add(mul(Min_a, M12_y), M52_c)``.

    Leaves may carry parameters, ``M52_a(1.11)`` or ``AR2_y(1.45, 0.26)``.
    ``Exp`` and ``Mat`` are accepted as aliases of ``M12`` and ``M52``.
    """
    tokens = _tokenize(text)
    pos = 0

    def peek():
        return tokens[pos]

    def expect(value: str):
        nonlocal pos
        kind, tok, at = tokens[pos]
        if tok != value:
            raise KernelSyntaxError(f"expected {value!r}, found {tok or 'end of input'!r}", text, at)
        pos += 1

    def parse_expr() -> Expr:
        nonlocal pos
        kind, tok, at = peek()
        if kind != "name":
            raise KernelSyntaxError(f"expected a kernel or operator, found {tok or 'end of input'!r}", text, at)
        pos += 1
        if tok in ("add", "mul"):
            expect("(")
            left = parse_expr()
            expect(",")
            right = parse_expr()
            expect(")")
            return Op(tok, left, right)
        fam, sep, coord = tok.partition("_")
        if not sep:
            raise KernelSyntaxError(f"leaf {tok!r} lacks a coordinate suffix", text, at)
        params = None
        if peek()[1] == "(":
            pos += 1
            params = []
            while True:
                k, t, a = peek()
                if k != "num":
                    raise KernelSyntaxError("expected a number", text, a)
                params.append(float(t))
                pos += 1
                if peek()[1] == ",":
                    pos += 1
                    continue
                expect(")")
                break
        try:
            return Leaf(fam, coord, tuple(params) if params is not None else None)
        except KernelError as exc:
            raise KernelSyntaxError(str(exc), text, at) from None

    expr = parse_expr()
    kind, tok, at = peek()
    if kind != "end":
        raise KernelSyntaxError(f"trailing input {tok!r}", text, at)
    return expr


def _num(x: float, digits: int) -> str:
    return f"{x:.{digits}g}"


def format_kernel(
    expr: Expr,
    scales: Sequence[float] | None = None,
    mode: str = "structural",
    digits: int = 4,
) -> str:
    """Render an expression.

    ``structural`` gives the bracketed DSL (parameters omitted), which
    :func:`parse_kernel` reads back.  ``fitted`` gives the sum-of-products
    form with coefficients, e.g. ``0.08·RBF_a(0.586)·M12_y(13.33) + 0.02·M52_c(0.079)``;
    it needs bound leaf parameters and the scale vector.
    """
    if mode == "structural":
        if isinstance(expr, Leaf):
            return expr.name
        return f"{expr.kind}({format_kernel(expr.left)}, {format_kernel(expr.right)})"
    if mode != "fitted":
        raise ValueError(f"unknown format mode {mode!r}")
    layout = ScaleLayout.of(expr)
    if scales is None or len(scales) != layout.n_scales:
        raise KernelError("fitted format requires one scale per layout slot")
    if any(leaf.params is None for leaf in leaves(expr)):
        raise KernelError("fitted format requires bound leaf parameters")
    slot_value = {slot: float(s) for slot, s in zip(layout.slots, scales)}
    index = {id(n): i for i, n in enumerate(iter_nodes(expr))}

    def leaf_text(leaf: Leaf) -> str:
        return f"{leaf.name}({', '.join(_num(p, digits) for p in leaf.params)})"

    def rec(node: Expr, nested: bool) -> str:
        if isinstance(node, Leaf):
            return leaf_text(node)
        if node.kind == "mul":
            return f"{rec(node.left, True)}·{rec(node.right, True)}"
        i = index[id(node)]
        text = (
            f"{_num(slot_value[(i, 'L')], digits)}·{rec(node.left, False)}"
            f" + {_num(slot_value[(i, 'R')], digits)}·{rec(node.right, False)}"
        )
        return f"[{text}]" if nested else text

    body = rec(expr, False)
    if (0, "root") in slot_value:
        body = f"{_num(slot_value[(0, 'root')], digits)}·{rec(expr, True)}"
    return body


def canonical_form(expr: Expr) -> str:
    """Order- and association-invariant key (parameters ignored)."""
    if isinstance(expr, Leaf):
        return expr.name

    def operands(node: Expr, kind: str) -> list[str]:
        if isinstance(node, Op) and node.kind == kind:
            return operands(node.left, kind) + operands(node.right, kind)
        return [canonical_form(node)]

    parts = sorted(operands(expr, expr.kind))
    return f"{expr.kind}({','.join(parts)})"


# --------------------------------------------------------------------------
# structural statistics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExprStats:
    length: int
    n_leaves: int
    n_additive_components: int
    coord_counts: dict[str, int]
    has_nonstationary: bool
    rough_by_coordinate: dict[str, bool]
    n_kernel_hyperparams: int


def additive_components(expr: Expr) -> int:
    if isinstance(expr, Leaf):
        return 1
    left, right = additive_components(expr.left), additive_components(expr.right)
    return left + right if expr.kind == "add" else left * right


def expr_stats(expr: Expr) -> ExprStats:
    lv = leaves(expr)
    counts = {c: sum(1 for leaf in lv if leaf.coord == c) for c in COORDS}
    rough = {c: any(leaf.coord == c and leaf.family in ROUGH for leaf in lv) for c in COORDS}
    return ExprStats(
        length=length(expr),
        n_leaves=len(lv),
        n_additive_components=additive_components(expr),
        coord_counts=counts,
        has_nonstationary=any(leaf.family in NONSTATIONARY for leaf in lv),
        rough_by_coordinate=rough,
        n_kernel_hyperparams=ScaleLayout.of(expr).size,
    )


# --------------------------------------------------------------------------
# base covariance functions
# --------------------------------------------------------------------------

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)


def check_params(family: str, params: Sequence[float]) -> None:
    fam = FAMILIES[family]
    if len(params) != fam.n_params:
        raise KernelError(f"{family} takes {fam.n_params} parameter(s)")
    if family == "Meh":
        if not 0.0 < params[0] < 1.0:
            raise KernelError(f"Mehler rho must lie in (0, 1), got {params[0]}")
    elif any(not p > 0 for p in params):
        raise KernelError(f"{family} parameters must be positive, got {tuple(params)}")


def family_cov(family: str, params: Sequence[float], u, v, grad: bool = False):
    """Evaluate a base kernel on broadcast arrays ``u`` and ``v``.

    Returns ``k`` or ``(k, [dk/dparam, ...])`` with derivatives taken with
    respect to the natural (constrained) parameters.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if family in ("M12", "M32", "M52", "Chy", "RBF", "AR2"):
        r = np.abs(u - v)
        ell = params[0]
        if family == "M12":
            k = np.exp(-r / ell)
            return (k, [k * r / ell**2]) if grad else k
        if family == "M32":
            a = _SQRT3 * r / ell
            e = np.exp(-a)
            k = (1.0 + a) * e
            return (k, [a * a * e / ell]) if grad else k
        if family == "M52":
            a = _SQRT5 * r / ell
            e = np.exp(-a)
            k = (1.0 + a + a * a / 3.0) * e
            return (k, [a * a * (1.0 + a) * e / (3.0 * ell)]) if grad else k
        if family == "Chy":
            k = 1.0 / (1.0 + (r / ell) ** 2)
            return (k, [2.0 * k * k * r * r / ell**3]) if grad else k
        if family == "RBF":
            k = np.exp(-0.5 * (r / ell) ** 2)
            return (k, [k * r * r / ell**3]) if grad else k
        # AR2, normalised to unit variance at zero lag
        period = params[1]
        w = math.pi / period
        e = np.exp(-r / ell)
        wr = w * r
        c, s = np.cos(wr), np.sin(wr)
        sin_over_w = r * np.sinc(wr / math.pi)  # sin(w r)/w, finite as w -> 0
        k = e * (c + sin_over_w / ell)
        if not grad:
            return k
        dk_dell = r / ell**2 * k - e * sin_over_w / ell**2
        # (w r cos(w r) - sin(w r)) / w^2, with a series branch for small w r
        small = np.abs(wr) < 1e-4
        safe_w2 = w * w if w != 0 else 1.0
        g = np.where(small, -w * r**3 / 3.0, (wr * c - s) / safe_w2)
        dk_dw = e * (-r * s + g / ell)
        dk_dp = dk_dw * (-w / period)
        return k, [dk_dell, dk_dp]
    if family == "Lin":
        s0 = params[0]
        k = s0 * s0 + u * v
        return (k, [np.full(np.broadcast(u, v).shape, 2.0 * s0)]) if grad else k
    if family == "Min":
        t0 = params[0]
        k = t0 * t0 + np.minimum(u, v)
        return (k, [np.full(np.broadcast(u, v).shape, 2.0 * t0)]) if grad else k
    if family == "Meh":
        rho = params[0]
        ssum = u * u + v * v
        prod = u * v
        num = rho * rho * ssum - 2.0 * rho * prod
        den = 2.0 * (1.0 - rho * rho)
        k = np.exp(-num / den)
        if not grad:
            return k
        dnum = 2.0 * rho * ssum - 2.0 * prod
        dden = -4.0 * rho
        df = (dnum * den - num * dden) / den**2
        return k, [-k * df]
    raise KernelError(f"unknown kernel family {family!r}")


def base_cov(kernel: Leaf, u: float, v: float) -> tuple[float, np.ndarray]:
    """Scalar covariance of a bound leaf and its parameter gradient."""
    if kernel.params is None:
        raise KernelError(f"{kernel.name} has no bound parameters")
    check_params(kernel.family, kernel.params)
    k, g = family_cov(kernel.family, kernel.params, u, v, grad=True)
    return float(k), np.array([float(x) for x in g])


# --------------------------------------------------------------------------
# Gram matrices
# --------------------------------------------------------------------------


class PairIndex:
    """Per-coordinate unique values of two input sets.

    Leaf kernels are evaluated on the (small) grid of unique coordinate values
    and expanded to the full matrix by indexing.
    """

    def __init__(self, X1: np.ndarray, X2: np.ndarray | None = None):
        X1 = np.atleast_2d(np.asarray(X1, dtype=float))
        self.symmetric = X2 is None
        X2 = X1 if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
        if X1.shape[1] != 3 or X2.shape[1] != 3:
            raise ValueError("inputs must have three columns (age, year, cohort)")
        self.shape = (X1.shape[0], X2.shape[0])
        self._coords = {}
        for c, j in COORD_INDEX.items():
            u, iu = np.unique(X1[:, j], return_inverse=True)
            v, iv = np.unique(X2[:, j], return_inverse=True)
            flat = (iu.reshape(-1, 1) * len(v) + iv.reshape(1, -1)).ravel()
            self._coords[c] = (u, v, flat)

    def grid(self, coord: str):
        u, v, _ = self._coords[coord]
        return u[:, None], v[None, :]

    def expand(self, coord: str, small: np.ndarray) -> np.ndarray:
        _, _, flat = self._coords[coord]
        return small.take(flat).reshape(self.shape)

    def reduce(self, coord: str, G: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`expand`: sum full-matrix entries into the grid."""
        u, v, flat = self._coords[coord]
        return np.bincount(flat, weights=G.ravel(), minlength=len(u) * len(v)).reshape(len(u), len(v))


class CompiledKernel:
    """An expression prepared for repeated Gram evaluation.

    ``value`` computes the Gram matrix for a kernel parameter vector and keeps
    per-node intermediates so that ``vjp`` can return
    ``sum(G * dK/dtheta_j)`` for every parameter in one reverse sweep.
    """

    def __init__(self, expr: Expr):
        self.expr = expr
        self.layout = ScaleLayout.of(expr)
        self.nodes = list(iter_nodes(expr))
        self._children: dict[int, tuple[int, int]] = {}
        self._leaf_offset: dict[int, int] = {}
        self._slot_of = {slot: j for j, slot in enumerate(self.layout.slots)}
        offset = self.layout.n_scales

        def assign(i: int) -> int:
            # returns index following the subtree rooted at i
            nonlocal offset
            node = self.nodes[i]
            if isinstance(node, Leaf):
                self._leaf_offset[i] = offset
                offset += node.info.n_params
                return i + 1
            left = i + 1
            right = assign(left)
            self._children[i] = (left, right)
            return assign(right)

        assign(0)
        self._cache: list | None = None

    @property
    def n_params(self) -> int:
        return self.layout.size

    def _leaf_params(self, i: int, theta: np.ndarray) -> tuple[float, ...]:
        node = self.nodes[i]
        off = self._leaf_offset[i]
        return tuple(theta[off:off + node.info.n_params])

    def value(self, theta: Sequence[float], pairs: PairIndex) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise KernelError(
                f"expected {self.n_params} kernel parameters, got {theta.shape[0] if theta.ndim else 0}"
            )
        cache: list = [None] * len(self.nodes)

        def rec(i: int) -> np.ndarray:
            node = self.nodes[i]
            if isinstance(node, Leaf):
                p = self._leaf_params(i, theta)
                u, v = pairs.grid(node.coord)
                K = pairs.expand(node.coord, family_cov(node.family, p, u, v))
            else:
                li, ri = self._children[i]
                KL, KR = rec(li), rec(ri)
                if node.kind == "mul":
                    K = KL * KR
                else:
                    K = theta[self._slot_of[(i, "L")]] * KL + theta[self._slot_of[(i, "R")]] * KR
            cache[i] = K
            return K

        K = rec(0)
        if (0, "root") in self._slot_of:
            K = theta[self._slot_of[(0, "root")]] * K
        self._cache = [theta, pairs, cache]
        return K

    def vjp(self, G: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(G * K(theta))`` w.r.t. theta at the last ``value`` call."""
        if self._cache is None:
            raise RuntimeError("value() must be called before vjp()")
        theta, pairs, cache = self._cache
        out = np.zeros(self.n_params)
        if (0, "root") in self._slot_of:
            j = self._slot_of[(0, "root")]
            out[j] = np.vdot(G, cache[0])
            G = theta[j] * G

        def rec(i: int, Gi: np.ndarray) -> None:
            node = self.nodes[i]
            if isinstance(node, Leaf):
                p = self._leaf_params(i, theta)
                u, v = pairs.grid(node.coord)
                _, dks = family_cov(node.family, p, u, v, grad=True)
                Gs = pairs.reduce(node.coord, Gi)
                off = self._leaf_offset[i]
                for k, dk in enumerate(dks):
                    out[off + k] = np.vdot(Gs, np.broadcast_to(dk, Gs.shape))
                return
            li, ri = self._children[i]
            if node.kind == "mul":
                rec(li, Gi * cache[ri])
                rec(ri, Gi * cache[li])
            else:
                jl, jr = self._slot_of[(i, "L")], self._slot_of[(i, "R")]
                out[jl] = np.vdot(Gi, cache[li])
                out[jr] = np.vdot(Gi, cache[ri])
                rec(li, theta[jl] * Gi)
                rec(ri, theta[jr] * Gi)

        rec(0, G)
        return out

    def jacobian(self, theta: Sequence[float], pairs: PairIndex) -> tuple[np.ndarray, list[np.ndarray]]:
        """Gram matrix and one derivative matrix per parameter (forward mode)."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise KernelError(f"expected {self.n_params} kernel parameters")
        zeros = np.zeros(pairs.shape)

        def rec(i: int) -> tuple[np.ndarray, dict[int, np.ndarray]]:
            node = self.nodes[i]
            if isinstance(node, Leaf):
                p = self._leaf_params(i, theta)
                u, v = pairs.grid(node.coord)
                k, dks = family_cov(node.family, p, u, v, grad=True)
                off = self._leaf_offset[i]
                d = {
                    off + j: pairs.expand(node.coord, np.broadcast_to(dk, k.shape).copy())
                    for j, dk in enumerate(dks)
                }
                return pairs.expand(node.coord, k), d
            li, ri = self._children[i]
            KL, dL = rec(li)
            KR, dR = rec(ri)
            if node.kind == "mul":
                d = {j: m * KR for j, m in dL.items()}
                d.update({j: KL * m for j, m in dR.items()})
                return KL * KR, d
            jl, jr = self._slot_of[(i, "L")], self._slot_of[(i, "R")]
            d = {j: theta[jl] * m for j, m in dL.items()}
            d.update({j: theta[jr] * m for j, m in dR.items()})
            d[jl] = KL
            d[jr] = KR
            return theta[jl] * KL + theta[jr] * KR, d

        K, d = rec(0)
        if (0, "root") in self._slot_of:
            j = self._slot_of[(0, "root")]
            s = theta[j]
            d = {k: s * m for k, m in d.items()}
            d[j] = K
            K = s * K
        return K, [d.get(j, zeros) for j in range(self.n_params)]


def gram(expr: Expr, kparams: Sequence[float], X1, X2=None, grad: bool = False):
    """Gram matrix of ``expr`` between input sets (rows of scaled (a, y, c)).

    With ``grad=True`` also returns the list of derivative matrices, one per
    kernel parameter, in layout order.
    """
    ck = CompiledKernel(expr)
    pairs = PairIndex(X1, X2)
    if grad:
        return ck.jacobian(kparams, pairs)
    return ck.value(kparams, pairs)


def kernel_diag(expr: Expr, kparams: Sequence[float], X) -> np.ndarray:
    """Prior variance k(x, x) at each row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    theta = np.asarray(kparams, dtype=float)
    ck = CompiledKernel(expr)
    if theta.shape != (ck.n_params,):
        raise KernelError(f"expected {ck.n_params} kernel parameters")

    def rec(i: int) -> np.ndarray:
        node = ck.nodes[i]
        if isinstance(node, Leaf):
            x = X[:, COORD_INDEX[node.coord]]
            return np.broadcast_to(family_cov(node.family, ck._leaf_params(i, theta), x, x), x.shape)
        li, ri = ck._children[i]
        if node.kind == "mul":
            return rec(li) * rec(ri)
        return theta[ck._slot_of[(i, "L")]] * rec(li) + theta[ck._slot_of[(i, "R")]] * rec(ri)

    d = rec(0)
    if (0, "root") in ck._slot_of:
        d = theta[ck._slot_of[(0, "root")]] * d
    return np.array(d, dtype=float)


# --------------------------------------------------------------------------
# time-series parameter maps
# --------------------------------------------------------------------------


def ar_mappings(lengthscale: float, period: float | None = None, span: float = 1.0) -> dict[str, float]:
    """Discrete-time autoregressive parameters implied by M12 or AR2 kernels.

    ``lengthscale`` (and ``period``) live on the scaled axis; ``span`` is the
    width of the original axis, so one unit step of the original axis is
    ``1/span`` on the scaled one.  Pass ``span=1`` to work on the raw scale.
    """
    if span <= 0:
        raise ValueError("span must be positive")
    if lengthscale <= 0:
        raise ValueError("lengthscale must be positive")
    ell = lengthscale * span
    if period is None:
        return {"phi": math.exp(-1.0 / ell)}
    p = period * span
    phi2 = -math.exp(-2.0 / ell)
    phi1 = 2.0 * math.cos(math.pi / p) * math.sqrt(-phi2)
    return {"phi1": phi1, "phi2": phi2}
