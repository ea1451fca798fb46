"""Pyramid layouts, quantile placement, interpolation and induced CDFs.

A layout is the tree of subintervals of [0, 1] (in quantile-level units)
that determines the order in which quantiles are generated. Each node is
a subinterval with address ``eps`` (the epsilon path of its left endpoint);
the quantiles specified inside it at level ``m = len(eps) + 1`` get the
addresses ``eps + (k,)`` for ``k = 1..K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

Address = tuple[int, ...]


def check_levels(levels: Sequence[float]) -> tuple[float, ...]:
    """Validate an ordered set of quantile levels and return it as a tuple."""
    arr = np.asarray(levels, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("at least one quantile level is required")
    if not np.all(np.isfinite(arr)) or arr.min() <= 0.0 or arr.max() >= 1.0:
        raise ValueError(f"quantile levels must lie strictly inside (0, 1): {arr.tolist()}")
    if np.any(np.diff(arr) <= 0.0):
        raise ValueError(f"quantile levels must be strictly increasing: {arr.tolist()}")
    return tuple(float(t) for t in arr)


@dataclass(frozen=True)
class Node:
    """A subinterval of the pyramid.

    ``left`` and ``right`` are the quantile levels of the endpoints;
    ``interior`` holds the K levels specified inside the node at ``level``.
    ``children`` has K + 1 entries when K >= 1, else it is empty.
    """

    address: Address
    left: float
    right: float
    interior: tuple[float, ...] = ()
    children: tuple["Node", ...] = ()

    @property
    def level(self) -> int:
        return len(self.address) + 1

    @property
    def K(self) -> int:
        return len(self.interior)

    def path(self) -> str:
        return "root" if not self.address else "/".join(str(e) for e in self.address)


@dataclass(frozen=True)
class QuantileSpec:
    """Where a single specified quantile level sits in the pyramid.

    ``index`` is the position of ``tau`` among the sorted levels. ``left_index``
    and ``right_index`` point into the padded level vector ``(0, tau_1..tau_T, 1)``
    and give the endpoints used by the stick-breaking (beta) construction:
    the previous sibling (or the node's left endpoint) and the node's right
    endpoint.
    """

    index: int
    tau: float
    address: Address
    level: int
    k: int
    node: Address
    left_index: int
    right_index: int


@dataclass(frozen=True)
class PyramidLayout:
    levels: tuple[float, ...]
    root: Node
    specs: tuple[QuantileSpec, ...] = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.levels)

    @property
    def depth(self) -> int:
        return max(s.level for s in self.specs)

    def nodes(self) -> Iterator[Node]:
        """All nodes, top-down (by level) and left to right within a level."""
        frontier = [self.root]
        while frontier:
            yield from frontier
            frontier = [c for n in frontier for c in n.children]

    def split_nodes(self) -> Iterator[Node]:
        return (n for n in self.nodes() if n.K > 0)

    def node(self, address: Address) -> Node:
        for n in self.nodes():
            if n.address == tuple(address):
                return n
        raise KeyError(f"no node at address {address!r}")

    def order(self) -> list[int]:
        """Level indices in top-down sweep order."""
        return [s.index for s in sorted(self.specs, key=lambda s: (s.level, s.tau))]

    def to_text(self) -> str:
        """Serialize as ``path | level | left right | interior levels`` lines."""
        lines = []
        for n in self.nodes():
            inner = " ".join(repr(t) for t in n.interior) or "-"
            lines.append(f"{n.path()} | {n.level} | {n.left!r} {n.right!r} | {inner}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PyramidLayout":
        split: dict[Address, tuple[float, ...]] = {}
        levels: list[float] = []
        for line in text.strip().splitlines():
            path, _, _, inner = (p.strip() for p in line.split("|"))
            addr = () if path == "root" else tuple(int(e) for e in path.split("/"))
            taus = () if inner == "-" else tuple(float(t) for t in inner.split())
            split[addr] = taus
            levels.extend(taus)
        return build_general_layout(sorted(levels), split)


def _assemble(levels: tuple[float, ...], root: Node) -> PyramidLayout:
    index = {t: i for i, t in enumerate(levels)}
    specs: list[QuantileSpec] = []
    seen: set[float] = set()
    frontier = [root]
    while frontier:
        for n in frontier:
            right = len(levels) + 1 if n.right == 1.0 else index[n.right] + 1
            prev = 0 if n.left == 0.0 else index[n.left] + 1
            for k, t in enumerate(n.interior, start=1):
                if t in seen:
                    raise ValueError(f"level {t} assigned twice (node {n.path()})")
                seen.add(t)
                specs.append(QuantileSpec(index[t], t, n.address + (k,), n.level, k,
                                          n.address, prev, right))
                prev = index[t] + 1
        frontier = [c for n in frontier for c in n.children]
    missing = set(levels) - seen
    if missing:
        raise ValueError(f"levels never placed in the pyramid: {sorted(missing)}")
    specs.sort(key=lambda s: s.index)
    return PyramidLayout(levels, root, tuple(specs))


def _oblique_pivot(contained: Sequence[float]) -> float:
    # even count: the smaller of the two central levels
    return contained[(len(contained) - 1) // 2]


def _build(address: Address, left: float, right: float, contained: list[float],
           choose) -> Node:
    if not contained:
        return Node(address, left, right)
    interior = tuple(choose(address, left, right, contained))
    edges = (left,) + interior + (right,)
    children = []
    for j in range(len(edges) - 1):
        lo, hi = edges[j], edges[j + 1]
        sub = [t for t in contained if lo < t < hi]
        children.append(_build(address + (j,), lo, hi, sub, choose))
    return Node(address, left, right, interior, tuple(children))


def build_oblique_layout(levels: Sequence[float]) -> PyramidLayout:
    """Binary layout: every node specifies the central level it contains.

    >>> build_oblique_layout([0.25, 0.5, 0.75]).root.interior
    (0.5,)
    """
    lv = check_levels(levels)
    root = _build((), 0.0, 1.0, list(lv), lambda a, l, r, c: [_oblique_pivot(c)])
    return _assemble(lv, root)


def build_general_layout(levels: Sequence[float],
                         split_spec: Mapping[Address, Sequence[float]]) -> PyramidLayout:
    """Layout where ``split_spec[address]`` lists the levels specified at that node.

    Nodes that contain levels but are missing from ``split_spec`` specify all
    of their contained levels at once.
    """
    lv = check_levels(levels)
    spec = {tuple(k): tuple(float(t) for t in v) for k, v in split_spec.items()}
    used: set[Address] = set()

    def choose(address, left, right, contained):
        if address not in spec:
            return contained
        used.add(address)
        chosen = sorted(spec[address])
        path = "root" if not address else "/".join(map(str, address))
        for t in chosen:
            if not left < t < right:
                raise ValueError(f"node {path}: level {t} outside its endpoint range "
                                 f"({left}, {right})")
            if t not in contained:
                raise ValueError(f"node {path}: level {t} is not an unplaced level "
                                 f"of this subinterval")
        if not chosen:
            raise ValueError(f"node {path}: contains levels but specifies none")
        return chosen

    root = _build((), 0.0, 1.0, list(lv), choose)
    unknown = [a for a in spec if a not in used and spec[a]]
    if unknown:
        raise ValueError(f"split_spec addresses not reachable in the pyramid: {unknown}")
    return _assemble(lv, root)


def scaled_levels(node: Node) -> np.ndarray:
    """Interior levels rescaled to the node's endpoint interval."""
    if node.K == 0:
        raise ValueError(f"node {node.path()} has no interior levels")
    width = node.right - node.left
    if width <= 0.0:
        raise ValueError(f"node {node.path()} has zero-width endpoint interval")
    return (np.asarray(node.interior) - node.left) / width


def place_quantiles(left, right, v) -> np.ndarray:
    """Quantiles inside ``(left, right)`` split by the simplex vector ``v``.

    ``v`` has K + 1 rows (components); trailing axes broadcast against
    ``left`` and ``right`` (e.g. one column per covariate site). Returns
    the K new quantiles ``left + (right - left) * cumsum(v)[:K]``.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[0] < 2:
        raise ValueError("simplex vector needs at least two components")
    if np.any(v <= 0.0) or np.any(v >= 1.0) or not np.allclose(v.sum(axis=0), 1.0,
                                                               atol=1e-10, rtol=0):
        raise ValueError("v must lie in the open simplex")
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if np.any(left >= right):
        raise ValueError("left endpoint must be below right endpoint")
    c = np.cumsum(v[:-1], axis=0)
    return left * (1.0 - c) + right * c


@dataclass(frozen=True)
class QuantileGrid:
    """Quantiles of one conditional distribution at the specified levels.

    A ``"real"`` grid carries the trend/scale (``mu``, ``sigma``) needed to
    interpolate through the uniform scale.
    """

    levels: tuple[float, ...]
    values: np.ndarray
    scale: str = "uniform"
    mu: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "levels", check_levels(self.levels))
        object.__setattr__(self, "values", vals)
        if vals.shape != (len(self.levels),):
            raise ValueError("one value per level is required")
        if np.any(np.diff(vals) <= 0.0):
            raise ValueError("quantile grid is crossing (values not strictly increasing)")
        if self.scale == "uniform":
            if vals[0] <= 0.0 or vals[-1] >= 1.0:
                raise ValueError("uniform-scale quantiles must lie in (0, 1)")
        elif self.scale != "real":
            raise ValueError(f"unknown scale {self.scale!r}")

    def uniform_values(self) -> np.ndarray:
        if self.scale == "uniform":
            return self.values
        if self.mu is None or self.sigma is None:
            raise ValueError("real-scale grid needs mu and sigma")
        return ndtr((self.values - self.mu) / self.sigma)


def interpolate(grid: QuantileGrid, tau):
    """Linearly interpolated quantile function, anchored at Q(0)=0 and Q(1)=1."""
    t = np.asarray(tau, dtype=float)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise ValueError("tau must lie strictly inside (0, 1)")
    knots = np.concatenate(([0.0], grid.levels, [1.0]))
    out = np.interp(t, knots, np.concatenate(([0.0], grid.uniform_values(), [1.0])))
    if grid.scale == "real":
        out = grid.mu + grid.sigma * ndtri(out)
        # exact knot values, not a ndtr/ndtri round trip
        levels = np.asarray(grid.levels)
        idx = np.clip(np.searchsorted(levels, t), 0, levels.size - 1)
        out = np.where(levels[idx] == t, grid.values[idx], out)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PiecewiseCdf:
    """Continuous piecewise-linear distribution function supported on [0, 1]."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.breakpoints, dtype=float)
        f = np.asarray(self.values, dtype=float)
        if x.shape != f.shape or x.size < 2:
            raise ValueError("breakpoints and values must have equal length >= 2")
        if np.any(np.diff(x) <= 0.0) or np.any(np.diff(f) < 0.0):
            raise ValueError("CDF breakpoints must increase and values be non-decreasing")
        if x[0] != 0.0 or x[-1] != 1.0 or f[0] != 0.0 or f[-1] != 1.0:
            raise ValueError("CDF must run from F(0)=0 to F(1)=1")
        object.__setattr__(self, "breakpoints", x)
        object.__setattr__(self, "values", f)

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.breakpoints)

    def __call__(self, y):
        out = np.interp(y, self.breakpoints, self.values, left=0.0, right=1.0)
        return float(out) if np.ndim(out) == 0 else out


def induced_cdf(grid: QuantileGrid) -> PiecewiseCdf:
    if grid.scale != "uniform":
        raise ValueError("induced_cdf needs a uniform-scale grid")
    x = np.concatenate(([0.0], grid.values, [1.0]))
    f = np.concatenate(([0.0], grid.levels, [1.0]))
    return PiecewiseCdf(x, f)


def _levy_feasible(f: PiecewiseCdf, g: PiecewiseCdf, eps: float, slack: float) -> bool:
    # both constraints are piecewise linear in y with kinks at these points
    ys = np.concatenate((g.breakpoints, f.breakpoints + eps, f.breakpoints - eps))
    gy = g(ys)
    lower = f(ys - eps) - eps
    upper = f(ys + eps) + eps
    return bool(np.all(lower <= gy + slack) and np.all(gy <= upper + slack))


def levy_distance(f: PiecewiseCdf, g: PiecewiseCdf, tol: float = 1e-9) -> float:
    """Lévy distance between two piecewise-linear CDFs by bisection on eps."""
    slack = 1e-14
    if _levy_feasible(f, g, 0.0, slack):
        return 0.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _levy_feasible(f, g, mid, slack):
            hi = mid
        else:
            lo = mid
    return hi


def max_level_gap(levels: Sequence[float]) -> float:
    knots = np.concatenate(([0.0], np.asarray(levels, dtype=float), [1.0]))
    return float(np.max(np.diff(knots)))


def _refine(rng: np.random.Generator, x: np.ndarray, f: np.ndarray, extra: int):
    """Insert random monotone breakpoints between consecutive knots of (x, f)."""
    xs, fs = [x[:1]], [f[:1]]
    for i in range(x.size - 1):
        k = rng.integers(0, extra + 1)
        if k:
            xi = np.sort(rng.uniform(x[i], x[i + 1], k))
            fi = np.sort(rng.uniform(f[i], f[i + 1], k))
            keep = (xi > x[i]) & (xi < x[i + 1]) & np.concatenate(([True], np.diff(xi) > 0))
            xs.append(xi[keep])
            fs.append(fi[keep])
        xs.append(x[i + 1:i + 2])
        fs.append(f[i + 1:i + 2])
    return np.concatenate(xs), np.concatenate(fs)


def _corner(x: np.ndarray, f: np.ndarray, early: bool, shrink: float = 1e-3):
    """Put almost all mass of each piece at its left (``early``) or right end."""
    xs, fs = [x[:1]], [f[:1]]
    for i in range(x.size - 1):
        dx = shrink * (x[i + 1] - x[i])
        df = shrink * (f[i + 1] - f[i])
        if early:
            xs.append([x[i] + dx])
            fs.append([f[i + 1] - df])
        else:
            xs.append([x[i + 1] - dx])
            fs.append([f[i] + df])
        xs.append(x[i + 1:i + 2])
        fs.append(f[i + 1:i + 2])
    return np.concatenate(xs), np.concatenate(fs)


def random_cdf_pair(rng: np.random.Generator, n_levels: int, extra: int = 4,
                    adversarial: bool = False):
    """Two random CDFs on [0, 1] sharing quantiles at random levels.

    Returns ``(F, G, levels)``; F and G agree at the shared quantile points and
    differ arbitrarily (but monotonically) between them. ``adversarial`` pushes
    F's mass to the left end of every gap and G's to the right end.
    """
    levels = np.sort(rng.uniform(0.0, 1.0, n_levels))
    while np.any(np.diff(levels) <= 0) or levels[0] <= 0 or levels[-1] >= 1:
        levels = np.sort(rng.uniform(0.0, 1.0, n_levels))
    q = np.sort(rng.uniform(0.0, 1.0, n_levels))
    x = np.concatenate(([0.0], q, [1.0]))
    f = np.concatenate(([0.0], levels, [1.0]))
    if adversarial:
        F = PiecewiseCdf(*_corner(x, f, early=True))
        G = PiecewiseCdf(*_corner(x, f, early=False))
    else:
        F = PiecewiseCdf(*_refine(rng, x, f, extra))
        G = PiecewiseCdf(*_refine(rng, x, f, extra))
    return F, G, tuple(levels)
