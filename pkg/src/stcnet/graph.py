"""Skeleton trees and their directional (dilated) adjacency kernels.

A skeleton is a rooted tree. Edges are split by direction relative to the
root into centripetal (towards the root), identity and centrifugal (away
from the root) kernels. Dilated kernels reach nodes further away by taking
the difference of two binarized walk-count products.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import StructuralError

DIRECTIONS = ("cp", "id", "cf")


@dataclass(frozen=True)
class SkeletonGraph:
    """Rooted tree of ``num_nodes`` joints.

    ``edges`` may be given in any orientation; they are re-oriented as
    (parent, child) pairs with respect to ``root`` on construction.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    root: int = 0
    parents: tuple[int, ...] = field(init=False, repr=False, compare=False)
    depth: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        V = self.num_nodes
        if not isinstance(V, (int, np.integer)) or V < 1:
            raise StructuralError(f"num_nodes must be a positive integer, got {V!r}")
        if not 0 <= self.root < V:
            raise StructuralError(f"root {self.root} outside [0, {V})")
        edges = [tuple(int(a) for a in e) for e in self.edges]
        if len(edges) != V - 1:
            raise StructuralError(f"a tree on {V} nodes needs {V - 1} edges, got {len(edges)}")
        seen = set()
        nbrs: list[list[int]] = [[] for _ in range(V)]
        for a, b in edges:
            if not (0 <= a < V and 0 <= b < V):
                raise StructuralError(f"edge ({a}, {b}) has an index outside [0, {V})")
            if a == b:
                raise StructuralError(f"self-loop at node {a}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise StructuralError(f"duplicate edge ({a}, {b})")
            seen.add(key)
            nbrs[a].append(b)
            nbrs[b].append(a)

        parents = [-1] * V
        depth = [-1] * V
        depth[self.root] = 0
        queue = deque([self.root])
        while queue:
            u = queue.popleft()
            for w in nbrs[u]:
                if depth[w] < 0:
                    depth[w] = depth[u] + 1
                    parents[w] = u
                    queue.append(w)
                elif parents[u] != w:
                    raise StructuralError(f"cycle through edge ({u}, {w})")
        missing = [v for v in range(V) if depth[v] < 0]
        if missing:
            raise StructuralError(f"graph is disconnected: nodes {missing} unreachable from root {self.root}")

        oriented = tuple(sorted((parents[v], v) for v in range(V) if v != self.root))
        object.__setattr__(self, "edges", oriented)
        object.__setattr__(self, "parents", tuple(parents))
        object.__setattr__(self, "depth", tuple(depth))

    @classmethod
    def from_parents(cls, parents: Sequence[int]) -> "SkeletonGraph":
        """Build from a parent array with exactly one ``-1`` entry marking the root."""
        roots = [i for i, p in enumerate(parents) if p < 0]
        if len(roots) != 1:
            raise StructuralError(f"expected exactly one root in parent array, found {len(roots)}")
        edges = tuple((int(p), i) for i, p in enumerate(parents) if p >= 0)
        return cls(len(parents), edges, roots[0])

    def children(self, v: int) -> list[int]:
        return [c for c in range(self.num_nodes) if self.parents[c] == v]

    def neighbors(self, v: int) -> list[int]:
        out = self.children(v)
        if self.parents[v] >= 0:
            out.append(self.parents[v])
        return sorted(out)

    def diameter(self) -> int:
        best = 0
        for s in range(self.num_nodes):
            dist = {s: 0}
            queue = deque([s])
            while queue:
                u = queue.popleft()
                for w in self.neighbors(u):
                    if w not in dist:
                        dist[w] = dist[u] + 1
                        queue.append(w)
            best = max(best, max(dist.values()))
        return best

    def to_dict(self) -> dict:
        return {"num_nodes": self.num_nodes, "root": self.root, "parents": list(self.parents)}

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonGraph":
        return cls.from_parents(d["parents"])


@dataclass(frozen=True)
class AdjacencyKernelSet:
    """Directional kernels for one dilation.

    ``a_*`` are normalized, ``raw_*`` are the binary matrices before
    normalization.
    """

    dilation: int
    raw_cp: np.ndarray
    raw_id: np.ndarray
    raw_cf: np.ndarray
    a_cp: np.ndarray
    a_id: np.ndarray
    a_cf: np.ndarray

    def raw(self, k: str) -> np.ndarray:
        return {"cp": self.raw_cp, "id": self.raw_id, "cf": self.raw_cf}[k]

    def normalized(self, k: str) -> np.ndarray:
        return {"cp": self.a_cp, "id": self.a_id, "cf": self.a_cf}[k]

    def stacked(self) -> np.ndarray:
        """(3, V, V) array ordered cp, id, cf."""
        return np.stack([self.a_cp, self.a_id, self.a_cf])


def _check_direction(k: str) -> None:
    if k not in ("cp", "cf"):
        raise ValueError(f"direction must be 'cp' or 'cf', got {k!r}")


def lambda_binarize(M: np.ndarray) -> np.ndarray:
    """1 where ``M >= 1``, else 0.

    Entries equal to one survive: walk counts are exact integers, so a single
    walk must register.
    """
    M = np.asarray(M)
    if M.dtype == object:
        Mf = M.astype(float)
    else:
        Mf = M
    if np.isnan(Mf).any():
        raise ValueError("lambda_binarize: NaN entry")
    return (M >= 1).astype(np.int64)


def partition_adjacency(graph: SkeletonGraph) -> AdjacencyKernelSet:
    """Spatial partition of the tree's edges at dilation 1."""
    V = graph.num_nodes
    cp = np.zeros((V, V), dtype=np.int64)
    for child in range(V):
        p = graph.parents[child]
        if p >= 0:
            cp[child, p] = 1
    cf = cp.T.copy()
    eye = np.eye(V, dtype=np.int64)
    return _kernel_set(1, cp, eye, cf)


def _kernel_set(d: int, cp: np.ndarray, ident: np.ndarray, cf: np.ndarray) -> AdjacencyKernelSet:
    return AdjacencyKernelSet(
        dilation=d,
        raw_cp=cp,
        raw_id=ident,
        raw_cf=cf,
        a_cp=normalize_adjacency(cp),
        a_id=normalize_adjacency(ident),
        a_cf=normalize_adjacency(cf),
    )


def _int_power(M: np.ndarray, n: int) -> np.ndarray:
    out = np.eye(M.shape[0], dtype=object)
    for _ in range(n):
        out = out.dot(M)
    return out


def dilated_adjacency(base: AdjacencyKernelSet, d: int, k: str) -> np.ndarray:
    """Binary directional kernel at dilation ``d``.

    For ``d >= 2`` this is
    ``lam((A_k + I)(A_sym + I)^(d-1)) - lam((A_k + I)(A_sym + I)^(d-2))``
    with exact (arbitrary precision) integer products.
    """
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ValueError(f"dilation must be an integer >= 1, got {d!r}")
    _check_direction(k)
    if base.dilation != 1:
        raise ValueError("dilated_adjacency expects the dilation-1 partition as base")
    Ak = base.raw(k)
    if d == 1:
        return Ak.copy()
    V = Ak.shape[0]
    eye = np.eye(V, dtype=object)
    first = Ak.astype(object) + eye
    step = (base.raw_cp + base.raw_cf).astype(object) + eye
    near = first.dot(_int_power(step, d - 2))
    far = near.dot(step)
    return lambda_binarize(far) - lambda_binarize(near)


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization ``D^-1/2 A D^-1/2`` with D from row sums.

    Rows summing to zero use degree 1 so empty rows stay zero.
    """
    A = np.asarray(A, dtype=np.float64)
    if (A < 0).any():
        raise ValueError("normalize_adjacency: negative entry")
    deg = A.sum(axis=1)
    deg[deg == 0] = 1.0
    inv = 1.0 / np.sqrt(deg)
    return A * inv[:, None] * inv[None, :]


def kernel_set(graph: SkeletonGraph, d: int) -> AdjacencyKernelSet:
    """Normalized kernel set for ``graph`` at dilation ``d``."""
    base = partition_adjacency(graph)
    if d == 1:
        return base
    cp = dilated_adjacency(base, d, "cp")
    cf = dilated_adjacency(base, d, "cf")
    return _kernel_set(d, cp, base.raw_id.copy(), cf)


def adjacency_record(ks: AdjacencyKernelSet, k: str, normalized: bool = True) -> dict:
    """JSON-ready record ``{"d", "k", "matrix"}`` for one kernel."""
    if k not in DIRECTIONS:
        raise ValueError(f"k must be one of {DIRECTIONS}, got {k!r}")
    M = ks.normalized(k) if normalized else ks.raw(k)
    if normalized:
        rows = [[float(x) for x in row] for row in M]
    else:
        rows = [[int(x) for x in row] for row in M]
    return {"d": int(ks.dilation), "k": k, "matrix": rows}


# Preset skeletons -----------------------------------------------------------

_NTU_EDGES_1B = [
    (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7), (9, 21),
    (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15), (17, 1),
    (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
]


def ntu_graph() -> SkeletonGraph:
    """25-joint Kinect v2 skeleton rooted at the spine-shoulder joint."""
    return SkeletonGraph(25, tuple((a - 1, b - 1) for a, b in _NTU_EDGES_1B), root=20)


def path_graph(V: int, root: int = 0) -> SkeletonGraph:
    return SkeletonGraph(V, tuple((i, i + 1) for i in range(V - 1)), root)


def star_graph(leaves: int) -> SkeletonGraph:
    return SkeletonGraph(leaves + 1, tuple((0, i) for i in range(1, leaves + 1)), 0)


def random_tree(V: int, rng: np.random.Generator, root: int | None = None) -> SkeletonGraph:
    """Uniformly relabelled random recursive tree."""
    perm = rng.permutation(V)
    edges = [(int(perm[rng.integers(0, i)]), int(perm[i])) for i in range(1, V)]
    r = int(rng.integers(0, V)) if root is None else root
    return SkeletonGraph(V, tuple(edges), r)


def rooted_trees(V: int) -> Iterable[SkeletonGraph]:
    """All rooted trees on ``V`` nodes, one per isomorphism class."""
    seen: set[str] = set()

    def canon(children: list[list[int]], v: int) -> str:
        return "(" + "".join(sorted(canon(children, c) for c in children[v])) + ")"

    def rec(parents: list[int]):
        n = len(parents)
        if n == V:
            children: list[list[int]] = [[] for _ in range(V)]
            for i, p in enumerate(parents):
                if p >= 0:
                    children[p].append(i)
            key = canon(children, 0)
            if key not in seen:
                seen.add(key)
                yield SkeletonGraph.from_parents(parents)
            return
        for p in range(n):
            yield from rec(parents + [p])

    yield from rec([-1])
