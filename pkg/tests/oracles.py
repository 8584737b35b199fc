"""Reference computations that share no code with the package under test."""

from __future__ import annotations

from collections import deque


def bfs_depth(V, edges, root):
    nbrs = {v: set() for v in range(V)}
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    depth = {root: 0}
    q = deque([root])
    while q:
        u = q.popleft()
        for w in nbrs[u]:
            if w not in depth:
                depth[w] = depth[u] + 1
                q.append(w)
    return depth, nbrs


def partition_oracle(V, edges, root):
    """(cp, cf) as sets of (row, col): cp holds (i, j) when j is i's neighbour nearer the root."""
    depth, nbrs = bfs_depth(V, edges, root)
    cp = {(i, j) for i in range(V) for j in nbrs[i] if depth[j] < depth[i]}
    cf = {(i, j) for i in range(V) for j in nbrs[i] if depth[j] > depth[i]}
    return cp, cf


def _walk_ends(start, steps, nbrs):
    """End points of every walk of exactly ``steps`` moves where each move stays or crosses an edge."""
    ends = set()

    def walk(node, left):
        if left == 0:
            ends.add(node)
            return
        walk(node, left - 1)
        for w in nbrs[node]:
            walk(w, left - 1)

    walk(start, steps)
    return ends


def dilated_oracle(V, edges, root, d, k):
    """Row supports of the dilated kernel by explicit walk enumeration.

    Row i: nodes reachable by one ``k``-directed hop (or staying put) and then
    ``d-1`` undirected lazy steps, minus those reachable with ``d-2`` steps.
    """
    cp, cf = partition_oracle(V, edges, root)
    directed = cp if k == "cp" else cf
    _, nbrs = bfs_depth(V, edges, root)
    out = set()
    for i in range(V):
        first = {i} | {j for (a, j) in directed if a == i}
        far = set().union(*(_walk_ends(m, d - 1, nbrs) for m in first))
        near = set().union(*(_walk_ends(m, d - 2, nbrs) for m in first))
        out |= {(i, j) for j in far - near}
    return out


def support(M):
    return {(i, j) for i in range(len(M)) for j in range(len(M)) if M[i][j] != 0}
