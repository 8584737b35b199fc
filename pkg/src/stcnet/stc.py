"""Spatio-temporal curves.

Curves start at every joint of the first frame. At each frame transition
the current waypoint looks up its ``k`` nearest joints (in feature space) of
the next frame, a small agent network scores them, and a Gumbel-softmax
picks the next waypoint. The gathered curve features are then attended back
onto the feature map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .nn import AttentivePool, Linear, RngStream, glorot_, gumbel_softmax, straight_through


@dataclass(frozen=True)
class StcConfig:
    """Curve options.

    ``c_mid=None`` means a quarter of the block width. ``straight_line_mode``
    forces one candidate per step, which removes the agent from the choice.
    """

    k: int = 4
    temperature: float = 1.0
    c_mid: int | None = None
    exclude_same_node: bool = True
    straight_line_mode: bool = False

    @property
    def effective_k(self) -> int:
        return 1 if self.straight_line_mode else self.k

    def mid_channels(self, channels: int) -> int:
        return self.c_mid if self.c_mid is not None else max(1, channels // 4)

    def validate(self, num_nodes: int) -> None:
        k = self.effective_k
        upper = num_nodes - 1 if self.exclude_same_node else num_nodes
        if not 1 <= k <= upper:
            raise ConfigError(f"k={k} outside [1, {upper}] for V={num_nodes} (exclusion {'on' if self.exclude_same_node else 'off'})")
        if self.c_mid is not None and self.c_mid < 1:
            raise ConfigError(f"c_mid must be >= 1, got {self.c_mid}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CurveSet:
    """Batched curves.

    indices:    (N, T-1, V) long, node chosen at frame t+1 for the curve
                started at node c
    features:   (N, C, T-1, V) gathered waypoint features
    candidates: (N, T-1, V, k) candidate sets offered at each step
    """

    indices: torch.Tensor
    features: torch.Tensor
    candidates: torch.Tensor

    def paths(self, n: int) -> list[list[int]]:
        """Node index per frame (start node first) for each curve of sample ``n``."""
        idx = self.indices[n].cpu().numpy()
        V = idx.shape[1]
        return [[c] + [int(x) for x in idx[:, c]] for c in range(V)]


def knn_candidates(
    query: torch.Tensor, keys: torch.Tensor, k: int, exclude: torch.Tensor | None = None
) -> torch.Tensor:
    """Indices of the ``k`` nearest ``keys`` columns for each ``query`` column.

    ``query`` (N, C, Q), ``keys`` (N, C, V), ``exclude`` (N, Q) node index to
    skip per query. Result (N, Q, k) in ascending distance, ties to the lower
    index.
    """
    d = ((query.unsqueeze(-1) - keys.unsqueeze(-2)) ** 2).sum(dim=1)
    if exclude is not None:
        d = d.scatter(2, exclude.unsqueeze(-1), float("inf"))
    order = torch.sort(d, dim=-1, stable=True).indices
    return order[..., :k]


def interframe_knn(F: torch.Tensor, t: int, v: int, cfg: StcConfig) -> list[int]:
    """k nearest joints of frame ``t+1`` to joint ``v`` of frame ``t`` for one (C, T, V) sample."""
    C, T, V = F.shape
    if not 0 <= t < T - 1:
        raise ValueError(f"frame {t} has no successor in a sequence of length {T}")
    cfg.validate(V)
    excl = torch.tensor([[v]]) if cfg.exclude_same_node else None
    out = knn_candidates(F[None, :, t, v : v + 1], F[None, :, t + 1, :], cfg.effective_k, excl)
    return [int(i) for i in out[0, 0]]


def _gather_nodes(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x (N, C, V), idx (N, Q, k) -> (N, C, Q, k)."""
    N, C, V = x.shape
    _, Q, k = idx.shape
    flat = idx.reshape(N, 1, Q * k).expand(N, C, Q * k)
    return x.gather(2, flat).reshape(N, C, Q, k)


class Agent(nn.Module):
    """Scores candidates from the concatenated (query, candidate) embeddings."""

    def __init__(self, c_mid: int, rng: RngStream):
        super().__init__()
        self.hidden = Linear(2 * c_mid, c_mid, rng.child("hidden"))
        # no output bias: a shift common to all candidates cancels in the softmax
        self.out = Linear(c_mid, 1, rng.child("out"), bias=False)

    def forward(self, q: torch.Tensor, cands: torch.Tensor) -> torch.Tensor:
        """q (N, Q, Cm), cands (N, Q, k, Cm) -> logits (N, Q, k)."""
        qx = q.unsqueeze(2).expand_as(cands)
        h = torch.relu(self.hidden(torch.cat([qx, cands], dim=-1)))
        return self.out(h).squeeze(-1)


def select_next_node(
    query_embed: torch.Tensor,
    candidate_embeds: torch.Tensor,
    agent: Agent,
    mode: str = "eval",
    rng: RngStream | None = None,
    temperature: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pick one of ``k`` candidates.

    Returns ``(choice, weights)``: ``choice`` indexes the candidate axis,
    ``weights`` are straight-through gather weights (one-hot in value). With
    ``mode="soft"`` the weights are the plain softmax of the agent scores,
    which keeps the whole path differentiable.
    """
    logits = agent(query_embed, candidate_embeds)
    if mode == "soft":
        soft = torch.softmax(logits / temperature, dim=-1)
        return soft.detach().argmax(dim=-1), soft
    onehot, soft = gumbel_softmax(logits, temperature, mode, rng)
    return onehot.argmax(dim=-1), straight_through(onehot, soft)


def generate_curves(
    F: torch.Tensor,
    embed: torch.Tensor,
    cfg: StcConfig,
    agent: Agent,
    mode: str = "eval",
    rng: RngStream | None = None,
) -> CurveSet:
    """Grow one curve per first-frame joint through all frames.

    ``F`` (N, C, T, V) supplies waypoint features and k-NN distances; ``embed``
    (N, Cm, T, V) is the agent's view of the same nodes.
    """
    if F.dim() != 4:
        raise ShapeError(f"generate_curves: expected (N, C, T, V), got {tuple(F.shape)}")
    N, C, T, V = F.shape
    if T < 2:
        raise ValueError(f"generate_curves: need at least 2 frames, got {T}")
    if embed.shape[0] != N or embed.shape[2:] != (T, V):
        raise ShapeError(f"generate_curves: embedding {tuple(embed.shape)} does not match features {tuple(F.shape)}")
    cfg.validate(V)
    k = cfg.effective_k

    cur_idx = torch.arange(V).expand(N, V)
    cur_feat = F[:, :, 0, :]
    cur_emb = embed[:, :, 0, :]
    indices, feats, cands = [], [], []
    for t in range(T - 1):
        keys = F[:, :, t + 1, :]
        cand = knn_candidates(
            cur_feat.detach(), keys.detach(), k, cur_idx if cfg.exclude_same_node else None
        )
        cand_feat = _gather_nodes(keys, cand)
        cand_emb = _gather_nodes(embed[:, :, t + 1, :], cand)
        step_rng = rng.child(t) if rng is not None else None
        choice, w = select_next_node(
            cur_emb.transpose(1, 2), cand_emb.permute(0, 2, 3, 1), agent, mode, step_rng, cfg.temperature
        )
        cur_feat = (cand_feat * w.unsqueeze(1)).sum(-1)
        cur_emb = (cand_emb * w.unsqueeze(1)).sum(-1)
        cur_idx = cand.gather(2, choice.unsqueeze(-1)).squeeze(-1)
        indices.append(cur_idx)
        feats.append(cur_feat)
        cands.append(cand)
    return CurveSet(
        indices=torch.stack(indices, dim=1),
        features=torch.stack(feats, dim=2),
        candidates=torch.stack(cands, dim=1),
    )


class CurveAggregation(nn.Module):
    """Attend intra- and inter-curve summaries back onto the feature map.

    ``w_agg`` starts at zero so a fresh module is the identity.
    """

    def __init__(self, channels: int, c_mid: int, rng: RngStream):
        super().__init__()
        self.pool_intra = AttentivePool(channels, rng.child("pool_intra"))
        self.pool_inter = AttentivePool(channels, rng.child("pool_inter"))
        self.reduce_intra = Linear(channels, c_mid, rng.child("reduce_intra"), bias=False)
        self.reduce_inter = Linear(channels, c_mid, rng.child("reduce_inter"), bias=False)
        self.phi = Linear(channels, c_mid, rng.child("phi"), bias=False)
        self.w_intra = nn.Parameter(glorot_(torch.empty(c_mid, c_mid), c_mid, c_mid, rng.child("w_intra")))
        self.w_inter = nn.Parameter(glorot_(torch.empty(c_mid, c_mid), c_mid, c_mid, rng.child("w_inter")))
        self.w_agg = nn.Parameter(torch.zeros(2 * c_mid, channels))
        self.last_attention: tuple[torch.Tensor, torch.Tensor] | None = None

    def forward(self, x: torch.Tensor, curves: torch.Tensor) -> torch.Tensor:
        N, C, T, V = x.shape
        if curves.shape != (N, C, T - 1, V):
            raise ShapeError(f"curve_aggregate: curves {tuple(curves.shape)} vs features {tuple(x.shape)}")
        intra = self.reduce_intra(self.pool_intra(curves, dim=3).transpose(1, 2))  # N, T-1, Cm
        inter = self.reduce_inter(self.pool_inter(curves, dim=2).transpose(1, 2))  # N, V, Cm
        q = self.phi(x.flatten(2).transpose(1, 2))  # N, TV, Cm
        att_intra = torch.softmax(q @ intra.transpose(1, 2), dim=-1)  # N, TV, T-1
        att_inter = torch.softmax(q @ inter.transpose(1, 2), dim=-1)  # N, TV, V
        f_intra = att_intra @ (intra @ self.w_intra)  # N, TV, Cm
        f_inter = att_inter @ (inter @ self.w_inter)
        self.last_attention = (att_intra.detach(), att_inter.detach())
        out = torch.cat([f_intra, f_inter], dim=-1) @ self.w_agg  # N, TV, C
        return x + out.transpose(1, 2).reshape(N, C, T, V)


def curve_aggregate(x: torch.Tensor, curves: CurveSet | torch.Tensor, module: CurveAggregation) -> torch.Tensor:
    feats = curves.features if isinstance(curves, CurveSet) else curves
    return module(x, feats)


class STCModule(nn.Module):
    """Curve generation followed by curve aggregation; channel preserving.

    Selection follows the module mode: Gumbel noise while training, plain
    argmax in eval, and the noise-free softmax when ``soft_path`` is set.
    """

    def __init__(self, channels: int, cfg: StcConfig, rng: RngStream):
        super().__init__()
        self.cfg = cfg
        c_mid = cfg.mid_channels(channels)
        self.embed = Linear(channels, c_mid, rng.child("embed"), bias=False)
        self.agent = Agent(c_mid, rng.child("agent"))
        self.aggregate = CurveAggregation(channels, c_mid, rng.child("aggregate"))
        self.soft_path = False
        self.record = False
        self.last_curves: CurveSet | None = None

    def forward(self, x: torch.Tensor, rng: RngStream | None = None) -> torch.Tensor:
        if self.soft_path:
            mode = "soft"
        elif self.training:
            mode = "train"
            if rng is None:
                raise ValueError("STCModule needs an RngStream in training mode")
        else:
            mode = "eval"
        emb = self.embed(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        curves = generate_curves(x, emb, self.cfg, self.agent, mode, rng)
        if self.record:
            self.last_curves = CurveSet(curves.indices, curves.features.detach(), curves.candidates)
        return self.aggregate(x, curves.features)


def check_curve_invariants(curves: CurveSet, exclude_same_node: bool) -> list[str]:
    """Violations of the CurveSet invariants (empty list when all hold)."""
    problems = []
    idx = curves.indices
    N, L, V = idx.shape
    if ((idx < 0) | (idx >= V)).any():
        problems.append("index out of range")
    member = (curves.candidates == idx.unsqueeze(-1)).any(-1)
    if not member.all():
        problems.append(f"{int((~member).sum())} waypoints outside their candidate set")
    if exclude_same_node:
        prev = torch.cat([torch.arange(V).expand(N, 1, V), idx[:, :-1]], dim=1)
        clashes = int((prev == idx).sum())
        if clashes:
            problems.append(f"{clashes} consecutive waypoints share a node")
    return problems


def curve_record(label: int, T: int, V: int, paths: list[list[int]], **extra) -> dict:
    """JSON export record for one sample's curves."""
    rec = {"label": int(label), "T": int(T), "V": int(V), "curves": [[int(i) for i in p] for p in paths]}
    rec.update(extra)
    return rec


def random_generation(
    V: int, T: int, C: int, cfg: StcConfig, seed: int, mode: str = "train"
) -> CurveSet:
    """Curves from random features and a random agent (used by invariant sweeps)."""
    rng = RngStream(seed, "random_generation")
    x = torch.from_numpy(rng.normal((1, C, T, V))).to(torch.get_default_dtype())
    c_mid = cfg.mid_channels(C)
    embedder = Linear(C, c_mid, rng.child("embed"), bias=False)
    agent = Agent(c_mid, rng.child("agent"))
    with torch.no_grad():
        emb = embedder(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return generate_curves(x, emb, cfg, agent, mode, rng.child("noise"))


__all__ = [
    "StcConfig",
    "CurveSet",
    "knn_candidates",
    "interframe_knn",
    "Agent",
    "select_next_node",
    "generate_curves",
    "CurveAggregation",
    "curve_aggregate",
    "STCModule",
    "check_curve_invariants",
    "curve_record",
    "random_generation",
]
