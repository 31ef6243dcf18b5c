"""Construction of the 4D traffic graph over a window of frames.

Per frame the graph holds one instance node per agent, directed spatial edges
between agents of that frame, and one super node per category present.
Across frames it holds instance temporal edges (agent present in both frames)
and super-node temporal links (category present in both frames).

Within a frame, agents are always laid out in canonical order, sorted by
``(category, agent_id)``; the model relies on that order for batching and it
makes every result independent of the order agents were supplied in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError, ValidationError

PEDESTRIAN, BICYCLE, VEHICLE = 1, 2, 3
CATEGORIES = (PEDESTRIAN, BICYCLE, VEHICLE)
CATEGORY_NAMES = {PEDESTRIAN: "pedestrian", BICYCLE: "bicycle", VEHICLE: "vehicle"}


@dataclass(frozen=True)
class AgentObservation:
    agent_id: int
    category: int
    x: float
    y: float

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValidationError(f"agent {self.agent_id}: invalid category {self.category!r}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"agent {self.agent_id}: non-finite position")


@dataclass(frozen=True)
class FrameObservation:
    frame_index: int
    agents: tuple

    def __post_init__(self):
        ids = [a.agent_id for a in self.agents]
        if len(ids) != len(set(ids)):
            raise ValidationError(f"frame {self.frame_index}: duplicate agent ids")
        object.__setattr__(self, "agents", tuple(self.agents))


def category_code(c_i, c_j):
    """Ordered-pair category code in [0, 1]."""
    return ((c_i - 1) * 3 + (c_j - 1)) / 8.0


def spatial_edge_feature(a_i, a_j):
    return np.array([a_j.x - a_i.x, a_j.y - a_i.y, category_code(a_i.category, a_j.category)])


def temporal_edge_feature(prev, cur):
    if prev.agent_id != cur.agent_id:
        raise UsageError(f"temporal edge joins different agents ({prev.agent_id} -> {cur.agent_id})")
    return np.array([cur.x - prev.x, cur.y - prev.y, category_code(cur.category, cur.category)])


@dataclass
class FrameGraph:
    """Nodes and edges of a single frame, in canonical agent order."""

    frame_index: int
    agent_ids: np.ndarray          # (n,)
    categories: np.ndarray         # (n,) values in {1, 2, 3}
    positions: np.ndarray          # (n, 2)
    edge_src: np.ndarray           # (E,) row index of the node that owns the edge
    edge_dst: np.ndarray           # (E,) row index of the neighbour
    prev_rows: np.ndarray          # (n,) row of the same agent in the previous frame, -1 if new
    super_categories: tuple        # categories present, ascending
    super_prev: tuple              # per super node: was it present in the previous frame
    row_of: dict = field(default_factory=dict)

    @property
    def num_agents(self):
        return len(self.agent_ids)

    @property
    def num_edges(self):
        return len(self.edge_src)

    def membership(self, category):
        return [int(a) for a, c in zip(self.agent_ids, self.categories) if c == category]

    def super_index(self):
        """Super-node row for every agent row."""
        lookup = {c: k for k, c in enumerate(self.super_categories)}
        return np.array([lookup[c] for c in self.categories], dtype=np.intp)

    def spatial_features(self):
        src, dst = self.edge_src, self.edge_dst
        rel = self.positions[dst] - self.positions[src]
        code = ((self.categories[src] - 1) * 3 + (self.categories[dst] - 1)) / 8.0
        return np.column_stack([rel, code])

    def temporal_features(self, prev):
        """Temporal-edge features for agents also present in ``prev``; zeros for new agents."""
        feat = np.zeros((self.num_agents, 3))
        feat[:, 2] = ((self.categories - 1) * 4) / 8.0
        if prev is not None:
            old = self.prev_rows >= 0
            feat[old, :2] = self.positions[old] - prev.positions[self.prev_rows[old]]
        return feat

    def node_features(self):
        return np.column_stack([self.positions, (self.categories - 1) / 2.0])

    def spatial_edges(self):
        return {(int(self.agent_ids[s]), int(self.agent_ids[d]))
                for s, d in zip(self.edge_src, self.edge_dst)}


def build_frame(frame_index, agents, prev=None, radius=math.inf):
    """Build the :class:`FrameGraph` for one frame.

    ``agents`` is an iterable of :class:`AgentObservation`; ``prev`` is the
    previous frame's graph (or None at the start of a window).
    """
    agents = sorted(agents, key=lambda a: (a.category, a.agent_id))
    ids = np.array([a.agent_id for a in agents], dtype=np.int64)
    if len(set(ids.tolist())) != len(ids):
        raise ValidationError(f"frame {frame_index}: duplicate agent ids")
    cats = np.array([a.category for a in agents], dtype=np.int64)
    pos = np.array([[a.x, a.y] for a in agents], dtype=np.float64).reshape(-1, 2)
    n = len(agents)

    src, dst = np.nonzero(~np.eye(n, dtype=bool))
    if math.isfinite(radius) and n:
        d = np.linalg.norm(pos[dst] - pos[src], axis=1)
        keep = d <= radius
        src, dst = src[keep], dst[keep]

    prev_rows = np.full(n, -1, dtype=np.intp)
    if prev is not None:
        for r, a in enumerate(ids):
            prev_rows[r] = prev.row_of.get(int(a), -1)

    supers = tuple(sorted(set(cats.tolist())))
    prev_supers = set(prev.super_categories) if prev is not None else set()
    return FrameGraph(
        frame_index=frame_index,
        agent_ids=ids,
        categories=cats,
        positions=pos,
        edge_src=src.astype(np.intp),
        edge_dst=dst.astype(np.intp),
        prev_rows=prev_rows,
        super_categories=supers,
        super_prev=tuple(c in prev_supers for c in supers),
        row_of={int(a): r for r, a in enumerate(ids)},
    )


@dataclass
class Graph4D:
    frames: list

    def __len__(self):
        return len(self.frames)

    def spatial_edges(self, t):
        return self.frames[t].spatial_edges()

    def temporal_edges(self):
        """``{(agent_id, t)}``: agent linked from frame ``t-1`` to frame ``t``."""
        return {(int(a), t) for t, fg in enumerate(self.frames)
                for a, r in zip(fg.agent_ids, fg.prev_rows) if r >= 0}

    def super_nodes(self, t):
        return set(self.frames[t].super_categories)

    def super_temporal_links(self):
        """``{(category, t)}``: super node of ``category`` linked from ``t-1`` to ``t``."""
        return {(c, t) for t, fg in enumerate(self.frames)
                for c, linked in zip(fg.super_categories, fg.super_prev) if linked}

    def membership(self, category, t):
        return self.frames[t].membership(category)


def build_graph(frames, radius=math.inf):
    """Build the :class:`Graph4D` for chronologically ordered frames."""
    frames = list(frames)
    if not frames:
        raise UsageError("build_graph needs at least one frame")
    out, prev = [], None
    for t, fr in enumerate(frames):
        prev = build_frame(t, fr.agents, prev, radius)
        out.append(prev)
    return Graph4D(out)
