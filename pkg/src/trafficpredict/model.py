"""The two-layer trajectory network and its encoder-decoder baseline.

Instance layer, per frame:
  spatial edges   e_ij = phi(f_ij),  h_ij = LSTM_spa(h_ij', e_ij)       (one shared cell)
  temporal edges  e_ii = phi(f_ii),  h_ii = LSTM_tem[c](h_ii', e_ii)    (one cell per category)
  attention       H_i  = sum_j softmax_j(m/sqrt(d_e) <W_i h_ii, W_ij h_ij>) h_ij
  node            h1_i = LSTM_ins[c](h2_i', concat(phi(f_i), phi(concat(h_ii, H_i))))

Category layer, per frame and category u present:
  d_m  = h1_m * softmax(c_m)          F_u = mean_m d_m       F_uu = F_u - F_u'
  h_uu = LSTM_st[u](h_uu', phi(F_uu))
  h_u  = LSTM_sup[u](h_u', concat(phi(F_u), h_uu))
  h2_m = W_s concat(h1_m, h_u) + b_s  (affine, no activation)

Position head: raw = W_f h2 + b_f; mu = raw[0:2] (added to the agent's current
position when ``predict_offsets`` is set), sigma = exp(raw[2:4]),
rho = rho_limit * tanh(raw[4]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigurationError, NumericError, UsageError
from .graph4d import CATEGORIES, build_frame

MODES = ("full", "no_category_layer", "no_self_attention", "ed_baseline")
CATEGORY_KEYS = {1: "ped", 2: "bike", 3: "veh"}
LOG_2PI = math.log(2.0 * math.pi)
LOG_SIGMA_LIMIT = 50.0   # emitted sigmas stay finite and positive


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "full"
    edge_hidden: int = 128
    node_hidden: int = 64
    super_edge_hidden: int = 128
    super_hidden: int = 64
    embed_dim: int = 64
    attention_dim: int = 64
    attention_m: float = 1.0
    attention_scale_dim: int | None = None   # d_e; None means edge_hidden
    radius: float = math.inf
    share_super_params: bool = False
    predict_offsets: bool = True
    rho_limit: float = 1.0 - 1e-6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown model mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 < self.rho_limit <= 1.0:
            raise ConfigurationError("rho_limit must lie in (0, 1]")

    @property
    def attention_factor(self):
        d_e = self.attention_scale_dim or self.edge_hidden
        return self.attention_m / math.sqrt(d_e)

    def to_dict(self):
        d = dict(self.__dict__)
        d["radius"] = "inf" if math.isinf(self.radius) else self.radius
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("radius") == "inf":
            d["radius"] = math.inf
        return cls(**d)


def param_specs(config):
    """Every learnable tensor of the configured network, in registry order."""
    c = config
    specs = []
    if c.mode == "ed_baseline":
        specs += nn.embedding_spec("ed.encoder.embed", 3, c.embed_dim)
        specs += nn.lstm_spec("ed.encoder.lstm", c.embed_dim, c.node_hidden)
        specs += nn.embedding_spec("ed.decoder.embed", 3, c.embed_dim)
        specs += nn.lstm_spec("ed.decoder.lstm", c.embed_dim, c.node_hidden)
        specs += nn.embedding_spec("output.head", c.node_hidden, 5)
        return specs

    specs += nn.embedding_spec("spatial_edge.embed", 3, c.embed_dim)
    specs += nn.lstm_spec("spatial_edge.lstm", c.embed_dim, c.edge_hidden)
    for key in CATEGORY_KEYS.values():
        specs += nn.embedding_spec(f"temporal_edge.{key}.embed", 3, c.embed_dim)
        specs += nn.lstm_spec(f"temporal_edge.{key}.lstm", c.embed_dim, c.edge_hidden)
    specs += nn.embedding_spec("attention.node", c.edge_hidden, c.attention_dim, bias=False)
    specs += nn.embedding_spec("attention.edge", c.edge_hidden, c.attention_dim, bias=False)
    for key in CATEGORY_KEYS.values():
        specs += nn.embedding_spec(f"instance.{key}.embed", 3, c.embed_dim)
        specs += nn.embedding_spec(f"instance.{key}.attn_embed", 2 * c.edge_hidden, c.embed_dim)
        specs += nn.lstm_spec(f"instance.{key}.lstm", 2 * c.embed_dim, c.node_hidden)
    if c.mode != "no_category_layer":
        for key in _super_keys(c):
            specs += nn.embedding_spec(f"super_edge.{key}.embed", c.node_hidden, c.embed_dim)
            specs += nn.lstm_spec(f"super_edge.{key}.lstm", c.embed_dim, c.super_edge_hidden)
            specs += nn.embedding_spec(f"super.{key}.embed", c.node_hidden, c.embed_dim)
            specs += nn.lstm_spec(f"super.{key}.lstm", c.embed_dim + c.super_edge_hidden,
                                  c.super_hidden)
        specs += nn.embedding_spec("output.merge", c.node_hidden + c.super_hidden, c.node_hidden)
    specs += nn.embedding_spec("output.head", c.node_hidden, 5)
    return specs


def _super_keys(config):
    return ("shared",) if config.share_super_params else tuple(CATEGORY_KEYS.values())


def init_model(config, seed):
    return nn.init_params(param_specs(config), seed)


def check_params(params, config):
    """Raise ConfigurationError unless ``params`` has exactly the tensors ``config`` needs."""
    expected = {s.name: s.shape for s in param_specs(config)}
    got = {n: tuple(v.shape) for n, v in params.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(n for n in set(expected) & set(got) if expected[n] != got[n])
        raise ConfigurationError(f"parameters do not match mode {config.mode!r}: "
                                 f"missing={missing[:3]} unexpected={extra[:3]} misshapen={wrong[:3]}")


# ---------------------------------------------------------------------------
# bound parameter views

def _grouped_embedding(bound, prefixes):
    g = nn.group_stack(bound, prefixes, ("weight", "bias"))
    return nn.EmbeddingParams(g["weight"], g["bias"])


def _grouped_lstm(bound, prefixes):
    g = nn.group_stack(bound, prefixes, ("w_ih", "w_hh", "bias"))
    return nn.LstmCellParams(g["w_ih"], g["w_hh"], g["bias"])


class NetworkParams:
    """Parameters of one forward pass, bound to a tape.

    Category-specific groups are stacked along a leading axis so each
    component runs as a single grouped call per frame.
    """

    def __init__(self, params, config, tape, differentiable=True):
        self.config = config
        self.tape = tape
        if differentiable:
            bound = tape.bind(params)
        else:
            bound = {k: tape.constant(v) for k, v in params.items()}
        self.bound = bound
        E = nn.EmbeddingParams.from_bound
        L = nn.LstmCellParams.from_bound
        self.head = E(bound, "output.head")
        if config.mode == "ed_baseline":
            self.enc_embed = E(bound, "ed.encoder.embed")
            self.enc_lstm = L(bound, "ed.encoder.lstm")
            self.dec_embed = E(bound, "ed.decoder.embed")
            self.dec_lstm = L(bound, "ed.decoder.lstm")
            return
        cats = [CATEGORY_KEYS[c] for c in CATEGORIES]
        self.spa_embed = E(bound, "spatial_edge.embed")
        self.spa_lstm = L(bound, "spatial_edge.lstm")
        self.tem_embed = _grouped_embedding(bound, [f"temporal_edge.{k}.embed" for k in cats])
        self.tem_lstm = _grouped_lstm(bound, [f"temporal_edge.{k}.lstm" for k in cats])
        self.att_node = bound["attention.node.weight"]
        self.att_edge = bound["attention.edge.weight"]
        self.ins_embed = _grouped_embedding(bound, [f"instance.{k}.embed" for k in cats])
        self.ins_attn = _grouped_embedding(bound, [f"instance.{k}.attn_embed" for k in cats])
        self.ins_lstm = _grouped_lstm(bound, [f"instance.{k}.lstm" for k in cats])
        if config.mode != "no_category_layer":
            keys = _super_keys(config)
            self.st_embed = _grouped_embedding(bound, [f"super_edge.{k}.embed" for k in keys])
            self.st_lstm = _grouped_lstm(bound, [f"super_edge.{k}.lstm" for k in keys])
            self.sup_embed = _grouped_embedding(bound, [f"super.{k}.embed" for k in keys])
            self.sup_lstm = _grouped_lstm(bound, [f"super.{k}.lstm" for k in keys])
            self.merge = E(bound, "output.merge")

    def super_groups(self, categories):
        if self.config.share_super_params:
            return np.zeros(len(categories), dtype=np.intp)
        return np.asarray(categories, dtype=np.intp) - 1

    def gradients(self):
        """``{name: grad}`` after backward; untouched parameters get zeros."""
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
                for k, t in self.bound.items()}


# ---------------------------------------------------------------------------
# Gaussian head and likelihood

@dataclass(frozen=True)
class GaussianParams:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float

    @property
    def mean(self):
        return np.array([self.mu_x, self.mu_y])


def head_raw(h2, head):
    return nn.linear(head, h2)


def squash(raw, anchor=None, rho_limit=1.0 - 1e-6):
    """Raw 5-vector(s) -> ``(mu, sigma, rho)`` numpy arrays."""
    raw = np.asarray(raw, dtype=np.float64)
    mu = raw[..., 0:2].copy()
    if anchor is not None:
        mu += anchor
    sigma = np.exp(np.clip(raw[..., 2:4], -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT))
    rho = rho_limit * np.tanh(raw[..., 4])
    return mu, sigma, rho


def gaussian_head(h2_prev, head, anchor=None, rho_limit=1.0 - 1e-6):
    """Gaussian position estimate from the previous frame's refined hidden state."""
    raw = head_raw(h2_prev, head).value
    mu, sigma, rho = squash(raw, anchor, rho_limit)
    return GaussianParams(float(mu[0]), float(mu[1]), float(sigma[0]), float(sigma[1]), float(rho))


def nll_loss(g, target):
    """Negative log density of ``target`` under a bivariate Gaussian."""
    dx = (target[0] - g.mu_x) / g.sigma_x
    dy = (target[1] - g.mu_y) / g.sigma_y
    one_m = 1.0 - g.rho * g.rho
    if not one_m > 0.0:
        raise NumericError(f"degenerate correlation rho={g.rho!r}")
    q = dx * dx + dy * dy - 2.0 * g.rho * dx * dy
    val = LOG_2PI + math.log(g.sigma_x) + math.log(g.sigma_y) + 0.5 * math.log(one_m) + q / (2.0 * one_m)
    if not math.isfinite(val):
        raise NumericError(f"non-finite NLL for {g} at target {tuple(target)}")
    return val


def gaussian_nll(raw, target, anchor=None, rho_limit=1.0 - 1e-6):
    """Per-row NLL of ``target`` (n, 2) under raw head outputs (n, 5), on the tape."""
    tape = raw.tape
    target = np.asarray(target, dtype=np.float64)
    mu_x, mu_y = ad.col(raw, 0), ad.col(raw, 1)
    if anchor is not None:
        mu_x = ad.add(mu_x, tape.constant(anchor[:, 0]))
        mu_y = ad.add(mu_y, tape.constant(anchor[:, 1]))
    ls_x, ls_y = ad.col(raw, 2), ad.col(raw, 3)
    rho = ad.scale(ad.tanh(ad.col(raw, 4)), rho_limit)
    zx = ad.div(ad.sub(tape.constant(target[:, 0]), mu_x), ad.exp(ls_x))
    zy = ad.div(ad.sub(tape.constant(target[:, 1]), mu_y), ad.exp(ls_y))
    one_m = ad.add_scalar(ad.neg(ad.square(rho)), 1.0)
    q = ad.sub(ad.add(ad.square(zx), ad.square(zy)), ad.scale(ad.mul(rho, ad.mul(zx, zy)), 2.0))
    per_row = ad.add(ad.add(ls_x, ls_y),
                     ad.add(ad.scale(ad.log(one_m), 0.5), ad.div(q, ad.scale(one_m, 2.0))))
    return ad.add_scalar(per_row, LOG_2PI)


# ---------------------------------------------------------------------------
# instance layer

def attend(h_ii, h_ij, src, w_node, w_edge, factor):
    """Attention pooling of edge hidden states onto their owning nodes.

    ``h_ii`` is (n, d), ``h_ij`` is (E, d) and ``src[e]`` is the node row owning
    edge ``e``.  Returns ``(H, weights)``; nodes without edges get a zero row.
    """
    n = h_ii.shape[0]
    if h_ij.shape[0] == 0:
        return h_ii.tape.zeros(n, h_ij.shape[1]), None
    node_q = ad.linear(h_ii, w_node)
    edge_k = ad.linear(h_ij, w_edge)
    scores = ad.scale(ad.rowdot(ad.take_rows(node_q, src), edge_k), factor)
    weights = ad.segment_softmax(scores, src, n)
    pooled = ad.segment_sum(ad.scale_rows(h_ij, weights), src, n)
    return pooled, weights


def attention_aggregate(h_ii, neighbors, w_node, w_edge, factor):
    """Single-node form of :func:`attend`: vectors in, pooled vector out."""
    tape = h_ii.tape
    if not neighbors:
        return tape.zeros(h_ii.shape[0])
    stacked = ad.vstack([ad.take_rows(h, [0]) for h in neighbors])
    pooled, _ = attend(ad.take_rows(h_ii, [0]), stacked, np.zeros(len(neighbors), dtype=np.intp),
                       w_node, w_edge, factor)
    return ad.sum(pooled, axis=0)


@dataclass
class NetState:
    """Recurrent state carried from one frame to the next, aligned with ``graph``."""

    graph: object = None
    spa_keys: dict = field(default_factory=dict)
    spa: nn.LstmState | None = None
    tem: nn.LstmState | None = None
    ins_h: ad.Tensor | None = None     # h2 of the previous frame
    ins_c: ad.Tensor | None = None
    sup_F: ad.Tensor | None = None
    sup_edge: nn.LstmState | None = None
    sup: nn.LstmState | None = None


def _carry(prev, rows, tape, width):
    """Gather previous-frame rows, zero rows where ``rows`` is -1."""
    if prev is None:
        return tape.zeros(len(rows), width)
    return ad.take_rows(prev, rows)


@dataclass
class InstanceOutput:
    h1: ad.Tensor
    c: ad.Tensor
    h_ii: ad.Tensor
    pooled: ad.Tensor
    attention: ad.Tensor | None
    spa: nn.LstmState | None
    spa_keys: dict
    tem: nn.LstmState


def instance_layer_step(P, fg, state):
    """Advance edge LSTMs, attention and instance LSTMs for frame ``fg``."""
    cfg, tape = P.config, P.tape
    n = fg.num_agents
    groups = fg.categories - 1
    prev = state.graph if (state.graph is not None and (fg.prev_rows >= 0).any()) else None

    # spatial edges: one shared cell, separate state per directed edge
    E = fg.num_edges
    keys = {(int(fg.agent_ids[s]), int(fg.agent_ids[d])): k
            for k, (s, d) in enumerate(zip(fg.edge_src, fg.edge_dst))}
    if E:
        e_ij = nn.embed(P.spa_embed, tape.constant(fg.spatial_features()))
        rows = np.array([state.spa_keys.get(k, -1) for k in keys], dtype=np.intp)
        if state.spa is None:
            h0 = c0 = tape.zeros(E, cfg.edge_hidden)
        else:
            h0, c0 = ad.take_rows(state.spa.h, rows), ad.take_rows(state.spa.c, rows)
        spa = nn.lstm_step(P.spa_lstm, nn.LstmState(h0, c0), e_ij)
        h_ij = spa.h
    else:
        spa, h_ij = None, tape.zeros(0, cfg.edge_hidden)

    # temporal edges: only agents that were present in the previous frame have one
    if prev is not None:
        linked = np.flatnonzero(fg.prev_rows >= 0)
        feats = fg.temporal_features(prev)[linked]
        e_ii = nn.embed(P.tem_embed, tape.constant(feats), groups[linked])
        back = fg.prev_rows[linked]
        st = nn.LstmState(ad.take_rows(state.tem.h, back), ad.take_rows(state.tem.c, back))
        st = nn.lstm_step(P.tem_lstm, st, e_ii, groups[linked])
        scatter = np.full(n, -1, dtype=np.intp)
        scatter[linked] = np.arange(len(linked))
        tem = nn.LstmState(ad.take_rows(st.h, scatter), ad.take_rows(st.c, scatter))
    else:
        tem = nn.LstmState.zeros(tape, cfg.edge_hidden, rows=n)
    h_ii = tem.h

    pooled, weights = attend(h_ii, h_ij, fg.edge_src, P.att_node, P.att_edge, cfg.attention_factor)

    e_i = nn.embed(P.ins_embed, tape.constant(fg.node_features()), groups)
    a_i = nn.embed(P.ins_attn, ad.hstack([h_ii, pooled]), groups)
    h_prev = _carry(state.ins_h, fg.prev_rows, tape, cfg.node_hidden)
    c_prev = _carry(state.ins_c, fg.prev_rows, tape, cfg.node_hidden)
    node = nn.lstm_step(P.ins_lstm, nn.LstmState(h_prev, c_prev), ad.hstack([e_i, a_i]), groups)
    return InstanceOutput(node.h, node.c, h_ii, pooled, weights, spa, keys, tem)


# ---------------------------------------------------------------------------
# category layer

@dataclass
class CategoryOutput:
    h2: ad.Tensor
    movement: ad.Tensor
    F: ad.Tensor
    h_u: ad.Tensor
    sup_edge: nn.LstmState
    sup: nn.LstmState


def category_layer_step(P, fg, h1, c, state, self_attention=True):
    """Super-node update for frame ``fg`` and the refined hidden states h2."""
    cfg, tape = P.config, P.tape
    if self_attention:
        d = ad.mul(h1, ad.softmax(c))
    else:
        d = h1
    member = fg.super_index()
    K = len(fg.super_categories)
    F = ad.mean_rows(d, member, K)
    sg = P.super_groups(fg.super_categories)

    prev = state.graph
    if prev is not None:
        lookup = {cat: k for k, cat in enumerate(prev.super_categories)}
        back = np.array([lookup[cat] if linked else -1
                         for cat, linked in zip(fg.super_categories, fg.super_prev)], dtype=np.intp)
    else:
        back = np.full(K, -1, dtype=np.intp)
    linked = (back >= 0).astype(np.float64)

    if state.sup_F is not None and linked.any():
        F_prev = ad.take_rows(state.sup_F, back)
        F_uu = ad.mul(ad.sub(F, F_prev), tape.constant(np.repeat(linked[:, None], F.shape[1], 1)))
        st0 = nn.LstmState(ad.take_rows(state.sup_edge.h, back), ad.take_rows(state.sup_edge.c, back))
        su0 = nn.LstmState(ad.take_rows(state.sup.h, back), ad.take_rows(state.sup.c, back))
    else:
        F_uu = tape.zeros(K, F.shape[1])
        st0 = nn.LstmState.zeros(tape, cfg.super_edge_hidden, rows=K)
        su0 = nn.LstmState.zeros(tape, cfg.super_hidden, rows=K)

    st = nn.lstm_step(P.st_lstm, st0, nn.embed(P.st_embed, F_uu, sg), sg)
    e_u = nn.embed(P.sup_embed, F, sg)
    su = nn.lstm_step(P.sup_lstm, su0, ad.hstack([e_u, st.h]), sg)
    h2 = nn.linear(P.merge, ad.hstack([h1, ad.take_rows(su.h, member)]))
    return CategoryOutput(h2, d, F, su.h, st, su)


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class RolloutResult:
    """Outputs of one pass over a window.

    ``gaussians[(agent_id, t)]`` is the distribution predicted for frame ``t``
    (0-based within the window) from frame ``t - 1``.  ``predictions`` maps
    every agent alive at the last observed frame to its predicted positions
    over frames ``t_obs .. t_pred - 1`` (predict phase only).
    """

    t_obs: int
    t_pred: int
    categories: dict
    gaussians: dict
    predictions: dict
    loss: ad.Tensor | None = None
    num_loss_agents: int = 0
    trace: list | None = None
    params: NetworkParams | None = None

    @property
    def prediction_frames(self):
        return list(range(self.t_obs, self.t_pred))


def loss_eligible(window, t_obs):
    """Agent ids with at least two observed frames."""
    counts = {}
    for fr in window[:t_obs]:
        for a in fr.agents:
            counts[a.agent_id] = counts.get(a.agent_id, 0) + 1
    return {a for a, k in counts.items() if k >= 2}


def _check_window(window, t_obs, t_pred, phase):
    if phase not in ("train", "predict"):
        raise UsageError(f"phase must be 'train' or 'predict', got {phase!r}")
    if not 1 <= t_obs < t_pred:
        raise UsageError(f"need 1 <= t_obs < t_pred, got {t_obs}, {t_pred}")
    need = t_pred if phase == "train" else t_obs
    if len(window) < need:
        raise UsageError(f"{phase} phase needs {need} frames, window has {len(window)}")


class _LossCollector:
    def __init__(self, config, window, t_obs):
        self.config = config
        self.eligible = loss_eligible(window, t_obs)
        self.raws, self.targets, self.anchors = [], [], []
        self.agents = set()

    def add(self, raw, fg, next_frame):
        pos = {a.agent_id: (a.x, a.y) for a in next_frame.agents}
        rows = [r for r, a in enumerate(fg.agent_ids) if int(a) in self.eligible and int(a) in pos]
        if not rows:
            return
        self.raws.append(ad.take_rows(raw, rows))
        self.targets.append([pos[int(fg.agent_ids[r])] for r in rows])
        self.anchors.append(fg.positions[rows])
        self.agents.update(int(fg.agent_ids[r]) for r in rows)

    def loss(self, tape):
        if not self.raws:
            return None
        raw = ad.vstack(self.raws) if len(self.raws) > 1 else self.raws[0]
        anchor = np.vstack(self.anchors) if self.config.predict_offsets else None
        nll = gaussian_nll(raw, np.vstack(self.targets), anchor, self.config.rho_limit)
        return ad.scale(ad.sum(nll), 1.0 / len(self.agents))


def _record_gaussians(out, raw, fg, t_next, config):
    anchor = fg.positions if config.predict_offsets else None
    mu, sigma, rho = squash(raw.value, anchor, config.rho_limit)
    for r, a in enumerate(fg.agent_ids):
        out[(int(a), t_next)] = GaussianParams(mu[r, 0], mu[r, 1], sigma[r, 0], sigma[r, 1], rho[r])
    return mu, sigma, rho


def rollout(window, params, config, t_obs, t_pred=None, phase="train", *,
            differentiable=None, sample=False, rng=None, trace=False, tape=None):
    """Run the network over a window of :class:`FrameObservation`.

    In the train phase all frames come from the data (teacher forcing) and the
    NLL over frames ``t_obs .. t_pred - 1`` is accumulated into ``loss``.  In
    the predict phase only the first ``t_obs`` frames are read; afterwards each
    agent's predicted mean (or a sample, with ``sample=True``) is fed back as
    its position.
    """
    if config.mode == "ed_baseline":
        return ed_baseline_rollout(window, params, config, t_obs, t_pred, phase,
                                   differentiable=differentiable, sample=sample, rng=rng,
                                   trace=trace, tape=tape)
    t_pred = len(window) if t_pred is None else t_pred
    _check_window(window, t_obs, t_pred, phase)
    if differentiable is None:
        differentiable = phase == "train"
    tape = tape or ad.Tape()
    P = NetworkParams(params, config, tape, differentiable)
    use_category = config.mode != "no_category_layer"
    self_attention = config.mode == "full"
    rng = rng or np.random.default_rng(0)

    categories = {a.agent_id: a.category for fr in window[:t_pred] for a in fr.agents}
    collector = _LossCollector(config, window, t_obs) if phase == "train" else None
    gaussians, traces = {}, [] if trace else None
    predicted = {}
    state = NetState()
    frame_agents = list(window[0].agents)

    for t in range(t_pred - 1):
        fg = build_frame(t, frame_agents, state.graph, config.radius)
        inst = instance_layer_step(P, fg, state)
        if use_category:
            cat = category_layer_step(P, fg, inst.h1, inst.c, state, self_attention)
            h2 = cat.h2
        else:
            cat, h2 = None, inst.h1
        raw = head_raw(h2, P.head)
        mu, sigma, rho = _record_gaussians(gaussians, raw, fg, t + 1, config)
        if traces is not None:
            traces.append({"graph": fg, "h1": inst.h1.value, "c": inst.c.value, "h2": h2.value,
                           "h_ii": inst.h_ii.value, "pooled": inst.pooled.value,
                           "attention": None if inst.attention is None else inst.attention.value,
                           "movement": None if cat is None else cat.movement.value,
                           "F": None if cat is None else cat.F.value,
                           "h_u": None if cat is None else cat.h_u.value,
                           "raw": raw.value})
        state = NetState(fg, inst.spa_keys, inst.spa, inst.tem, h2, inst.c,
                         None if cat is None else cat.F,
                         None if cat is None else cat.sup_edge,
                         None if cat is None else cat.sup)

        if phase == "train":
            if t + 1 >= t_obs:
                collector.add(raw, fg, window[t + 1])
            frame_agents = window[t + 1].agents
        elif t + 1 < t_obs:
            frame_agents = window[t + 1].agents
        else:
            if sample:
                pos = _sample(mu, sigma, rho, rng)
            else:
                pos = mu
            frame_agents = []
            for r, a in enumerate(fg.agent_ids):
                predicted.setdefault(int(a), []).append(pos[r].copy())
                frame_agents.append(_agent(int(a), int(fg.categories[r]), pos[r]))

    result = RolloutResult(t_obs, t_pred, categories, gaussians,
                           {a: np.array(p) for a, p in predicted.items()},
                           trace=traces, params=P)
    if collector is not None:
        result.loss = collector.loss(tape)
        result.num_loss_agents = len(collector.agents)
    return result


def _agent(agent_id, category, pos):
    from .graph4d import AgentObservation
    return AgentObservation(agent_id, category, float(pos[0]), float(pos[1]))


def _sample(mu, sigma, rho, rng):
    z = rng.standard_normal(mu.shape)
    x = mu[:, 0] + sigma[:, 0] * z[:, 0]
    y = mu[:, 1] + sigma[:, 1] * (rho * z[:, 0] + np.sqrt(1.0 - rho ** 2) * z[:, 1])
    return np.column_stack([x, y])


def _blend(new, old, mask):
    """Rows where ``mask`` is 1 take ``new``; others keep ``old``."""
    tape = new.tape
    keep = tape.constant(np.repeat(mask[:, None], new.shape[1], 1))
    hold = tape.constant(np.repeat(1.0 - mask[:, None], new.shape[1], 1))
    return ad.add(ad.mul(new, keep), ad.mul(old, hold))


def ed_baseline_rollout(window, params, config, t_obs, t_pred=None, phase="train", *,
                        differentiable=None, sample=False, rng=None, trace=False, tape=None):
    """Per-agent LSTM encoder-decoder without interaction terms.

    The encoder reads each agent's node features over the observed frames; the
    head applied to its final state predicts frame ``t_obs``.  The decoder then
    consumes the position at frame ``t`` (ground truth in the train phase, the
    model's own estimate in the predict phase) and predicts frame ``t + 1``.
    """
    t_pred = len(window) if t_pred is None else t_pred
    _check_window(window, t_obs, t_pred, phase)
    if differentiable is None:
        differentiable = phase == "train"
    tape = tape or ad.Tape()
    P = NetworkParams(params, config, tape, differentiable)
    rng = rng or np.random.default_rng(0)
    categories = {a.agent_id: a.category for fr in window[:t_pred] for a in fr.agents}

    last = build_frame(t_obs - 1, window[t_obs - 1].agents)
    ids = [int(a) for a in last.agent_ids]
    n = len(ids)
    cats = last.categories
    state = nn.LstmState.zeros(tape, config.node_hidden, rows=n)
    traces = [] if trace else None

    for t in range(t_obs):
        present = {a.agent_id: a for a in window[t].agents}
        mask = np.array([a in present for a in ids], dtype=np.float64)
        if not mask.any():
            continue
        feats = _node_features(ids, cats, present)
        if traces is not None:
            traces.append({"frame": t, "features": feats, "mask": mask})
        new = nn.lstm_step(P.enc_lstm, state, nn.embed(P.enc_embed, tape.constant(feats)))
        state = nn.LstmState(_blend(new.h, state.h, mask), _blend(new.c, state.c, mask))

    collector = _LossCollector(config, window, t_obs) if phase == "train" else None
    gaussians, predicted = {}, {}
    pos = last.positions.copy()
    fg = last
    for t in range(t_obs - 1, t_pred - 1):
        if t >= t_obs:
            present = {a.agent_id: a for a in window[t].agents} if phase == "train" else {}
            feats = _node_features(ids, cats, present, fallback=pos)
            if traces is not None:
                traces.append({"frame": t, "features": feats, "mask": np.ones(n)})
            state = nn.lstm_step(P.dec_lstm, state, nn.embed(P.dec_embed, tape.constant(feats)))
            pos = feats[:, :2].copy()
            fg = build_frame(t, [_agent(a, int(c), p) for a, c, p in zip(ids, cats, pos)])
        raw = head_raw(state.h, P.head)
        anchor = pos if config.predict_offsets else None
        mu, sigma, rho = squash(raw.value, anchor, config.rho_limit)
        for r, a in enumerate(ids):
            gaussians[(a, t + 1)] = GaussianParams(mu[r, 0], mu[r, 1], sigma[r, 0], sigma[r, 1], rho[r])
        if phase == "train":
            collector.add(raw, fg, window[t + 1])
        else:
            nxt = _sample(mu, sigma, rho, rng) if sample else mu
            for r, a in enumerate(ids):
                predicted.setdefault(a, []).append(nxt[r].copy())
            pos = nxt
            fg = None

    result = RolloutResult(t_obs, t_pred, categories, gaussians,
                           {a: np.array(p) for a, p in predicted.items()},
                           trace=traces, params=P)
    if collector is not None:
        result.loss = collector.loss(tape)
        result.num_loss_agents = len(collector.agents)
    return result


def _node_features(ids, cats, present, fallback=None):
    feats = np.zeros((len(ids), 3))
    feats[:, 2] = (cats - 1) / 2.0
    for r, a in enumerate(ids):
        if a in present:
            feats[r, 0], feats[r, 1] = present[a].x, present[a].y
        elif fallback is not None:
            feats[r, :2] = fallback[r]
    return feats
