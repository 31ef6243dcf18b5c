"""Displacement metrics and the method comparison harness."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import SceneWindow, evaluable_agents
from .errors import TrafficPredictError, UsageError
from .graph4d import CATEGORY_NAMES

log = logging.getLogger(__name__)

REPORT_CATEGORIES = ("pedestrian", "bicycle", "vehicle", "total")
SCALES = ("normalized", "meters")
CSV_COLUMNS = ("method", "category", "ade", "fde", "n_windows", "coordinate_scale", "n_agents")


def _pair(predicted, truth):
    p = np.asarray(predicted, dtype=np.float64)
    q = np.asarray(truth, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape != q.shape:
        raise UsageError(f"predicted {p.shape} and truth {q.shape} must both be (steps, 2)")
    if len(p) == 0:
        raise UsageError("empty prediction")
    return p, q


def ade(predicted, truth):
    """Mean Euclidean distance over the prediction steps."""
    p, q = _pair(predicted, truth)
    return float(np.mean(np.hypot(*(p - q).T)))


def fde(predicted, truth):
    """Euclidean distance at the last prediction step."""
    p, q = _pair(predicted, truth)
    d = p[-1] - q[-1]
    return float(math.hypot(d[0], d[1]))


def constant_velocity_baseline(observed, steps, frames=None):
    """Extrapolate with the mean velocity of the last two observed steps.

    ``frames`` gives the frame offset of each observed point (default
    consecutive); velocities are per frame, so gaps are handled.
    """
    obs = np.asarray(observed, dtype=np.float64).reshape(-1, 2)
    if len(obs) < 2:
        raise UsageError("constant velocity needs at least 2 observed points")
    ks = np.arange(len(obs), dtype=np.float64) if frames is None else np.asarray(frames, dtype=np.float64)
    first = max(0, len(obs) - 3)
    vel = (obs[-1] - obs[first]) / (ks[-1] - ks[first])
    return obs[-1] + vel * np.arange(1, steps + 1)[:, None]


# ---------------------------------------------------------------------------
# methods: callables mapping a window to {agent_id: (t_pred - t_obs, 2)} in
# the window's normalized coordinates

class LearnedMethod:
    def __init__(self, params, config):
        self.params = params
        self.config = config

    def __call__(self, window, t_obs, t_pred):
        res = M.rollout(window.frames, self.params, self.config, t_obs, t_pred, "predict")
        return res.predictions


class ConstantVelocityMethod:
    def __call__(self, window, t_obs, t_pred):
        out = {}
        for agent in evaluable_agents(window, t_obs, t_pred):
            ks, pts = window.track(agent)
            seen = ks < t_obs
            out[agent] = constant_velocity_baseline(pts[seen], t_pred - t_obs, ks[seen])
        return out


class OracleMethod:
    """Returns the ground truth; a sanity reference whose errors are zero."""

    def __call__(self, window, t_obs, t_pred):
        out = {}
        for agent in evaluable_agents(window, t_obs, t_pred):
            ks, pts = window.track(agent)
            out[agent] = pts[(ks >= t_obs) & (ks < t_pred)]
        return out


def window_ade(window, params, config, t_obs, t_pred):
    """Mean closed-loop ADE over the evaluable agents of one window (normalized units)."""
    preds = LearnedMethod(params, config)(window, t_obs, t_pred)
    errs = []
    for agent in evaluable_agents(window, t_obs, t_pred):
        ks, pts = window.track(agent)
        errs.append(ade(preds[agent], pts[(ks >= t_obs) & (ks < t_pred)]))
    return float(np.mean(errs)) if errs else float("nan")


# ---------------------------------------------------------------------------
# report

@dataclass(frozen=True)
class MetricRow:
    method: str
    category: str
    ade: float
    fde: float
    n_windows: int
    coordinate_scale: str
    n_agents: int


@dataclass
class MetricsReport:
    methods: list
    rows: list
    n_windows: int
    excluded_windows: list = field(default_factory=list)

    def get(self, method, category="total", scale="meters"):
        for r in self.rows:
            if (r.method, r.category, r.coordinate_scale) == (method, category, scale):
                return r
        raise KeyError((method, category, scale))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.method, r.category, repr(r.ade), repr(r.fde), r.n_windows,
                        r.coordinate_scale, r.n_agents])
        return buf.getvalue()

    def to_table(self, scale="meters", digits=3):
        """Aligned text table: metric and category rows, one column per method."""
        head = ["Metric", "Category", *self.methods]
        body = []
        for label, attr in (("Avg. disp. error", "ade"), ("Final disp. error", "fde")):
            for k, cat in enumerate(REPORT_CATEGORIES):
                vals = [getattr(self.get(m, cat, scale), attr) for m in self.methods]
                body.append([label if k == 0 else "", cat,
                             *("-" if math.isnan(v) else f"{v:.{digits}f}" for v in vals)])
        widths = [max(len(str(row[i])) for row in [head, *body]) for i in range(len(head))]
        fmt = lambda row: "  ".join(str(c).ljust(w) if i < 2 else str(c).rjust(w)
                                    for i, (c, w) in enumerate(zip(row, widths))).rstrip()
        lines = [f"coordinate scale: {scale}", fmt(head), fmt(["-" * w for w in widths])]
        lines += [fmt(row) for row in body]
        lines.append(f"windows evaluated: {self.n_windows}, excluded: {len(self.excluded_windows)}")
        return "\n".join(lines) + "\n"


def _score_window(args):
    """Per-method errors for one window, or None if any method fails on it."""
    index, window, methods, t_obs, t_pred = args
    agents = evaluable_agents(window, t_obs, t_pred)
    if not agents:
        return index, {}
    cats = {a.agent_id: a.category for fr in window.frames for a in fr.agents}
    truth = {}
    for agent in agents:
        ks, pts = window.track(agent)
        truth[agent] = pts[(ks >= t_obs) & (ks < t_pred)]
    scores = {}
    for name, method in methods:
        try:
            preds = method(window, t_obs, t_pred)
            rows = []
            for agent in agents:
                p = np.asarray(preds[agent], dtype=np.float64)
                if not np.all(np.isfinite(p)):
                    raise ArithmeticError(f"non-finite prediction for agent {agent}")
                q = truth[agent]
                pm, qm = window.to_meters(p), window.to_meters(q)
                rows.append((cats[agent], ade(p, q), fde(p, q), ade(pm, qm), fde(pm, qm)))
        except (TrafficPredictError, ArithmeticError, ValueError, KeyError) as exc:
            log.warning("window %d excluded: method %s failed: %s", index, name, exc)
            return index, None
        scores[name] = rows
    return index, scores


def evaluate(windows, methods, t_obs=5, t_pred=13, workers=1):
    """Compare ``methods`` (``{name: callable}``) on the same windows.

    Errors are averaged over agent-windows per category, and the total over
    all agent-windows, in both normalized and meter coordinates.  A window on
    which any method fails is dropped for every method.
    """
    names = list(methods)
    if not names:
        raise UsageError("no methods to evaluate")
    for w in windows:
        if not isinstance(w, SceneWindow):
            raise UsageError("evaluate expects SceneWindow objects")
    jobs = [(i, w, list(methods.items()), t_obs, t_pred) for i, w in enumerate(windows)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_score_window, jobs))
    else:
        results = [_score_window(j) for j in jobs]

    excluded = [i for i, s in results if s is None]
    used = [(i, s) for i, s in results if s]
    rows = []
    for name in names:
        for scale_index, scale in enumerate(SCALES):
            for cat in REPORT_CATEGORIES:
                a_vals, f_vals, win = [], [], 0
                for _, s in used:
                    picked = [r for r in s[name] if cat == "total" or CATEGORY_NAMES[r[0]] == cat]
                    if picked:
                        win += 1
                    a_vals += [r[1 + 2 * scale_index] for r in picked]
                    f_vals += [r[2 + 2 * scale_index] for r in picked]
                mean = lambda v: float(np.mean(v)) if v else float("nan")
                rows.append(MetricRow(name, cat, mean(a_vals), mean(f_vals), win, scale, len(a_vals)))
    return MetricsReport(names, rows, len(used), excluded)
