"""Trajectory records, window slicing, normalization and synthetic scenes.

The CSV format is ``frame,agent_id,category,x,y`` with one row per agent per
frame.  Several scenes can share one file: they are separated by at least one
empty frame, and window slicing never crosses an empty frame.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigurationError, ParseError, UsageError, ValidationError
from .graph4d import BICYCLE, CATEGORIES, PEDESTRIAN, VEHICLE, AgentObservation, FrameObservation

log = logging.getLogger(__name__)

CSV_HEADER = ("frame", "agent_id", "category", "x", "y")


@dataclass(frozen=True, order=True)
class TrajectoryRecord:
    frame: int
    agent_id: int
    category: int
    x: float
    y: float


# ---------------------------------------------------------------------------
# CSV

def save_trajectories(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(format_trajectories(records))


def format_trajectories(records, extra_columns=()):
    """CSV text for ``records``; floats use shortest round-trip repr."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER + tuple(extra_columns))
    for r in sorted(records, key=lambda r: (r.frame, r.agent_id)):
        w.writerow([r.frame, r.agent_id, r.category, repr(float(r.x)), repr(float(r.y))])
    return buf.getvalue()


def load_trajectories(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_trajectories(fh.read())


def parse_trajectories(text):
    """Parse and validate CSV text; rows come back sorted by ``(frame, agent_id)``."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("missing header", line=1) from None
    if tuple(h.strip() for h in header[:5]) != CSV_HEADER:
        raise ParseError(f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}", line=1)
    records, seen = [], set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 5:
            raise ParseError(f"expected 5 fields, got {len(row)}", line=lineno)
        try:
            frame, agent, cat = int(row[0]), int(row[1]), int(row[2])
            x, y = float(row[3]), float(row[4])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if cat not in CATEGORIES:
            raise ValidationError(f"line {lineno}: invalid category {cat}")
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValidationError(f"line {lineno}: non-finite coordinate")
        if (frame, agent) in seen:
            raise ValidationError(f"line {lineno}: duplicate (frame, agent_id) = ({frame}, {agent})")
        seen.add((frame, agent))
        records.append(TrajectoryRecord(frame, agent, cat, x, y))
    records.sort(key=lambda r: (r.frame, r.agent_id))
    return records


# ---------------------------------------------------------------------------
# windows

@dataclass
class SceneWindow:
    """Consecutive frames in normalized coordinates.

    ``normalized = (meters - center) * scale``.
    """

    frames: list
    start_frame: int
    center: np.ndarray
    scale: float

    def __len__(self):
        return len(self.frames)

    def to_meters(self, points):
        return np.asarray(points, dtype=np.float64) / self.scale + self.center

    def to_normalized(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def records(self, meters=True):
        out = []
        for k, fr in enumerate(self.frames):
            for a in fr.agents:
                x, y = self.to_meters([a.x, a.y]) if meters else (a.x, a.y)
                out.append(TrajectoryRecord(self.start_frame + k, a.agent_id, a.category,
                                            float(x), float(y)))
        return out

    def track(self, agent_id, meters=False):
        """``(frame_offsets, points)`` of one agent."""
        ks, pts = [], []
        for k, fr in enumerate(self.frames):
            for a in fr.agents:
                if a.agent_id == agent_id:
                    ks.append(k)
                    pts.append((a.x, a.y))
        pts = np.array(pts).reshape(-1, 2)
        return np.array(ks, dtype=int), (self.to_meters(pts) if meters else pts)


def _group_by_frame(records):
    frames = {}
    for r in records:
        frames.setdefault(r.frame, []).append(r)
    return frames


def normalize_window(records, reference_frames=None):
    """Normalize one window of records into a :class:`SceneWindow`.

    The translation puts the midpoint of the coordinate bounding box at the
    origin; one isotropic scale maps the larger of the x/y spans onto
    ``[-1, 1]``.  Only frames listed in ``reference_frames`` (default: all)
    determine the transform.  A window whose reference span is zero uses
    scale 1.
    """
    records = list(records)
    if not records:
        raise UsageError("normalize_window needs at least one record")
    by_frame = _group_by_frame(records)
    lo, hi = min(by_frame), max(by_frame)
    ref = [r for r in records if reference_frames is None or r.frame in reference_frames]
    if not ref:
        raise UsageError("reference frames contain no records")
    pts = np.array([[r.x, r.y] for r in ref])
    pmin, pmax = pts.min(axis=0), pts.max(axis=0)
    center = (pmin + pmax) / 2.0
    span = float((pmax - pmin).max())
    scale = 2.0 / span if span > 0 else 1.0
    frames = []
    for f in range(lo, hi + 1):
        agents = tuple(AgentObservation(r.agent_id, r.category,
                                        float((r.x - center[0]) * scale), float((r.y - center[1]) * scale))
                       for r in sorted(by_frame.get(f, []), key=lambda r: r.agent_id))
        frames.append(FrameObservation(f - lo, agents))
    return SceneWindow(frames, lo, center, scale)


@dataclass
class SliceReport:
    windows: list
    skipped_gaps: int


def slice_windows(records, t_obs, t_pred, stride=1, normalize_on="observed", with_report=False):
    """Overlapping windows of ``t_pred`` consecutive frames.

    Windows containing an empty frame are skipped (and counted).  The
    normalization transform is computed from the observed frames only
    (``normalize_on="observed"``) or from the whole window (``"all"``).
    """
    if not 1 <= t_obs < t_pred:
        raise UsageError(f"need 1 <= t_obs < t_pred, got {t_obs}, {t_pred}")
    if stride < 1:
        raise UsageError("stride must be >= 1")
    by_frame = _group_by_frame(records)
    if not by_frame:
        return SliceReport([], 0) if with_report else []
    first, last = min(by_frame), max(by_frame)
    windows, gaps = [], 0
    for start in range(first, last - t_pred + 2, stride):
        span = range(start, start + t_pred)
        if any(f not in by_frame for f in span):
            gaps += 1
            continue
        recs = [r for f in span for r in by_frame[f]]
        ref = set(range(start, start + t_obs)) if normalize_on == "observed" else None
        windows.append(normalize_window(recs, ref))
    if gaps:
        log.info("slice_windows: skipped %d windows containing missing frames", gaps)
    return SliceReport(windows, gaps) if with_report else windows


# ---------------------------------------------------------------------------
# synthetic scenes

SPEED_BANDS = {PEDESTRIAN: (1.0, 2.0), BICYCLE: (3.0, 5.0), VEHICLE: (8.0, 12.0)}
SCENARIO_KINDS = ("straight_lanes", "crossroad", "mixed")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "crossroad"
    n_pedestrians: int = 3
    n_bicycles: int = 2
    n_vehicles: int = 4
    frame_rate: float = 2.5
    duration: int = 40          # frames per scene
    noise: float = 0.0          # meters, std of observation noise
    seed: int = 0
    scenes: int = 1
    min_frames: int = 13        # shortest admissible scene (one window)
    spawn_window: float = 0.5   # agents enter during the first fraction of a scene

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if min(self.n_pedestrians, self.n_bicycles, self.n_vehicles) < 0:
            raise ConfigurationError("agent counts must be >= 0")
        if self.duration < self.min_frames:
            raise ConfigurationError(
                f"duration {self.duration} frames is shorter than one window ({self.min_frames})")
        if not 0 < self.frame_rate <= 10:
            raise ConfigurationError("frame_rate must lie in (0, 10]")
        if self.noise < 0 or self.scenes < 1:
            raise ConfigurationError("noise must be >= 0 and scenes >= 1")

    @property
    def dt(self):
        return 1.0 / self.frame_rate

    @property
    def counts(self):
        return {PEDESTRIAN: self.n_pedestrians, BICYCLE: self.n_bicycles, VEHICLE: self.n_vehicles}

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, value in mapping.items():
            if key not in known:
                continue
            default = getattr(cls, key)
            kw[key] = type(default)(value) if not isinstance(value, type(default)) else value
        return cls(**kw)


class Path:
    """Piecewise path of straight segments and circular arcs, sampled by arc length."""

    def __init__(self, start, heading):
        self.pieces = []
        self.pos = np.asarray(start, dtype=np.float64)
        self.heading = float(heading)
        self.length = 0.0

    def straight(self, length):
        self.pieces.append(("line", self.length, length, self.pos.copy(), self.heading))
        self.pos = self.pos + length * np.array([math.cos(self.heading), math.sin(self.heading)])
        self.length += length
        return self

    def arc(self, radius, angle):
        """Turn by ``angle`` radians (positive = left) along a circle of ``radius``."""
        side = 1.0 if angle > 0 else -1.0
        normal = np.array([-math.sin(self.heading), math.cos(self.heading)]) * side
        center = self.pos + radius * normal
        phi0 = math.atan2(self.pos[1] - center[1], self.pos[0] - center[0])
        length = radius * abs(angle)
        self.pieces.append(("arc", self.length, length, center, radius, phi0, side))
        self.heading += angle
        self.pos = center + radius * np.array([math.cos(phi0 + angle), math.sin(phi0 + angle)])
        self.length += length
        return self

    def at(self, s):
        for piece in self.pieces:
            kind, s0, length = piece[:3]
            if s <= s0 + length or piece is self.pieces[-1]:
                u = s - s0
                if kind == "line":
                    p0, h = piece[3], piece[4]
                    return p0 + u * np.array([math.cos(h), math.sin(h)])
                center, radius, phi0, side = piece[3:]
                phi = phi0 + side * u / radius
                return center + radius * np.array([math.cos(phi), math.sin(phi)])
        raise ValueError("empty path")

    def piece_kind(self, s):
        for piece in self.pieces:
            if s <= piece[1] + piece[2]:
                return piece[0]
        return self.pieces[-1][0]


ROAD_HALF = 60.0   # arm length from the scene center, meters
LANE = 1.75        # vehicle lane offset from the road center line
BIKE_LANE = 4.5
SIDEWALK = 9.0


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _crossroad_path(category, arm, turn):
    """Route entering from arm ``arm`` (0=south, 1=east, ...) with ``turn`` in {straight,left,right}."""
    offset = LANE if category == VEHICLE else BIKE_LANE
    box = 7.0 if category == VEHICLE else 10.0
    rot = _rot(arm * math.pi / 2)
    start = rot @ np.array([offset, -ROAD_HALF])
    heading = math.pi / 2 + arm * math.pi / 2
    p = Path(start, heading)
    p.straight(ROAD_HALF - box)
    if turn == "straight":
        p.straight(2 * box)
    elif turn == "right":
        p.arc(box - offset, -math.pi / 2)
    else:
        p.arc(box + offset, math.pi / 2)
    p.straight(ROAD_HALF - box)
    return p


def _lane_path(category, direction, lateral):
    heading = 0.0 if direction > 0 else math.pi
    p = Path(np.array([-ROAD_HALF * direction, lateral]), heading)
    return p.straight(2 * ROAD_HALF)


@dataclass
class _Agent:
    agent_id: int
    category: int
    speed: float
    spawn: int
    s0: float = 0.0
    path: Path | None = None
    # pedestrians are simulated step by step
    pos: np.ndarray | None = None
    heading: float = 0.0
    base_heading: float = 0.0
    positions: dict = field(default_factory=dict)


def _spawn_agents(spec, kind, rng, id_base):
    agents = []
    next_id = id_base
    spawn_limit = max(1, int(spec.duration * spec.spawn_window))
    for cat in (VEHICLE, BICYCLE, PEDESTRIAN):
        for k in range(spec.counts[cat]):
            lo, hi = SPEED_BANDS[cat]
            speed = float(rng.uniform(lo, hi))
            spawn = 0 if k % 2 == 0 else int(rng.integers(0, spawn_limit))
            a = _Agent(next_id, cat, speed, spawn)
            next_id += 1
            if cat == PEDESTRIAN:
                corner = int(rng.integers(4))
                sx, sy = (1, 1, -1, -1)[corner], (1, -1, 1, -1)[corner]
                along_x = bool(rng.integers(2))
                if kind == "straight_lanes":
                    start = np.array([rng.uniform(-30, 30), sy * (SIDEWALK + 2.0)])
                    base = 0.0 if rng.integers(2) else math.pi
                else:
                    start = np.array([sx * (SIDEWALK + rng.uniform(0, 25)), sy * SIDEWALK]) if along_x \
                        else np.array([sx * SIDEWALK, sy * (SIDEWALK + rng.uniform(0, 25))])
                    # walk toward the crossing
                    base = math.atan2(-start[1], -start[0]) if rng.random() < 0.3 else \
                        (math.pi if sx > 0 else 0.0) if along_x else (-math.pi / 2 if sy > 0 else math.pi / 2)
                a.pos, a.heading, a.base_heading = start, base, base
            elif kind == "straight_lanes":
                direction = 1 if rng.integers(2) else -1
                if cat == VEHICLE:
                    lateral = -direction * (LANE if rng.integers(2) else 3 * LANE)
                else:
                    lateral = -direction * (BIKE_LANE + 2.5)
                a.path = _lane_path(cat, direction, lateral)
            else:
                probs = (0.3, 0.35, 0.35) if cat == VEHICLE else (0.5, 0.25, 0.25)
                turn = ("straight", "left", "right")[int(rng.choice(3, p=probs))]
                a.path = _crossroad_path(cat, int(rng.integers(4)), turn)
            if a.path is not None:
                if a.spawn == 0:
                    # start partway along so the scene opens populated and turning
                    a.s0 = float(rng.uniform(0.25, 0.55) * a.path.length)
            agents.append(a)
    return agents


def _simulate_scene(spec, kind, rng, id_base):
    agents = _spawn_agents(spec, kind, rng, id_base)
    dt = spec.dt
    for t in range(spec.duration):
        for a in agents:
            if a.path is None or t < a.spawn:
                continue
            s = a.s0 + a.speed * dt * (t - a.spawn)
            if s <= a.path.length:
                a.positions[t] = a.path.at(s)
        # pedestrians: heading jitter pulled back toward the base heading, plus repulsion
        for a in agents:
            if a.path is not None or t < a.spawn:
                continue
            if t > a.spawn:
                a.heading += 0.3 * (a.base_heading - a.heading) + rng.normal(0.0, 0.15)
                direction = np.array([math.cos(a.heading), math.sin(a.heading)])
                push = np.zeros(2)
                for b in agents:
                    other = b.positions.get(t - 1) if b is not a else None
                    if other is None:
                        continue
                    gap = a.pos - other
                    dist = float(np.hypot(*gap))
                    if 0 < dist < 2.0:
                        push += gap / dist * (2.0 - dist)
                step = direction + push
                norm = float(np.hypot(*step))
                if norm > 0:
                    step = step / norm
                    a.heading = math.atan2(step[1], step[0])
                a.pos = a.pos + a.speed * dt * step
            if max(abs(a.pos[0]), abs(a.pos[1])) <= ROAD_HALF:
                a.positions[t] = a.pos.copy()
    return agents


def generate_scenario(spec):
    """Synthetic heterogeneous traffic, deterministic given ``spec.seed``.

    Vehicles follow lanes at constant speed and, at crossroads, turn left or
    right along circular arcs; bicycles use outer lanes with wider turns;
    pedestrians walk near the sidewalks with heading jitter and keep 2 m
    clear of other agents.  Scenes are concatenated with one empty frame
    between them and agent ids are offset by 1000 per scene.
    """
    rng = np.random.default_rng(spec.seed)
    records = []
    for k in range(spec.scenes):
        kind = spec.kind if spec.kind != "mixed" else ("crossroad", "straight_lanes")[k % 2]
        base = k * (spec.duration + 1)
        agents = _simulate_scene(spec, kind, rng, id_base=k * 1000)
        for a in agents:
            for t, p in sorted(a.positions.items()):
                records.append(TrajectoryRecord(base + t, a.agent_id, a.category, float(p[0]), float(p[1])))
    if spec.noise > 0:
        eps = rng.normal(0.0, spec.noise, size=(len(records), 2))
        records = [replace(r, x=r.x + float(e[0]), y=r.y + float(e[1])) for r, e in zip(records, eps)]
    records.sort(key=lambda r: (r.frame, r.agent_id))
    return records


def scenario_kind_of_frames(spec):
    """``frame -> kind`` for the scenes of ``spec``."""
    out = {}
    for k in range(spec.scenes):
        kind = spec.kind if spec.kind != "mixed" else ("crossroad", "straight_lanes")[k % 2]
        base = k * (spec.duration + 1)
        for t in range(spec.duration):
            out[base + t] = kind
    return out


@dataclass
class Benchmark:
    train: list
    test: list
    test_kinds: list      # scenario kind of each test window
    t_obs: int
    t_pred: int


def default_benchmark(seed=0, n_train=200, n_test=50, t_obs=5, t_pred=13, stride=3, noise=0.05):
    """Mixed straight-lane / crossroad windows for training and testing.

    Training and test scenes come from disjoint generator streams of ``seed``.
    """
    def build(stream, n):
        windows, kinds = [], []
        scene = 0
        while len(windows) < n:
            spec = ScenarioSpec(kind="crossroad" if scene % 2 == 0 else "straight_lanes",
                                noise=noise, seed=int(np.random.SeedSequence([seed, stream, scene])
                                                      .generate_state(1)[0]),
                                duration=40, min_frames=t_pred)
            recs = generate_scenario(spec)
            for w in slice_windows(recs, t_obs, t_pred, stride):
                if loss_ready(w, t_obs, t_pred):
                    windows.append(w)
                    kinds.append(spec.kind)
            scene += 1
        return windows[:n], kinds[:n]

    train, _ = build(0, n_train)
    test, kinds = build(1, n_test)
    return Benchmark(train, test, kinds, t_obs, t_pred)


def evaluable_agents(window, t_obs, t_pred):
    """Agents with >= 2 observed frames that are present through the whole horizon."""
    frames = window.frames if isinstance(window, SceneWindow) else window
    observed = {}
    for fr in frames[:t_obs]:
        for a in fr.agents:
            observed[a.agent_id] = observed.get(a.agent_id, 0) + 1
    keep = {a for a, k in observed.items() if k >= 2}
    for fr in frames[t_obs - 1:t_pred]:
        keep &= {a.agent_id for a in fr.agents}
    return sorted(keep)


def loss_ready(window, t_obs, t_pred):
    return bool(evaluable_agents(window, t_obs, t_pred))


def parse_key_value(text):
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ParseError("empty key", line=lineno)
        out[key] = value
    return out
