"""Generate a synthetic crossroad, slice it into windows and look at one of them.

Run: python demos/01_scenes_and_windows.py
"""

import numpy as np

from trafficpredict import data as D
from trafficpredict.graph4d import CATEGORY_NAMES, build_graph

spec = D.ScenarioSpec(kind="crossroad", n_pedestrians=3, n_bicycles=2, n_vehicles=2, seed=1)
records = D.generate_scenario(spec)
print(f"{len(records)} records over {len({r.frame for r in records})} frames")

# speeds per category in meters per second
for cat, name in CATEGORY_NAMES.items():
    steps = []
    for agent in {r.agent_id for r in records if r.category == cat}:
        pts = np.array([(r.x, r.y) for r in records if r.agent_id == agent])
        steps.append(np.hypot(*np.diff(pts, axis=0).T).mean() * spec.frame_rate)
    print(f"  {name:10s} mean speed {np.mean(steps):5.2f} m/s")

windows = D.slice_windows(records, 5, 13, stride=3)
w = windows[0]
print(f"{len(windows)} windows; first starts at frame {w.start_frame}, scale {w.scale:.4f} per meter")
obs = np.array([[a.x, a.y] for fr in w.frames[:5] for a in fr.agents])
print("observed coordinates span", obs.min(axis=0).round(3), "to", obs.max(axis=0).round(3))

# the graph of the window: spatial edges per frame, super nodes, memberships
g = build_graph(w.frames)
for t in (0, 4, 12):
    print(f"  frame {t}: {len(g.spatial_edges(t))} spatial edges, super nodes {sorted(g.super_nodes(t))}")
print("evaluable agents:", D.evaluable_agents(w, 5, 13))
