"""Fit a small model to a single window and watch closed-loop ADE fall.

Run: python demos/02_overfit_one_window.py   (about a minute)
"""

from trafficpredict import data as D
from trafficpredict import model as M
from trafficpredict import train as T

spec = D.ScenarioSpec(kind="crossroad", n_pedestrians=2, n_bicycles=1, n_vehicles=1, noise=0.0,
                      duration=13, spawn_window=0.01, seed=0)
window = D.slice_windows(D.generate_scenario(spec), 5, 13)[0]
cfg = M.ModelConfig(edge_hidden=16, node_hidden=16, super_edge_hidden=8, super_hidden=8,
                    embed_dim=8, attention_dim=8)

params, history = T.overfit_window(window, cfg, 600, tc=T.TrainConfig(lr=0.005), eval_every=100)
for step, loss, ade in history:
    print(f"step {step:4d}  train NLL {loss:9.3f}  closed-loop ADE {ade:.4f}")

res = M.rollout(window.frames, params, cfg, 5, 13, "predict")
agent = sorted(res.predictions)[0]
g = res.gaussians[(agent, 12)]
print(f"agent {agent} at the last frame: mean ({g.mu_x:.3f}, {g.mu_y:.3f}), "
      f"sigma ({g.sigma_x:.3f}, {g.sigma_y:.3f}), rho {g.rho:.3f}")
