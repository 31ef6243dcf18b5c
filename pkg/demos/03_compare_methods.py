"""Train reduced-width variants briefly and compare them with constant velocity.

Run: python demos/03_compare_methods.py   (a few minutes)

The report has the same layout as the CLI's eval command.  With this little
training the learned models usually trail constant velocity; the point is
the workflow, not the numbers.
"""

from trafficpredict import data as D
from trafficpredict import eval as E
from trafficpredict import model as M
from trafficpredict import train as T

bench = D.default_benchmark(seed=0, n_train=40, n_test=20)
dims = dict(edge_hidden=16, node_hidden=16, super_edge_hidden=8, super_hidden=8, embed_dim=8, attention_dim=8)

methods = {"constant_velocity": E.ConstantVelocityMethod()}
for mode in ("full", "no_self_attention", "no_category_layer", "ed_baseline"):
    cfg = M.ModelConfig(mode=mode, **dims)
    res = T.train_epochs(bench.train, cfg, T.TrainConfig(epochs=5, batch_size=4))
    print(f"{mode:18s} mean NLL per epoch", [round(n, 2) for _, n, _ in res.curve])
    methods[mode] = E.LearnedMethod(res.params, cfg)

report = E.evaluate(bench.test, methods)
print(report.to_table("normalized"))
