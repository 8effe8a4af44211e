"""Train the link model on synthetic graphs and score held-out scenes."""

import numpy as np

from klpnet import clpg, metrics, synthgen
from klpnet.synthgen import SceneSpec

spec = SceneSpec(n_objects=2, distinct_categories=True, feature_noise=0.05)
train = [synthgen.to_graph(s) for s in synthgen.generate_many(200, spec, 0)]
test = [synthgen.to_graph(s) for s in synthgen.generate_many(20, spec, 99)]

res = clpg.train_clpg(train, clpg.ClpgHyper())
print(f"loss {res.loss[0]:.4f} -> {res.loss[-1]:.4f} over {len(res.loss)} steps")

for g in test[:3]:
    pred = clpg.predict_links(res.params, g)
    ii, jj = np.nonzero(np.triu(g.A, 1))
    gt = set(zip(ii.tolist(), jj.tolist()))
    p, r, f1 = metrics.link_prf(pred, gt)
    auc = metrics.link_auc(clpg.link_scores(res.params, g), g.A, g.cat)
    print(f"{g.n} nodes, {len(gt)} gt links: P {p:.2f} R {r:.2f} F1 {f1:.2f} AUC {auc:.3f}")
