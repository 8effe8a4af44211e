"""End to end: synthesize, train, evaluate clean and occluded scenes, report cost."""

from klpnet import clpg, pipeline, pyramid, synthgen
from klpnet.synthgen import SceneSpec

graphs = [synthgen.to_graph(s) for s in synthgen.generate_many(200, SceneSpec(feature_noise=0.05), 1000)]
params = clpg.train_clpg(graphs, clpg.ClpgHyper(n_categories=3)).params

clean = synthgen.generate_many(30, SceneSpec(feature_noise=0.0, position_jitter=0.0, overlap=0.0), 2000)
occluded = synthgen.generate_many(30, SceneSpec(feature_noise=0.0, position_jitter=1.0, overlap=0.2), 3000)
for name, scenes in (("clean", clean), ("occluded", occluded)):
    print(name)
    print(pipeline.evaluate(scenes, params).to_text())

for name, cfg in pyramid.TOY_CONFIGS.items():
    r = pyramid.flops_estimate(cfg)
    print(f"{name:>10}: {r.macs} MACs, {r.params} params")
