"""Resolve debatable keypoints in crowded scenes with the instance solver."""

from klpnet import lis, synthgen
from klpnet.synthgen import SceneSpec

templates = synthgen.template_map()
for seed in range(3):
    scene = synthgen.generate(SceneSpec(n_objects=3, overlap=0.4, position_jitter=1.0), seed)
    dets = [lis.Detection(k.x, k.y, k.category, scene.features[n], k.slot)
            for n, k in enumerate(scene.keypoints())]
    nodes = lis.classify_nodes(dets, [lis.Instance(o.bbox, o.category) for o in scene.objects])
    a = lis.resolve(nodes, templates)
    ident = lis.identities(nodes, a)
    true = {n: d.slot for n, d in enumerate(dets)}
    correct = sum(ident[n][1] == true[n] for n in ident)
    print(f"seed {seed}: {len(dets)} keypoints, {len(nodes.debatable)} debatable, "
          f"score {a.score:.3f} ({'exhaustive' if a.exhaustive else 'greedy'}), "
          f"slots correct {correct}/{len(ident)}")
    links = {(i, j) for i in range(len(dets)) for j in range(i + 1, len(dets))}
    kept = lis.prune_links(links, nodes, a, templates)
    print(f"  candidate links {len(links)} -> {len(kept)} after skeleton pruning")
