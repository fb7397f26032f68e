"""Edge and feature deletion requests, scored with their own ToU variants."""

import mgu
from mgu.evaluation import build_edge_sets
from mgu.memorization import edge_difficulty, row_feature_difficulty

g = mgu.gen_sbm(mgu.SbmSpec(blocks=(40, 40, 40), p_in=0.08, p_out=0.01, feat_dim=16, mean_shift=1.5, seed=2))
train_cfg = mgu.TrainConfig(seed=0)
original = mgu.train(g, train_cfg)
node_scores = mgu.estimate_mem(g, mgu.MemConfig(num_seeds=1), train_cfg).scores(g.num_nodes)

# edges: endpoint difficulty scaled by 1/sqrt(degree)
edges, scores = edge_difficulty(g, node_scores)
sets = build_edge_sets(edges, scores, g, g.test_nodes, 5)
for name in ("low_mem", "high_mem"):
    req = mgu.UnlearnRequest.edges([tuple(e) for e in sets.get(name).tolist()])
    rep = mgu.evaluate(
        mgu.unlearn_mgu(original, g, req, mgu.UnlearnConfig()), mgu.unlearn_retrain(g, req, train_cfg), g, req
    )
    auc = rep.accuracies["mia_auc"]
    print(
        f"edges {name:8}: ToU={rep.tou:.3f}  attack AUC unlearned={auc['unlearned']:.3f} retrained={auc['retrained']:.3f}"
    )

# features: zero the rows of the hardest owners
row = row_feature_difficulty(g, node_scores)
owners = sorted(g.train_nodes, key=lambda v: -row[v])[:5]
req = mgu.UnlearnRequest.features(owners)
rep = mgu.evaluate(
    mgu.unlearn_mgu(original, g, req, mgu.UnlearnConfig()), mgu.unlearn_retrain(g, req, train_cfg), g, req
)
print(f"features of {len(owners)} owners: ToU={rep.tou:.3f}")
for key in ("deleted_with_structure", "deleted_without_structure"):
    print(f"  {key}: {rep.accuracies[key]}")
