"""Unlearn easy and hard node sets and score each method against retraining."""

import mgu
from mgu.evaluation import SETTING_TO_SET

g = mgu.gen_sbm(
    mgu.SbmSpec(blocks=(40, 40, 40), p_in=0.08, p_out=0.01, feat_dim=16, mean_shift=1.5, label_noise=0.05, seed=1)
)
train_cfg = mgu.TrainConfig(seed=0)
print(f"graph: {g.num_nodes} nodes, {g.num_edges} edges, {len(g.train_nodes)} train")

# difficulty = memorization; the easy set is the least memorized 5%
mem = mgu.estimate_mem(g, mgu.MemConfig(num_seeds=2), train_cfg)
sets = mgu.build_difficulty_sets(mem.scores(g.num_nodes), g, g.test_nodes, 5)
original = mgu.train(g, train_cfg)

cfg = mgu.UnlearnConfig()
print(f"{'setting':8} {'method':12} {'ToU':>6}")
for setting in ("easy", "random", "hard"):
    req = mgu.UnlearnRequest.nodes(sets.get(SETTING_TO_SET[setting]))
    retrained = mgu.unlearn_retrain(g, req, train_cfg)
    models = {
        "MGU": mgu.unlearn_mgu(original, g, req, cfg),
        "w/o Margin": mgu.unlearn_ablation(original, g, req, cfg, "no_margin"),
        "w/o Distill": mgu.unlearn_ablation(original, g, req, cfg, "no_distill"),
    }
    for name, params in models.items():
        print(f"{setting:8} {name:12} {mgu.evaluate(params, retrained, g, req).tou:6.3f}")
