"""Train the from-scratch GCN on the bundled toy graph and check its gradients."""

from pathlib import Path

import numpy as np

import mgu
from mgu.gcn import as_propagation, backward, cross_entropy, init_params

data = Path(mgu.__file__).parent / "data"

# 24 nodes, two classes, four features; split 80/20 with a fixed seed
g = mgu.split(mgu.load_csv(data / "toy_nodes.csv", data / "toy_edges.csv"), 0.8, seed=0)
print(f"nodes={g.num_nodes} edges={g.num_edges} train={len(g.train_nodes)} test={len(g.test_nodes)}")

# the normalized adjacency is symmetric and carries self-loops
prop = as_propagation(g)
a = prop.a_hat.toarray()
print("A_hat symmetric:", np.allclose(a, a.T), " diagonal > 0:", bool((np.diag(a) > 0).all()))

# one central-difference probe on the cross-entropy gradient
p = init_params(g.feat_dim, 8, g.num_classes, seed=1)
_, d_logits = cross_entropy(mgu.forward(p, prop).logits, g.labels, g.train_nodes)
grad = backward(p, prop, d_logits)["W2"][0, 0]
h = 1e-5
w2 = p.W2.copy()
w2[0, 0] += h
up = cross_entropy(mgu.forward(mgu.ModelParams(p.W1, p.b1, w2, p.b2), prop).logits, g.labels, g.train_nodes)[0]
w2[0, 0] -= 2 * h
down = cross_entropy(mgu.forward(mgu.ModelParams(p.W1, p.b1, w2, p.b2), prop).logits, g.labels, g.train_nodes)[0]
print(f"dL/dW2[0,0]: analytic={grad:.8f} numeric={(up - down) / (2 * h):.8f}")

# full training run; same seed gives the same bytes
params, history = mgu.train(g, mgu.TrainConfig(hidden_dim=16, epochs=100), return_history=True)
print(f"loss {history[0]:.3f} -> {history[-1]:.3f}")
pred = mgu.forward(params, g).predictions()
for name, nodes in (("train", g.train_nodes), ("test", g.test_nodes)):
    print(f"{name} accuracy: {np.mean(pred[nodes] == g.labels[nodes]):.3f}")
again = mgu.train(g, mgu.TrainConfig(hidden_dim=16, epochs=100))
print("deterministic:", params.equals(again))
