"""Clustering regimes of the hardmax dynamics, then regularised training against its bound.

    python3 demos/clustering_and_training.py
"""

import numpy as np

from interp_forge.dynamics import DynamicsConfig, classify, simulate
from interp_forge.training import TrainingConfig, make_synthetic, train

rng = np.random.default_rng(1)
R = 2.0
sphere = rng.normal(size=(5, 2))
sphere = R * sphere / np.linalg.norm(sphere, axis=1, keepdims=True)
cube = np.vstack([[R, R], rng.uniform(0.2, 1.8, size=(4, 2))])
mixed = np.vstack([[R, R], -R * np.array([[0.6, 0.8]]), rng.uniform(0.2, 1.8, size=(3, 2))])

for name, X in (("sphere", sphere), ("apex + cube", cube), ("apex + sphere leader + cube", mixed)):
    cfg = DynamicsConfig.scaled_identity(0.5)
    cls = classify(X, cfg)
    traj = simulate(X, cfg)
    dev = np.max(np.abs(traj.final - cls.prediction)) if cls.prediction is not None else float("nan")
    print(f"{name:28s} -> {cls.label:18s} steps {traj.steps_taken:3d}, deviation from prediction {dev:.1e}")

print("\ntraining a one-block softmax transformer, N=3 n=8 d=4")
theta, D, kap = make_synthetic(0)
for eps in (1e-1, 1e-2, 1e-3):
    run = train(TrainingConfig(eps, steps=3000), D, theta)
    print(f"  eps {eps:g}: bound eps*kappa {run.threshold:.4f}, best loss {run.min_loss:.4f}, "
          f"crossed at {run.crossed_at}, {run.label}")
