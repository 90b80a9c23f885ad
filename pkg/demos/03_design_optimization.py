"""
Optimising a design with learned gradients
==========================================

Train one ETD surrogate and one DGI field on scarce Perm data, then run
projected Adam on theta with each estimator and compare the true objective
values reached with random search and with the best design in the data.
Scores are normalised against a reference optimum found with true gradients:
0 means as good as the reference, lower is better.
"""

import numpy as np

from sobbo.evaluation import (
    GradientEstimator,
    InferenceConfig,
    TrueValueOracle,
    baseline_dataset_oracle,
    baseline_random_search,
    normalize_score,
    optimize_design,
    reference_optimum,
)
from sobbo.paths import QuadratureSpec
from sobbo.problems import generate_dataset, get_problem
from sobbo.training import TrainConfig, train, variant_loss_config

spec = get_problem("perm")
data = generate_dataset(spec, 128, 0.5, seed=0)
oracle = TrueValueOracle(spec, 10_000, seed=1)
x_star, theta_star = reference_optimum(spec, oracle)
print(f"reference optimum {x_star:.4f} at theta = {np.round(theta_star, 3)}")

rng = np.random.default_rng(2)
rows = {
    "RS": baseline_random_search(spec, 128, oracle, rng),
    "OC": baseline_dataset_oracle(data, oracle),
}
for method in ("ETD", "DGI-full"):
    loss_cfg = variant_loss_config(method, quadrature=QuadratureSpec(32)) if method != "ETD" else None
    model = train(data, TrainConfig(method, learning_rate=2e-3, hidden=(32, 32, 32), loss_cfg=loss_cfg)).model
    est = GradientEstimator.from_model(model, spec.d_theta, data.x)
    for init in ("R", "G"):
        entry = optimize_design(est, data, spec, InferenceConfig(init), oracle, rng)
        rows[f"{method.split('-')[0]}({init})"] = entry.mean

print(f"\n{'row':8s} {'raw':>9s} {'score':>9s}")
for name, value in rows.items():
    print(f"{name:8s} {value:9.4f} {normalize_score(value, x_star)[0]:9.4f}")
