"""
The stochastic simulators
=========================

Three of the benchmark objectives are simulators rather than formulas. Each
has a closed form in some limit, which is how they are checked here.
"""

import numpy as np
from scipy.integrate import quad

from sobbo.problems import (
    enumerate_paths,
    longest_path,
    mm1_sojourn,
    san_topology,
    simulate_newsvendor,
    simulate_san,
)

rng = np.random.default_rng(0)

# M/M/1 queue: mean time in system is 1 / (service rate - arrival rate).
for mu, lam in [(5.0, 2.0), (2.0, 1.5), (6.0, 1.0)]:
    sim = mm1_sojourn(mu, lam, 100_000, 1000, rng)
    print(f"M/M/1 mu={mu} lambda={lam}: simulated {sim:.4f}, exact {1 / (mu - lam):.4f}")

# Newsvendor with Burr XII demand: expected profit by quadrature of the CDF.
alpha, beta, price, salvage = 2.0, 20.0, 9.0, 1.0
F = lambda z: 1 - (1 + z ** alpha) ** (-beta)
for order, cost in [(0.2, 5.0), (0.4, 4.0)]:
    exact = price * quad(lambda z: 1 - F(z), 0, order)[0] + salvage * quad(F, 0, order)[0] - cost * order
    sim = simulate_newsvendor(np.full(200_000, order), cost, rng=rng).mean()
    print(f"newsvendor order={order} cost={cost}: simulated profit {sim:.4f}, quadrature {exact:.4f}")

# Stochastic activity network: the longest path through the DAG is found by
# dynamic programming and matches enumerating every source-to-sink path.
nodes, arcs = san_topology()
paths = enumerate_paths(arcs, 0, len(nodes) - 1)
durations = rng.exponential(size=(5, len(arcs)))
print(f"\nSAN with {len(nodes)} nodes, {len(arcs)} arcs, {len(paths)} paths")
for d in durations:
    by_paths = max(d[p].sum() for p in paths)
    print(f"  DP {longest_path(d[None])[0]:.4f}  enumeration {by_paths:.4f}")

theta, x = np.full(8, 1.0), np.full(5, 2.0)
print("SAN objective at unit rates:", simulate_san(theta, x, rng=rng).mean())
