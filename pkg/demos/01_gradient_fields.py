"""
Gradient fields, line integrals and the balance check
=====================================================

A learned vector field h(zeta) can only stand in for the gradient of some
objective if it is conservative. This script builds three fields by hand and
looks at what the library measures for each of them:

* the gradient of a quadratic, which is conservative,
* a rotation, which is not,
* the input gradient of a random MLP, computed with the tape.
"""

import numpy as np

from sobbo import autodiff as ad
from sobbo.losses import balance_loss
from sobbo.models import MlpSpec, init_model
from sobbo.paths import QuadratureSpec, linear_path, path_integral, sample_path

rng = np.random.default_rng(0)

# a quadratic potential g(z) = z^T A z / 2 + b^T z and its gradient
A = np.array([[1.0, 0.3], [0.3, -0.5]])
b = np.array([0.2, -1.0])
g = lambda z: 0.5 * z @ A @ z + b @ z
grad_g = lambda Z: Z @ A + b
rotation = lambda Z: ad.concat([-Z[:, 1:2], Z[:, 0:1]], axis=1) if isinstance(Z, ad.Var) else np.c_[-Z[:, 1], Z[:, 0]]

start, end = np.array([1.0, 0.0]), np.array([0.0, 1.0])
quad = QuadratureSpec(512)

# Along any path the gradient integrates to g(end) - g(start).
print("g(end) - g(start) =", g(end) - g(start))
for k in range(3):
    path = linear_path(start, end) if k == 0 else sample_path(start, end, 10, rng)
    print(f"  path {k}: integral of grad g = {path_integral(grad_g, path, quad):.6f}",
          f"  integral of rotation = {path_integral(rotation, path, quad):.6f}")

# The balance loss compares the Jacobian with its transpose. It vanishes for
# gradients and is exactly 4 for the rotation, whose Jacobian is [[0,-1],[1,0]].
Z = rng.normal(size=(32, 2))
print("balance loss, grad g     :", float(balance_loss(grad_g, Z).value))
print("balance loss, rotation   :", float(balance_loss(rotation, Z).value))

# The input gradient of any scalar network is a gradient field too. The tape
# records the first backward pass so the balance loss can differentiate it.
net = init_model(MlpSpec(2, (16, 16), 1, "tanh", seed=1))


def mlp_gradient(Zv):
    (h,) = ad.grad(net.on(Zv.tape)(Zv).sum(), [Zv], create_graph=True)
    return h


print("balance loss, MLP gradient:", float(balance_loss(mlp_gradient, Z).value))

# A freshly initialised field network is not conservative.
field = init_model(MlpSpec(2, (16, 16), 2, "tanh", seed=1))
print("balance loss, MLP field   :", float(balance_loss(field.on(ad.Tape()), Z).value))
