"""The three algorithm variants: plain averaging, proximal training, and
per-client personalization.

Server side they are the same operation, a weighted average. The variants
differ only in the client's gradient path, and both regularized variants
reduce exactly to the plain one when their coefficient is zero.
"""

from fedkit import (
    ModelUpdate,
    ParameterVector,
    ditto_personal_step,
    federated_average,
    proximal_loss_gradient,
)

# --- weighted averaging --------------------------------------------------
updates = [
    ModelUpdate("small-site", 0, ParameterVector([0.0, 0.0]), sample_count=1),
    ModelUpdate("large-site", 0, ParameterVector([4.0, 8.0]), sample_count=3),
]
print("sample-count weighted:", federated_average(updates, "sample_count").tolist())  # [3, 6]
print("uniform:              ", federated_average(updates, "uniform").tolist())       # [2, 4]

# --- the proximal gradient -------------------------------------------------
# Clients add mu/2 ||w - w_global||^2 to their objective; gradient-side that
# is one extra term. mu = 0 returns the local gradient unchanged, bit for bit.
grad = ParameterVector([0.2, -0.4])
w = ParameterVector([1.0, 1.0])
w_global = ParameterVector([0.0, 0.0])
print("prox gradient (mu=0.5):", proximal_loss_gradient(grad, w, w_global, 0.5).tolist())
print("prox gradient (mu=0):  ", proximal_loss_gradient(grad, w, w_global, 0.0).tolist())

# Minimizing 1/2 (w-2)^2 + mu/2 w^2 by gradient descent lands on the
# closed-form minimizer (a + mu*g) / (1 + mu) = 1.0.
wk = ParameterVector([0.0])
for _ in range(200):
    local = ParameterVector([wk.values[0] - 2.0])
    wk = ParameterVector(wk.values - 0.2 * proximal_loss_gradient(local, wk, ParameterVector([0.0]), 1.0).values)
print("regularized quadratic converges to:", round(float(wk.values[0]), 6))

# --- personalization -------------------------------------------------------
# Each client keeps a private model v pulled toward the shared global model.
v = ParameterVector([1.0])
print("personal step (lambda=2):", ditto_personal_step(
    v, ParameterVector([0.0]), ParameterVector([0.0]), 2.0, 0.1).tolist())  # [0.8]
print("personal step (lambda=0):", ditto_personal_step(
    v, ParameterVector([0.0]), ParameterVector([0.0]), 0.0, 0.1).tolist())  # plain step
