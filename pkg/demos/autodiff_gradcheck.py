"""Build a tiny graph by hand, backpropagate, and confirm with finite differences."""

import numpy as np

from clcsca.tensor import Tensor, backward, finite_diff_check, linear, log_softmax_nll, relu

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(5, 3)))
W1 = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
b1 = Tensor(rng.normal(size=8), requires_grad=True)
W2 = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
labels = [0, 3, 1, 1, 2]


def loss_fn(W1, b1, W2):
    return log_softmax_nll(linear(relu(linear(x, W1, b1)), W2), labels)


loss = loss_fn(W1, b1, W2)
backward(loss)
print(f"loss {loss.item():.6f}")
print("dL/dW2 row 0:", np.round(W2.grad[0], 5))

report = finite_diff_check(loss_fn, [W1, b1, W2])
print(f"finite differences agree: max relative error {report.max_rel_err:.2e} (passed={report.passed})")
