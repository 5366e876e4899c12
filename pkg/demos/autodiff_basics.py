"""The tape: record a forward pass, sweep it backwards, read .grad."""

import numpy as np

from tvector import tensor as tn
from tvector.tensor import Tape, Tensor

a = Tensor([[1.0, 2.0]], requires_grad=True)
b = Tensor([[3.0], [4.0]], requires_grad=True)

with Tape() as tape:
    c = tn.matmul(a, b)          # [[11]]
    loss = tn.sum_all(tn.relu(c) * 2.0)
    tn.backward(loss)

print("c =", c.data)
print("dloss/da =", a.grad)      # 2 * b.T
print("dloss/db =", b.grad.T)    # 2 * a

# Nothing flows through stop_gradient; the detached side reads exactly zero.
x = Tensor(np.arange(3.0), requires_grad=True)
with Tape():
    tn.backward(tn.sum_all(tn.stop_gradient(x) * x))
print("grad through one live factor:", x.grad)

# Outside a tape nothing is recorded, so inference costs no bookkeeping.
y = tn.softmax_rows(Tensor([[0.0, np.log(3.0)]]))
print("softmax [0, ln 3] ->", y.data)
