# A short tour of the tensor engine: forward values, gradients, and a finite-difference check.
import numpy as np

from wrtrain import autodiff as ad
from wrtrain.gradcheck import check_gradients, run_op_suite

x = ad.Tensor([1.0, 2.0], requires_grad=True)
loss = ad.sum(x * x)
ad.backward(loss)
print("grad of sum(x*x) at [1, 2]:", x.grad)  # [2, 4]

# grads accumulate until cleared
ad.backward(ad.sum(x * x))
print("after a second backward:", x.grad)  # [4, 8]
ad.zero_grads([x])

# softmax stays finite on large logits
print("softmax([1000, 0]):", ad.softmax(ad.Tensor([1000.0, 0.0])).data)

# a domain error is raised instead of producing NaN
try:
    ad.log(ad.Tensor([0.0]))
except ad.DomainError as exc:
    print("log(0) ->", exc)

# central differences at 64-bit on a small two-layer expression
rng = np.random.default_rng(0)
with ad.precision(64):
    w1 = ad.parameter(rng.uniform(-2, 2, (4, 6)), name="w1")
    w2 = ad.parameter(rng.uniform(-2, 2, (6, 3)), name="w2")
    inputs = ad.Tensor(rng.uniform(-2, 2, (5, 4)))
    res = check_gradients(lambda: ad.sum(ad.log_softmax(ad.relu(inputs @ w1) @ w2)[:, 0]),
                          [w1, w2], "two_layer")
print(res.line())

# every op the model uses
for r in run_op_suite(seed=0):
    print(r.line())
