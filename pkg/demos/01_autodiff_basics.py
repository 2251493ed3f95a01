"""Walk through the reverse-mode engine underneath everything else.

Builds a few tensors, runs arithmetic and matrix ops through the tape,
and compares every backward result against a gradient worked out by hand
or by central finite differences.
"""

import numpy as np

from pixelphrase import Tensor, finite_diff_check, relu, sigmoid


def section(title):
    print(f"\n=== {title} ===")


section("scalars and the chain rule")
# f(a, b) = (a * b + a) ** 2 at a=3, b=2  ->  df/da = 2(ab+a)(b+1) = 54
a = Tensor(3.0, requires_grad=True)
b = Tensor(2.0, requires_grad=True)
f = (a * b + a) ** 2
f.backward()
print(f"f = {f.item():.1f} (expected 81)")
print(f"df/da = {a.grad.item():.1f} (hand: 2*(ab+a)*(b+1) = 54)")
print(f"df/db = {b.grad.item():.1f} (hand: 2*(ab+a)*a = 54)")

section("broadcasting folds gradients back")
# y = x + r broadcasts r over rows; dr = column sums of dy
x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
r = Tensor(np.array([10.0, 20.0, 30.0]), requires_grad=True)
y = (x + r).sum()
y.backward()
print(f"x shape {x.data.shape}, r shape {r.data.shape}")
print(f"dr = {r.grad} (each entry sums one broadcast column: 2.0)")

section("matmul against the transpose rule")
rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
v = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
out = (w @ v).sum()
out.backward()
ones = np.ones((3, 2))
print("dW matches ones @ V^T:", np.allclose(w.grad, ones @ v.data.T))
print("dV matches W^T @ ones:", np.allclose(v.grad, w.data.T @ ones))

section("nonlinearities")
z = Tensor(np.linspace(-2, 2, 5), requires_grad=True)
s = sigmoid(z)
s.sum().backward()
print("sigmoid grad s*(1-s):",
      np.allclose(z.grad, s.data * (1 - s.data)))
z2 = Tensor(np.linspace(-2, 2, 5), requires_grad=True)
relu(z2).sum().backward()
print("relu grad is the positive mask:", z2.grad.tolist())

section("finite differences as the referee")
# a composite with every ingredient: matmul, sigmoid, mean
p = Tensor(rng.normal(size=(4, 3)).astype(np.float64), requires_grad=True)
q = Tensor(rng.normal(size=(3, 5)).astype(np.float64), requires_grad=True)


def loss():
    return sigmoid(p @ q).mean()


report = finite_diff_check(loss, {"p": p, "q": q}, op_name="demo_composite")
print(f"max relative error vs central differences: "
      f"{report.max_rel_error:.2e} (tolerance {report.tolerance:.0e})")
print("verdict:", "PASS" if report.passed else "FAIL")
