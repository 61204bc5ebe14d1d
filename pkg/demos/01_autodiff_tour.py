"""A short tour of the tape-based autodiff that the renderer is built on."""
import numpy as np

from moefield import autodiff as ad
from moefield.autodiff import Tensor

print("== 1. a scalar function and its gradient ==")
x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
y = ad.sum(ad.mul(ad.softplus(x), ad.sigmoid(x)))
ad.backward(y)
print("   x      :", x.data)
print("   y      :", y.item())
print("   dy/dx  :", x.grad)

print("== 2. the same gradient by central differences ==")


def f(v):
    sp = np.logaddexp(0.0, v)
    return float(np.sum(sp / (1.0 + np.exp(-v))))


h = 1e-5
fd = np.array([(f(x.data + h * e) - f(x.data - h * e)) / (2 * h) for e in np.eye(3)])
print("   finite :", fd)
print("   max |diff|:", np.abs(fd - x.grad).max())

print("== 3. a tiny MLP layer, batch of 4 ==")
rng = np.random.default_rng(0)
W = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)
inp = Tensor(rng.normal(size=(4, 3)))
out = ad.relu(ad.add(ad.matmul(inp, W), b))
loss = ad.mean(ad.square(out))
grads = ad.backward(loss, [W, b])
print("   loss      :", round(loss.item(), 6))
print("   grad W    :\n", np.round(grads[0], 4))
print("   grad b    :", np.round(grads[1], 4))

print("== 4. no_grad skips recording ==")
with ad.no_grad():
    z = ad.exp(x)
print("   requires_grad inside no_grad:", z.requires_grad)
