"""A tour of the tensor core: graphs, gradients, Adam.

Every trainable piece of this package sits on the same reverse-mode
engine, so this demo starts at the bottom: build a graph by calling
functions, pull gradients out with `grad`, check them against finite
differences, then let Adam recover a planted linear map.
"""

import numpy as np

from storerank import tensor as T

rng = np.random.default_rng(0)

# --- a small graph, differentiated two ways --------------------------------

w = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = T.Tensor(rng.normal(size=(4, 3)))
b = T.Tensor(np.zeros(2), requires_grad=True)

def loss_fn():
    z = T.add(T.matmul(x, w), T.broadcast_to(T.reshape(b, (1, 2)), (4, 2)))
    return T.tsum(T.mul(T.tanh(z), T.tanh(z)))

gw, gb = T.grad(loss_fn(), [w, b])

h = 1e-6
fd = np.zeros_like(w.values)
for i in range(w.shape[0]):
    for j in range(w.shape[1]):
        w.values[i, j] += h
        up = float(loss_fn().values)
        w.values[i, j] -= 2 * h
        dn = float(loss_fn().values)
        w.values[i, j] += h
        fd[i, j] = (up - dn) / (2 * h)

print("analytic dL/dw[0] :", np.round(gw[0], 6))
print("numeric  dL/dw[0] :", np.round(fd[0], 6))
print("max abs gap       :", f"{np.max(np.abs(gw - fd)):.2e}")

# --- Adam recovers a planted linear map -------------------------------------

true_w = rng.normal(size=(5, 1))
inputs = rng.normal(size=(256, 5))
targets = inputs @ true_w + 0.01 * rng.normal(size=(256, 1))

west = T.Tensor(np.zeros((5, 1)), requires_grad=True)
opt = T.Adam([west], lr=0.05)
xs, ys = T.Tensor(inputs), T.Tensor(targets)

for step in range(300):
    err = T.sub(T.matmul(xs, west), ys)
    mse = T.tmean(T.mul(err, err))
    opt.step(T.grad(mse, [west]))
    if step % 100 == 99:
        print(f"step {step + 1:3d}  mse {float(mse.values):.6f}")

print("recovered weights :", np.round(west.values.ravel(), 3))
print("planted weights   :", np.round(true_w.ravel(), 3))
