"""Tour of the numeric kernel: tensors, the tape, backward, and
finite-difference verification in float64 mode."""

import numpy as np

from mp4sr import kernel as K

print("== forward/backward on a tiny expression ==")
x = K.parameter(np.array([1.0, 2.0, 3.0]))
with K.Tape() as tape:
    y = K.tsum(K.mul(K.softmax(x), K.as_tensor([1.0, 0.0, -1.0])))
K.backward(tape, y)
print("softmax(x) . [1,0,-1] =", y.item())
print("dL/dx =", x.grad)

print("\n== gradient check against central differences (float64) ==")
with K.verify_mode():
    rng = K.make_rng(0)
    a = K.parameter(rng.standard_normal((4, 5)))
    b = K.parameter(rng.standard_normal((5, 3)))
    c = K.as_tensor(rng.standard_normal((4, 3)))

    def f():
        return K.tsum(K.mul(K.softmax(K.matmul(a, b), axis=-1), c))

    err = K.gradient_check(f, [a, b], eps=1e-5)
    print(f"max relative error over {a.size + b.size} coordinates: {err:.2e}")

print("\n== deterministic dropout replay (Philox streams) ==")
mask1 = K.dropout(K.as_tensor(np.ones(8)), 0.5, K.make_rng(123), training=True)
mask2 = K.dropout(K.as_tensor(np.ones(8)), 0.5, K.make_rng(123), training=True)
print("draw 1:", mask1.data)
print("draw 2:", mask2.data)
print("bit-identical:", bool((mask1.data == mask2.data).all()))
