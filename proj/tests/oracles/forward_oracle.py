"""Independent numpy re-implementation of a 1-layer, 1-head forward pass
used to freeze the expected logits in test_nanolm.cpp.

Every weight is hand-set by w(i, j) = scale * sin(seed + 3 i + j + 1), the
same rule the C++ test uses to fill the model."""
import numpy as np
from math import erf, sqrt, sin

V, D, F, T = 5, 4, 3, 3
eps = 1e-5

def hand(rows, cols, seed, scale):
    return np.array([[scale * sin(seed + 3 * i + j + 1) for j in range(cols)] for i in range(rows)])

embed = hand(V, D, 0, 1.0)
pos = hand(T, D, 1, 0.3)
ln1_g, ln1_b = 1.0 + hand(1, D, 2, 0.2)[0], hand(1, D, 3, 0.1)[0]
w_q, w_k, w_v = hand(D, D, 4, 0.7), hand(D, D, 5, 0.7), hand(D, D, 6, 0.7)
w_o = hand(D, D, 7, 0.5)
ln2_g, ln2_b = 1.0 + hand(1, D, 8, 0.2)[0], hand(1, D, 9, 0.1)[0]
w_in = hand(F, D, 10, 0.8)
w_out = hand(D, F, 11, 0.8)
lnf_g, lnf_b = 1.0 + hand(1, D, 12, 0.2)[0], hand(1, D, 13, 0.1)[0]
unembed = hand(V, D, 14, 1.0)
tokens = [3, 0, 4]

def ln(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b

gelu = np.vectorize(lambda v: 0.5 * v * (1 + erf(v / sqrt(2))))

x = embed[tokens] + pos[: len(tokens)]
h = ln(x, ln1_g, ln1_b)
q, k, v = h @ w_q.T, h @ w_k.T, h @ w_v.T
s = q @ k.T / np.sqrt(D)
s[np.triu(np.ones((T, T), dtype=bool), 1)] = -np.inf
p = np.exp(s - s.max(axis=1, keepdims=True))
p /= p.sum(axis=1, keepdims=True)
x = x + (p @ v) @ w_o.T
h2 = ln(x, ln2_g, ln2_b)
x = x + gelu(h2 @ w_in.T) @ w_out.T
logits = ln(x, lnf_g, lnf_b) @ unembed.T
for row in logits:
    print("{" + ", ".join(repr(float(v)) for v in row) + "},")
