"""
Checking analytic gradients
===========================

Central differences against the hand-written backward pass of both models,
on a masked, positively weighted loss.
"""

import numpy as np

from oodbatch import nn

rng = np.random.default_rng(0)
for kind in nn.KINDS:
    spec = nn.ModelSpec(kind, input_dim=6, output_dim=4, hidden_dim=5)
    state = nn.init_model(spec, seed=1)
    x = rng.standard_normal((10, 6))
    y = (rng.random((10, 4)) < 0.3).astype(float)
    mask = (rng.random((10, 4)) > 0.2).astype(float)
    w = nn.LossWeights(np.array([2.0, 1.0, 3.0, 0.5]))

    _, dz = nn.wbce_loss(nn.forward(state, spec, x), y, mask, w)
    grad = nn.backward(state, spec, x, dz)

    def loss(p):
        return nn.wbce_loss(nn.forward(nn.with_params(state, p), spec, x), y, mask, w)[0]

    h = 1e-5
    num = np.empty_like(grad)
    for i in range(grad.size):
        e = np.zeros_like(grad)
        e[i] = h
        num[i] = (loss(state.params + e) - loss(state.params - e)) / (2 * h)
    rel = np.abs(num - grad) / np.maximum(np.maximum(np.abs(num), np.abs(grad)), 1e-6)
    print(f"{kind:8s} {grad.size:3d} parameters, worst relative error {rel.max():.1e}")
