"""Training objectives evaluated on toy inputs, with a finite-difference gradient check."""
import numpy as np

from mireg.losses import LossConfig, mask_loss, mask_loss_grad, nll_loss, total_loss

rng = np.random.default_rng(3)
gt = (rng.random((4, 8)) < 0.5).astype(float)
good = np.clip(gt * 0.9 + 0.05, 0, 1)
bad = 1 - good
print(f"mask loss, close to truth: {mask_loss(good, gt):+.4f}")
print(f"mask loss, inverted:       {mask_loss(bad, gt):+.4f}")

p = rng.uniform(0.1, 0.9, gt.shape)
h = 1e-5
num = np.zeros_like(p)
for idx in np.ndindex(p.shape):
    up, down = p.copy(), p.copy()
    up[idx] += h
    down[idx] -= h
    num[idx] = (mask_loss(up, gt) - mask_loss(down, gt)) / (2 * h)
print(f"max gradient mismatch: {np.abs(num - mask_loss_grad(p, gt)).max():.2e}")

H = np.full((3, 3), 0.5)
nll = nll_loss([H], [[[0, 0], [1, 1]]], [[]], [[]])
print(f"nll with two pairs at probability 0.5: {nll:.4f}")
print(f"total with circle 0.7: {total_loss(0.7, nll, mask_loss(good, gt)):.4f}")
print("default loss config:", LossConfig())
