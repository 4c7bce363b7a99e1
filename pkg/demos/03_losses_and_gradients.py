"""Each loss returns an analytic gradient; compare with central differences."""
import numpy as np

from sirface.losses import AvgPoolPyramid, cosface_loss, landmark_loss, make_anchors, perceptual_loss, pixel_loss


def numeric(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


rng = np.random.default_rng(2)
P, T = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
val, g = landmark_loss(P, T, True)
print(f"landmark  {val:.4f}  max grad diff {np.abs(g - numeric(lambda p: landmark_loss(p, T), P)).max():.1e}")

R, I = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
S = np.ones((8, 8))
val, g = pixel_loss(R, I, S, True)
print(f"pixel     {val:.4f}  max grad diff {np.abs(g['recon'] - numeric(lambda r: pixel_loss(r, I, S), R)).max():.1e}")

enc = AvgPoolPyramid((1, 2, 4))
confs = [np.ones((8, 8)), np.ones((4, 4)), np.ones((2, 2))]
val, g = perceptual_loss(R, I, enc, confs, True)
gn = numeric(lambda r: perceptual_loss(r, I, enc, confs), R)
print(f"perceptual {val:.4f} max grad diff {np.abs(g['recon'] - gn).max():.1e}")

W = make_anchors(5, 8, rng)
a = rng.standard_normal(8)
print("cosface is blind to code length:", [round(cosface_loss(c * a, 2, W), 6) for c in (0.1, 1, 10)])
