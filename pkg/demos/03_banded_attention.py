"""Time-restricted self-attention in pictures.

The masking network attends over a [t-l, t+r] window instead of the whole
sequence, cutting the score matrix from T^2 to roughly T(l+r+1) entries.
This script draws the band, shows that saturated windows reproduce full
attention bit-for-bit, and peeks at where the attention mass actually lands.
"""

import numpy as np

from msar.attention import (
    AttentionConfig, EncoderLayer, band_mask, scaled_dot_attention,
)
from msar.numerics import Tensor

rng = np.random.default_rng(0)

t = 12
mask = band_mask(t, 2, 3)
print(f"band mask for T={t}, l=2, r=3   ({mask.sum()} of {t * t} entries permitted)")
for row in mask:
    print("  " + "".join("#" if v else "." for v in row))

# Saturated windows equal unrestricted attention exactly.
import dataclasses

cfg = dataclasses.replace(AttentionConfig(d_att=16, n_heads=4, d_ff=32), window=(t, t))
layer = EncoderLayer(cfg, rng)
x = Tensor(rng.standard_normal((t, 16)))
banded = layer(x).data
layer.config = dataclasses.replace(cfg, window=None)
full = layer(x).data
print(f"\nsaturated window vs unrestricted: max abs diff = {np.abs(banded - full).max():.2e}")

# Attention weights inside the band sum to one per query row.
q = Tensor(rng.standard_normal((t, 8)))
k = Tensor(rng.standard_normal((t, 8)))
v = Tensor(rng.standard_normal((t, 8)))
_, w = scaled_dot_attention(q, k, v, mask=band_mask(t, 1, 1), return_weights=True)
print(f"weight row sums: min {w.data.sum(axis=1).min():.12f}, "
      f"max {w.data.sum(axis=1).max():.12f}")
print(f"mass outside the band: {float(np.where(band_mask(t, 1, 1), 0.0, w.data).sum()):.1e}")
