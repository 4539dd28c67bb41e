"""Walk through the local-feature machinery on a map small enough to read.

A feature map is unfolded into dilated 2x2 windows, windows across
dilations concatenate into a meta-feature, and max/mean induction
compresses the channel axis into the 2-channel unit representation.
"""

import numpy as np

from mfadapter import build_meta_feature, induce_mf_unit, unfold, window_extent

m = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
print("input map:\n", m[0, 0])

u1 = unfold(m, 1)
print("\ndilation 1 -> shape", u1.shape, "(4 taps x 4 windows)")
for j in range(u1.shape[2]):
    print(f"  window {j}: {u1[0, :, j]}")

u2 = unfold(m, 2)
print("\ndilation 2 -> shape", u2.shape, "(the four corners)")
print("  window 0:", u2[0, :, 0])

mf = build_meta_feature(m, scale=2, layer_id=3)
print("\nmeta-feature at scale 2:", mf.values.shape, "per-scale widths", mf.per_scale_widths)

unit = induce_mf_unit(mf)
print("unit (channel 0 = max, channel 1 = mean):")
print("  max :", unit.values[0, 0])
print("  mean:", unit.values[0, 1])

print("\nwindow-count bookkeeping for the standard backbone at 224x224:")
for scale in (1, 2, 3):
    print(
        f"  scale {scale}: layer3 (14x14) ms={window_extent(14, 14, scale):4d}   "
        f"layer4 (7x7) ms={window_extent(7, 7, scale):3d}"
    )
