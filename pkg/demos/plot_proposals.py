"""
Pair proposals and geometric maps
=================================

A synthetic herd frame, its confident detections, the pairs that pass the
overlap gate, and the two-channel map each pair is reduced to.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cattle_interaction.proposal import filter_detections, generate_proposals
from cattle_interaction.geometry import rasterize_pair_map
from cattle_interaction.synth_data import SceneConfig, generate_scene

frame = generate_scene(SceneConfig(), np.random.default_rng(4))

# low-confidence distractors are dropped before pairing
kept = filter_detections(frame.detections)
proposals = generate_proposals(kept)
print(f"{len(frame.detections)} detections, {len(kept)} confident, {len(proposals)} gated pairs")

fig, axes = plt.subplots(1, 1 + 2 * len(proposals), figsize=(3 * (1 + 2 * len(proposals)), 3))
axes = np.atleast_1d(axes)
axes[0].imshow(frame.image)
for d in frame.detections:
    b = d.box
    style = "-" if d in kept else ":"
    axes[0].add_patch(plt.Rectangle((b.x1, b.y1), b.width, b.height, fill=False, ls=style, ec="w"))
for p in proposals:
    r = p.region
    axes[0].add_patch(plt.Rectangle((r.x1, r.y1), r.width, r.height, fill=True, alpha=0.3, fc="y"))
axes[0].set_title("frame")

# channel 0 marks the first animal, channel 1 the second, inside the padded union square
for k, p in enumerate(proposals):
    m = rasterize_pair_map(p.a.box, p.b.box, 64)
    for ch in range(2):
        ax = axes[1 + 2 * k + ch]
        ax.imshow(m.data[ch], cmap="gray")
        ax.set_title(f"pair {p.key} ch{ch}\nIoU {p.iou:.2f}")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("proposals.png", dpi=80)
