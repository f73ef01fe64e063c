"""
Pretrained versus random initialisation
=======================================

Contrastive pretraining on unlabeled agent crops, then supervised
individual-action training from the pretrained encoder and from scratch.
The two loss curves are compared by the first step below a threshold.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from cattle_interaction.pretrain import PretrainConfig, run_pretraining
from cattle_interaction.synth_data import SceneConfig, generate_frames
from cattle_interaction.train_eval import (
    TrainConfig,
    collect_individual_labels,
    collect_individual_slices,
    convergence_report,
    train_individual_actions,
)

torch.set_num_threads(1)
cfg = SceneConfig(seed=0, color_mode="random")
frames = generate_frames(cfg, 60)

# every crop is available without labels; labels exist for the first 20 frames only
pool = collect_individual_slices(frames)
x, y = collect_individual_slices(frames[:20]), collect_individual_labels(frames[:20], cfg.catalog)
pre = run_pretraining(list(pool), PretrainConfig(steps=150, batch_size=32))
print(f"NT-Xent {pre.losses[0]:.3f} -> {pre.losses[-1]:.3f}")

curves = {}
for mode, init in (("finetune", pre.encoder), ("random", None)):
    res = train_individual_actions(x, y, cfg=TrainConfig(mode=mode, steps=150, batch_size=32), init=init)
    curves[mode] = res.losses

report = convergence_report(curves, threshold=0.3)
for name in curves:
    print(f"{name}: first step below 0.3 = {report.crossing_text(name)}")
report.write("convergence.tsv")

for name, c in curves.items():
    plt.plot(c, label=name)
plt.axhline(0.3, color="k", lw=0.5)
plt.xlabel("step")
plt.ylabel("cross-entropy")
plt.legend()
plt.savefig("convergence.png", dpi=80)
