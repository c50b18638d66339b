import numpy as np
import matplotlib.pyplot as plt
from rosar.detector import DetectorConfig, init_model, forward, decode
from rosar.sonar import generate_dataset
from rosar.properties import P1, PropertySpec
from rosar.pgd import AttackConfig, pgd
from rosar.training import TrainConfig, train

dataset = generate_dataset("clean", 20, seed=1)
model = train(init_model(DetectorConfig(), seed=7), dataset, TrainConfig(epochs=10))

# Attack the most confident detection of the first image that has one
for entry in dataset:
    detections = decode(forward(model, entry.image))
    if detections:
        break
top = detections[0]

spec = PropertySpec(P1, 0.08, top.cell, top.class_argmax)
ce = pgd(model, entry.image, spec, AttackConfig(steps=40, restarts=3, time_limit=None))

fig, axes = plt.subplots(1, 3, figsize=(9, 3.5))
axes[0].imshow(entry.image[..., 0], cmap="copper", vmin=0.0, vmax=1.0)
axes[0].set_title("original")

if ce is None:
    axes[1].set_title("no counter-example")
    axes[2].set_title("")
else:
    axes[1].imshow(ce.x_adv[..., 0], cmap="copper", vmin=0.0, vmax=1.0)
    axes[1].set_title(f"counter-example, margin {ce.margin:.3f}")
    delta = ce.x_adv[..., 0] - ce.x_orig[..., 0]
    limit = max(np.abs(delta).max(), 1e-6)
    axes[2].imshow(delta, cmap="RdBu", vmin=-limit, vmax=limit)
    axes[2].set_title("perturbation")

for ax in axes:
    ax.axis("off")

fig.savefig("counterexample.png", dpi=80, bbox_inches="tight")
