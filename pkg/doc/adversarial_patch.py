import matplotlib.pyplot as plt
from rosar.detector import DetectorConfig, init_model
from rosar.sonar import generate_dataset
from rosar.patch import train_patch, apply_patch
from rosar.training import TrainConfig, train

dataset = generate_dataset("clean", 20, seed=1)
surrogate = train(init_model(DetectorConfig(), seed=8), dataset, TrainConfig(epochs=10))

patch = train_patch(surrogate, dataset, size=16, epochs=10)
entry = next(e for e in dataset if e.annotations)

fig, axes = plt.subplots(1, 3, figsize=(9, 3.5))
axes[0].imshow(patch.pixels[..., 0], cmap="gray", vmin=0.0, vmax=1.0)
axes[0].set_title("patch")

axes[1].imshow(entry.image[..., 0], cmap="copper", vmin=0.0, vmax=1.0)
axes[1].set_title("clean")

patched = apply_patch(entry.image, entry.annotations, patch, scale=0.4)
axes[2].imshow(patched[..., 0], cmap="copper", vmin=0.0, vmax=1.0)
axes[2].set_title("patched")

for ax in axes:
    ax.axis("off")

fig.savefig("adversarial_patch.png", dpi=80, bbox_inches="tight")
