import matplotlib.pyplot as plt
from rosar.sonar import gen_waterfall
from rosar.properties import region_p1, region_p2, sample_lines

image, _ = gen_waterfall("clean", seed=4)
lines = sample_lines(image.shape[0], seed=11)

p1 = region_p1(image, 0.08)
p2 = region_p2(image, 0.6, lines)

fig, axes = plt.subplots(1, 3, figsize=(9, 3.5))

axes[0].imshow(image[..., 0], cmap="copper", vmin=0.0, vmax=1.0)
axes[0].set_title("image")

# Width of the feasible interval of every pixel
axes[1].imshow(p1.width[..., 0], cmap="viridis")
axes[1].set_title("p1, epsilon=0.08")

axes[2].imshow(p2.width[..., 0], cmap="viridis")
axes[2].set_title(f"p2, epsilon=0.6, {len(lines)} rows")

for ax in axes:
    ax.axis("off")

fig.savefig("feasible_regions.png", dpi=80, bbox_inches="tight")
