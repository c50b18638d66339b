import matplotlib.pyplot as plt
import matplotlib.patches as mpatches
from rosar.sonar import VARIANTS, CLASS_NAMES, gen_waterfall

fig, axes = plt.subplots(1, len(VARIANTS), figsize=(9, 3.5))

for ax, variant in zip(axes, VARIANTS):
    image, annotations = gen_waterfall(variant, seed=4)
    h, w = image.shape[:2]
    ax.imshow(image[..., 0], cmap="copper", vmin=0.0, vmax=1.0)
    for annotation in annotations:
        x0 = (annotation.cx - annotation.w / 2) * w
        y0 = (annotation.cy - annotation.h / 2) * h
        ax.add_patch(
            mpatches.Rectangle(
                (x0, y0),
                annotation.w * w,
                annotation.h * h,
                fill=False,
                edgecolor="cyan" if annotation.class_id == 0 else "magenta",
            )
        )
        ax.text(x0, y0, CLASS_NAMES[annotation.class_id], color="white", fontsize=6)
    ax.set_title(variant)
    ax.axis("off")

fig.savefig("waterfall_variants.png", dpi=80, bbox_inches="tight")
