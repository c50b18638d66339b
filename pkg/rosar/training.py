"""
Training and adversarial fine-tuning of the detector.

Both use per-image stochastic gradient descent with momentum on
:func:`rosar.detector.detection_loss`. Images are visited in a new random
order every epoch, drawn from the configuration seed, so a run is a pure
function of the starting weights, the dataset and the configuration.
"""

__all__ = ["TrainConfig", "train", "finetune", "finetune_sweep", "dataset_loss"]

# Standard library modules.
import dataclasses
import logging

# Third party modules.
import numpy as np
from tqdm import tqdm

# Local modules.
from rosar.rcsetup import rcParams
from rosar.autodiff import SGD, backward
from rosar.detector import forward, detection_loss

# Globals and constants variables.
logger = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    """
    :arg epochs: passes over the dataset (default: rcParams['train.epochs'])
    :arg lr: learning rate (default: rcParams['train.lr'])
    :arg momentum: momentum factor (default: rcParams['train.momentum'])
    :arg clip_norm: largest global gradient norm of a step, ``None`` to leave
        gradients unclipped (default: rcParams['train.clip_norm'])
    :arg seed: seed of the image order (default: rcParams['seed'])
    """

    epochs: int = dataclasses.field(default_factory=lambda: rcParams["train.epochs"])
    lr: float = dataclasses.field(default_factory=lambda: rcParams["train.lr"])
    momentum: float = dataclasses.field(default_factory=lambda: rcParams["train.momentum"])
    clip_norm: float = dataclasses.field(
        default_factory=lambda: rcParams["train.clip_norm"]
    )
    seed: int = dataclasses.field(default_factory=lambda: rcParams["seed"])

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0 or None, got {self.clip_norm}")

    def to_dict(self):
        return dataclasses.asdict(self)


def _fill_missing_grads(params):
    # Images without boxes leave the class and box heads out of the graph
    for param in params:
        if param.grad is None:
            param.grad = np.zeros_like(param.data)


def train(model, dataset, cfg=None, epoch_callback=None, progress=False):
    """
    Trains a copy of *model* on *dataset*.

    :arg model: starting parameters, left untouched
    :arg dataset: annotated images
    :arg cfg: training settings (default: :class:`TrainConfig`)
    :arg epoch_callback: called as ``epoch_callback(epoch, model, mean_loss)``
        after every epoch, with the live parameters
    :return: trained parameters
    """
    if cfg is None:
        cfg = TrainConfig()
    entries = list(dataset)
    if not entries:
        raise ValueError("Cannot train on an empty dataset")

    model = model.copy()
    optimizer = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)

    for epoch in tqdm(range(cfg.epochs), desc="train", disable=not progress):
        losses = []
        for index in rng.permutation(len(entries)):
            entry = entries[index]
            loss = detection_loss(forward(model, entry.image, trainable=True), entry.annotations)
            backward(loss)
            _fill_missing_grads(optimizer.params)
            optimizer.step()
            losses.append(loss.item())

        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise ValueError(
                f"Training diverged at epoch {epoch + 1}: non-finite loss {mean_loss}"
            )
        logger.debug("Epoch %d: loss %.6f", epoch + 1, mean_loss)
        if epoch_callback is not None:
            epoch_callback(epoch + 1, model, mean_loss)

    return model


def _finetune_config(cfg, epochs, lr_factor):
    if cfg is None:
        cfg = TrainConfig()
    if lr_factor is None:
        lr_factor = rcParams["finetune.lr_factor"]
    return dataclasses.replace(cfg, epochs=epochs, lr=cfg.lr * lr_factor)


def finetune(model, adv_dataset, epochs, cfg=None, lr_factor=None, epoch_callback=None,
             progress=False):
    """
    Continues training *model* on an adversarial dataset whose annotations
    are the original ground truth, with the learning rate scaled by
    *lr_factor* (default: rcParams['finetune.lr_factor'] or ``0.1``).

    :return: fine-tuned parameters
    """
    cfg = _finetune_config(cfg, epochs, lr_factor)
    return train(model, adv_dataset, cfg, epoch_callback, progress)


def finetune_sweep(model, adv_dataset, epochs=None, cfg=None, lr_factor=None, progress=False):
    """
    Fine-tunes once for the largest epoch count and keeps a snapshot at every
    requested count.

    :arg epochs: epoch counts (default: rcParams['finetune.epochs'])
    :return: ``{epochs: parameters}``
    """
    if epochs is None:
        epochs = rcParams["finetune.epochs"]
    epochs = sorted(set(epochs))
    snapshots = {}
    if 0 in epochs:
        snapshots[0] = model.copy()

    def snapshot(epoch, live, mean_loss):
        if epoch in epochs:
            snapshots[epoch] = live.copy()
            logger.info("Fine-tuning snapshot at epoch %d (loss %.6f)", epoch, mean_loss)

    if epochs[-1] > 0:
        finetune(model, adv_dataset, epochs[-1], cfg, lr_factor, snapshot, progress)
    return snapshots


def dataset_loss(model, dataset):
    """
    Mean detection loss over *dataset*.
    """
    losses = [
        detection_loss(forward(model, entry.image), entry.annotations).item()
        for entry in dataset
    ]
    if not losses:
        raise ValueError("Dataset is empty")
    return float(np.mean(losses))
