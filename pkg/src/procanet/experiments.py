"""Small synthetic-data experiments: overfitting, attention ablation, input modality."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import numpy as np

from .data import TEST_STRIDE, TRAIN_STRIDE, synth_scene
from .losses import metrics
from .model import ModelConfig
from .training import TrainConfig, build_patches, evaluate, fit

EXPERIMENT_LR = 1e-3
# Comparisons run 2 epochs; batch 4 gives both arms enough steps to leave the
# initial all-land plateau, so the comparison is not decided by which escapes first.
EXPERIMENT_BATCH = 4


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synthetic_scenes(count: int, seed: int = 0, size: int = 128, offset: int = 0):
    return [synth_scene(scene_seed(seed, offset + i), size, size) for i in range(count)]


def overfit(steps: int = 300, scenes: int = 8, size: int = 128, seed: int = 0,
            base_channels: int = 8, levels: int = 3, lr: float = EXPERIMENT_LR) -> dict:
    """Fit a handful of scenes and report IoU on those same scenes."""
    config = ModelConfig(levels=levels, base_channels=base_channels, seed=seed)
    data = build_patches(synthetic_scenes(scenes, seed, size), config, TEST_STRIDE, False)
    tc = TrainConfig(epochs=steps, batch_size=8, lr_max=lr, seed=seed, max_steps=steps,
                     eval_every=steps)
    result = fit(config, tc, data, data)
    m = metrics(evaluate(result.params, config, data))
    return {"train_iou": m.iou, "train_f1": m.f1, "steps": result.steps,
            "final_loss": result.log[-1]["train_loss"]}


@dataclass
class Comparison:
    name_a: str
    name_b: str
    iou_a: list = field(default_factory=list)
    iou_b: list = field(default_factory=list)

    @property
    def median_a(self) -> float:
        return statistics.median(self.iou_a)

    @property
    def median_b(self) -> float:
        return statistics.median(self.iou_b)


def _final_val_iou(config, train_scenes, val_scenes, epochs, batch_size, lr, seed) -> float:
    train = build_patches(train_scenes, config, TRAIN_STRIDE, True)
    val = build_patches(val_scenes, config, TEST_STRIDE, False)
    tc = TrainConfig(epochs=epochs, batch_size=batch_size, lr_max=lr, seed=seed)
    result = fit(config, tc, train, val)
    return metrics(evaluate(result.params, config, val)).iou


def _compare(configs, seeds, n_train, n_val, size, epochs, batch_size, lr, data_seed):
    scenes = synthetic_scenes(n_train + n_val, data_seed, size)
    train_scenes, val_scenes = scenes[:n_train], scenes[n_train:]
    out = Comparison(*configs)
    for seed in seeds:
        for name, target in ((configs[0], out.iou_a), (configs[1], out.iou_b)):
            config = _EXPERIMENT_CONFIGS[name](seed)
            target.append(_final_val_iou(config, train_scenes, val_scenes, epochs,
                                         batch_size, lr, seed))
    return out


_TINY = dict(levels=3, base_channels=8)
_EXPERIMENT_CONFIGS = {
    "attention": lambda s: ModelConfig(**_TINY, seed=s, attention_enabled=True),
    "no-attention": lambda s: ModelConfig(**_TINY, seed=s, attention_enabled=False),
    "nir-only": lambda s: ModelConfig(**_TINY, seed=s, encoder1_bands=("NIR",),
                                      encoder2_bands=None),
    "rgb-only": lambda s: ModelConfig(**_TINY, seed=s, encoder1_bands=("R", "G", "B"),
                                      encoder2_bands=None),
}


def ablation(seeds=range(5), n_train: int = 32, n_val: int = 16, size: int = 256,
             epochs: int = 2, batch_size: int = EXPERIMENT_BATCH, lr: float = EXPERIMENT_LR,
             data_seed: int = 1) -> Comparison:
    """Validation IoU with and without the attention blocks, one run per seed."""
    return _compare(("attention", "no-attention"), seeds, n_train, n_val, size, epochs,
                    batch_size, lr, data_seed)


def modality(seeds=range(5), n_train: int = 32, n_val: int = 16, size: int = 256,
             epochs: int = 2, batch_size: int = EXPERIMENT_BATCH, lr: float = EXPERIMENT_LR,
             data_seed: int = 1) -> Comparison:
    """Single-encoder models fed NIR only versus RGB only."""
    return _compare(("nir-only", "rgb-only"), seeds, n_train, n_val, size, epochs,
                    batch_size, lr, data_seed)
