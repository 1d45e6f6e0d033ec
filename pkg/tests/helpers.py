"""Shared fixtures data: the trained toy pair and small utility models."""

from __future__ import annotations

import functools
from pathlib import Path

import torch
import torch.nn as nn

from segtrans.data import gen_shapes_dataset
from segtrans.models import ToyNetSpec, build_toy_model, load_checkpoint, save_checkpoint, train_toy

ROOT = Path(__file__).resolve().parents[1]
CHECKPOINTS = ROOT / "checkpoints"
CONFIGS = ROOT / "configs"

# training recipe shared with configs/transfer.yaml
TRAIN_COUNT, TRAIN_SEED = 2000, 1
VAL_COUNT, VAL_SEED = 200, 2
EVAL_COUNT, EVAL_SEED = 100, 3
EPOCHS, LEARNING_RATE = 8, 3e-3


@functools.lru_cache(maxsize=None)
def train_set():
    return gen_shapes_dataset(TRAIN_COUNT, 64, 4, seed=TRAIN_SEED, split="train")


@functools.lru_cache(maxsize=None)
def val_set():
    return gen_shapes_dataset(VAL_COUNT, 64, 4, seed=VAL_SEED, split="val")


@functools.lru_cache(maxsize=None)
def eval_set():
    return gen_shapes_dataset(EVAL_COUNT, 64, 4, seed=EVAL_SEED, split="eval")


@functools.lru_cache(maxsize=None)
def toy_model(variant: str):
    """Trained toy model, loaded from ``checkpoints/`` or trained and saved there."""
    path = CHECKPOINTS / f"toy{variant}.pt"
    if path.is_file():
        handle = load_checkpoint(path)
    else:
        handle, _ = train_toy(build_toy_model(ToyNetSpec.default(variant, seed=0)), train_set(),
                              epochs=EPOCHS, learning_rate=LEARNING_RATE, seed=0, val_dataset=val_set())
        save_checkpoint(handle, path)
    handle.name = f"toy{variant}"
    return handle


def tiny_fcn(num_classes: int = 3, seed: int = 0) -> nn.Module:
    """Factory used by the external-model loader tests."""
    gen = torch.random.get_rng_state()
    torch.manual_seed(seed)
    net = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.Tanh(), nn.Conv2d(8, num_classes, 1))
    torch.random.set_rng_state(gen)
    return net


class Detached(nn.Module):
    """Returns logits cut off from the input graph."""

    def __init__(self, num_classes: int = 3):
        super().__init__()
        self.num_classes = num_classes

    def forward(self, x):
        b, _, h, w = x.shape
        return torch.zeros(b, self.num_classes, h, w)


def detached(num_classes: int = 3) -> nn.Module:
    return Detached(num_classes)
