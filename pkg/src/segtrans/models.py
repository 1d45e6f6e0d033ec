"""Segmentation model handles, desk-scale toy networks and defenses."""

from __future__ import annotations

import copy
import hashlib
import importlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    IGNORE_INDEX,
    ModelGradientUnavailable,
    SegTransError,
    ValueOutOfRange,
    image_array,
    label_array,
)
from .metrics import SegEvaluator, miou

CHECKPOINT_FORMAT = "segtrans-toy/1"


class InvalidSpec(SegTransError, ValueError):
    pass


class DivergedTraining(SegTransError, RuntimeError):
    pass


class RateOutOfRange(ValueOutOfRange):
    pass


class LevelOutOfRange(ValueOutOfRange):
    pass


class UnsupportedModel(SegTransError, ValueError):
    pass


# ---------------------------------------------------------------------------
# toy networks


@dataclass(frozen=True)
class ToyNetSpec:
    """Architecture of a small fully-convolutional segmentation net.

    ``widths`` and ``dilations`` have one entry per hidden conv layer; a
    final 3x3 classifier is appended. ``strides`` downsample the encoder and
    logits are bilinearly upsampled back to input size.
    """

    variant: str = "A"
    widths: tuple[int, ...] = ()
    dilations: tuple[int, ...] = ()
    strides: tuple[int, ...] = ()
    num_classes: int = 4
    seed: int = 0

    @classmethod
    def default(cls, variant: str, num_classes: int = 4, seed: int = 0) -> "ToyNetSpec":
        if variant == "A":
            # FCN-like: 5 convs, no dilation
            return cls("A", (32, 48, 64, 64), (1, 1, 1, 1), (2, 2, 1, 1), num_classes, seed)
        if variant == "B":
            # DeepLab-like: 7 convs, dilated middle block
            return cls("B", (24, 32, 48, 48, 48, 48), (1, 1, 2, 2, 2, 1), (2, 2, 1, 1, 1, 1),
                       num_classes, seed)
        raise InvalidSpec(f"unknown toy variant {variant!r}")

    def resolved(self) -> "ToyNetSpec":
        if self.widths:
            return self
        base = ToyNetSpec.default(self.variant, self.num_classes, self.seed)
        return base

    @property
    def depth(self) -> int:
        return len(self.resolved().widths) + 1

    def validate(self) -> None:
        s = self.resolved()
        if not (len(s.widths) == len(s.dilations) == len(s.strides)) or not s.widths:
            raise InvalidSpec("widths, dilations and strides must be non-empty and equally long")
        if min(s.widths) < 1 or min(s.dilations) < 1 or min(s.strides) < 1:
            raise InvalidSpec("widths, dilations and strides must be positive")
        if s.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.resolved()).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyNetSpec":
        d = dict(d)
        for k in ("widths", "dilations", "strides"):
            if k in d:
                d[k] = tuple(int(v) for v in d[k])
        return cls(**d)


class ToyNet(nn.Module):
    def __init__(self, spec: ToyNetSpec):
        super().__init__()
        spec = spec.resolved()
        layers = []
        c_in = 3
        for w, d, s in zip(spec.widths, spec.dilations, spec.strides):
            layers.append(nn.Sequential(
                nn.Conv2d(c_in, w, 3, stride=s, padding=d, dilation=d),
                nn.BatchNorm2d(w),
                nn.ReLU(),
            ))
            c_in = w
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Conv2d(c_in, spec.num_classes, 3, padding=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        x = self.classifier(self.features(x))
        return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# handle


def _to_batch(x, dtype) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.array(image_array(x)), dtype=dtype) if not torch.is_tensor(x) else x.to(dtype)
    single = t.dim() == 3
    return (t.unsqueeze(0) if single else t), single


class SegModelHandle:
    """Frozen segmentation model with numpy-in / numpy-out helpers.

    Parameters never require grad, so concurrent gradient queries through
    ``torch.autograd.grad`` do not touch shared state.
    """

    def __init__(self, module: nn.Module, num_classes: int, name: str = "model",
                 metadata: Optional[dict] = None, ignore_index: int = IGNORE_INDEX):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self.module = module
        self.num_classes = num_classes
        self.name = name
        self.metadata = dict(metadata or {})
        self.ignore_index = ignore_index

    @property
    def dtype(self) -> torch.dtype:
        for p in self.module.parameters():
            return p.dtype
        return torch.float32

    def clone(self, name: str | None = None) -> "SegModelHandle":
        return SegModelHandle(copy.deepcopy(self.module), self.num_classes, name or self.name,
                              self.metadata, self.ignore_index)

    def to(self, dtype: torch.dtype) -> "SegModelHandle":
        h = self.clone()
        h.module.to(dtype)
        return h

    def forward(self, x) -> np.ndarray:
        """Logits ``C x H x W`` for one image or ``B x C x H x W`` for a batch."""
        t, single = _to_batch(x, self.dtype)
        with torch.no_grad():
            out = self.module(t)
        out = out.numpy()
        return out[0] if single else out

    __call__ = forward

    def predict(self, x, batch_size: int = 32) -> np.ndarray:
        arr = np.asarray(image_array(x)) if not torch.is_tensor(x) else x
        if arr.ndim == 3:
            return np.argmax(self.forward(arr), axis=0)
        preds = [np.argmax(self.forward(arr[i:i + batch_size]), axis=1)
                 for i in range(0, len(arr), batch_size)]
        return np.concatenate(preds)

    def loss_and_grad(self, x, y, pixel_weight=None) -> tuple[float, np.ndarray]:
        """Mean cross-entropy over valid pixels and its gradient w.r.t. the input.

        ``pixel_weight`` (H x W, 0/1) further restricts which pixels enter
        the mean.
        """
        t, single = _to_batch(x, self.dtype)
        t = t.detach().clone().requires_grad_(True)
        yt = torch.as_tensor(np.array(label_array(y)), dtype=torch.long)
        if yt.dim() == 2:
            yt = yt.unsqueeze(0)
        valid = yt != self.ignore_index
        if pixel_weight is not None:
            w = torch.as_tensor(np.asarray(pixel_weight), dtype=torch.bool)
            valid = valid & (w if w.dim() == 3 else w.unsqueeze(0))
        logits = self.module(t)
        if not logits.requires_grad:
            raise ModelGradientUnavailable(f"model {self.name!r} output is detached from its input")
        target = torch.where(valid, yt, torch.zeros_like(yt))
        ce = F.cross_entropy(logits, target, reduction="none")
        n = valid.sum()
        loss = (ce * valid).sum() / n.clamp(min=1)
        (grad,) = torch.autograd.grad(loss, t)
        g = grad.numpy()
        return loss.detach().item(), (g[0] if single else g)

    def input_gradient(self, x, y, loss_scope: str = "all_pixels", mask=None) -> np.ndarray:
        weight = mask if loss_scope == "retained_pixels" else None
        return self.loss_and_grad(x, y, weight)[1]

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.module.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_toy_model(spec: ToyNetSpec, name: str | None = None) -> SegModelHandle:
    """Deterministically initialised toy network wrapped in a handle."""
    spec.validate()
    spec = spec.resolved()
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(spec.seed)
        net = ToyNet(spec)
    finally:
        torch.random.set_rng_state(gen_state)
    return SegModelHandle(net, spec.num_classes, name or f"toy{spec.variant}",
                          {"kind": "toy", "spec": spec.to_dict()})


def count_parameters(handle: SegModelHandle) -> int:
    return sum(p.numel() for p in handle.module.parameters())


# ---------------------------------------------------------------------------
# training


def evaluate_miou(handle: SegModelHandle, dataset, batch_size: int = 64) -> float:
    xs, ys = dataset.arrays()
    ev = SegEvaluator(dataset.num_classes, handle.ignore_index)
    preds = handle.predict(xs, batch_size=batch_size)
    for p, y in zip(preds, ys):
        ev.add(y, p, p)
    return miou(ev.cm_benign)[0] / 100.0


def _fgsm(module: nn.Module, xb: torch.Tensor, yb: torch.Tensor, epsilon: float,
          ignore_index: int) -> torch.Tensor:
    xr = xb.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(module(xr), yb, ignore_index=ignore_index)
    (g,) = torch.autograd.grad(loss, xr)
    return (xb + epsilon * g.sign()).clamp(0.0, 1.0).detach()


def _fit(handle: SegModelHandle, dataset, epochs: int, learning_rate: float, seed: int,
         batch_size: int, augment: Optional[Callable] = None) -> SegModelHandle:
    out = handle.clone()
    module = out.module
    for p in module.parameters():
        p.requires_grad_(True)
    module.train()
    xs, ys = dataset.arrays()
    xs_t = torch.as_tensor(xs, dtype=out.dtype)
    ys_t = torch.as_tensor(ys, dtype=torch.long)
    opt = torch.optim.Adam(module.parameters(), lr=learning_rate)
    steps = epochs * math.ceil(len(xs) / batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=learning_rate, total_steps=max(steps, 1))
    order_rng = np.random.default_rng([seed, 0])
    aug_rng = np.random.default_rng([seed, 1])
    for _ in range(epochs):
        order = order_rng.permutation(len(xs))
        for start in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[start:start + batch_size])
            xb, yb = xs_t[idx], ys_t[idx]
            if augment is not None:
                xb = augment(module, xb, yb, aug_rng)
            loss = F.cross_entropy(module(xb), yb, ignore_index=out.ignore_index)
            if not torch.isfinite(loss):
                raise DivergedTraining(f"non-finite training loss for {out.name!r}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    return SegModelHandle(module, out.num_classes, out.name, out.metadata, out.ignore_index)


def train_toy(handle: SegModelHandle, dataset, epochs: int = 10, learning_rate: float = 3e-3,
              seed: int = 0, batch_size: int = 32, val_dataset=None) -> tuple[SegModelHandle, float]:
    """Cross-entropy training on a private copy of ``handle``.

    Returns the trained handle and its mIoU (fraction in [0, 1]) on
    ``val_dataset``, or on the training data when no validation set is given.
    """
    trained = _fit(handle, dataset, epochs, learning_rate, seed, batch_size)
    return trained, evaluate_miou(trained, val_dataset if val_dataset is not None else dataset)


def adversarial_train(handle: SegModelHandle, dataset, epochs: int = 10, epsilon: float = 8 / 255,
                      mix_ratio: float = 0.5, learning_rate: float = 3e-3, seed: int = 0,
                      batch_size: int = 32, val_dataset=None) -> tuple[SegModelHandle, float]:
    """FGSM adversarial training.

    In every batch a ``mix_ratio`` share of the inputs is replaced by its
    single-step sign-gradient adversarial version before the update.
    """
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueOutOfRange(f"mix_ratio must be in [0, 1], got {mix_ratio}")
    if epsilon < 0:
        raise ValueOutOfRange("epsilon must be >= 0")

    def augment(module, xb, yb, rng):
        n_adv = int(round(mix_ratio * len(xb)))
        if n_adv == 0 or epsilon == 0:
            return xb
        pick = torch.as_tensor(rng.permutation(len(xb))[:n_adv])
        xb = xb.clone()
        xb[pick] = _fgsm(module, xb[pick], yb[pick], epsilon, handle.ignore_index)
        return xb

    trained = _fit(handle, dataset, epochs, learning_rate, seed, batch_size, augment)
    trained.metadata = {**trained.metadata, "adv_train": {"epsilon": epsilon, "mix_ratio": mix_ratio}}
    return trained, evaluate_miou(trained, val_dataset if val_dataset is not None else dataset)


# ---------------------------------------------------------------------------
# defenses


def conv_weights(module: nn.Module) -> list[torch.Tensor]:
    return [m.weight for m in module.modules() if isinstance(m, nn.Conv2d)]


def prune_model(handle: SegModelHandle, rate: float) -> SegModelHandle:
    """Global unstructured magnitude pruning of conv weights.

    Exactly ``ceil(rate * n)`` of the ``n`` conv weights with the smallest
    magnitude are zeroed; biases are left alone.
    """
    if not 0.0 <= rate <= 0.9:
        raise RateOutOfRange(f"pruning rate must be in [0, 0.9], got {rate}")
    pruned = handle.clone()
    pruned.metadata = {**handle.metadata, "prune_rate": rate}
    if rate == 0:
        return pruned
    weights = conv_weights(pruned.module)
    flat = torch.cat([w.detach().reshape(-1) for w in weights])
    k = math.ceil(round(rate * flat.numel(), 9))
    order = torch.argsort(flat.abs(), stable=True)
    keep = torch.ones_like(flat, dtype=torch.bool)
    keep[order[:k]] = False
    offset = 0
    with torch.no_grad():
        for w in weights:
            n = w.numel()
            w.mul_(keep[offset:offset + n].reshape(w.shape).to(w.dtype))
            offset += n
    return pruned


CORRUPTION_SIGMA_PER_LEVEL = 0.04


def corrupt_input(x, level: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Add Gaussian noise of std ``0.04 * level`` and clip to [0, 1]."""
    if level not in range(6):
        raise LevelOutOfRange(f"corruption level must be an integer in 0..5, got {level}")
    arr = np.asarray(image_array(x))
    if level == 0:
        return arr.copy()
    rng = rng if rng is not None else np.random.default_rng()
    noise = rng.normal(0.0, CORRUPTION_SIGMA_PER_LEVEL * level, size=arr.shape)
    return np.clip(arr + noise, 0.0, 1.0).astype(arr.dtype)


# ---------------------------------------------------------------------------
# checkpoints and external models


def save_checkpoint(handle: SegModelHandle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "metadata": {**handle.metadata, "name": handle.name, "num_classes": handle.num_classes,
                     "ignore_index": handle.ignore_index},
        "state_dict": {k: v.detach().clone() for k, v in handle.module.state_dict().items()},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> SegModelHandle:
    path = Path(path)
    if not path.is_file():
        raise UnsupportedModel(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types here
        raise UnsupportedModel(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise UnsupportedModel(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    meta = dict(payload["metadata"])
    spec = ToyNetSpec.from_dict(meta["spec"])
    handle = build_toy_model(spec, name=meta.get("name"))
    handle.module.load_state_dict(payload["state_dict"])
    handle.metadata = {k: v for k, v in meta.items() if k not in ("name", "num_classes", "ignore_index")}
    handle.ignore_index = meta.get("ignore_index", IGNORE_INDEX)
    return handle


def _check_gradient(handle: SegModelHandle, size: int = 32) -> None:
    x = np.full((3, size, size), 0.5, dtype=np.float32)
    y = np.zeros((size, size), dtype=np.int64)
    try:
        handle.loss_and_grad(x, y)
    except ModelGradientUnavailable:
        raise
    except RuntimeError as exc:
        raise ModelGradientUnavailable(f"gradient probe failed for {handle.name!r}: {exc}") from exc


def load_external_model(descriptor) -> SegModelHandle:
    """Wrap a model described by a path or a dict.

    Accepted descriptors:

    * a path to a toy checkpoint (``.pt``),
    * ``{"kind": "checkpoint", "path": ...}``,
    * ``{"kind": "torchscript", "path": ..., "num_classes": C}``,
    * ``{"kind": "python", "target": "package.module:factory", "num_classes": C,
      "kwargs": {...}}`` where the factory returns an ``nn.Module`` mapping
      ``B x 3 x H x W`` inputs in [0, 1] to ``B x C x H x W`` logits.
    """
    if isinstance(descriptor, (str, Path)):
        descriptor = {"kind": "checkpoint", "path": str(descriptor)}
    if not isinstance(descriptor, dict) or "kind" not in descriptor:
        raise UnsupportedModel(f"unrecognised model descriptor {descriptor!r}")
    kind = descriptor["kind"]
    name = descriptor.get("name")
    if kind == "checkpoint":
        handle = load_checkpoint(descriptor["path"])
        if name:
            handle.name = name
    elif kind == "torchscript":
        path = Path(descriptor["path"])
        if not path.is_file():
            raise UnsupportedModel(f"torchscript file {path} does not exist")
        try:
            module = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:
            raise UnsupportedModel(f"cannot load torchscript {path}: {exc}") from exc
        handle = SegModelHandle(module, int(descriptor["num_classes"]), name or path.stem,
                                {"kind": "torchscript", "path": str(path)})
    elif kind == "python":
        target = descriptor.get("target", "")
        mod_name, _, attr = target.partition(":")
        try:
            factory = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError, ValueError) as exc:
            raise UnsupportedModel(f"cannot import {target!r}: {exc}") from exc
        module = factory(**descriptor.get("kwargs", {}))
        if not isinstance(module, nn.Module):
            raise UnsupportedModel(f"{target!r} did not return a torch module")
        handle = SegModelHandle(module, int(descriptor["num_classes"]), name or attr,
                                {"kind": "python", "target": target})
    else:
        raise UnsupportedModel(f"unsupported model kind {kind!r}")
    _check_gradient(handle)
    return handle


__all__ = [
    "CHECKPOINT_FORMAT",
    "DivergedTraining",
    "InvalidSpec",
    "LevelOutOfRange",
    "RateOutOfRange",
    "SegModelHandle",
    "ToyNet",
    "ToyNetSpec",
    "UnsupportedModel",
    "adversarial_train",
    "build_toy_model",
    "conv_weights",
    "count_parameters",
    "corrupt_input",
    "evaluate_miou",
    "load_checkpoint",
    "load_external_model",
    "prune_model",
    "save_checkpoint",
    "train_toy",
]
