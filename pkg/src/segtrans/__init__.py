"""Transferable masked adversarial attacks on semantic segmentation models."""

from .attacks import (
    black_image_control,
    gaussian_noise_control,
    mi_fgsm_attack,
    pgd_attack,
    project_linf,
    segtrans_attack,
)
from .core import (
    AttackConfig,
    AttackResult,
    FixedSquare,
    GridSpec,
    ImageTensor,
    LabelMap,
    MaskBatch,
    Perturbation,
    RandomRatio,
    RegionSpec,
)
from .data import DatasetHandle, gen_shapes_dataset, load_folder_dataset
from .metrics import MetricReport, SegEvaluator, asr, confusion_matrix, miou, posi_ratio, psnr
from .models import SegModelHandle, ToyNetSpec, build_toy_model, load_checkpoint, train_toy
from .regions import compose_mask, partition_grid, sample_mask_batch, sample_rectangle

__version__ = "0.1.0"
