"""SegTrans and baseline l-inf attacks.

All attacks start from a zero perturbation, take signed-gradient ascent
steps on the surrogate's cross-entropy and project back onto the budget
after every step. Perturbation arithmetic runs in float64; the model sees
``clip(x + delta)`` cast to its own dtype.
"""

from __future__ import annotations

import time
from typing import Callable, Optional

import numpy as np

from .core import (
    AttackConfig,
    AttackResult,
    Perturbation,
    image_array,
    label_array,
    validate_pair,
)
from .regions import sample_mask_batch


class BudgetViolation(AssertionError):
    pass


def project_linf(delta: np.ndarray, epsilon: float, x: np.ndarray) -> np.ndarray:
    """Clamp ``delta`` to ``[-eps, eps]`` and so that ``x + delta`` stays in [0, 1].

    Per-pixel bounds are used instead of ``clip(x + delta) - x`` so that an
    already feasible delta comes back bit-identical.
    """
    lo = np.maximum(-epsilon, -x)
    hi = np.minimum(epsilon, 1.0 - x)
    return np.clip(delta, lo, hi)


def _check(delta: np.ndarray, x: np.ndarray, epsilon: float) -> None:
    if np.abs(delta).max(initial=0.0) > epsilon + 1e-9:
        raise BudgetViolation(f"|delta|_inf = {np.abs(delta).max()} exceeds {epsilon}")
    adv = x + delta
    if adv.min(initial=0.0) < -1e-12 or adv.max(initial=1.0) > 1.0 + 1e-12:
        raise BudgetViolation("x + delta left [0, 1]")


def _prepare(model, x, y):
    xa = np.asarray(image_array(x), dtype=np.float64)
    ya = np.asarray(label_array(y))
    validate_pair(xa, ya, model.num_classes, model.ignore_index)
    return xa, ya


def _finish(xa, delta, epsilon, trace, t0) -> AttackResult:
    return AttackResult(
        delta=Perturbation(delta, epsilon),
        adversarial_image=np.clip(xa + delta, 0.0, 1.0),
        loss_trace=trace,
        wall_time_seconds=time.perf_counter() - t0,
    )


def _masked_loop(model, x, y, cfg: AttackConfig, rng: np.random.Generator,
                 view: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
                 check_budget: bool) -> AttackResult:
    t0 = time.perf_counter()
    xa, ya = _prepare(model, x, y)
    _, h, w = xa.shape
    delta = np.zeros_like(xa)
    trace: list[float] = []
    retained = cfg.loss_scope == "retained_pixels"
    for _ in range(cfg.iterations):
        batch = sample_mask_batch(w, h, cfg, rng)
        grad_sum = np.zeros_like(xa)
        loss_sum = 0.0
        for m in batch.masks:
            z, dz_ddelta = view(xa, delta, m)
            loss, g = model.loss_and_grad(z, ya, m if retained else None)
            g = np.asarray(g, dtype=np.float64) * dz_ddelta
            if cfg.update_mode == "sequential":
                delta = project_linf(delta + cfg.step_size * np.sign(g), cfg.epsilon, xa)
                trace.append(loss)
                if check_budget:
                    _check(delta, xa, cfg.epsilon)
            else:
                grad_sum += g
                loss_sum += loss
        if cfg.update_mode == "aggregated":
            delta = project_linf(delta + cfg.step_size * np.sign(grad_sum), cfg.epsilon, xa)
            trace.append(loss_sum)
            if check_budget:
                _check(delta, xa, cfg.epsilon)
    return _finish(xa, delta, cfg.epsilon, trace, t0)


def _segtrans_view(xa, delta, m):
    mf = m.astype(np.float64)[None]
    return (xa + delta) * mf, mf


def _black_view(xa, delta, m):
    # gradient taken at an all-zero input, routed through the mask geometry
    return np.zeros_like(xa), m.astype(np.float64)[None]


def segtrans_attack(model, x, y, cfg: AttackConfig = AttackConfig(),
                    rng: Optional[np.random.Generator] = None, check_budget: bool = False) -> AttackResult:
    """Masked multi-view transfer attack.

    Every iteration draws ``cfg.remap_count`` masks, each keeping one random
    rectangle per grid cell. The cross-entropy of the surrogate on each
    masked view ``(x + delta) * m`` drives the update; in ``sequential``
    mode delta moves after every view, in ``aggregated`` mode once per
    iteration along the summed gradient.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return _masked_loop(model, x, y, cfg, rng, _segtrans_view, check_budget)


def black_image_control(model, x, y, cfg: AttackConfig = AttackConfig(),
                        rng: Optional[np.random.Generator] = None,
                        check_budget: bool = False) -> AttackResult:
    """SegTrans loop with every masked view replaced by a black image."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return _masked_loop(model, x, y, cfg, rng, _black_view, check_budget)


def pgd_attack(model, x, y, epsilon: float = 8 / 255, iterations: int = 10,
               step_size: float = 2 / 255, rng: Optional[np.random.Generator] = None,
               check_budget: bool = False) -> AttackResult:
    """Signed-gradient PGD on the full image, zero start.

    ``rng`` is accepted for interface parity and unused.
    """
    return mi_fgsm_attack(model, x, y, epsilon, iterations, step_size, decay=None,
                          rng=rng, check_budget=check_budget)


def mi_fgsm_attack(model, x, y, epsilon: float = 8 / 255, iterations: int = 10,
                   step_size: float = 2 / 255, decay: Optional[float] = 1.0,
                   rng: Optional[np.random.Generator] = None,
                   check_budget: bool = False) -> AttackResult:
    """Momentum iterative FGSM; ``decay=None`` disables the momentum buffer (PGD)."""
    t0 = time.perf_counter()
    xa, ya = _prepare(model, x, y)
    delta = np.zeros_like(xa)
    momentum = np.zeros_like(xa)
    trace: list[float] = []
    for _ in range(iterations):
        adv = np.clip(xa + delta, 0.0, 1.0)
        loss, g = model.loss_and_grad(adv, ya)
        g = np.asarray(g, dtype=np.float64)
        if decay is not None:
            l1 = np.abs(g).sum()
            momentum = decay * momentum + (g / l1 if l1 > 0 else g)
            g = momentum
        delta = project_linf(delta + step_size * np.sign(g), epsilon, xa)
        trace.append(loss)
        if check_budget:
            _check(delta, xa, epsilon)
    return _finish(xa, delta, epsilon, trace, t0)


def gaussian_noise_control(model, x, y, epsilon: float = 8 / 255,
                           rng: Optional[np.random.Generator] = None) -> AttackResult:
    """Random baseline: Gaussian noise with std ``epsilon`` projected onto the budget."""
    t0 = time.perf_counter()
    xa, _ = _prepare(model, x, y)
    rng = rng if rng is not None else np.random.default_rng()
    delta = project_linf(rng.normal(0.0, epsilon, size=xa.shape), epsilon, xa)
    return _finish(xa, delta, epsilon, [], t0)
