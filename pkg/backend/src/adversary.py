"""
L-infinity PGD Adversary
Projected gradient-sign attack clipped to the valid pixel range, with an
optional foreground mask restricting which pixels the adversary may touch.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np

from diffnet import Model, cross_entropy, forward, loss_and_grads


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if self.steps < 0:
            raise ValueError(f"step count must be non-negative, got {self.steps}")

    def with_seed(self, seed: int) -> "AttackConfig":
        return replace(self, seed=seed)


@dataclass
class AdvResult:
    adversarial: np.ndarray
    flipped: np.ndarray
    final_loss: np.ndarray
    predictions: np.ndarray


def project_linf(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Clamp x_adv into [x - eps, x + eps] intersected with [0, 1]"""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise ValueError(f"Adversarial shape {x_adv.shape} does not match clean shape {x.shape}")
    lower = np.maximum(x - eps, 0.0)
    upper = np.minimum(x + eps, 1.0)
    return np.minimum(np.maximum(x_adv, lower), upper)


def _expand_mask(mask: Optional[np.ndarray], x: np.ndarray) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (x.shape[0],) + mask.shape)
    if mask.shape != (x.shape[0],) + x.shape[2:]:
        raise ValueError(f"Mask {mask.shape} does not match batch {x.shape}")
    return mask[:, None, :, :]


def pgd_attack(model: Model, x: np.ndarray, y, cfg: AttackConfig,
               mask: Optional[np.ndarray] = None) -> AdvResult:
    """
    Untargeted PGD on the softmax cross-entropy.

    With a mask the random start and every step are zeroed off-mask before the
    projection, so background pixels of the output equal the input exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("Clean inputs must lie in [0, 1]")
    y = np.asarray(y, dtype=np.int64)
    keep = _expand_mask(mask, x)

    x_adv = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(cfg.seed)
        noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
        if keep is not None:
            noise = np.where(keep, noise, 0.0)
        x_adv = project_linf(x + noise, x, cfg.epsilon)

    for _ in range(cfg.steps):
        _, grads = loss_and_grads(model, x_adv, y, want_input_grad=True)
        step = cfg.step_size * np.sign(grads.input)
        if keep is not None:
            step = np.where(keep, step, 0.0)
        x_adv = project_linf(x_adv + step, x, cfg.epsilon)

    logits = forward(model, x_adv)
    clean_pred = forward(model, x).argmax(axis=1)
    pred = logits.argmax(axis=1)
    return AdvResult(
        adversarial=x_adv,
        flipped=pred != clean_pred,
        final_loss=cross_entropy(logits, y),
        predictions=pred,
    )


def check_attack(x: np.ndarray, x_adv: np.ndarray, eps: float, mask: Optional[np.ndarray] = None,
                 slack: float = 1e-9) -> Dict[str, int]:
    """Count budget, range and mask-support violations of an adversarial batch"""
    delta = x_adv - x
    per_sample = np.abs(delta).reshape(len(x), -1).max(axis=1) if x.size else np.zeros(0)
    violations = {
        "budget": int((per_sample > eps + slack).sum()),
        "range": int(((x_adv < 0.0) | (x_adv > 1.0)).sum()),
        "support": 0,
    }
    keep = _expand_mask(mask, x)
    if keep is not None:
        violations["support"] = int(np.count_nonzero(np.where(keep, 0.0, delta)))
    if any(violations.values()):
        logging.warning(f"Attack invariant violations: {violations}")
    return violations


def perturbation_split(x: np.ndarray, x_adv: np.ndarray, mask: np.ndarray) -> Dict[str, float]:
    """Share of the L1 perturbation mass landing on foreground vs background pixels"""
    keep = _expand_mask(mask, x)
    delta = np.abs(np.asarray(x_adv, np.float64) - np.asarray(x, np.float64))
    total = float(delta.sum())
    foreground = float(np.where(keep, delta, 0.0).sum())
    if total == 0.0:
        return {"foreground": 0.0, "background": 0.0, "total_l1": 0.0}
    return {
        "foreground": foreground / total,
        "background": (total - foreground) / total,
        "total_l1": total,
    }
