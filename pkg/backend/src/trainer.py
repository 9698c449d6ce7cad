"""
Natural and Adversarial Training on Raw or Foreground-Masked Data
Trains SmallVGG models on X or X_FG, evaluates natural and PGD accuracy and
renders the four-way comparison table.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from tqdm import tqdm

from adversary import AttackConfig, check_attack, pgd_attack
from datasetkit import DatasetManifest, load_arrays, mask_batch
from diffnet import Model, MomentumState, forward, loss_and_grads, sgd_step, small_vgg


class TrainMode(str, Enum):
    NATURAL = "N"
    ADVERSARIAL = "A"


class InputMode(str, Enum):
    RAW = "X"
    MASKED = "X_FG"


def parse_train_mode(value: str) -> TrainMode:
    lookup = {"n": TrainMode.NATURAL, "natural": TrainMode.NATURAL,
              "a": TrainMode.ADVERSARIAL, "adversarial": TrainMode.ADVERSARIAL}
    try:
        return lookup[str(value).lower()]
    except KeyError:
        raise ValueError(f"Unknown training mode '{value}' (natural | adversarial)")


def parse_input_mode(value: str) -> InputMode:
    lookup = {"x": InputMode.RAW, "raw": InputMode.RAW, "x_fg": InputMode.MASKED, "masked": InputMode.MASKED}
    try:
        return lookup[str(value).lower()]
    except KeyError:
        raise ValueError(f"Unknown input mode '{value}' (X | X_FG)")


DEFAULT_EPOCHS = {TrainMode.NATURAL: 30, TrainMode.ADVERSARIAL: 60}


@dataclass
class TrainConfig:
    epochs: Optional[int] = None
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mode: TrainMode = TrainMode.NATURAL
    input_mode: InputMode = InputMode.RAW
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(random_start=True))

    def __post_init__(self):
        self.mode = parse_train_mode(self.mode.value if isinstance(self.mode, Enum) else self.mode)
        self.input_mode = parse_input_mode(
            self.input_mode.value if isinstance(self.input_mode, Enum) else self.input_mode)
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.mode]
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"need lr >= 0 and 0 <= momentum < 1 (got {self.lr}, {self.momentum})")


@dataclass
class EvalReport:
    natural_accuracy: float
    pgd_accuracy: float
    samples: int
    natural_correct: int
    pgd_correct: int
    config: Dict[str, str] = field(default_factory=dict)
    invariant_violations: int = 0

    def to_text(self) -> str:
        values = {
            "natural_acc": repr(self.natural_accuracy),
            "pgd_acc": repr(self.pgd_accuracy),
            "samples": str(self.samples),
            "natural_correct": str(self.natural_correct),
            "pgd_correct": str(self.pgd_correct),
            "invariant_violations": str(self.invariant_violations),
        }
        values.update(self.config)
        return "".join(f"{key}={value}\n" for key, value in values.items())

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalReport":
        values = dict(dotenv_values(path, interpolate=False))
        try:
            report = cls(
                natural_accuracy=float(values.pop("natural_acc")),
                pgd_accuracy=float(values.pop("pgd_acc")),
                samples=int(values.pop("samples")),
                natural_correct=int(values.pop("natural_correct")),
                pgd_correct=int(values.pop("pgd_correct")),
                invariant_violations=int(values.pop("invariant_violations", 0)),
                config={k: v for k, v in values.items() if v is not None},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}: malformed report ({e})") from e
        for name in ("natural_accuracy", "pgd_accuracy"):
            if not 0.0 <= getattr(report, name) <= 1.0:
                raise ValueError(f"{path}: {name} outside [0, 1]")
        return report


def _prepare_inputs(manifest: DatasetManifest, root, input_mode: InputMode
                    ) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    need_masks = input_mode == InputMode.MASKED
    images, labels, masks = load_arrays(manifest, root, need_masks=need_masks)
    if not need_masks:
        return images, labels, None
    return mask_batch(images, masks), labels, masks


def train(manifest: DatasetManifest, cfg: TrainConfig, root=".", num_classes: Optional[int] = None,
          progress: bool = False) -> Tuple[Model, pd.DataFrame]:
    """
    Momentum SGD over shuffled mini-batches. Adversarial mode replaces every batch
    by its PGD counterpart (mask-restricted on X_FG) before the gradient step.
    """
    if not manifest.records:
        raise ValueError("Cannot train on an empty manifest")
    images, labels, masks = _prepare_inputs(manifest, root, cfg.input_mode)
    num_classes = num_classes or len(manifest.label_names)
    model = small_vgg(images.shape[1:], num_classes, seed=cfg.seed)
    state = MomentumState.zeros_like(model)
    rng = np.random.default_rng(cfg.seed)
    n = len(labels)

    log_rows = []
    epochs = tqdm(range(cfg.epochs), desc=f"train {cfg.input_mode.value}/{cfg.mode.value}",
                  disable=not progress)
    for epoch in epochs:
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if cfg.mode == TrainMode.ADVERSARIAL:
                attack = cfg.attack.with_seed(int(rng.integers(2 ** 31)))
                xb = pgd_attack(model, xb, yb, attack, masks[idx] if masks is not None else None).adversarial
            loss, grads = loss_and_grads(model, xb, yb)
            correct += int((forward(model, xb).argmax(axis=1) == yb).sum())
            loss_sum += loss * len(idx)
            model, state = sgd_step(model, grads, cfg.lr, cfg.momentum, state)
        row = {"epoch": epoch + 1, "loss": loss_sum / n, "accuracy": correct / n}
        log_rows.append(row)
        logging.info(f"epoch {row['epoch']}/{cfg.epochs} {cfg.input_mode.value}/{cfg.mode.value}: "
                     f"loss={row['loss']:.4f} acc={row['accuracy']:.4f}")

    return model, pd.DataFrame(log_rows, columns=["epoch", "loss", "accuracy"])


def evaluate(model: Model, manifest: DatasetManifest, attack: Optional[AttackConfig] = None,
             input_mode: InputMode = InputMode.RAW, root=".", batch_size: int = 128,
             threads: int = 1, tags: Optional[Dict[str, str]] = None) -> EvalReport:
    """
    Natural accuracy and PGD accuracy over every record. Without an attack the PGD
    accuracy equals the natural accuracy (a zero-budget attack is the identity).
    Extra `tags` (e.g. training=A) are echoed into the report config.
    """
    if not manifest.records:
        raise ValueError("Cannot evaluate on an empty manifest")
    input_mode = parse_input_mode(input_mode.value if isinstance(input_mode, Enum) else input_mode)
    images, labels, masks = _prepare_inputs(manifest, root, input_mode)
    starts = list(range(0, len(labels), batch_size))

    def run_batch(batch_index: int) -> Tuple[int, int, int]:
        sl = slice(starts[batch_index], starts[batch_index] + batch_size)
        xb, yb = images[sl], labels[sl]
        natural = int((forward(model, xb).argmax(axis=1) == yb).sum())
        if attack is None:
            return natural, natural, 0
        mb = masks[sl] if masks is not None else None
        result = pgd_attack(model, xb, yb, attack.with_seed(attack.seed + batch_index), mb)
        violations = sum(check_attack(xb, result.adversarial, attack.epsilon, mb).values())
        if mb is not None:
            violations += int(np.count_nonzero(np.where(mb[:, None], 0.0, result.adversarial)))
        return natural, int((result.predictions == yb).sum()), violations

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        counts = list(pool.map(run_batch, range(len(starts))))

    natural_correct = sum(c[0] for c in counts)
    pgd_correct = sum(c[1] for c in counts)
    n = len(labels)
    config = {"data": input_mode.value}
    if attack is None:
        config["attack"] = "none"
    else:
        config.update({"attack": "pgd", "epsilon": repr(attack.epsilon), "step_size": repr(attack.step_size),
                       "steps": str(attack.steps), "random_start": str(attack.random_start).lower()})
    config.update(tags or {})
    report = EvalReport(natural_correct / n, pgd_correct / n, n, natural_correct, pgd_correct, config,
                        sum(c[2] for c in counts))
    logging.info(f"Evaluated {n} samples: natural={report.natural_accuracy:.4f} pgd={report.pgd_accuracy:.4f}")
    return report


TABLE_ROWS = [
    (InputMode.RAW, TrainMode.NATURAL),
    (InputMode.MASKED, TrainMode.NATURAL),
    (InputMode.RAW, TrainMode.ADVERSARIAL),
    (InputMode.MASKED, TrainMode.ADVERSARIAL),
]


def _cell_key(report: EvalReport) -> Tuple[InputMode, TrainMode]:
    try:
        return parse_input_mode(report.config["data"]), parse_train_mode(report.config["training"])
    except KeyError:
        raise ValueError("Report lacks the 'data'/'training' tags needed for the comparison table")


def _signed(delta: float) -> str:
    # no "-0.00"
    return f"{round(delta, 2) + 0.0:+.2f}"


def compare_table(reports: Union[Dict[Tuple[str, str], EvalReport], Sequence[EvalReport]]) -> str:
    """
    Rows (data, training, natural %, PGD %) for {X, X_FG} x {N, A}, with the
    X_FG - X deltas on the X_FG rows.
    """
    if isinstance(reports, dict):
        cells = {(parse_input_mode(d), parse_train_mode(t)): r for (d, t), r in reports.items()}
    else:
        cells = {_cell_key(r): r for r in reports}
    missing = [f"{d.value}/{t.value}" for d, t in TABLE_ROWS if (d, t) not in cells]
    if missing:
        raise ValueError(f"Comparison table needs all four reports; missing {', '.join(missing)}")

    rows = []
    for data, training in TABLE_ROWS:
        report = cells[(data, training)]
        natural, pgd = report.natural_accuracy * 100, report.pgd_accuracy * 100
        row = {"data": data.value, "training": training.value,
               "natural_%": f"{natural:.2f}", "pgd_%": f"{pgd:.2f}", "delta_natural": "", "delta_pgd": ""}
        if data == InputMode.MASKED:
            base = cells[(InputMode.RAW, training)]
            row["delta_natural"] = _signed(natural - base.natural_accuracy * 100)
            row["delta_pgd"] = _signed(pgd - base.pgd_accuracy * 100)
        rows.append(row)
    return pd.DataFrame(rows).to_string(index=False)


def directional_checks(reports: Dict[Tuple[str, str], EvalReport]) -> Dict[str, bool]:
    """Signs of the masked-vs-raw PGD deltas"""
    cells = {(parse_input_mode(d), parse_train_mode(t)): r for (d, t), r in reports.items()}
    raw_a, fg_a = cells[(InputMode.RAW, TrainMode.ADVERSARIAL)], cells[(InputMode.MASKED, TrainMode.ADVERSARIAL)]
    raw_n, fg_n = cells[(InputMode.RAW, TrainMode.NATURAL)], cells[(InputMode.MASKED, TrainMode.NATURAL)]
    return {
        "adversarial_pgd_improves": fg_a.pgd_accuracy > raw_a.pgd_accuracy,
        "natural_pgd_not_worse": fg_n.pgd_accuracy >= raw_n.pgd_accuracy,
    }
