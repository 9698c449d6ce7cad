"""
ForegroundShield Command Line
Single entry point exposing segmentation, dataset construction, training,
attacks and evaluation as subcommands.

Usage: python backend/src/cli.py <subcommand> [flags]
"""

import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import psutil
from dotenv import dotenv_values

from adversary import AttackConfig, perturbation_split, pgd_attack
from dataset_validator import ManifestValidator, passed
from datasetkit import (
    MANIFEST_HEADER, DatasetManifest, ManifestRecord, SynthConfig, binarize, build_dataset,
    dataset_stats, load_arrays, mask_batch, read_image, read_manifest, split_manifest,
    synth_generate, write_image, write_manifest, write_mask,
)
from diffnet import CHECKPOINT_MAGIC, forward, grad_check, load_model, save_model, small_vgg
from segmenter import SegmenterParams, segment, segment_manifest
from trainer import (
    EvalReport, InputMode, TrainConfig, TrainMode, compare_table, directional_checks,
    evaluate, parse_input_mode, train,
)

__version__ = "1.0.0"
VERSION_TEXT = (f"fgshield {__version__} (checkpoint {CHECKPOINT_MAGIC.decode().strip()}, "
                f"manifest {MANIFEST_HEADER})")

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(log_file: Optional[str] = None, verbose: bool = False) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def resolve_threads(threads: int) -> int:
    """0 means one worker per physical core"""
    if threads < 0:
        raise ValueError(f"--threads must be >= 0, got {threads}")
    if threads == 0:
        return psutil.cpu_count(logical=False) or 1
    return threads


def _bool(value: str) -> bool:
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _attack_from_args(args) -> AttackConfig:
    return AttackConfig(epsilon=args.eps, step_size=args.step_size, steps=args.steps,
                        random_start=args.random_start, seed=args.seed)


# --- Subcommands -------------------------------------------------------------

def cmd_segment(args) -> int:
    params = SegmenterParams(sigma=args.sigma, connectivity=args.connectivity,
                             radius_fraction=args.radius, seed_count=args.seeds,
                             quantization=args.quantization)
    if args.manifest:
        if not args.out_dir:
            raise ValueError("segment --manifest needs --out-dir")
        summary = segment_manifest(args.manifest, args.out_dir, params, args.seed, args.threads)
        print(f"segmented={summary['segmented']} skipped={summary['skipped']} "
              f"mean_foreground={summary['mean_foreground_fraction']:.4f}")
        return 0
    if not args.input or not args.output:
        raise ValueError("segment needs --input and --output (or --manifest and --out-dir)")
    mask = segment(read_image(args.input), params, args.seed)
    write_mask(args.output, mask)
    print(f"foreground_fraction={mask.mean():.4f}")
    return 0


def cmd_build_dataset(args) -> int:
    exclude = {name.strip() for name in args.exclude.split(",") if name.strip()} if args.exclude else set()
    summary = build_dataset(args.annotations, args.out_dir, k=args.k, exclude=exclude,
                            size=args.size, threads=args.threads)
    print(f"emitted={summary['emitted']} skipped_unreadable={summary['skipped_unreadable']} "
          f"skipped_empty={summary['skipped_empty']} filtered_label={summary['filtered_label']}")
    return 0


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_samples=args.samples, side=args.side, n_classes=args.classes,
                      amplitude=args.amplitude, seed=args.seed)
    manifest = synth_generate(cfg, args.out_dir)
    print(f"samples={len(manifest)} classes={','.join(manifest.label_names)}")
    return 0


def cmd_binarize(args) -> int:
    write_image(args.output, binarize(read_image(args.input), args.threshold))
    return 0


def cmd_train(args) -> int:
    manifest = read_manifest(args.manifest)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                      seed=args.seed, mode=args.mode, input_mode=args.data,
                      attack=AttackConfig(epsilon=args.eps, step_size=args.step_size, steps=args.steps,
                                          random_start=True, seed=args.seed))
    model, log = train(manifest, cfg, root=Path(args.manifest).parent, progress=args.progress)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    if args.log:
        log.to_csv(args.log, index=False, float_format="%.6f")
    final = log.iloc[-1] if len(log) else None
    print(f"epochs={cfg.epochs} parameters={model.parameter_count()}"
          + (f" final_loss={final['loss']:.6f} final_acc={final['accuracy']:.4f}" if final is not None else ""))
    return 0


def cmd_attack(args) -> int:
    manifest = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    model = load_model(args.model)
    input_mode = parse_input_mode(args.data)
    images, labels, masks = load_arrays(manifest, root, need_masks=input_mode == InputMode.MASKED)
    attack_masks = None
    if input_mode == InputMode.MASKED:
        images = mask_batch(images, masks)
        attack_masks = masks
    cfg = _attack_from_args(args)

    adversarial = np.empty_like(images)
    natural_correct = adv_correct = 0
    for batch_index, start in enumerate(range(0, len(labels), args.batch_size)):
        sl = slice(start, start + args.batch_size)
        mb = attack_masks[sl] if attack_masks is not None else None
        result = pgd_attack(model, images[sl], labels[sl], cfg.with_seed(cfg.seed + batch_index), mb)
        adversarial[sl] = result.adversarial
        natural_correct += int((forward(model, images[sl]).argmax(axis=1) == labels[sl]).sum())
        adv_correct += int((result.predictions == labels[sl]).sum())

    out_dir = Path(args.out_dir)
    records = []
    for i, record in enumerate(manifest.records):
        image_rel = f"images/{i:06d}.ppm"
        write_image(out_dir / image_rel, adversarial[i].transpose(1, 2, 0))
        mask_rel = None
        if record.mask_path:
            mask_rel = f"masks/{i:06d}{Path(record.mask_path).suffix}"
            (out_dir / "masks").mkdir(parents=True, exist_ok=True)
            shutil.copyfile(root / record.mask_path, out_dir / mask_rel)
        records.append(ManifestRecord(image_rel, mask_rel, record.label))
    write_manifest(out_dir / "manifest.txt", DatasetManifest(records, list(manifest.label_names)))

    n = len(labels)
    print(f"natural_acc={natural_correct / n:.4f} adv_acc={adv_correct / n:.4f}")
    if masks is not None:
        split = perturbation_split(images, adversarial, masks)
        print(f"foreground_share={split['foreground']:.4f} background_share={split['background']:.4f}")
    return 0


def cmd_eval(args) -> int:
    if args.table:
        reports = [EvalReport.load(path) for path in args.table]
        print(compare_table(reports))
        return 0 if all(r.invariant_violations == 0 for r in reports) else 1

    if not args.model or not args.manifest:
        raise ValueError("eval needs --model and --manifest (or --table with four reports)")
    manifest = read_manifest(args.manifest)
    tags = {"training": TrainMode(args.training).value} if args.training else None
    attack = None if args.no_attack else _attack_from_args(args)
    report = evaluate(load_model(args.model), manifest, attack, args.data, root=Path(args.manifest).parent,
                      batch_size=args.batch_size, threads=args.threads, tags=tags)
    if args.out:
        report.save(args.out)
    print(f"natural_acc={report.natural_accuracy:.4f} pgd_acc={report.pgd_accuracy:.4f} samples={report.samples}")
    if report.invariant_violations:
        logging.error(f"{report.invariant_violations} attack invariant violations")
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    model = small_vgg((3, args.side, args.side), args.classes, seed=args.seed)
    batch = rng.uniform(0.0, 1.0, size=(args.samples, 3, args.side, args.side))
    labels = rng.integers(0, args.classes, size=args.samples)
    report = grad_check(model, batch, labels, h=args.h, tol=args.tol,
                        max_coordinates=args.coordinates, seed=args.seed)
    print(f"max_rel_err={report.max_rel_err:.3e} coordinates={report.coordinates_checked} "
          f"{'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def run_end2end(args) -> Dict:
    """synth -> split -> train x4 -> eval x4 -> comparison table, all under one output directory"""
    out_dir = Path(args.out_dir)
    data_dir = out_dir / "data"
    synth = SynthConfig(n_samples=args.samples, side=args.side, n_classes=args.classes,
                        amplitude=args.amplitude, seed=args.seed)
    manifest = synth_generate(synth, data_dir)
    train_set, test_set = split_manifest(manifest, args.test_fraction)
    write_manifest(data_dir / "train.txt", train_set)
    write_manifest(data_dir / "test.txt", test_set)
    logging.info(f"Split {len(manifest)} samples into {len(train_set)} train / {len(test_set)} test")

    attack = _attack_from_args(args)
    reports = {}
    for data in (InputMode.RAW, InputMode.MASKED):
        for mode in (TrainMode.NATURAL, TrainMode.ADVERSARIAL):
            name = f"{data.value}_{mode.value}"
            epochs = args.epochs if mode == TrainMode.NATURAL else args.adv_epochs
            cfg = TrainConfig(epochs=epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                              seed=args.seed, mode=mode, input_mode=data,
                              attack=AttackConfig(epsilon=args.eps, step_size=args.step_size,
                                                  steps=args.steps, random_start=True, seed=args.seed))
            logging.info(f"Training {name} for {cfg.epochs} epochs")
            model, log = train(train_set, cfg, root=data_dir, num_classes=len(manifest.label_names),
                               progress=args.progress)
            (out_dir / "models").mkdir(parents=True, exist_ok=True)
            (out_dir / "logs").mkdir(parents=True, exist_ok=True)
            save_model(model, out_dir / "models" / f"{name}.mbnet")
            log.to_csv(out_dir / "logs" / f"{name}.csv", index=False, float_format="%.6f")

            report = evaluate(model, test_set, attack, data, root=data_dir, threads=args.threads,
                              tags={"training": mode.value})
            report.save(out_dir / "reports" / f"{name}.txt")
            reports[(data.value, mode.value)] = report

    table = compare_table(reports)
    with open(out_dir / "table.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write(table + "\n")
    return {"table": table, "reports": reports, "checks": directional_checks(reports)}


def cmd_end2end(args) -> int:
    result = run_end2end(args)
    print(result["table"])
    failed_checks = [name for name, holds in result["checks"].items() if not holds]
    for name in failed_checks:
        logging.warning(f"Directional check '{name}' does not hold for seed {args.seed}")
    violations = sum(r.invariant_violations for r in result["reports"].values())
    if violations:
        logging.error(f"{violations} attack invariant violations across the four evaluations")
        return 1
    if failed_checks and args.require_directional:
        logging.error(f"Directional checks failed for seed {args.seed}: {', '.join(failed_checks)}")
        return 1
    return 0


def cmd_validate(args) -> int:
    validator = ManifestValidator(Path(args.manifest).parent, require_masks=args.require_masks,
                                  expected_size=args.size)
    validation_data = validator.validate_manifest_file(Path(args.manifest))
    validator.print_validation_report(validation_data)
    if args.stats and validation_data['success']:
        _, per_class = dataset_stats(read_manifest(args.manifest), Path(args.manifest).parent)
        print(per_class.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0 if passed(validation_data) else 1


# --- Argument parsing --------------------------------------------------------

def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eps", type=float, default=8 / 255, help="L-infinity budget (default 8/255)")
    p.add_argument("--step-size", type=float, default=2 / 255, help="PGD step size (default 2/255)")
    p.add_argument("--steps", type=int, default=10, help="PGD iterations (default 10)")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file supplying flag defaults")
    common.add_argument("--threads", type=int, default=1, help="worker cap (0 = physical cores, 1 = sequential)")
    common.add_argument("--seed", type=int, default=0, help="global random seed")
    common.add_argument("--log-file", help="also write logs to this file")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="fgshield", description="Foreground-mask adversarial robustness toolkit")
    parser.add_argument("--version", action="version", version=VERSION_TEXT)
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    commands = {}

    def add(name, handler, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(handler=handler)
        commands[name] = p
        return p

    p = add("segment", cmd_segment, "graph-cut foreground mask for one image or a manifest")
    p.add_argument("--input", help="P6 image")
    p.add_argument("--output", help="P5 mask to write")
    p.add_argument("--manifest", help="segment every image of this manifest")
    p.add_argument("--out-dir", help="output directory for --manifest")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seeds", type=int, default=25, help="foreground seed count K")
    p.add_argument("--radius", type=float, default=0.15, help="seed disk radius as a fraction of min(H, W)")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=4)
    p.add_argument("--quantization", type=int, default=10_000)

    p = add("build-dataset", cmd_build_dataset, "object-centric dataset from an annotation file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=10, help="number of most frequent classes to keep")
    p.add_argument("--exclude", default="", help="comma-separated class names to drop")
    p.add_argument("--size", type=int, default=32)

    p = add("synth", cmd_synth, "synthetic shapes-on-clutter dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--amplitude", type=float, default=0.3, help="background clutter amplitude")

    p = add("binarize", cmd_binarize, "threshold an image to {0, 1}")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = add("train", cmd_train, "train a SmallVGG model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV file for the per-epoch training log")
    p.add_argument("--mode", default="natural", help="natural | adversarial")
    p.add_argument("--data", default="X", help="X | X_FG")
    p.add_argument("--epochs", type=int, help="default 30 natural / 60 adversarial")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--progress", action="store_true", help="epoch progress bar on stderr")
    _add_attack_flags(p)

    p = add("attack", cmd_attack, "PGD-perturb a manifest with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--data", default="X", help="X | X_FG")
    p.add_argument("--random-start", action="store_true")
    p.add_argument("--batch-size", type=int, default=128)
    _add_attack_flags(p)

    p = add("eval", cmd_eval, "natural and PGD accuracy, or the comparison table")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--data", default="X", help="X | X_FG")
    p.add_argument("--training", choices=("N", "A"), help="training-mode tag echoed into the report")
    p.add_argument("--out", help="report file to write")
    p.add_argument("--no-attack", action="store_true", help="natural accuracy only")
    p.add_argument("--random-start", action="store_true")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--table", nargs=4, metavar="REPORT", help="render the comparison table from four reports")
    _add_attack_flags(p)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of a random SmallVGG")
    p.add_argument("--side", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--coordinates", type=int, default=1000)

    p = add("end2end", cmd_end2end, "synth, train the four models, evaluate and print the table")
    p.add_argument("--out-dir", default="runs/end2end")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--amplitude", type=float, default=0.3)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=30, help="natural training epochs")
    p.add_argument("--adv-epochs", type=int, default=60, help="adversarial training epochs")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--random-start", action="store_true", help="random start for the evaluation attack")
    p.add_argument("--require-directional", action="store_true",
                   help="exit 1 when masking does not improve PGD accuracy as expected")
    p.add_argument("--progress", action="store_true")
    _add_attack_flags(p)

    p = add("validate", cmd_validate, "check every record of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--require-masks", action="store_true")
    p.add_argument("--size", type=int, help="expected image side")
    p.add_argument("--stats", action="store_true", help="also print per-class foreground statistics")

    return parser, commands


def apply_config(parser: argparse.ArgumentParser, command: argparse.ArgumentParser, path: str) -> None:
    """Install key=value defaults from a config file; explicit flags still win"""
    actions = {a.dest: a for a in command._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in dotenv_values(path, interpolate=False).items():
        dest = key.strip().replace("-", "_")
        action = actions.get(dest)
        if action is None:
            parser.error(f"unknown key '{key}' in config file {path}")
        if value is None:
            parser.error(f"key '{key}' in config file {path} has no value")
        try:
            if isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = _bool(value)
            elif action.nargs is not None and action.nargs not in ("?",):
                defaults[dest] = [action.type(v) if action.type else v for v in value.split()]
            else:
                defaults[dest] = action.type(value) if action.type else value
        except ValueError:
            parser.error(f"bad value for '{key}' in config file {path}: {value}")
    command.set_defaults(**defaults)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        if args.config:
            if not Path(args.config).is_file():
                parser.error(f"config file not found: {args.config}")
            apply_config(parser, commands[args.command], args.config)
            args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_file, args.verbose)
    try:
        args.threads = resolve_threads(args.threads)
        return args.handler(args)
    except Exception as e:
        logging.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
