"""Command-line front end.

Exit codes: 0 success, 1 invalid input (config, checkpoint, data file),
2 runtime failure, 3 a check failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, ExperimentConfig, load_config, write_resolved
from .datasets import IdxError, Preprocessor, export_csv, write_idx
from .nn import CheckpointError, ModelSpecError, load_checkpoint

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N[,N...], got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advmix", description="Adversarial mixup training at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", type=Path, required=config_required, help="TOML config file")
        sp.add_argument("--out", type=Path, help="output directory (overrides the config)")
        sp.add_argument("--seed", type=_seeds, help="comma-separated seeds (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="parallel worker processes")

    common(sub.add_parser("train", help="train one scheme for every seed"))
    common(sub.add_parser("ablate", help="train and evaluate the ablation grid"))
    ev = sub.add_parser("attack-eval", help="evaluate a checkpoint against the configured attackers")
    common(ev)
    ev.add_argument("--checkpoint", type=Path, required=True)
    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(gc, config_required=False)
    gc.add_argument("--instances", type=int, default=100)
    common(sub.add_parser("datagen", help="write the configured dataset to disk"))
    return p


def _load(args, require_scheme=False) -> ExperimentConfig:
    cfg = load_config(args.config, require_scheme=require_scheme)
    if args.out is not None:
        cfg.out = str(args.out)
    if args.seed:
        cfg.seeds = args.seed
    return cfg


def cmd_train(args) -> int:
    from .experiment import run_train

    cfg = _load(args, require_scheme=True)
    results = run_train(cfg, Path(cfg.out), args.threads)
    code = EXIT_OK
    for seed, _, summary, err in results:
        if err:
            print(f"seed {seed}: FAILED {err}", file=sys.stderr)
            code = EXIT_RUNTIME
        else:
            print(f"seed {seed}: " + json.dumps(summary, sort_keys=True))
    return code


def cmd_ablate(args) -> int:
    from .experiment import run_ablation

    cfg = _load(args)
    report = run_ablation(cfg, Path(cfg.out), args.threads)
    print((Path(cfg.out) / "report.md").read_text(), end="")
    failed = [r["row"] for r in report["rows"] if r["status"] != "ok"]
    if failed:
        print("failed cells in: " + ", ".join(failed), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_attack_eval(args) -> int:
    from .training import evaluate_model

    cfg = _load(args)
    model, extra = load_checkpoint(args.checkpoint)
    seed = cfg.seeds[0]
    train_data, test_data = cfg.split(seed)
    spec = model.spec
    if spec.input_shape != train_data.input_shape or spec.class_count != train_data.class_count:
        raise CheckpointError(
            f"checkpoint expects inputs {spec.input_shape} with {spec.class_count} classes, "
            f"dataset has {train_data.input_shape} with {train_data.class_count}")
    res = evaluate_model(model, test_data, cfg.eval_attacks(), seed=seed,
                         preprocessor=Preprocessor(train_data))
    out = {"checkpoint": str(args.checkpoint), "seed": seed, "extra": extra, "accuracy": res}
    text = json.dumps(out, indent=2, sort_keys=True)
    print(text)
    if args.out is not None:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "attack-eval.json").write_text(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_suite

    seed = args.seed[0] if args.seed else 0
    results = run_suite(seed=seed, instances=args.instances)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_datagen(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        ds = cfg.load_dataset(seed)
        stem = f"{cfg.dataset.kind}_seed_{seed}"
        if ds.is_image:
            write_idx(ds, out / f"{stem}-images.idx", out / f"{stem}-labels.idx")
            print(f"wrote {out / stem}-images.idx, {out / stem}-labels.idx ({len(ds)} examples)")
        else:
            export_csv(ds, out / f"{stem}.csv")
            print(f"wrote {out / stem}.csv ({len(ds)} examples)")
    write_resolved(cfg, out / "resolved-config.toml")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "attack-eval": cmd_attack_eval,
            "gradcheck": cmd_gradcheck, "datagen": cmd_datagen}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        # single-threaded numerics keep runs bit-reproducible
        with threadpool_limits(1):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CheckpointError, IdxError, ModelSpecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
