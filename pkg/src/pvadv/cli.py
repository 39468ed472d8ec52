"""Command-line entry point: ``pvadv <subcommand> [--config run.json] [flags]``.

Settings come from three layers: RunConfig defaults, then a flat JSON config
file, then explicit flags. Exit codes: 0 ok, 2 usage, 3 data, 4 numeric.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .pipeline import EXIT_OK, EXIT_USAGE, ConfigError, RunConfig, StageError
from .vulnmap import VARIANTS

PATH_KEYS = ("model", "vuln", "advset", "detector", "out")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file; keys match flag names")
    p.add_argument("--dataset", choices=P.DATASETS)
    p.add_argument("--data-dir")
    p.add_argument("--n", type=int, help="subsample the dataset to N images")
    p.add_argument("--test-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--pgd-steps", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pvadv", description="Pixel-vulnerability adversary toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("train-classifier", argument_default=S)
    _add_common(p)
    p.add_argument("--arch", choices=["mnist", "cifar", "tiny"])
    p.add_argument("--clf-epochs", type=int)
    p.add_argument("--clf-lr", type=float)
    p.add_argument("--clf-batch", type=int)
    p.add_argument("--out")

    p = sub.add_parser("attack", argument_default=S)
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--attack", choices=P.ATTACKS)
    p.add_argument("--out")

    p = sub.add_parser("train-vulnmap", argument_default=S)
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--source", dest="attack", choices=P.ATTACKS)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--cache-source", action=argparse.BooleanOptionalAction,
                   help="compute source adversarials once per training image")
    p.add_argument("--out")

    p = sub.add_parser("gen-adv", argument_default=S)
    _add_common(p)
    p.add_argument("--vuln")
    p.add_argument("--advset", help="source adversarial set")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--out")

    p = sub.add_parser("train-detector", argument_default=S)
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--advset")
    p.add_argument("--out")

    p = sub.add_parser("evaluate", argument_default=S)
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--vuln")
    p.add_argument("--advset", action="append")
    p.add_argument("--detector", action="append")
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("export-maps", argument_default=S)
    _add_common(p)
    p.add_argument("--vuln")
    p.add_argument("--n-maps", type=int)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("pipeline", argument_default=S)
    _add_common(p)
    for flag, typ in [("--arch", str), ("--clf-epochs", int), ("--clf-lr", float),
                      ("--clf-batch", int), ("--tau", float),
                      ("--lr", float), ("--batch", int), ("--max-iters", int),
                      ("--patience", int), ("--n-maps", int)]:
        p.add_argument(flag, type=typ)
    p.add_argument("--attack", choices=P.ATTACKS)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--cache-source", action=argparse.BooleanOptionalAction)
    p.add_argument("--out-dir")
    return ap


def _read_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a flat JSON object")
    out = {}
    for k, v in doc.items():
        key = k.replace("-", "_")
        if key == "source":
            key = "attack"
        if key not in RunConfig.field_names() and key not in PATH_KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        out[key] = v
    return out


def parse_and_validate(argv) -> tuple[str, RunConfig, dict]:
    """Return ``(command, RunConfig, paths)``; flags override config-file values."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    verbose = ns.pop("verbose", False)
    merged = _read_config(ns.pop("config")) if "config" in ns else {}
    merged.update(ns)
    paths = {k: merged.pop(k) for k in PATH_KEYS if k in merged}
    try:
        cfg = RunConfig(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    if verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return command, cfg, paths


REQUIRED = {
    "train-classifier": ("out",),
    "attack": ("model", "out"),
    "train-vulnmap": ("model", "out"),
    "gen-adv": ("vuln", "advset", "out"),
    "train-detector": ("model", "advset", "out"),
    "evaluate": ("model", "advset", "out"),
    "export-maps": ("vuln", "out"),
    "pipeline": (),
}


def _one(v):
    return v[0] if isinstance(v, list) else v


def dispatch(command: str, cfg: RunConfig, paths: dict) -> None:
    missing = [k for k in REQUIRED[command] if not paths.get(k)]
    if missing:
        raise ConfigError(f"{command} needs --{' --'.join(missing)}")
    if command == "train-classifier":
        P.train_classifier_stage(cfg, paths["out"])
    elif command == "attack":
        P.attack_stage(cfg, paths["model"], paths["out"])
    elif command == "train-vulnmap":
        P.train_vulnmap_stage(cfg, paths["model"], paths["out"])
    elif command == "gen-adv":
        P.gen_adv_stage(cfg, paths["vuln"], _one(paths["advset"]), paths["out"])
    elif command == "train-detector":
        P.train_detector_stage(cfg, paths["model"], _one(paths["advset"]), paths["out"])
    elif command == "evaluate":
        advsets = paths["advset"] if isinstance(paths["advset"], list) else [paths["advset"]]
        dets = paths.get("detector") or []
        dets = dets if isinstance(dets, list) else [dets]
        P.evaluate_stage(cfg, paths["model"], advsets, dets, paths["out"],
                         vuln_path=paths.get("vuln"))
    elif command == "export-maps":
        P.export_maps_stage(cfg, paths["vuln"], paths["out"])
    elif command == "pipeline":
        P.run_pipeline(cfg)


def main(argv=None) -> int:
    try:
        command, cfg, paths = parse_and_validate(sys.argv[1:] if argv is None else argv)
        dispatch(command, cfg, paths)
    except SystemExit as e:  # argparse usage errors and --help
        return int(e.code or 0)
    except ConfigError as e:
        print(f"pvadv: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as e:
        print(f"pvadv: {e}", file=sys.stderr)
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
