"""Command line entry point: ``fglora <verb> [--config PATH] [...]``.

Exit codes: 0 when every cell succeeded, 2 when some cells failed, 1 on a
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness as H

EXIT_OK, EXIT_CONFIG, EXIT_CELLS = 0, 1, 2

VERBS = ("pretrain", "gen-data", "run", "ablate-placement", "ablate-shots", "order-flip", "report")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated integer list, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fglora", description="Few-shot continual learning with per-task LoRA adapters.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", type=Path, help="TOML experiment config (defaults apply to omitted keys)")
    p.add_argument("--seeds", type=_int_list, help="override seeds, e.g. 42,43,44")
    p.add_argument("--n-shot", type=_int_list, help="override shot counts, e.g. 16,32,64")
    p.add_argument("--method", action="append", help="override methods (repeatable)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--paper-scale", action="store_true", help="100 epochs per task instead of the desk-scale 30")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> H.ExperimentConfig:
    cfg = H.load_config(args.config) if args.config else H.ExperimentConfig()
    changes = {}
    if args.seeds:
        changes["seeds"] = tuple(args.seeds)
    if args.n_shot:
        changes["n_shots"] = tuple(args.n_shot)
    if args.method:
        changes["methods"] = tuple(args.method)
    if args.out:
        changes["output_dir"] = str(args.out)
    try:
        cfg = replace(cfg, **changes) if changes else cfg
    except ValueError as exc:
        raise H.ConfigError(str(exc)) from None
    if args.paper_scale:
        cfg = H.paper_scale(cfg)
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        probe = cfg.out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise H.ConfigError(f"output directory {cfg.out} is not writable: {exc}") from None
    return cfg


def _grid_exit(grid: H.GridResult) -> int:
    return EXIT_CELLS if grid.failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except H.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = cfg.out
    if args.verb == "gen-data":
        paths = H.write_datasets(H.generate_datasets(cfg), out / "data")
        for p in paths:
            print(p)
        return EXIT_OK
    if args.verb == "pretrain":
        datasets = H.generate_datasets(cfg)
        store, history = H.pretrain(cfg, datasets)
        H.save_checkpoint(store, out / "backbone.fgls", {"pretrain_history": json.dumps(history)})
        print(f"pretrained backbone: {store.num_params():,} values, loss {history[0]:.4f} -> {history[-1]:.4f}")
        print(out / "backbone.fgls")
        return EXIT_OK
    if args.verb == "report":
        text = H.report(out)
        if not text:
            print(f"no results under {out}", file=sys.stderr)
            return EXIT_CONFIG
        print(text)
        return EXIT_OK
    if args.verb == "run":
        grid = H.run(cfg)
        print((out / "results.md").read_text(encoding="utf-8"))
        return _grid_exit(grid)
    runner = {"ablate-placement": H.ablation_lora_placement, "ablate-shots": H.ablation_shots,
              "order-flip": H.order_flip}[args.verb]
    grid, table = runner(cfg)
    print(table)
    return _grid_exit(grid)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
