"""Command-line interface.

Exit codes: 0 on success, 2 for invalid input or configuration, 3 for I/O errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .metrics import evaluate, rank_atlases
from .phantom import PhantomSpec, generate_phantom, write_phantom
from .pipeline import ConfigError, Mode, batch_experiment, embed, grid_configs, load_config, segment
from .volume import (
    Volume,
    VolumeFormatError,
    bounding_box_from_labels,
    check_atlases,
    read_atlas_dir,
    read_volume,
    write_volume,
)

log = logging.getLogger("atlasfuse")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3


def _set_threads(n):
    if n:
        import numba

        numba.set_num_threads(n)


def cmd_segment(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg = dataclasses.replace(cfg, mode=Mode(args.mode))
    target = read_volume(args.target)
    names, atlases = read_atlas_dir(args.atlas_dir)
    check_atlases(target, atlases)
    _set_threads(args.threads)
    mask, prob, meta = segment(target, atlases, cfg)
    write_volume(mask, args.out)
    if args.prob_out:
        write_volume(Volume(embed(prob, target.dims, fill=-1.0), target.spacing_mm), args.prob_out)
    if args.meta_out:
        meta_d = meta.to_dict()
        meta_d["selected_atlas_names"] = [names[i] for i in meta.selected_atlases]
        meta_d["config"] = cfg.to_dict()
        Path(args.meta_out).write_text(json.dumps(meta_d, indent=2) + "\n", encoding="utf-8")
    log.info("segmented %s: %d candidates, %d foreground voxels", args.target, meta.n_candidates, int(mask.data.sum()))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = read_volume(args.pred)
    truth = read_volume(args.truth)
    if not (pred.is_label and truth.is_label):
        raise ValueError("evaluate expects two u8 label volumes")
    print(evaluate(pred, truth).to_json())
    return EXIT_OK


def cmd_phantom(args) -> int:
    data = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
    spec = PhantomSpec.from_dict(data)
    write_phantom(generate_phantom(spec), args.out)
    return EXIT_OK


def cmd_rank(args) -> int:
    target = read_volume(args.target)
    names, atlases = read_atlas_dir(args.atlas_dir)
    check_atlases(target, atlases)
    box = bounding_box_from_labels([a.label for a in atlases], args.margin)
    print(json.dumps(rank_atlases(target, atlases, box, args.n)))
    return EXIT_OK


def _phantom_dirs(root: Path) -> list[Path]:
    if (root / "target.json").is_file():
        return [root]
    dirs = sorted(p.parent for p in root.glob("*/target.json"))
    if not dirs:
        raise FileNotFoundError(f"no phantom directories (containing target.json) under {root}")
    return dirs


class _Loaded:
    def __init__(self, d: Path):
        self.target = read_volume(d / "target")
        self.truth = read_volume(d / "truth")
        _, self.atlases = read_atlas_dir(d)


def cmd_sweep(args) -> int:
    grid_doc = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    if not isinstance(grid_doc, dict):
        raise ConfigError("grid file must hold a JSON object")
    unknown = set(grid_doc) - {"base", "grid", "modes"}
    if unknown:
        raise ConfigError(f"grid file: unknown keys {sorted(unknown)}")
    base = load_config(grid_doc.get("base", {}))
    modes = [Mode(m) for m in grid_doc.get("modes", [m.value for m in Mode])]
    configs = grid_configs(grid_doc.get("grid", {}), base)
    phantoms = [_Loaded(d) for d in _phantom_dirs(Path(args.phantom_dir))]
    _set_threads(args.threads)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        keys = list(grid_doc.get("grid", {}))
        writer.writerow(["config"] + keys + ["mode", "n", "dice_mean", "dice_std", "md_mean", "md_std"])
        for ci, (params, cfg) in enumerate(configs):
            rows = batch_experiment(phantoms, cfg, modes)
            for mode in modes:
                sel = [r for r in rows if r["mode"] == mode.value]
                d = np.array([r["dice"] for r in sel])
                md = np.array([r["mean_distance_mm"] for r in sel if r["mean_distance_mm"] is not None])
                writer.writerow(
                    [ci]
                    + [json.dumps(params[k]) for k in keys]
                    + [
                        mode.value,
                        len(sel),
                        f"{d.mean():.6f}",
                        f"{d.std():.6f}",
                        f"{md.mean():.6f}" if md.size else "nan",
                        f"{md.std():.6f}" if md.size else "nan",
                    ]
                )
            out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlasfuse", description="Multi-atlas segmentation with RF fusion and label propagation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment a target image from registered atlases")
    p.add_argument("--target", required=True, help="target image (MVOL base path)")
    p.add_argument("--atlas-dir", required=True, help="directory of <name>_img / <name>_lbl pairs")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--mode", choices=[m.value for m in Mode], help="overrides the config's mode")
    p.add_argument("--out", required=True, help="output mask (MVOL base path)")
    p.add_argument("--prob-out", help="output probabilistic map (MVOL base path)")
    p.add_argument("--meta-out", help="write run metadata JSON here")
    p.add_argument("--threads", type=int, default=0, help="numba worker threads (0: numba default)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="Dice and mean surface distance as JSON")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="write a synthetic phantom directory")
    p.add_argument("--spec", help="PhantomSpec JSON file (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("rank-atlases", help="NMI atlas ranking as a JSON index list")
    p.add_argument("--target", required=True)
    p.add_argument("--atlas-dir", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--margin", type=int, default=10)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("sweep", help="grid sweep over phantoms; mean/std Dice and MD as CSV")
    p.add_argument("--grid", required=True, help='JSON: {"base": {...}, "grid": {"fusion.k": [100, 200]}, "modes": [...]}')
    p.add_argument("--phantom-dir", required=True, help="a phantom directory or a directory of them")
    p.add_argument("--out", help="CSV path (standard output if omitted)")
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError, VolumeFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
