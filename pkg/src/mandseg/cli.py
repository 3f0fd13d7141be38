"""Command-line front end: phantom, train, segment, evaluate.

Each subcommand is a thin shell around the library stages; everything a run
resolves (box, seed, sigma, theta, adjacency, config values) lands in its
output files so results can be reproduced from disk alone.  Exit codes: 0
success, 2 the mandible could not be located, 3 delineation could not start,
4 unreadable or unwritable files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import fc, phantom
from .grid import BoundingBox, Mask, Volume
from .metrics import evaluate as evaluate_pair
from .metrics import save_overlay, save_report, uoi
from .pipeline import PipelineConfig, run_segmentation, train_axis_forests
from .recognition import ForestHyperparams, RecognitionError, load_forest, save_forest
from .refine import RefineConfig, save_trace
from .volume_io import LoadError, load_mask, load_volume, save_mask, save_volume

__all__ = ["main"]

EXIT_OK = 0
EXIT_RECOGNITION = 2
EXIT_DELINEATION = 3
EXIT_IO = 4

FOREST_FILES = ("forest_sagittal.json", "forest_coronal.json", "forest_axial.json")


def _write_json(obj: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(path: str, columns: tuple[int, ...]) -> list[tuple[str, ...]]:
    """Read a tab-separated manifest; blank lines and #-comments skipped.

    columns lists the accepted field counts.  All malformed lines are
    collected and reported together.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = fh.readlines()
    except OSError as e:
        raise LoadError("cannot read manifest %s: %s" % (path, e)) from e
    rows = []
    bad = []
    for i, line in enumerate(raw, start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in columns:
            bad.append("line %d: expected %s tab-separated fields, got %d"
                       % (i, " or ".join(str(c) for c in columns), len(fields)))
            continue
        rows.append(tuple(fields))
    if bad:
        raise LoadError("malformed manifest %s:\n  %s" % (path, "\n  ".join(bad)))
    if not rows:
        raise LoadError("manifest %s lists no cases" % path)
    return rows


def cmd_phantom(args) -> int:
    params = phantom.PhantomParams(
        dims=tuple(args.dims),
        spacing=tuple(args.spacing),
        skull_gap=args.skull_gap,
    )
    case = phantom.generate(params, severity=args.severity, rng_seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    paths = {
        "volume": os.path.join(args.out, "volume.nii"),
        "gt_mandible": os.path.join(args.out, "gt_mandible.nii"),
        "gt_teeth": os.path.join(args.out, "gt_teeth.nii"),
        "gt_skull": os.path.join(args.out, "gt_skull.nii"),
    }
    save_volume(case.volume, paths["volume"])
    save_mask(case.gt_mandible, paths["gt_mandible"])
    save_mask(case.gt_teeth, paths["gt_teeth"])
    save_mask(case.gt_skull, paths["gt_skull"])
    line = "%s\t%s\t%s" % (
        os.path.abspath(paths["volume"]),
        os.path.abspath(paths["gt_mandible"]),
        args.severity,
    )
    with open(os.path.join(args.out, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.write(line + "\n")
    print(line)
    return EXIT_OK


def cmd_train(args) -> int:
    rows = _read_manifest(args.manifest, columns=(3,))
    cases = []
    bad = []
    for vol_path, gt_path, _severity in rows:
        try:
            cases.append((load_volume(vol_path), load_mask(gt_path)))
        except (LoadError, OSError) as e:
            bad.append("%s / %s: %s" % (vol_path, gt_path, e))
    if bad:
        raise LoadError("unreadable training cases:\n  %s" % "\n  ".join(bad))
    hp = ForestHyperparams(
        n_trees=args.trees,
        max_depth=args.depth,
        min_leaf=args.min_leaf,
    )
    forests = train_axis_forests(cases, hp, rng_seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for axis, name in enumerate(FOREST_FILES):
        save_forest(forests[axis], axis, os.path.join(args.out, name))
    print("trained %d cases -> %s" % (len(cases), ", ".join(FOREST_FILES)))
    return EXIT_OK


def _load_forests(forest_dir: str):
    forests = []
    for axis, name in enumerate(FOREST_FILES):
        path = os.path.join(forest_dir, name)
        try:
            forest, tagged_axis = load_forest(path)
        except OSError as e:
            raise LoadError("cannot read forest %s: %s" % (path, e)) from e
        if tagged_axis != axis:
            raise LoadError("%s is tagged for axis %d, expected %d" % (path, tagged_axis, axis))
        forests.append(forest)
    return tuple(forests)


def _segment_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    refinement = cfg.refinement
    if args.retain_teeth:
        refinement = RefineConfig(
            base_area_mm2=refinement.base_area_mm2,
            teeth_component_count=refinement.teeth_component_count,
            abrupt_change_ratio=refinement.abrupt_change_ratio,
            overlap_retention=refinement.overlap_retention,
            anterior_low_y=refinement.anterior_low_y,
            retain_teeth=True,
            min_center_separation_mm=refinement.min_center_separation_mm,
        )
    return PipelineConfig(
        recognition=cfg.recognition,
        sigma=args.sigma if args.sigma is not None else cfg.sigma,
        theta=args.theta if args.theta is not None else cfg.theta,
        adjacency=args.adjacency if args.adjacency is not None else cfg.adjacency,
        refinement=refinement,
        apply_refinement=False if args.no_refine else cfg.apply_refinement,
        output_dir=args.out,
        rng_seed=cfg.rng_seed,
    )


def cmd_segment(args) -> int:
    cfg = _segment_config(args)
    volume = load_volume(args.volume)
    forests = _load_forests(args.forests)
    result = run_segmentation(volume, forests, cfg)
    os.makedirs(args.out, exist_ok=True)
    mask_path = os.path.join(args.out, "mask.nii")
    save_mask(result.mask, mask_path)
    record = {
        "inputs": {"volume": os.path.abspath(args.volume),
                   "forests": os.path.abspath(args.forests)},
        "config": cfg.to_dict(),
        "run": result.run_record(),
        "outputs": {"mask": os.path.abspath(mask_path)},
    }
    if result.trace is not None:
        trace_path = os.path.join(args.out, "trace.json")
        save_trace(result.trace, trace_path)
        record["outputs"]["trace"] = os.path.abspath(trace_path)
    if args.dump_connectivity:
        conn_path = os.path.join(args.out, "connectivity.nii")
        conn = Volume(result.connectivity.strength.astype(np.float32), volume.spacing)
        save_volume(conn, conn_path)
        record["outputs"]["connectivity"] = os.path.abspath(conn_path)
    _write_json(record, os.path.join(args.out, "run.json"))
    print("box lo=%r hi=%r seed=%r sigma=%.3f -> %d voxels"
          % (result.box.lo, result.box.hi, result.seed_voxel, result.sigma, result.mask.count))
    return EXIT_OK


def _run_record_box(run_json_path: str) -> BoundingBox:
    with open(run_json_path, encoding="utf-8") as fh:
        record = json.load(fh)
    box = record["run"]["box"]
    return BoundingBox(tuple(box["lo"]), tuple(box["hi"]))


def _tight_box(m: Mask) -> BoundingBox | None:
    if not m.data.any():
        return None
    xs, ys, zs = np.nonzero(m.data)
    return BoundingBox((xs.min(), ys.min(), zs.min()), (xs.max(), ys.max(), zs.max()))


def cmd_evaluate(args) -> int:
    rows = _read_manifest(args.manifest, columns=(3, 4))
    cases = []
    bad = []
    overlays = []
    for row in rows:
        pred_path, gt_path, severity = row[0], row[1], row[2]
        try:
            pred = load_mask(pred_path)
            gt = load_mask(gt_path)
            pred_box = _run_record_box(row[3]) if len(row) == 4 else None
        except (LoadError, OSError, KeyError, ValueError) as e:
            bad.append("%s / %s: %s" % (pred_path, gt_path, e))
            continue
        gt_box = _tight_box(gt) if pred_box is not None else None
        cases.append(evaluate_pair(pred, gt, severity, pred_box, gt_box))
        overlays.append((pred, gt, row))
    if bad:
        raise LoadError("unreadable evaluation cases:\n  %s" % "\n  ".join(bad))
    save_report(cases, args.out)
    if args.overlay:
        os.makedirs(args.overlay, exist_ok=True)
        for i, (pred, gt, row) in enumerate(overlays):
            _write_case_overlay(pred, gt, row, os.path.join(args.overlay, "case_%03d.png" % i))
    summary = json.loads(open(args.out, encoding="utf-8").read())["summary"]
    for group in ("low", "medium", "high", "overall"):
        if group in summary and summary[group]["dsc"] is not None:
            print("%s: dsc median %.4f (n=%d)"
                  % (group, summary[group]["dsc"]["median"], summary[group]["dsc"]["n"]))
    return EXIT_OK


def _write_case_overlay(pred: Mask, gt: Mask, row: tuple, path: str) -> None:
    """One PNG per case at the middle slice of the GT z-extent.

    The CT backdrop comes from the volume recorded in the case's run log
    when available, a flat background otherwise.
    """
    zs = np.nonzero(gt.data)[2]
    z = int((zs.min() + zs.max()) // 2) if zs.size else gt.dims[2] // 2
    backdrop = np.zeros(gt.dims[:2], dtype=np.float32)
    if len(row) == 4:
        try:
            with open(row[3], encoding="utf-8") as fh:
                vol_path = json.load(fh)["inputs"]["volume"]
            backdrop = load_volume(vol_path).data[:, :, z].astype(np.float32)
        except (LoadError, OSError, KeyError, ValueError):
            pass
    save_overlay(backdrop, pred.data[:, :, z], gt.data[:, :, z], path,
                 title="slice z=%d" % z)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mandseg",
        description="Mandible segmentation for head CT volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic CT case with ground truth")
    p.add_argument("--severity", choices=phantom.SEVERITIES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for this case")
    p.add_argument("--dims", type=int, nargs=3, default=[96, 96, 80], metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, nargs=3, default=[1.12, 1.12, 3.0],
                   metavar=("SX", "SY", "SZ"))
    p.add_argument("--skull-gap", type=int, default=0,
                   help="axial gap in voxels between the mandible and the skull slab")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the three per-axis slice regressors")
    p.add_argument("--manifest", required=True,
                   help="TSV: volume_path<TAB>gt_path<TAB>severity, one case per line")
    p.add_argument("--out", required=True, help="directory for the forest files")
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--depth", type=int, default=12)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one volume with trained forests")
    p.add_argument("--volume", required=True)
    p.add_argument("--forests", required=True, help="directory holding the three forest files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON pipeline config; flags below override it")
    p.add_argument("--sigma", type=float, default=None,
                   help="affinity scale; estimated from the data when omitted")
    p.add_argument("--theta", type=float, default=None, help="connectivity threshold in (0, 1]")
    p.add_argument("--adjacency", type=int, choices=(6, 18, 26), default=None)
    p.add_argument("--no-refine", action="store_true",
                   help="stop after delineation; skip the slice-wise cleanup")
    p.add_argument("--retain-teeth", action="store_true",
                   help="keep separated teeth in the output mask")
    p.add_argument("--dump-connectivity", action="store_true",
                   help="also write the float32 connectivity map")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    p.add_argument("--manifest", required=True,
                   help="TSV: pred_path<TAB>gt_path<TAB>severity[<TAB>run_json]")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--overlay", help="directory for per-case overlay PNGs")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RecognitionError as e:
        print("recognition failed: %s" % e, file=sys.stderr)
        return EXIT_RECOGNITION
    except fc.DelineationError as e:
        print("delineation failed: %s" % e, file=sys.stderr)
        return EXIT_DELINEATION
    except (LoadError, OSError) as e:
        print("io error: %s" % e, file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
