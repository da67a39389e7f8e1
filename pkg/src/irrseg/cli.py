"""Command-line pipeline: synth -> composite -> split -> train -> predict ->
mask -> evaluate.

Every command takes --seed where randomness exists and is reproducible under
it; no command mutates its inputs. Each run writes a manifest (config
snapshot, seeds, input/output paths, tool version, per-stage timings) and
every output raster gets a `<file>.meta.json` sidecar carrying the manifest
hash, which covers the reproducibility-relevant fields (not the timings).

Run configuration comes from a simple `key = value` file (# comments
allowed; values parsed as JSON scalars when possible) merged with flag
overrides; the manifest freezes the merged result.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .compositing import NUM_BANDS, SceneObservation, build_stack
from .ensemble import (
    ensemble_iqr,
    ensemble_median,
    classify,
    overlap_tile_predict,
    quantize,
)
from .errors import IrrsegError
from .evaluation import (
    change_analysis,
    confusion,
    iqr_histograms,
    regress_areas,
    write_histograms_csv,
    write_metrics_csv,
    write_regression_csv,
)
from .geodata import (
    LabelRaster,
    Tile,
    county_area,
    grid_split,
    rasterize,
    read_census_csv,
    read_ras1,
    read_vector_json,
    road_mask,
    split_labels,
    write_census_csv,
    write_ras1,
    write_vector_json,
)
from .synthgen import SynthConfig, gen_scenes, gen_world, true_county_acres
from .training import TrainConfig, build_training_set, train_ensemble, write_loss_trace
from .unet import UNetConfig, load_model, save_params


@dataclass
class RunManifest:
    command: str
    version: str
    seed: int | None
    config: dict
    inputs: dict
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def hash(self) -> str:
        stable = {
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
        }
        return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


def _write_manifest(out_dir: Path, manifest: RunManifest) -> None:
    doc = asdict(manifest)
    doc["manifest_hash"] = manifest.hash()
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _write_sidecar(raster_path: Path, manifest: RunManifest) -> None:
    side = {"raster": raster_path.name, "manifest_hash": manifest.hash()}
    Path(str(raster_path) + ".meta.json").write_text(json.dumps(side, sort_keys=True))


def parse_config_file(path) -> dict:
    """`key = value` lines; values JSON-decoded when possible, else strings."""
    out: dict = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _parse_extent(text: str) -> tuple[float, float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError("extent must be x_min,y_min,x_max,y_max")
    return tuple(parts)  # type: ignore[return-value]


def _tiles_to_json(tiles: list[Tile]) -> list[list[float]]:
    return [[t.x0, t.y0, t.x1, t.y1] for t in tiles]


def _tiles_from_json(path) -> list[Tile]:
    return [Tile(*row) for row in json.loads(Path(path).read_text())]


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    cfg_dict = parse_config_file(args.config) if args.config else {}
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    known = {f for f in SynthConfig.__dataclass_fields__}
    unknown = set(cfg_dict) - known
    if unknown:
        raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
    config = SynthConfig(**cfg_dict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    labels, roads, counties = gen_world(config)
    scenes = gen_scenes((labels, roads, counties), config, args.year)

    manifest = RunManifest(
        command="synth", version=__version__, seed=config.seed,
        config={**cfg_dict, "year": args.year}, inputs={},
    )
    write_vector_json(out / "labels.json", labels)
    write_vector_json(out / "roads.json", roads)
    write_vector_json(out / "counties.json", counties)

    scene_dir = out / "scenes"
    scene_dir.mkdir(exist_ok=True)
    index = []
    for k, scene in enumerate(scenes):
        payload = np.concatenate(
            [scene.bands, scene.valid[None].astype(np.float32)], axis=0
        )
        name = f"scene_{k:02d}.ras"
        write_ras1(scene_dir / name, payload, scene.grid)
        _write_sidecar(scene_dir / name, manifest)
        index.append({"file": name, "date": scene.date.isoformat()})
    (scene_dir / "index.json").write_text(json.dumps(index, indent=2))

    truth = true_county_acres(labels, counties)
    write_census_csv(
        out / "truth_census.csv", [(c, args.year, a) for c, a in sorted(truth.items())]
    )
    manifest.outputs = ["labels.json", "roads.json", "counties.json", "scenes/", "truth_census.csv"]
    manifest.timings["synth_s"] = round(time.perf_counter() - t0, 3)
    _write_manifest(out, manifest)
    return 0


def _load_scenes(scene_dir: Path) -> list[SceneObservation]:
    index = json.loads((scene_dir / "index.json").read_text())
    scenes = []
    for entry in index:
        data, grid = read_ras1(scene_dir / entry["file"])
        if data.shape[0] != NUM_BANDS + 1:
            raise ValueError(f"scene {entry['file']} must have {NUM_BANDS} bands plus a mask")
        scenes.append(
            SceneObservation(
                date=dt.date.fromisoformat(entry["date"]),
                bands=data[:NUM_BANDS].astype(np.float32),
                valid=data[NUM_BANDS] > 0.5,
                grid=grid,
            )
        )
    return scenes


def cmd_composite(args) -> int:
    t0 = time.perf_counter()
    scenes = _load_scenes(Path(args.scenes))
    year_start = dt.date.fromisoformat(args.year_start)
    stack = build_stack(scenes, year_start)
    for warning in stack.warnings:
        print(f"warning: {warning}", file=sys.stderr)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="composite", version=__version__, seed=args.seed,
        config={"year_start": args.year_start}, inputs={"scenes": str(args.scenes)},
    )
    write_ras1(out_path, stack.data, stack.grid)
    _write_sidecar(out_path, manifest)
    counts_path = Path(str(out_path) + ".counts.ras")
    write_ras1(counts_path, stack.counts, stack.grid)
    _write_sidecar(counts_path, manifest)
    meta = {
        "year_start": year_start.isoformat(),
        "windows": [[s.isoformat(), e.isoformat()] for s, e in stack.windows],
        "bands": list(("blue", "green", "red", "nir", "swir1", "swir2")),
        "channel_order": "window-major then band",
        "manifest_hash": manifest.hash(),
    }
    Path(str(out_path) + ".meta.json").write_text(json.dumps(meta, indent=2))
    manifest.outputs = [out_path.name, counts_path.name]
    manifest.timings["composite_s"] = round(time.perf_counter() - t0, 3)
    _write_manifest(out_path.parent, manifest)
    return 0


def cmd_split(args) -> int:
    t0 = time.perf_counter()
    layer = read_vector_json(args.labels)
    if args.stack:
        _, grid = read_ras1(args.stack)
        extent = grid.extent()
    else:
        extent = _parse_extent(args.extent)
    train_tiles, test_tiles = grid_split(extent, args.tile_size, args.fraction, args.seed or 0)
    train_layer, test_layer = split_labels(layer, train_tiles, test_tiles)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_vector_json(out / "train_labels.json", train_layer)
    write_vector_json(out / "test_labels.json", test_layer)
    (out / "train_tiles.json").write_text(json.dumps(_tiles_to_json(train_tiles)))
    (out / "test_tiles.json").write_text(json.dumps(_tiles_to_json(test_tiles)))
    manifest = RunManifest(
        command="split", version=__version__, seed=args.seed or 0,
        config={"tile_size": args.tile_size, "fraction": args.fraction},
        inputs={"labels": str(args.labels), "extent": list(extent)},
        outputs=["train_labels.json", "test_labels.json", "train_tiles.json", "test_tiles.json"],
    )
    manifest.timings["split_s"] = round(time.perf_counter() - t0, 3)
    _write_manifest(out, manifest)
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = parse_config_file(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    model_keys = {"base_filters", "depth", "num_classes", "model_seed"}
    train_keys = set(TrainConfig.__dataclass_fields__)
    unknown = set(cfg) - model_keys - train_keys - {"log_every"}
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")

    stack_data, grid = read_ras1(args.stack)
    labels_layer = read_vector_json(args.labels)
    tiles = _tiles_from_json(args.tiles)
    label_raster = rasterize(labels_layer, grid)

    from .compositing import CompositeStack

    stack = CompositeStack(
        data=stack_data.astype(np.float32),
        counts=np.ones((6, grid.height, grid.width), dtype=np.int32),
        grid=grid,
        year_start=dt.date(2000, 1, 1),
    )
    dataset = build_training_set(stack, label_raster, tiles)
    if not dataset.tiles:
        raise ValueError("no labeled training tiles intersect the stack")

    train_cfg = TrainConfig(**{k: v for k, v in cfg.items() if k in train_keys})
    model_cfg = UNetConfig(
        in_channels=stack_data.shape[0],
        num_classes=int(cfg.get("num_classes", 3)),
        base_filters=int(cfg.get("base_filters", 32)),
        depth=int(cfg.get("depth", 4)),
        weight_decay=train_cfg.weight_decay,
        seed=int(cfg.get("model_seed", train_cfg.seed)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="train", version=__version__, seed=train_cfg.seed,
        config=cfg, inputs={"stack": str(args.stack), "labels": str(args.labels),
                            "tiles": str(args.tiles)},
    )
    results = train_ensemble(dataset, train_cfg, model_cfg,
                             log_every=int(cfg.get("log_every", 50)))
    for k, (model, trace) in enumerate(results, start=1):
        model_path = out / f"model_{k}.unp"
        save_params(model, model_path)
        write_loss_trace(out / f"loss_{k}.csv", trace)
        manifest.outputs += [model_path.name, f"loss_{k}.csv"]
    manifest.timings["train_s"] = round(time.perf_counter() - t0, 3)
    _write_manifest(out, manifest)
    return 0


def cmd_predict(args) -> int:
    t0 = time.perf_counter()
    stack_data, grid = read_ras1(args.stack)
    model_paths = sorted(Path(args.models).glob("*.unp"))
    if not model_paths:
        raise ValueError(f"no .unp model files under {args.models}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="predict", version=__version__, seed=args.seed,
        config={"tile": args.tile, "overlap": args.overlap},
        inputs={"models": [p.name for p in model_paths], "stack": str(args.stack)},
    )
    quantized = []
    for k, path in enumerate(model_paths, start=1):
        model = load_model(path)
        probs = overlap_tile_predict(model, stack_data.astype(np.float32),
                                     args.tile, args.overlap)
        q = quantize(probs)
        quantized.append(q)
        qpath = out / f"probs_{k}.ras"
        write_ras1(qpath, q, grid)
        _write_sidecar(qpath, manifest)
        manifest.outputs.append(qpath.name)

    median = ensemble_median(quantized)
    final = classify(median)
    write_ras1(out / "median.ras", median, grid)
    _write_sidecar(out / "median.ras", manifest)
    manifest.outputs.append("median.ras")
    if len(quantized) >= 2:
        iqr = ensemble_iqr(quantized)
        write_ras1(out / "iqr.ras", iqr, grid)
        _write_sidecar(out / "iqr.ras", manifest)
        manifest.outputs.append("iqr.ras")
    else:
        print("warning: a single model has no spread; skipping IQR raster", file=sys.stderr)
    write_ras1(out / "classes.ras", final, grid)
    _write_sidecar(out / "classes.ras", manifest)
    manifest.outputs.append("classes.ras")
    manifest.timings["predict_s"] = round(time.perf_counter() - t0, 3)
    _write_manifest(out, manifest)
    return 0


def cmd_mask(args) -> int:
    t0 = time.perf_counter()
    data, grid = read_ras1(args.classes)
    roads = read_vector_json(args.roads)
    masked = road_mask(LabelRaster(data[0], grid), roads, args.buffer)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="mask", version=__version__, seed=args.seed,
        config={"buffer": args.buffer},
        inputs={"classes": str(args.classes), "roads": str(args.roads)},
        outputs=[out_path.name],
    )
    write_ras1(out_path, masked.data, grid)
    _write_sidecar(out_path, manifest)
    manifest.timings["mask_s"] = round(time.perf_counter() - t0, 3)
    _write_manifest(out_path.parent, manifest)
    return 0


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    data, grid = read_ras1(args.classes)
    predicted = LabelRaster(data[0], grid)
    labels = rasterize(read_vector_json(args.labels), grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="evaluate", version=__version__, seed=args.seed,
        config={"year": args.year},
        inputs={k: str(v) for k, v in (("classes", args.classes), ("labels", args.labels),
                                       ("counties", args.counties), ("census", args.census),
                                       ("iqr", args.iqr), ("areas_history", args.areas_history))
                if v},
    )

    m = confusion(predicted, labels)
    write_metrics_csv(out / "metrics.csv", m)
    manifest.outputs.append("metrics.csv")

    if args.counties:
        counties = read_vector_json(args.counties)
        areas = county_area(predicted, counties)
        census = read_census_csv(args.census) if args.census else {}
        census_year = census.get(args.year, {})
        with open(out / "areas.csv", "w", newline="") as fh:
            import csv as _csv
            writer = _csv.writer(fh)
            writer.writerow(["county", "year", "acres", "census_acres", "flag"])
            for county in sorted(areas):
                if county in census_year:
                    writer.writerow([county, args.year, f"{areas[county]:.6f}",
                                     f"{census_year[county]:.6f}", ""])
                else:
                    writer.writerow([county, args.year, f"{areas[county]:.6f}", "",
                                     "missing_census"])
        manifest.outputs.append("areas.csv")
        shared = set(areas) & set(census_year)
        if len(shared) >= 2:
            summary = regress_areas({c: census_year[c] for c in shared},
                                    {c: areas[c] for c in shared})
            write_regression_csv(out / "regression.csv", [(args.year, "census", summary)])
            manifest.outputs.append("regression.csv")
        elif args.census:
            print("warning: fewer than 2 shared counties; regression skipped", file=sys.stderr)

    if args.iqr:
        iqr_data, iqr_grid = read_ras1(args.iqr)
        if iqr_grid != grid:
            raise ValueError("IQR raster grid does not match the class raster")
        hists = iqr_histograms(predicted.data, iqr_data, labels)
        write_histograms_csv(out / "histograms.csv", hists)
        manifest.outputs.append("histograms.csv")

    if args.areas_history:
        history = read_census_csv(args.areas_history)
        exclude = set(int(y) for y in args.exclude_years.split(",") if y) \
            if args.exclude_years else set()
        deltas = change_analysis(history, period=args.period, exclude=exclude)
        with open(out / "change.csv", "w", newline="") as fh:
            import csv as _csv
            writer = _csv.writer(fh)
            writer.writerow(["county", "delta_acres"])
            for county, delta in sorted(deltas.items()):
                writer.writerow([county, f"{delta:.6f}"])
        manifest.outputs.append("change.csv")

    manifest.timings["evaluate_s"] = round(time.perf_counter() - t0, 3)
    _write_manifest(out, manifest)
    return 0


# -- argument wiring -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irrseg",
        description="Irrigation mapping pipeline: synthetic scenes, temporal "
                    "composites, U-Net ensemble training, tiled inference, and "
                    "accuracy/census evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"irrseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world and its scenes")
    p.add_argument("--config", help="key = value synth configuration file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--year", type=int, default=2015)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("composite", help="build the 36-channel temporal-mean stack")
    p.add_argument("--scenes", required=True, help="scene directory with index.json")
    p.add_argument("--year-start", required=True, help="season start date YYYY-MM-DD")
    p.add_argument("--out", required=True, help="output stack .ras path")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_composite)

    p = sub.add_parser("split", help="tile grid and train/test label split")
    p.add_argument("--labels", required=True)
    p.add_argument("--extent", help="x_min,y_min,x_max,y_max map units")
    p.add_argument("--stack", help="take the extent from this raster instead")
    p.add_argument("--tile-size", type=float, default=23040.0)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the model ensemble")
    p.add_argument("--stack", required=True)
    p.add_argument("--labels", required=True, help="training label vectors")
    p.add_argument("--tiles", required=True, help="training tile rectangles JSON")
    p.add_argument("--config", help="key = value training configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="overlap-tile ensemble prediction")
    p.add_argument("--models", required=True, help="directory of .unp model files")
    p.add_argument("--stack", required=True)
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--overlap", type=int, default=24)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("mask", help="reassign irrigated pixels on road corridors")
    p.add_argument("--classes", required=True)
    p.add_argument("--roads", required=True)
    p.add_argument("--buffer", type=float, default=30.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("evaluate", help="accuracy metrics and census comparison")
    p.add_argument("--classes", required=True)
    p.add_argument("--labels", required=True, help="held-out label vectors")
    p.add_argument("--counties")
    p.add_argument("--census")
    p.add_argument("--iqr")
    p.add_argument("--areas-history", help="county,year,acres CSV for change analysis")
    p.add_argument("--period", type=int, default=5)
    p.add_argument("--exclude-years", help="comma-separated years to drop")
    p.add_argument("--year", type=int, default=2015)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (IrrsegError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
