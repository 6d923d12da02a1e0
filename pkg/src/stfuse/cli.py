"""``stfuse`` command line.

Each subcommand reads STFR rasters / JSON manifests, runs one library
operation and prints a JSON report holding the full effective configuration.
Option values resolve as: command-line flag, else ``--config`` file entry
(flat ``key = value`` lines, ``#`` comments), else built-in default.

Exit status: 0 success, 1 validation/format/I-O error, 2 bad invocation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from ._parallel import default_threads
from .errors import ParameterError, StfuseError
from .fuse import FuseConfig, fuse_dsm, fuse_report, resolve_sigma_h
from .metrics import completeness, metric_record, overall_accuracy, rmse, temporal_consistency
from .preprocess import (
    RULE_CLASSES,
    RuleThresholds,
    compute_ndsm,
    compute_ndvi,
    histogram_match,
    rule_classify,
    temporal_median,
)
from .raster import (
    ClassMap,
    ImageStack,
    ProbabilityStack,
    RasterGrid,
    StackManifest,
    read_raster,
    validate_stack,
    write_raster,
    write_stack,
)
from .refine import RefineConfig, argmax_classify, refine_until_converged
from .stfilter import BandwidthConfig, st_bilateral_filter
from .synth import SCENARIOS, SceneSpec, synth_generate, write_bundle


class UsageError(Exception):
    """Bad invocation (exit status 2)."""


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# name, converter, default (None = required), help
Option = tuple[str, Callable[[str], Any], Any, str]
REQUIRED = object()

COMMON: list[Option] = [
    ("threads", int, None, "worker threads (default: STFUSE_THREADS or CPU count)"),
    ("report", str, "", "also write the JSON report to this path"),
]

COMMANDS: dict[str, tuple[str, list[Option]]] = {
    "synth": ("generate a synthetic scene bundle", [
        ("out", str, REQUIRED, "output directory"),
        ("scenario", str, "custom", "preset: rrn, probability, dsm or custom"),
        ("seed", int, None, "override the scene seed"),
    ]),
    "rrn": ("spatiotemporal bilateral normalization of an image stack", [
        ("stack", str, REQUIRED, "image stack manifest"),
        ("out", str, REQUIRED, "output directory"),
        ("sigma_s", float, 3.0, "spatial bandwidth (pixels)"),
        ("sigma_i", float, 20.0, "spectral bandwidth"),
        ("sigma_t", float, 20.0, "temporal bandwidth"),
        ("radius", int, 3, "window radius (pixels)"),
    ]),
    "median": ("per-pixel temporal median of a stack", [
        ("stack", str, REQUIRED, "stack manifest"),
        ("out", str, REQUIRED, "output STFR file"),
    ]),
    "histmatch": ("match a raster's histogram to a reference, band by band", [
        ("source", str, REQUIRED, "source STFR file"),
        ("reference", str, REQUIRED, "reference STFR file"),
        ("out", str, REQUIRED, "output STFR file"),
    ]),
    "prob-refine": ("iterative refinement of class-probability maps", [
        ("probs", str, REQUIRED, "probability stack manifest"),
        ("images", str, REQUIRED, "orthophoto stack manifest"),
        ("ndsm", str, REQUIRED, "nDSM stack manifest"),
        ("out", str, REQUIRED, "output directory"),
        ("classmap", str, "", "class map for sigma_h estimation (default: argmax of epoch 0)"),
        ("sigma_s", float, 2.0, "spatial bandwidth (pixels)"),
        ("sigma_r", float, 20.0, "spectral bandwidth"),
        ("radius", int, 2, "window radius (pixels)"),
        ("threshold", float, 0.05, "relative-change convergence threshold"),
        ("max_iter", int, 50, "iteration cap"),
        ("sigma_h_floor", float, 0.25, "lower bound on per-class sigma_h (m)"),
        ("renormalize", parse_bool, False, "renormalize classes to unit sum after each step"),
    ]),
    "dsm-fuse": ("semantic-guided fusion of a DSM stack", [
        ("stack", str, REQUIRED, "DSM stack manifest"),
        ("ortho", str, REQUIRED, "reference orthophoto STFR"),
        ("classmap", str, REQUIRED, "class map STFR"),
        ("out", str, REQUIRED, "output STFR file"),
        ("class_names", str, ",".join(RULE_CLASSES), "comma-separated class vocabulary"),
        ("sigma_s", float, 2.0, "spatial bandwidth (pixels)"),
        ("sigma_r", float, 25.0, "spectral bandwidth"),
        ("radius", int, 2, "window radius (pixels)"),
        ("sigma_h_floor", float, 0.25, "lower bound on estimated sigma_h (m)"),
        ("sigma_h", str, "", "per-class overrides, e.g. 'building:3,tree:5'"),
        ("mode", str, "median", "summand: median or epoch"),
        ("truth", str, "", "truth DSM for RMSE reporting"),
    ]),
    "classify": ("NDVI / nDSM rule classification", [
        ("image", str, REQUIRED, "multi-band orthophoto STFR"),
        ("dsm", str, REQUIRED, "DSM STFR"),
        ("dtm", str, REQUIRED, "DTM STFR"),
        ("out", str, REQUIRED, "output class map STFR"),
        ("red_band", int, 2, "0-based red band index"),
        ("nir_band", int, 3, "0-based NIR band index"),
        ("ndvi_veg", float, 0.3, "NDVI vegetation threshold"),
        ("ndsm_high", float, 2.0, "nDSM elevated threshold (m)"),
    ]),
    "eval": ("evaluate a result against truth", [
        ("metric", str, REQUIRED, "accuracy, rmse, consistency or completeness"),
        ("pred", str, "", "predicted raster / class map STFR"),
        ("truth", str, "", "truth raster / class map STFR"),
        ("stack", str, "", "stack manifest (consistency)"),
        ("mask", str, "", "mask STFR, non-zero = include"),
        ("class_names", str, ",".join(RULE_CLASSES), "comma-separated class vocabulary"),
    ]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stfuse {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (help_text, options) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="flat key = value config file")
        for opt, conv, default, text in options + COMMON:
            flag = "--" + opt.replace("_", "-")
            if conv is parse_bool:
                p.add_argument(flag, type=parse_bool, nargs="?", const=True, default=None, help=text)
            else:
                shown = "required" if default is REQUIRED else default
                p.add_argument(flag, type=conv, default=None, help=f"{text} [{shown}]")
    return parser


def effective_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    options = COMMANDS[command][1] + COMMON
    file_values = read_config(args.config) if args.config else {}
    known = {o[0] for o in options}
    extra = {k: v for k, v in file_values.items() if k not in known}
    if extra and command != "synth":
        raise UsageError(f"unknown config keys for {command}: {sorted(extra)}")
    cfg: dict[str, Any] = {}
    missing = []
    for opt, conv, default, _ in options:
        value = getattr(args, opt)
        if value is None and opt in file_values:
            try:
                value = conv(file_values[opt])
            except ValueError as exc:
                raise ParameterError(f"config key {opt!r}: {exc}") from exc
        if value is None:
            if default is REQUIRED:
                missing.append("--" + opt.replace("_", "-"))
                continue
            value = default
        cfg[opt] = value
    if missing:
        raise UsageError(f"{command}: missing required option(s) {', '.join(missing)}")
    if cfg["threads"] is None:
        cfg["threads"] = default_threads()
    if command == "synth":
        cfg["scene"] = extra
    return cfg


def _names(text: str) -> tuple[str, ...]:
    return tuple(n.strip() for n in text.split(",") if n.strip())


def _load_stack(path: str) -> ImageStack:
    return validate_stack(StackManifest.load(path))


def _load_classmap(path: str, names) -> ClassMap:
    return ClassMap.from_grid(read_raster(_existing(path)), names)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return p


def _write(grid: RasterGrid, path: str) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_raster(grid, path)
    return str(path)


# --------------------------------------------------------------------------- commands


def cmd_synth(cfg):
    scenario = cfg["scenario"]
    if scenario == "custom":
        spec = SceneSpec.from_mapping(cfg["scene"])
    elif scenario in SCENARIOS:
        spec = SCENARIOS[scenario]()
        if cfg["scene"]:
            merged = {**{k: v for k, v in _spec_dict(spec).items()}, **cfg["scene"]}
            spec = SceneSpec.from_mapping(merged)
    else:
        raise UsageError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)} or custom")
    if cfg["seed"] is not None:
        spec = SceneSpec.from_mapping({**_spec_dict(spec), "seed": cfg["seed"]})
    bundle = synth_generate(spec)
    write_bundle(bundle, cfg["out"])
    return {
        "scene": _spec_dict(spec),
        "outputs": cfg["out"],
        "invariant_fraction": float(bundle.invariant_mask.mean()),
        "epochs": bundle.log["epochs"],
    }


def _spec_dict(spec: SceneSpec) -> dict:
    from dataclasses import asdict

    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def cmd_rrn(cfg):
    stack = _load_stack(cfg["stack"])
    config = BandwidthConfig(cfg["sigma_s"], cfg["sigma_i"], cfg["sigma_t"], cfg["radius"])
    out = st_bilateral_filter(stack, config, threads=cfg["threads"])
    manifest = write_stack(out, cfg["out"], "rrn", role="image")
    return {"epochs": len(out), "manifest": str(manifest)}


def cmd_median(cfg):
    stack = _load_stack(cfg["stack"])
    med = temporal_median(stack)
    return {"epochs": len(stack), "output": _write(med, cfg["out"]), "completeness": completeness(med)}


def cmd_histmatch(cfg):
    src = read_raster(_existing(cfg["source"]))
    ref = read_raster(_existing(cfg["reference"]))
    return {"output": _write(histogram_match(src, ref), cfg["out"])}


def cmd_prob_refine(cfg):
    probs = _load_stack(cfg["probs"])
    if not isinstance(probs, ProbabilityStack):
        raise StfuseError(f"{cfg['probs']} is not a probability manifest")
    images = _load_stack(cfg["images"])
    ndsm = _load_stack(cfg["ndsm"])
    if cfg["classmap"]:
        classmap = _load_classmap(cfg["classmap"], probs.class_names)
    else:
        classmap = argmax_classify(probs)[0]
    config = RefineConfig(
        sigma_s=cfg["sigma_s"],
        sigma_r=cfg["sigma_r"],
        window_radius=cfg["radius"],
        convergence_threshold=cfg["threshold"],
        max_iterations=cfg["max_iter"],
        sigma_h_floor=cfg["sigma_h_floor"],
        renormalize=cfg["renormalize"],
    )
    res = refine_until_converged(probs, images, ndsm, classmap, config, threads=cfg["threads"])
    manifest = write_stack(res.probs, cfg["out"], "refined", role="probability")
    out_dir = Path(cfg["out"])
    for eid, cm in zip(res.probs.epoch_ids, argmax_classify(res.probs)):
        write_raster(cm.to_grid(), out_dir / f"class_{eid}.stfr")
    print(f"iterations={res.iterations} converged={str(res.converged).lower()}", file=sys.stderr)
    return {
        "iterations": res.iterations,
        "converged": res.converged,
        "max_relative_change": res.history,
        "sigma_h": dict(zip(probs.class_names, res.sigma_h)),
        "manifest": str(manifest),
    }


def _parse_overrides(text: str) -> dict[str, float]:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if ":" not in item:
            raise ParameterError(f"sigma_h override {item!r} must look like class:value")
        name, value = item.split(":", 1)
        out[name.strip()] = float(value)
    return out


def cmd_dsm_fuse(cfg):
    stack = _load_stack(cfg["stack"])
    ortho = read_raster(_existing(cfg["ortho"]))
    classmap = _load_classmap(cfg["classmap"], _names(cfg["class_names"]))
    config = FuseConfig(
        sigma_s=cfg["sigma_s"],
        sigma_r=cfg["sigma_r"],
        window_radius=cfg["radius"],
        sigma_h_floor=cfg["sigma_h_floor"],
        sigma_h=_parse_overrides(cfg["sigma_h"]),
        mode=cfg["mode"],
    )
    fused = fuse_dsm(stack, ortho, classmap, config, threads=cfg["threads"])
    truth = read_raster(_existing(cfg["truth"])) if cfg["truth"] else None
    report = fuse_report(stack, fused, truth, resolve_sigma_h(stack, classmap, config))
    report["output"] = _write(fused, cfg["out"])
    return report


def cmd_classify(cfg):
    image = read_raster(_existing(cfg["image"]))
    dsm = read_raster(_existing(cfg["dsm"]))
    dtm = read_raster(_existing(cfg["dtm"]))
    for key in ("red_band", "nir_band"):
        if not 0 <= cfg[key] < image.bands:
            raise ParameterError(f"{key} {cfg[key]} out of range for {image.bands}-band image")
    ndvi = compute_ndvi(image.band(cfg["red_band"]), image.band(cfg["nir_band"]))
    ndsm = compute_ndsm(dsm, dtm)
    cm = rule_classify(ndvi, ndsm, RuleThresholds(cfg["ndvi_veg"], cfg["ndsm_high"]))
    counts = {n: int((cm.labels == i).sum()) for i, n in enumerate(cm.class_names)}
    return {"output": _write(cm.to_grid(), cfg["out"]), "class_names": list(cm.class_names), "counts": counts}


def _mask(path: str):
    if not path:
        return None
    grid = read_raster(_existing(path))
    return (grid.data[0] != 0) & grid.valid()[0]


def cmd_eval(cfg):
    metric = cfg["metric"]
    need = {"accuracy": ("pred", "truth"), "rmse": ("pred", "truth"),
            "consistency": ("stack",), "completeness": ("pred",)}
    if metric not in need:
        raise UsageError(f"unknown metric {metric!r}; choose from {sorted(need)}")
    missing = [k for k in need[metric] if not cfg[k]]
    if missing:
        raise UsageError(f"metric {metric} needs --{', --'.join(missing)}")
    mask = _mask(cfg["mask"])
    if metric == "accuracy":
        names = _names(cfg["class_names"])
        pred = _load_classmap(cfg["pred"], names)
        truth = _load_classmap(cfg["truth"], names)
        value = overall_accuracy(pred, truth)
        pixels = int((pred.valid() & truth.valid()).sum())
    elif metric == "rmse":
        pred = read_raster(_existing(cfg["pred"]))
        truth = read_raster(_existing(cfg["truth"]))
        value = rmse(pred, truth, mask)
        pixels = int((pred.valid() & truth.valid()).sum() if mask is None
                     else (pred.valid() & truth.valid() & mask).sum())
    elif metric == "consistency":
        stack = _load_stack(cfg["stack"])
        value = temporal_consistency(stack, mask)
        pixels = int(np.sum(mask)) if mask is not None else stack.width * stack.height
    else:
        pred = read_raster(_existing(cfg["pred"]))
        value = completeness(pred)
        pixels = int(pred.valid().sum())
    return metric_record(metric, value, pixels, cfg)


HANDLERS = {
    "synth": cmd_synth,
    "rrn": cmd_rrn,
    "median": cmd_median,
    "histmatch": cmd_histmatch,
    "prob-refine": cmd_prob_refine,
    "dsm-fuse": cmd_dsm_fuse,
    "classify": cmd_classify,
    "eval": cmd_eval,
}


def run(argv=None) -> int:
    """Parse ``argv``, dispatch, print the JSON report; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = effective_config(args.command, args)
        result = HANDLERS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stfuse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (StfuseError, OSError, ValueError) as exc:
        print(f"stfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    report = {"command": args.command, "config": cfg, "result": result}
    text = json.dumps(report, indent=2, sort_keys=True, default=str)
    print(text)
    if cfg.get("report"):
        Path(cfg["report"]).write_text(text + "\n", encoding="utf-8")
    return 0


def main() -> None:
    sys.exit(run())
