"""Model bundles on disk, the synthetic toy generator, and model-level quantization."""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .diagnostics import DiagnosticsReport, dumps_json, layer_record
from .pipeline import LayerCalibration, QuantConfig, QuantizedLayer, quantize_layer
from .quant import QuantSpec, from_parts
from .reconstruct import Adapters, FixedRank
from .smooth import SmoothingPlan
from .tensor import ShapeError, read_tensor, write_tensor

log = logging.getLogger(__name__)

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")
QUANTIZED_MANIFEST = "quantized_manifest.json"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class LayerEntry:
    name: str
    w: np.ndarray


@dataclass
class ModelBundle:
    name: str
    layers: list[LayerEntry] = field(default_factory=list)
    defaults: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for entry in self.layers:
            if entry.name in seen:
                raise ManifestError(f"duplicate layer name {entry.name!r}")
            if not _NAME_RE.match(entry.name):
                raise ManifestError(f"layer name {entry.name!r} must match {_NAME_RE.pattern}")
            seen.add(entry.name)

    def __len__(self) -> int:
        return len(self.layers)


@dataclass
class ModelResult:
    layers: list[QuantizedLayer]
    report: DiagnosticsReport
    failures: dict[str, str] = field(default_factory=dict)


# -- toy generator -----------------------------------------------------------

def gen_toy_model(layers: int = 4, out_dim: int = 64, in_dim: int = 64, tokens: int = 4096,
                  outlier_channels: int = 3, outlier_gain: float = 100.0, seed: int = 0,
                  ) -> tuple[ModelBundle, dict[str, LayerCalibration]]:
    """Gaussian layers whose calibration inputs carry a few heavy channels.

    Each layer draws its own outlier channels; ``outlier_gain`` multiplies
    their activations. Layer inputs are independent (no chaining).
    """
    if layers < 0 or out_dim < 1 or in_dim < 1 or tokens < 1:
        raise ValueError("layer count must be >= 0 and all dimensions positive")
    if not 0 <= outlier_channels <= in_dim:
        raise ValueError(f"outlier_channels must lie in [0, {in_dim}]")
    if not outlier_gain > 0:
        raise ValueError("outlier_gain must be positive")
    entries, calib = [], {}
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(layers)):
        rng = np.random.default_rng(child)
        w = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
        x = rng.standard_normal((in_dim, tokens))
        heavy = rng.choice(in_dim, size=outlier_channels, replace=False)
        x[heavy] *= outlier_gain
        name = f"layer{i}"
        entries.append(LayerEntry(name, w))
        calib[name] = LayerCalibration(x)
    return ModelBundle("toy", entries), calib


# -- manifests ---------------------------------------------------------------

def load_bundle(manifest_path: str | os.PathLike) -> tuple[ModelBundle, dict[str, LayerCalibration]]:
    """Read a manifest and every weight/calibration file it names (relative to the manifest)."""
    path = Path(manifest_path)
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
    if not isinstance(meta, dict) or not isinstance(meta.get("layers"), list):
        raise ManifestError(f"{path}: manifest needs a 'layers' list")
    root = path.parent
    entries, calib = [], {}
    for i, spec in enumerate(meta["layers"]):
        try:
            name, wfile, xfile = spec["name"], spec["weight"], spec["calib"]
            out, inp = int(spec["out"]), int(spec["in"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: layer {i} is missing or has a bad field ({exc})") from exc
        w = read_tensor(root / wfile)
        x = read_tensor(root / xfile)
        if w.shape != (out, inp):
            raise ManifestError(f"layer {name!r}: weight is {w.shape[0]}x{w.shape[1]}, manifest says {out}x{inp}")
        if x.shape[0] != inp:
            raise ManifestError(f"layer {name!r}: calibration has {x.shape[0]} channels, expected {inp}")
        entries.append(LayerEntry(name, w))
        calib[name] = LayerCalibration(x)
    defaults = meta.get("defaults", {})
    if not isinstance(defaults, dict):
        raise ManifestError(f"{path}: 'defaults' must be an object")
    return ModelBundle(str(meta.get("name", path.stem)), entries, defaults), calib


def save_bundle(outdir: str | os.PathLike, bundle: ModelBundle,
                calib: Mapping[str, LayerCalibration]) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    layers = []
    for entry in bundle.layers:
        wfile, xfile = f"{entry.name}.w.tnsr", f"{entry.name}.x.tnsr"
        write_tensor(out / wfile, entry.w)
        write_tensor(out / xfile, calib[entry.name].x)
        layers.append({"name": entry.name, "weight": wfile, "calib": xfile,
                       "out": entry.w.shape[0], "in": entry.w.shape[1]})
    meta: dict[str, Any] = {"name": bundle.name, "layers": layers}
    if bundle.defaults:
        meta["defaults"] = bundle.defaults
    manifest = out / "manifest.json"
    manifest.write_text(dumps_json(meta) + "\n", encoding="utf-8")
    return manifest


# -- orchestration -----------------------------------------------------------

def config_dict(cfg: QuantConfig) -> dict[str, Any]:
    if isinstance(cfg.rank, FixedRank):
        rank: dict[str, Any] = {"kind": "fixed", "r": cfg.rank.r}
    else:
        rank = {"kind": "alpha", "alpha": cfg.rank.alpha, "r_max": cfg.rank.r_max}
    return {
        "method": cfg.method,
        "bits_w": cfg.weight_bits,
        "bits_a": cfg.act_bits,
        "rank_policy": rank,
        "f": cfg.f,
        "ridge": "auto" if cfg.ridge is None else cfg.ridge,
        "seed": cfg.seed,
    }


def _run_layer(entry: LayerEntry, calib: LayerCalibration, cfg: QuantConfig):
    layer = quantize_layer(entry.w, calib, cfg, entry.name)
    record = layer_record(entry.name, entry.w, calib.x, layer, cfg.act_spec)
    return layer, record


def quantize_model(bundle: ModelBundle, calib: Mapping[str, LayerCalibration], cfg: QuantConfig,
                   jobs: int | None = None) -> ModelResult:
    """Quantize every layer independently; failures are collected per layer, not raised."""
    jobs = jobs or os.cpu_count() or 1
    outcomes: dict[str, Any] = {}

    def task(entry: LayerEntry):
        if entry.name not in calib:
            raise ManifestError(f"no calibration data for layer {entry.name!r}")
        return _run_layer(entry, calib[entry.name], cfg)

    if jobs == 1 or len(bundle.layers) <= 1:
        for entry in bundle.layers:
            try:
                outcomes[entry.name] = task(entry)
            except Exception as exc:  # noqa: BLE001 - reported per layer
                outcomes[entry.name] = exc
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {entry.name: pool.submit(task, entry) for entry in bundle.layers}
            for name, fut in futures.items():
                exc = fut.exception()
                outcomes[name] = exc if exc is not None else fut.result()

    layers, records, failures = [], [], {}
    for entry in bundle.layers:
        got = outcomes[entry.name]
        if isinstance(got, Exception):
            log.error("layer %s failed: %s", entry.name, got)
            failures[entry.name] = f"{type(got).__name__}: {got}"
            continue
        layers.append(got[0])
        records.append(got[1])
    report = DiagnosticsReport(config={"model": bundle.name, **config_dict(cfg)}, records=records)
    return ModelResult(layers, report, failures)


# -- quantized bundle I/O ----------------------------------------------------

def _row(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(1, -1)


def save_quantized(outdir: str | os.PathLike, result: ModelResult, cfg: QuantConfig) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in result.layers:
        files = {}
        for part, data in (
            ("wq", layer.wq.q),
            ("scales", _row(layer.wq.scales)),
            ("la", layer.adapters.la),
            ("lb", layer.adapters.lb),
            ("m", _row(layer.plan.m)),
        ):
            fname = f"{layer.name}.{part}.tnsr"
            write_tensor(out / fname, data)
            files[part] = fname
        entries.append({
            "name": layer.name,
            "method": layer.method,
            "out": layer.shape[0],
            "in": layer.shape[1],
            "rank": layer.rank,
            "ridge": layer.ridge,
            "outlier_idx": [int(i) for i in layer.plan.outlier_idx],
            "files": files,
        })
    meta = {"config": config_dict(cfg), "layers": entries, "failed": sorted(result.failures)}
    path = out / QUANTIZED_MANIFEST
    path.write_text(dumps_json(meta) + "\n", encoding="utf-8")
    return path


def load_quantized(bundle_dir: str | os.PathLike) -> tuple[list[QuantizedLayer], dict[str, Any]]:
    root = Path(bundle_dir)
    try:
        meta = json.loads((root / QUANTIZED_MANIFEST).read_text(encoding="utf-8"))
        cfg = meta["config"]
        spec = QuantSpec(int(cfg["bits_w"]), "per_row")
        layers = []
        for e in meta["layers"]:
            files = e["files"]
            wq = from_parts(read_tensor(root / files["wq"]), read_tensor(root / files["scales"])[0], spec)
            if wq.shape != (e["out"], e["in"]):
                raise ShapeError(f"layer {e['name']!r}: stored weight is {wq.shape}, manifest says "
                                 f"{e['out']}x{e['in']}")
            m = read_tensor(root / files["m"])[0]
            plan = SmoothingPlan(m, np.asarray(e["outlier_idx"], dtype=np.int64), len(e["outlier_idx"]))
            adapters = Adapters(read_tensor(root / files["la"]), read_tensor(root / files["lb"]))
            layers.append(QuantizedLayer(e["method"], wq, plan, adapters, ridge=float(e["ridge"]),
                                         name=e["name"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{root}: malformed quantized bundle ({exc})") from exc
    return layers, cfg

