"""Declarative experiments: config loading, run execution, registry and reports.

An experiment config is a JSON file::

    {
      "experiment": "mog_toy",
      "data": {...},                      # dataset options for the experiment id
      "base": {...ModelConfig fields...},
      "variants": {"VCAE": {...overrides...}, ...},
      "seeds": [0, 1, 2],
      "flows": {"preset": "maf_desk", "epochs": 10},   # optional second stage
      "plots": true
    }

Shipped configs live in ``vcae/configs``; ``<name>_desk.json`` is the desk
preset of ``<name>.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import statistics
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from filelock import FileLock

from . import data as vdata
from .config import ConfigError, ModelConfig, load_json, merge
from .disentangle import chance_level, disentanglement_score, train_tc_model
from .evaluation import emit_plots, encode_all, latent_stats
from .flows import build_flow, encoder_latent_sampler, sample_generative, train_flows
from .io import append_metrics, read_metrics, save_checkpoint
from .training import MetricsRecord, TrainingDiverged, train

log = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"
EXPERIMENTS = ("mog_toy", "mnist2d_toy", "reduced_mnist", "mnist_full", "celeba", "disentangle")


class RunFailed(RuntimeError):
    def __init__(self, message: str, run_dir: Path):
        super().__init__(message)
        self.run_dir = run_dir


@dataclass
class ExperimentSpec:
    experiment: str
    variant: str
    overrides: dict[str, Any]
    seeds: list[int]
    out_dir: Path
    data: dict[str, Any] = field(default_factory=dict)
    flows: dict[str, Any] | None = None
    plots: bool = True

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        self.out_dir = Path(self.out_dir)

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig.from_dict(merge(self.overrides, {"seed": seed}))


def available_configs() -> list[str]:
    return sorted(p.stem for p in CONFIG_DIR.glob("*.json"))


def resolve_config(name_or_path: str, desk: bool | None = None) -> Path:
    """A JSON path, or a shipped config name.

    ``desk`` True/False selects the ``_desk`` preset or the full recipe of a
    shipped name; None takes the name as given.
    """
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return p
    stem = p.stem.removesuffix("_desk")
    if desk or (desk is None and p.stem.endswith("_desk")):
        stem += "_desk"
    cand = CONFIG_DIR / f"{stem}.json"
    if not cand.exists():
        raise ConfigError(f"no config {name_or_path!r}; shipped configs: {available_configs()}")
    return cand


def load_specs(name_or_path: str, out_dir: str | Path, desk: bool | None = None,
               seeds: list[int] | None = None, variants: list[str] | None = None) -> list[ExperimentSpec]:
    raw = load_json(resolve_config(name_or_path, desk))
    unknown = set(raw) - {"experiment", "description", "data", "base", "variants", "seeds", "flows",
                          "plots"}
    if unknown:
        raise ConfigError(f"unknown experiment config keys {sorted(unknown)}")
    missing = set(variants or ()) - set(raw["variants"])
    if missing:
        raise ConfigError(f"unknown variants {sorted(missing)}; config has {sorted(raw['variants'])}")
    chosen = raw["variants"] if variants is None else {v: raw["variants"][v] for v in variants}
    return [ExperimentSpec(raw["experiment"], name, merge(raw.get("base", {}), ov),
                           list(seeds if seeds is not None else raw.get("seeds", [0])),
                           Path(out_dir), raw.get("data", {}), raw.get("flows"), raw.get("plots", True))
            for name, ov in chosen.items()]


def code_hash() -> str:
    """sha256 over the package sources (sorted by path)."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# data resolution


def load_data(experiment: str, opts: dict, seed: int = 0):
    """(train, test) for an experiment. Factor experiments return (FactorDataset, None)."""
    opts = dict(opts)
    root = opts.get("root")
    if experiment == "mog_toy":
        tr, te = vdata.mog_dataset(opts.get("n_train", 5000), opts.get("n_test", 2000),
                                   opts.get("dim", 100), opts.get("seed", 0), opts.get("embed_seed", 1234))
    elif experiment in ("mnist2d_toy", "mnist_full"):
        tr, te = vdata.load_mnist(root, "train"), vdata.load_mnist(root, "test")
    elif experiment == "reduced_mnist":
        tr = vdata.reduced_mnist(root, opts.get("subset_seed", 0), opts.get("per_class", 60))
        te = vdata.load_mnist(root, "test")
    elif experiment == "celeba":
        full = vdata.load_image_folder(vdata.data_root(root) / opts.get("folder", "celeba64"))
        n_test = int(len(full) * opts.get("test_fraction", 0.1))
        idx = np.arange(len(full))
        tr = vdata.DatasetHandle("celeba", "train", full.data[: len(full) - n_test], None, idx[:-n_test])
        te = vdata.DatasetHandle("celeba", "test", full.data[len(full) - n_test:], None, idx[-n_test:])
    elif experiment == "disentangle":
        if "archive" in opts:
            return vdata.FactorDataset.load(vdata.data_root(root) / opts["archive"]), None
        if opts.get("shapes3d"):
            return vdata.load_3dshapes(vdata.data_root(root) / opts["shapes3d"]), None
        return vdata.generate_factor_dataset(opts.get("factors"), image_size=opts.get("image_size", 32)), None
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")
    if opts.get("test_subset"):
        te = te.subset(opts["test_subset"], opts.get("test_subset_seed", 0))
    return tr, te


# --------------------------------------------------------------------------
# running


def run_dir_for(spec: ExperimentSpec, seed: int) -> Path:
    return spec.out_dir / spec.experiment / spec.variant / f"seed{seed}"


def _register(out_dir: Path, entry: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(out_dir / "registry.lock")):
        with open(out_dir / "registry.jsonl", "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _write_manifest(run_dir: Path, manifest: dict):
    tmp = run_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(run_dir / "manifest.json")


def _run_one(spec: ExperimentSpec, seed: int, run_dir: Path, run_id: str, cfg: ModelConfig,
             manifest: dict) -> list[MetricsRecord]:
    rows: list[MetricsRecord] = []
    tr, te = load_data(spec.experiment, spec.data, seed)
    modules = {}
    if spec.experiment == "disentangle":
        ds = tr
        images = ds.as_tensor()
        manifest["stage"] = "train"
        d = spec.data.get("discriminator", {})
        tc = train_tc_model(cfg, images, run_id=run_id, log_every=spec.data.get("log_every", 50),
                            disc_lr=d.get("learning_rate", 1e-4), disc_hidden=d.get("hidden", 1000),
                            disc_layers=d.get("layers", 6))
        rows += tc.history
        pair = tc.pair
        modules = {"pair": pair, "disc": tc.disc}
        manifest["stage"] = "evaluate"
        score = disentanglement_score(pair, ds, seed=seed, **spec.data.get("metric", {}))
        epoch = max((r.epoch for r in tc.history if r.metric.startswith("batch_")), default=0) + 1
        rows.append(MetricsRecord(run_id, epoch, "train", "disentanglement", score))
        rows.append(MetricsRecord(run_id, epoch, "train", "chance", chance_level(ds)))
        z = encode_all(pair, images[:2000])
        final_result = tc.result
    else:
        if cfg.train_subset:
            tr = tr.subset(cfg.train_subset, spec.data.get("subset_seed", 0))
        manifest["stage"] = "train"
        result = train(cfg, tr.data, te.data, run_id=run_id, eval_every=spec.data.get("eval_every", 0))
        rows += result.history
        pair = result.pair
        modules = {"pair": pair}
        if result.flow_layers is not None:
            modules["iaf"] = result.flow_layers
        manifest["stage"] = "evaluate"
        stats = latent_stats(pair, te.data, run_dir if spec.plots else None,
                             te.labels if te.labels is not None else None)
        manifest["latent_stats"] = {k: v for k, v in stats.items() if k != "scatter"}
        z = encode_all(pair, te.data[:5000])
        final_result = result
        if spec.flows:
            manifest["stage"] = "flows"
            chain = build_flow(spec.flows.get("preset", "maf_desk"), cfg.z_dim, seed=seed)
            sampler = encoder_latent_sampler(pair, tr.data, cfg.noise_variance,
                                             spec.flows.get("batch_size", 100))
            losses = train_flows(chain, sampler, spec.flows.get("epochs", 100),
                                 spec.flows.get("learning_rate", 1e-3), seed=seed)
            for i, v in enumerate(losses):
                rows.append(MetricsRecord(run_id, i, "flow", "nll", v))
            modules["flow"] = chain
    if spec.plots:
        manifest["stage"] = "plots"
        samples = None
        if len(pair.input_shape) == 3:
            samples = sample_generative(pair, modules.get("flow"), 50, torch.Generator().manual_seed(seed))
        inputs = te.data[:10] if te is not None else None
        manifest["plots"] = [p.name for p in emit_plots(run_dir, z, None, pair, inputs, samples)]
    save_checkpoint(run_dir / "checkpoint.npz", cfg.to_dict(), modules, final_result.generator,
                    {"experiment": spec.experiment, "variant": spec.variant, "data": spec.data,
                     "flows": spec.flows})
    return rows


def run_experiment(spec: ExperimentSpec) -> list[Path]:
    """Train, (optionally) fit flows, evaluate and plot, once per seed.

    Each seed gets ``<out>/<experiment>/<variant>/seed<k>/`` holding
    ``metrics.csv``, ``checkpoint.npz``, ``manifest.json`` and plots.
    """
    dirs = []
    chash = code_hash()
    for seed in spec.seeds:
        run_dir = run_dir_for(spec, seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        run_id = f"{spec.experiment}/{spec.variant}/seed{seed}"
        cfg = spec.model_config(seed)
        manifest = {"run_id": run_id, "experiment": spec.experiment, "variant": spec.variant,
                    "seed": seed, "config": cfg.to_dict(), "data": spec.data, "flows": spec.flows,
                    "code_hash": chash, "status": "running"}
        metrics = run_dir / "metrics.csv"
        if metrics.exists():
            metrics.unlink()
        t0 = time.perf_counter()
        torch.manual_seed(seed)
        try:
            rows = _run_one(spec, seed, run_dir, run_id, cfg, manifest)
        except Exception as exc:  # record the cause, then surface it
            manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                            traceback=traceback.format_exc(), wall_time=time.perf_counter() - t0)
            if isinstance(exc, TrainingDiverged):
                append_metrics(metrics, exc.history)
            _write_manifest(run_dir, manifest)
            _register(spec.out_dir, {"run_id": run_id, "status": "failed", "dir": str(run_dir)})
            raise RunFailed(f"{run_id} failed during {manifest.get('stage', 'setup')}: {exc}", run_dir) from exc
        append_metrics(metrics, rows)
        manifest.update(status="ok", wall_time=time.perf_counter() - t0)
        manifest.pop("stage", None)
        _write_manifest(run_dir, manifest)
        _register(spec.out_dir, {"run_id": run_id, "status": "ok", "dir": str(run_dir)})
        dirs.append(run_dir)
    return dirs


# --------------------------------------------------------------------------
# reports


REPORT_COLUMNS = ("train_mse", "test_mse", "total_latent_variance")


def _final(rows: list[dict], split: str, metric: str) -> float | None:
    hits = [r for r in rows if r["split"] == split and r["metric"] == metric]
    if not hits:
        return None
    return max(hits, key=lambda r: r["epoch"])["value"]


def collect(out_dir: str | Path) -> list[dict]:
    """One row per run: experiment, variant, seed and final metrics."""
    table = []
    for m in sorted(Path(out_dir).rglob("manifest.json")):
        man = json.loads(m.read_text())
        if man.get("status") != "ok" or not (m.parent / "metrics.csv").exists():
            continue
        rows = read_metrics(m.parent / "metrics.csv")
        entry = {"experiment": man["experiment"], "model": man["variant"], "seed": man["seed"],
                 "train_mse": _final(rows, "train", "recon"), "test_mse": _final(rows, "test", "recon"),
                 "total_latent_variance": _final(rows, "test", "total_variance")}
        score = _final(rows, "train", "disentanglement")
        if score is not None:
            entry["disentanglement"] = score
        table.append(entry)
    return table


def _fmt(v) -> str:
    return "-" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))


def report(out_dir: str | Path, summary: bool = True) -> str:
    """Plain-text comparison table (per run, then per-model medians)."""
    table = collect(out_dir)
    if not table:
        return "no completed runs\n"
    cols = ["experiment", "model", "seed", *REPORT_COLUMNS]
    if any("disentanglement" in r for r in table):
        cols.append("disentanglement")
    lines = ["\t".join(cols)]
    lines += ["\t".join(_fmt(r.get(c)) for c in cols) for r in table]
    if summary:
        lines += ["", "median over seeds", "\t".join(c for c in cols if c != "seed")]
        groups: dict[tuple, list[dict]] = {}
        for r in table:
            groups.setdefault((r["experiment"], r["model"]), []).append(r)
        for (exp, model), rs in groups.items():
            vals = [exp, model]
            for c in cols[3:]:
                xs = [r[c] for r in rs if r.get(c) is not None]
                vals.append(_fmt(statistics.median(xs)) if xs else "-")
            lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["out_dir"] = str(spec.out_dir)
    return d
