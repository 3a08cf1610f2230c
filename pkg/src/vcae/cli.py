"""Command-line entry point.

Exit codes: 0 success, 1 run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, ModelConfig

log = logging.getLogger("vcae")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, config: bool = True):
    if config:
        p.add_argument("--config", help="shipped config name or path to a JSON config")
    p.add_argument("--seed", type=int, help="override the seed list with a single seed")
    p.add_argument("--out", default="runs", help="output root (default: runs)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--desk", dest="desk", action="store_true", default=None, help="use the desk preset")
    g.add_argument("--full", dest="desk", action="store_false", help="use the full recipe")
    p.add_argument("--device", default="cpu", help="compute device (only cpu is supported)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("train", help="run an experiment config (training, flows, evaluation, plots)")
    _common(p)
    p.add_argument("--variant", action="append", help="restrict to these variants (repeatable)")

    p = sub.add_parser("train-flows", help="fit a flow chain to a trained run's latents")
    _common(p, config=False)
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--preset", default="maf_desk")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--learning-rate", type=float, default=1e-3)

    p = sub.add_parser("sample", help="write a PNG grid of generated samples")
    _common(p, config=False)
    p.add_argument("--run", required=True)
    p.add_argument("-n", type=int, default=100)

    p = sub.add_parser("evaluate", help="reconstruction error and latent variance of a run")
    _common(p, config=False)
    p.add_argument("--run", required=True)

    p = sub.add_parser("fid", help="Fréchet distance between test data and samples")
    _common(p, config=False)
    p.add_argument("--run", required=True)
    p.add_argument("--extractor", choices=["raw_pixels", "classifier"], default="classifier")
    p.add_argument("-n", type=int, default=2000)

    p = sub.add_parser("disentangle-metric", help="fixed-factor disentanglement score of a run")
    _common(p, config=False)
    p.add_argument("--run", required=True)

    p = sub.add_parser("verify-prop1", help="Monte Carlo check of the noise/Jacobian expansion")
    _common(p, config=False)
    p.add_argument("--preset", choices=["linear", "mlp", "graph"], default="linear")
    p.add_argument("--mc-samples", type=int, default=100_000)

    p = sub.add_parser("capacity", help="information-rate bound of the noisy latent channel")
    p.add_argument("--z-dim", type=int, required=True)
    p.add_argument("--noise-var", type=float, required=True)

    p = sub.add_parser("datasets", help="dataset utilities")
    dsub = p.add_subparsers(dest="action", metavar="action")
    pp = dsub.add_parser("prepare", help="verify, generate or preprocess a dataset")
    pp.add_argument("name", choices=["mnist", "factors", "celeba"])
    pp.add_argument("--src", help="source directory (celeba)")
    pp.add_argument("--dst", help="output path (factors archive or celeba PNG tree)")
    pp.add_argument("--root", help="data root (default: $VCAE_DATA_ROOT)")

    p = sub.add_parser("report", help="aggregate run metrics into comparison tables")
    p.add_argument("--out", default="runs")
    return parser


# --------------------------------------------------------------------------
# run loading


def _load_run(run: str):
    from .io import load_checkpoint
    from .models import build_pair

    run_dir = Path(run)
    ck = load_checkpoint(run_dir / "checkpoint.npz")
    cfg = ModelConfig.from_dict(ck.config)
    pair = ck.load_into("pair", build_pair(cfg))
    pair.eval()
    return run_dir, ck, cfg, pair


def _run_data(ck):
    from .harness import load_data

    return load_data(ck.extra["experiment"], ck.extra.get("data", {}))


def _flow(ck, cfg, run_dir: Path):
    from .flows import FLOW_PRESETS, build_flow
    from .io import load_checkpoint

    path = run_dir / "flow.npz"
    if path.exists():
        fck = load_checkpoint(path)
        chain = build_flow(fck.extra["preset"], cfg.z_dim)
        return fck.load_into("flow", chain)
    if "flow" in ck.states and ck.extra.get("flows"):
        preset = ck.extra["flows"].get("preset", "maf_desk")
        if preset in FLOW_PRESETS:
            return ck.load_into("flow", build_flow(preset, cfg.z_dim))
    return None


# --------------------------------------------------------------------------
# commands


def cmd_train(a) -> int:
    from .harness import load_specs, run_experiment

    if not a.config:
        raise UsageError("train needs --config")
    specs = load_specs(a.config, a.out, a.desk, [a.seed] if a.seed is not None else None, a.variant)
    for spec in specs:
        for d in run_experiment(spec):
            print(d)
    return 0


def cmd_train_flows(a) -> int:
    from .flows import build_flow, encoder_latent_sampler, train_flows
    from .io import save_checkpoint

    run_dir, ck, cfg, pair = _load_run(a.run)
    tr, _ = _run_data(ck)
    if cfg.train_subset:
        tr = tr.subset(cfg.train_subset, ck.extra.get("data", {}).get("subset_seed", 0))
    seed = cfg.seed if a.seed is None else a.seed
    chain = build_flow(a.preset, cfg.z_dim, seed=seed)
    losses = train_flows(chain, encoder_latent_sampler(pair, tr.data, cfg.noise_variance), a.epochs,
                         a.learning_rate, seed=seed, log=lambda e, v: log.info("epoch %d nll %.4f", e, v))
    save_checkpoint(run_dir / "flow.npz", cfg.to_dict(), {"flow": chain}, None,
                    {"preset": a.preset, "losses": losses})
    print(f"final nll {losses[-1]:.4f}" if losses else "no epochs run")
    return 0


def cmd_sample(a) -> int:
    from .evaluation import save_grid
    from .flows import sample_generative

    run_dir, ck, cfg, pair = _load_run(a.run)
    chain = _flow(ck, cfg, run_dir)
    gen = torch.Generator().manual_seed(cfg.seed if a.seed is None else a.seed)
    x = sample_generative(pair, chain, a.n, gen)
    if len(pair.input_shape) != 3:
        path = run_dir / "samples.json"
        path.write_text(json.dumps(x.tolist()))
    else:
        path = save_grid(x, run_dir / "samples.png", 10)
    print(path)
    return 0


def cmd_evaluate(a) -> int:
    from .training import evaluate

    run_dir, ck, cfg, pair = _load_run(a.run)
    _, te = _run_data(ck)
    if te is None:
        raise UsageError("this run has no test split; use disentangle-metric")
    print(json.dumps(evaluate(pair, te.data, cfg, seed=cfg.seed + 1), indent=2))
    return 0


def cmd_fid(a) -> int:
    from .evaluation import classifier_features, fid_score, raw_pixels, train_classifier
    from .flows import sample_generative

    run_dir, ck, cfg, pair = _load_run(a.run)
    tr, te = _run_data(ck)
    if te is None:
        raise UsageError("this run has no test split")
    if a.extractor == "raw_pixels":
        ext = raw_pixels(pair.input_shape)
    else:
        if tr.labels is None or len(pair.input_shape) != 3:
            raise UsageError("the classifier extractor needs labelled image data")
        ext = classifier_features(train_classifier(tr.data, tr.labels, seed=0))
    gen = torch.Generator().manual_seed(cfg.seed if a.seed is None else a.seed)
    n = min(a.n, len(te))
    fake = sample_generative(pair, _flow(ck, cfg, run_dir), n, gen)
    print(f"fid {fid_score(te.data[:n], fake, ext):.4f}")
    return 0


def cmd_disentangle(a) -> int:
    from .disentangle import disentanglement_score

    run_dir, ck, cfg, pair = _load_run(a.run)
    ds, _ = _run_data(ck)
    if not hasattr(ds, "factor_sizes"):
        raise UsageError("run was not trained on a factor dataset")
    score = disentanglement_score(pair, ds, seed=cfg.seed if a.seed is None else a.seed)
    print(f"disentanglement {score:.4f}")
    return 0


def cmd_prop1(a) -> int:
    from .theory import plot_prop1, prop1_check, prop1_preset, residual_slope, write_prop1_csv

    pair, x = prop1_preset(a.preset, seed=a.seed or 0)
    reps = prop1_check(x, pair, mc_samples=a.mc_samples, seed=a.seed or 0)
    print(f"{'sigma':>8} {'mc':>12} {'expansion':>12} {'rel.resid':>10} {'cv.resid':>11}")
    for r in reps:
        print(f"{r.sigma:8.4f} {r.mc_estimate:12.6g} {r.expansion:12.6g} {r.relative_residual:10.2e} "
              f"{r.residual_cv:11.3e}")
    print(f"log-log slope of the control-variate residual: {residual_slope(reps):.2f}")
    out = Path(a.out) / "prop1"
    out.mkdir(parents=True, exist_ok=True)
    write_prop1_csv(reps, out / f"{a.preset}.csv")
    plot_prop1(reps, out / f"{a.preset}.png")
    return 0


def cmd_capacity(a) -> int:
    from .theory import capacity_bound

    print(f"{capacity_bound(a.z_dim, a.noise_var):.3f} bits")
    return 0


def cmd_datasets(a) -> int:
    from . import data as vdata

    if a.action != "prepare":
        raise UsageError("usage: vcae datasets prepare {mnist,factors,celeba}")
    if a.name == "mnist":
        ok = vdata.verify_mnist(a.root)
        for k, v in ok.items():
            print(f"{k}: {'ok' if v else 'CHECKSUM MISMATCH'}")
        return 0 if all(ok.values()) else 1
    if a.name == "factors":
        dst = Path(a.dst or vdata.data_root(a.root) / "factors32.npz")
        ds = vdata.generate_factor_dataset()
        ds.save(dst)
        print(f"{dst} ({len(ds)} images)")
        return 0
    if not a.src:
        raise UsageError("celeba needs --src")
    dst = Path(a.dst or vdata.data_root(a.root) / "celeba64")
    vdata.preprocess_celeba(a.src, dst, load=False)
    print(dst)
    return 0


def cmd_report(a) -> int:
    from .harness import report

    sys.stdout.write(report(a.out))
    return 0


COMMANDS = {
    "train": cmd_train, "train-flows": cmd_train_flows, "sample": cmd_sample, "evaluate": cmd_evaluate,
    "fid": cmd_fid, "disentangle-metric": cmd_disentangle, "verify-prop1": cmd_prop1,
    "capacity": cmd_capacity, "datasets": cmd_datasets, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if a.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(a, "device", "cpu") != "cpu":
        print(f"error: unsupported device {a.device!r} (cpu only)", file=sys.stderr)
        return 2
    try:
        return COMMANDS[a.command](a)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
