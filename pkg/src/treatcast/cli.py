"""Command-line interface: simulate cohorts, train forecasters, evaluate
checkpoints, and run sweeps, driven by a sectioned YAML config.

Exit codes: 0 success, 2 usage or configuration error, 3 missing or
malformed files, 4 training diverged numerically.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import cdeflow as cf
from . import datastore as ds
from . import evalx as ev
from . import trainer as tr

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config file handling

_DATASET_KEYS = {f.name for f in dataclasses.fields(ds.DatasetConfig)}
_MODEL_KEYS = {f.name for f in dataclasses.fields(cf.ModelConfig)} - {
    "lookback", "horizon", "n_static", "with_intensity_head",
}
_TRAINING_KEYS = {f.name for f in dataclasses.fields(tr.TrainConfig)}
_SWEEP_KEYS = {"axis", "values", "variants", "n_seeds"}
_SECTIONS = {
    "dataset": _DATASET_KEYS,
    "model": _MODEL_KEYS,
    "training": _TRAINING_KEYS,
    "sweep": _SWEEP_KEYS,
}


def load_config(path) -> dict:
    """Parse and validate the sectioned YAML config; {} when no path given."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_IO, f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise CliError(EXIT_USAGE, f"config is not valid YAML: {exc}")
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise CliError(EXIT_USAGE, "config must be a mapping of sections")
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise CliError(EXIT_USAGE,
                           f"unknown config section {section!r}; "
                           f"expected one of {sorted(_SECTIONS)}")
        if body is None:
            raw[section] = {}
            continue
        if not isinstance(body, dict):
            raise CliError(EXIT_USAGE, f"config section {section!r} must be a mapping")
        unknown = set(body) - _SECTIONS[section]
        if unknown:
            raise CliError(EXIT_USAGE,
                           f"unknown key {sorted(unknown)[0]!r} in config "
                           f"section {section!r}")
    return raw


def _build(factory, section: str, body: dict, **overrides):
    merged = {**body, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return factory(**merged)
    except TypeError as exc:
        raise CliError(EXIT_USAGE, f"config section {section!r}: {exc}")
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"config section {section!r}: {exc}")


def dataset_config(cfg: dict, seed=None) -> ds.DatasetConfig:
    return _build(ds.DatasetConfig, "dataset", cfg.get("dataset", {}), seed=seed)


def model_config(cfg: dict) -> cf.ModelConfig:
    return _build(cf.ModelConfig, "model", cfg.get("model", {}))


def train_config(cfg: dict, variant=None, seed=None) -> tr.TrainConfig:
    return _build(tr.TrainConfig, "training", cfg.get("training", {}),
                  variant=variant, seed=seed)


def sweep_spec(cfg: dict, axis=None) -> ev.SweepSpec:
    body = dict(cfg.get("sweep", {}))
    if axis is not None:
        body["axis"] = axis
    if "axis" not in body:
        raise CliError(EXIT_USAGE, "sweep needs an axis (config sweep.axis or --axis)")
    if "values" in body:
        body["values"] = tuple(body["values"])
    if "variants" in body:
        body["variants"] = tuple(body["variants"])
    dcfg = dataset_config(cfg)
    tcfg = train_config(cfg)
    mcfg = model_config(cfg)
    base = ev.RunConfig(
        variant=tcfg.variant, seed=0, gamma=dcfg.gamma, scarcity=dcfg.scarcity,
        mode=dcfg.mode, alpha=tcfg.alpha, n_train=dcfg.n_train, n_val=dcfg.n_val,
        n_test=dcfg.n_test, t_days=dcfg.t_days, max_epochs=tcfg.max_epochs,
        patience=tcfg.patience, batch_size=tcfg.batch_size, lr=tcfg.lr,
        latent_dim=mcfg.latent_dim, hidden=mcfg.hidden,
    )
    if "values" not in body:
        raise CliError(EXIT_USAGE, "sweep needs values (config sweep.values)")
    return _build(ev.SweepSpec, "sweep", body, base=base)


def echo_config(out_dir: Path, dcfg: ds.DatasetConfig, mcfg: cf.ModelConfig,
                tcfg: tr.TrainConfig, spec: ev.SweepSpec | None = None) -> Path:
    """Write the fully resolved configuration; feeding the echo back through
    --config reproduces the same run."""
    payload = {
        "dataset": dataclasses.asdict(dcfg),
        "model": {k: getattr(mcfg, k) for k in sorted(_MODEL_KEYS)},
        "training": dataclasses.asdict(tcfg),
    }
    if spec is not None:
        payload["sweep"] = {
            "axis": spec.axis,
            "values": [float(v) for v in spec.values],
            "variants": list(spec.variants),
            "n_seeds": spec.n_seeds,
        }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config_echo.yaml"
    path.write_text(yaml.safe_dump(payload, sort_keys=True))
    return path


def resolve_out(args) -> Path:
    out = args.out or os.environ.get("TREATCAST_OUT") or "out"
    return Path(out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    dcfg = dataset_config(cfg, seed=args.seed)
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    out = resolve_out(args)
    data = ds.generate_dataset(dcfg)
    ds.save(data, out / "dataset")
    echo_config(out, dcfg, mcfg, tcfg)

    train_patients = data.split("train") or data.patients
    obs = np.array([p.observed.sum() for p in train_patients], dtype=float)
    arms = [p.arm for p in train_patients]
    lam = np.concatenate([p.lambda_true for p in train_patients])
    deciles = np.quantile(lam, np.arange(0.1, 0.95, 0.1))
    print(f"dataset: train={len(data.split('train'))} val={len(data.split('val'))} "
          f"test={len(data.split('test'))} days={dcfg.t_days} seed={dcfg.seed}")
    print(f"sampling: mode={dcfg.mode} gamma={dcfg.gamma} scarcity={dcfg.scarcity}")
    print(f"observations per patient: mean={obs.mean():.2f} sd={obs.std():.2f} "
          f"min={obs.min():.0f} max={obs.max():.0f}")
    print(f"treatment arms: sequential={arms.count('sequential')} "
          f"concurrent={arms.count('concurrent')}")
    print("intensity deciles: " + " ".join(f"{q:.3f}" for q in deciles))
    print(f"saved to {out / 'dataset'}")
    return 0


def _load_dataset(out: Path) -> ds.Dataset:
    path = out / "dataset"
    if not path.exists():
        raise CliError(EXIT_IO, f"no dataset at {path}; run `treatcast simulate` first")
    return ds.load(path)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = train_config(cfg, variant=args.variant, seed=args.seed)
    mcfg = model_config(cfg)
    out = resolve_out(args)
    data = _load_dataset(out)
    echo_config(out, data.config, mcfg, tcfg)
    try:
        trained = tr.train(data, mcfg, tcfg)
    except tr.TrainError as exc:
        raise CliError(EXIT_DIVERGED, f"training failed: {exc}")
    ckpt = out / "models" / tcfg.variant
    tr.save_trained(trained, ckpt)
    print(f"variant: {tcfg.variant}")
    print(f"epochs: ran {trained.stopped_epoch}, best at {trained.best_epoch} "
          f"(loss {trained.best_loss:.6f})")
    print(f"wall time: {trained.wall_time:.1f}s")
    print(f"checkpoint: {ckpt}.npz")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    tcfg = train_config(cfg, variant=args.variant)
    out = resolve_out(args)
    data = _load_dataset(out)
    ckpt = out / "models" / tcfg.variant
    if not Path(f"{ckpt}.npz").exists():
        raise CliError(EXIT_IO, f"no checkpoint at {ckpt}.npz; "
                                f"run `treatcast train --variant {tcfg.variant}` first")
    trained = tr.load_trained(ckpt)
    scores = ev.evaluate(trained, data)
    payload = {"variant": tcfg.variant, **scores}
    path = out / f"metrics_{tcfg.variant}.json"
    path.write_text(json.dumps(payload, indent=2))
    print(json.dumps(payload, indent=2))
    return 0


def _format_table(spec: ev.SweepSpec, table: list) -> str:
    lines = [f"axis: {spec.axis}"]
    for row in table:
        cells = [f"{row['value']:>6g}"]
        for variant in spec.variants:
            mean = row[f"{variant}_rmse_mean"]
            se = row[f"{variant}_rmse_se"]
            n = row[f"{variant}_n"]
            cells.append(f"{variant}: {mean:.3f} +/- {se:.3f} (n={n})")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    spec = sweep_spec(cfg, axis=args.axis)
    out = resolve_out(args)
    threads = args.threads or int(os.environ.get("TREATCAST_THREADS", "1"))
    sweep_dir = out / f"sweep_{spec.axis}"
    total = len(spec.jobs())
    done = {"n": 0}

    def progress(fp, res):
        done["n"] += 1
        tag = "FAILED" if res.failed else f"rmse={res.rmse_overall:.3f}"
        print(f"[{done['n']}] {res.variant} seed={res.seed} {tag} "
              f"({res.wall_time:.0f}s)", flush=True)

    print(f"sweep {spec.axis}: {total} runs, cache {out / 'runs'}", flush=True)
    result = ev.run_sweep(spec, sweep_dir, threads=threads, progress=progress,
                          cache_dir=out / "runs")
    echo_config(out, dataset_config(cfg), model_config(cfg), train_config(cfg), spec)
    print(_format_table(spec, result["table"]))
    print(f"tables: {sweep_dir / f'plot_{spec.axis}.csv'}, {sweep_dir / 'results.csv'}")
    if args.svg:
        svg = sweep_dir / f"plot_{spec.axis}.svg"
        ev.write_sweep_svg(result["table"], spec, svg)
        print(f"figure: {svg}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treatcast",
        description="Simulate tumor-growth cohorts under informative sampling "
                    "and train continuous-time treatment-outcome forecasters.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="YAML config file")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (default $TREATCAST_OUT or ./out)")

    p_sim = sub.add_parser("simulate", help="generate and save a dataset")
    common(p_sim)
    p_sim.add_argument("--seed", type=int, help="override dataset seed")
    p_sim.set_defaults(func=cmd_simulate)

    p_train = sub.add_parser("train", help="train one variant on a saved dataset")
    common(p_train)
    p_train.add_argument("--seed", type=int, help="override training seed")
    p_train.add_argument("--variant", choices=tr.VARIANTS, help="model variant")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a trained checkpoint")
    common(p_eval)
    p_eval.add_argument("--variant", choices=tr.VARIANTS, help="model variant")
    p_eval.set_defaults(func=cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="run a one-axis experiment sweep")
    common(p_sweep)
    p_sweep.add_argument("--axis", choices=ev.AXES, help="sweep axis")
    p_sweep.add_argument("--svg", action="store_true", help="also write an SVG plot")
    p_sweep.add_argument("--threads", type=int,
                         help="parallel workers (default $TREATCAST_THREADS or 1)")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ds.DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (cf.CdeError, ev.EvalError, tr.TrainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
