"""Command-line driver: data generation, both training stages, sampling, evaluation and studies.

Every command prints its resolved configuration (including the root seed) as
one JSON line before doing any work, so a run can be reproduced from its log.
Errors are reported as a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import DOMAIN_KINDS, dataset_read, dataset_write, make_grf_dataset
from .errors import ConfigError, GeoFlowError, ParameterError
from .geofae import FAE_PRESETS, GeoFaeModel, fae_config, reconstruct
from .latent_flow import FlowModel, flow_config, posterior_ensemble
from .studies import (
    evaluate,
    fae_predictor,
    flow_predictor,
    make_instances,
    nearest_sensor_predictor,
    rbf_predictor,
    sensor_scaling_study,
    step_study,
)
from .training import (
    TrainConfig,
    TRAIN_PRESETS,
    checkpoint_load,
    checkpoint_save,
    train_config,
    train_stage1,
    train_stage2,
    write_loss_csv,
)

SEED_ENV = "GFF_SEED"
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# -- parser ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag defaults (flags win)")
    p.add_argument("--seed", type=int, default=None, help=f"root seed (fallback ${SEED_ENV}, then 0)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--preset", choices=sorted(FAE_PRESETS), default="desk")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--decay-every", type=int, default=None)
    p.add_argument("--decay-factor", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--noise", type=float, default=None, help="training observation noise level")
    p.add_argument("--fractions", type=_floats, default=None, help="comma-separated sensor fractions")
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--no-plot", action="store_true")


def _eval_flags(p: argparse.ArgumentParser, flow_required: bool) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--fae", required=True)
    p.add_argument("--flow", required=flow_required, default=None)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--samples", type=int, default=8, help="ensemble size")
    p.add_argument("--out", default="out")


def build_parser() -> Parser:
    parser = Parser(prog="geoflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"geoflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="write a synthetic GRF dataset (GFFD)")
    _common(p)
    p.add_argument("--kind", choices=DOMAIN_KINDS, default="annulus")
    p.add_argument("--n", type=int, default=256, help="points per cloud")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--lengthscale", type=float, default=0.5)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--vary-geometry", action="store_true")
    p.add_argument("--out", required=True, help="output .gffd path")

    p = sub.add_parser("train-fae", help="stage 1: fit the autoencoder")
    _common(p)
    _train_flags(p)

    p = sub.add_parser("train-flow", help="stage 2: fit the latent flow with a frozen encoder")
    _common(p)
    _train_flags(p)
    p.add_argument("--fae", required=True)

    p = sub.add_parser("sample", help="posterior ensemble for one sample")
    _common(p)
    _eval_flags(p, flow_required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("eval", help="per-sample error table")
    _common(p)
    _eval_flags(p, flow_required=False)

    p = sub.add_parser("study-sensors", help="error versus quasi-uniform sensor count")
    _common(p)
    _eval_flags(p, flow_required=False)
    p.add_argument("--counts", type=_ints, default=[16, 32, 64, 128, 256])
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--predictor", choices=("fae", "flow", "rbf", "nearest"), default="fae")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("study-steps", help="error versus Euler step count")
    _common(p)
    _eval_flags(p, flow_required=True)
    p.add_argument("--steps-list", type=_ints, default=[1, 2, 5, 10, 20, 100])
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("selfcheck", help="gradient, invariance, W2 and bound checks")
    _common(p)
    p.add_argument("--suite", action="append", default=None,
                   choices=("gradient", "permutation", "discretization", "w2", "theorem"))
    return parser


# -- config resolution -----------------------------------------------------------


def _load_config(path: str | None, command: str, parser: Parser) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    sub = raw.pop(command, {}) if isinstance(raw.get(command), dict) else {}
    merged = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    merged.update(sub)
    return {k.replace("-", "_"): v for k, v in merged.items()}


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    defaults = _load_config(known.config, command, parser) if command else {}
    if defaults:
        sub = parser._subparsers._group_actions[0].choices[command]
        accepted = {a.dest for a in sub._actions}
        unknown = sorted(set(defaults) - accepted)
        if unknown:
            raise ConfigError(f"config keys not accepted by {command}: {unknown}")
        # Required flags may come from the file.
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return args


def _train_cfg(args, stage: int) -> TrainConfig:
    mapping = {
        "iters": "iterations", "batch": "batch_size", "lr": "base_lr", "warmup": "warmup_steps",
        "decay_every": "decay_every", "decay_factor": "decay_factor", "weight_decay": "weight_decay",
        "noise": "noise_level", "fractions": "fraction_set", "queries": "queries",
    }
    over = {dst: getattr(args, src) for src, dst in mapping.items() if getattr(args, src) is not None}
    # model-only presets (tiny) train on the desk schedule
    preset = args.preset if args.preset in TRAIN_PRESETS else "desk"
    return train_config(preset, stage, seed=args.seed, **over)


def _announce(args, **extra) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "config"}
    resolved.update(extra)
    print(json.dumps({"resolved_config": resolved}, sort_keys=True, default=str), flush=True)


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        raise ParameterError(f"nothing to write to {path}")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _split(args):
    ds = dataset_read(args.data)
    train, test = ds.split()
    return {"train": train, "test": test, "all": ds.samples}[getattr(args, "split", "train")]


def _load_models(args):
    fae, _, _ = checkpoint_load(args.fae)
    fae.freeze()
    flow = None
    if getattr(args, "flow", None):
        flow, _, _ = checkpoint_load(args.flow)
        if not isinstance(flow, FlowModel):
            raise ConfigError(f"{args.flow} is not a flow checkpoint")
    if not isinstance(fae, GeoFaeModel):
        raise ConfigError(f"{args.fae} is not an autoencoder checkpoint")
    return fae, flow


def _plot(args, fn, *a, **kw):
    if getattr(args, "no_plot", False):
        return None
    from . import plotting

    out = getattr(plotting, fn)(*a, **kw)
    if out is not None:
        print(f"figure: {out}")
    return out


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    _announce(args)
    ds = make_grf_dataset(args.kind, args.n, args.samples, args.seed, args.lengthscale, args.amplitude, args.vary_geometry)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_write(ds, out)
    print(f"wrote {out} ({out.stat().st_size} bytes, {len(ds)} samples)")
    return EXIT_OK


def _progress(rec):
    if rec.step % 100 == 0:
        print(f"step {rec.step} lr {rec.lr:.3e} loss {rec.loss:.6f}", flush=True)


def cmd_train_fae(args) -> int:
    cfg = _train_cfg(args, 1)
    samples = _split(args)
    state = None
    if args.resume:
        fae, state, _ = checkpoint_load(args.resume)
        if state is None:
            raise ConfigError(f"{args.resume} has no optimizer state to resume from")
    else:
        d, p = samples[0].cloud.dim, samples[0].values.shape[1]
        fae = GeoFaeModel(fae_config(args.preset, coord_dim=d, channels=p), seed=args.seed)
    _announce(args, train=cfg.to_dict(), model=fae.config.to_dict(), parameters=fae.num_parameters())
    t0 = time.perf_counter()
    fae, history, state = train_stage1(fae, samples, cfg, state=state, progress=_progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_save(out / "fae.gfck", fae, state, {"seed": args.seed})
    write_loss_csv(history, out / "fae_loss.csv")
    if history:
        _plot(args, "save_curve", out / "fae_loss.png", [r.step for r in history],
              {"loss": [r.loss for r in history]}, "step", "reconstruction loss", logy=True)
    print(f"wrote {out / 'fae.gfck'} after {state.step} steps in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_train_flow(args) -> int:
    cfg = _train_cfg(args, 2)
    samples = _split(args)
    fae, _, _ = checkpoint_load(args.fae)
    if not isinstance(fae, GeoFaeModel):
        raise ConfigError(f"{args.fae} is not an autoencoder checkpoint")
    fae.freeze()
    state = None
    if args.resume:
        flow, state, _ = checkpoint_load(args.resume)
        if state is None:
            raise ConfigError(f"{args.resume} has no optimizer state to resume from")
    else:
        flow = FlowModel(flow_config(args.preset, fae), seed=args.seed)
    _announce(args, train=cfg.to_dict(), model=flow.config.to_dict(), parameters=flow.num_parameters())
    t0 = time.perf_counter()
    flow, history, state = train_stage2(flow, fae, samples, cfg, state=state, progress=_progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_save(out / "flow.gfck", flow, state, {"seed": args.seed})
    write_loss_csv(history, out / "flow_loss.csv")
    if history:
        _plot(args, "save_curve", out / "flow_loss.png", [r.step for r in history],
              {"loss": [r.loss for r in history]}, "step", "flow matching loss", logy=True)
    print(f"wrote {out / 'flow.gfck'} after {state.step} steps in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_sample(args) -> int:
    _announce(args)
    samples = _split(args)
    if not 0 <= args.index < len(samples):
        raise ParameterError(f"--index must lie in [0, {len(samples)}), got {args.index}")
    fae, flow = _load_models(args)
    target = samples[args.index]
    inst = make_instances([target], args.fraction, args.noise, args.seed, fae.value_std)[0]
    ens = posterior_ensemble(flow, fae, inst, args.samples, steps=args.steps, seed=args.seed)
    recon = reconstruct(fae, inst)
    std = ens.std
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for j in range(inst.size):
        row = {f"x{k}": float(inst.coords[j, k]) for k in range(inst.coords.shape[1])}
        row["observed"] = int(inst.mask[j] > 0)
        for c in range(target.values.shape[1]):
            row[f"truth{c}"] = float(target.values[j, c])
            row[f"mean{c}"] = float(ens.mean[j, c])
            row[f"std{c}"] = float(std[j, c])
            row[f"fae{c}"] = float(recon[j, c])
        rows.append(row)
    _write_rows(out / "sample.csv", rows)
    print(f"wrote {out / 'sample.csv'}")
    _plot(args, "save_fields", out / "sample.png", inst.coords,
          {"truth": target.values[:, 0], "obs": inst.obs[:, 0], "mean": ens.mean[:, 0], "std": std[:, 0]},
          sensors=np.flatnonzero(inst.mask > 0))
    return EXIT_OK


def cmd_eval(args) -> int:
    _announce(args)
    samples = _split(args)
    fae, flow = _load_models(args)
    rows = evaluate(fae, flow, samples, args.fraction, args.noise, args.steps, args.samples, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "eval.csv", rows)
    key = "relative_l2" if flow is not None else "fae_relative_l2"
    print(json.dumps({"n": len(rows), "mean_" + key: float(np.mean([r[key] for r in rows]))}))
    print(f"wrote {out / 'eval.csv'}")
    return EXIT_OK


def cmd_study_sensors(args) -> int:
    _announce(args)
    samples = _split(args)
    fae, flow = _load_models(args)
    if args.predictor == "flow" and flow is None:
        raise ConfigError("--predictor flow needs --flow")
    predict = {
        "fae": lambda: fae_predictor(fae),
        "flow": lambda: flow_predictor(fae, flow, args.samples, args.steps, args.seed),
        "rbf": rbf_predictor,
        "nearest": nearest_sensor_predictor,
    }[args.predictor]()
    report = sensor_scaling_study(predict, samples, args.counts, args.seeds, args.noise, fae.value_std)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "sensors.csv", report.rows())
    print(json.dumps({"slope": report.slope}))
    print(f"wrote {out / 'sensors.csv'}")
    _plot(args, "save_curve", out / "sensors.png", report.counts, {args.predictor: report.errors},
          "sensors m", "relative L2", logx=True, logy=True)
    return EXIT_OK


def cmd_study_steps(args) -> int:
    _announce(args)
    samples = _split(args)
    fae, flow = _load_models(args)
    rows = step_study(fae, flow, samples, args.steps_list, args.fraction, args.noise, args.samples, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "steps.csv", rows)
    print(f"wrote {out / 'steps.csv'}")
    _plot(args, "save_curve", out / "steps.png", [r["steps"] for r in rows], {"ensemble mean": [r["error"] for r in rows]},
          "Euler steps", "relative L2", logx=True)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    _announce(args)
    results = run_all(args.seed, args.suite)
    failed = [c.name for c in results if not c.passed]
    print(json.dumps({"checks": len(results), "failed": failed}))
    return EXIT_FAIL if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-fae": cmd_train_fae,
    "train-flow": cmd_train_flow,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "study-sensors": cmd_study_sensors,
    "study-steps": cmd_study_steps,
    "selfcheck": cmd_selfcheck,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = parse(sys.argv[1:] if argv is None else list(argv))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("UsageError", exc, EXIT_USAGE)
    except (GeoFlowError, OSError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_ERROR)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
