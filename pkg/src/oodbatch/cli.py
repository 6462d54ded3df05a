"""Command-line front end.

    oodbatch synth  --out DIR [...]         write synthetic environments
    oodbatch run    --data DIR --train A,B --valid C --test D --out DIR [...]
    oodbatch suite  --data DIR --preset paper6 --seeds 0,42,99 --out DIR [...]
    oodbatch report RESULTS.json            re-render a suite table

Every command accepts ``--config FILE.json``: a JSON object whose keys are
option names (``batch_size`` or ``batch-size``).  Precedence: built-in
defaults < config file < explicit flags.

Exit status: 0 success, 2 usage / configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .augment import AugmentConfig
from .data import DataFormatError, SynthConfig, class_counts, generate_synthetic, load_environment, save_environment
from .experiment import (
    PRESETS,
    ExperimentPlan,
    RunError,
    SuiteResult,
    TrainConfig,
    enumerate_plans,
    render_table,
    run_config,
    run_suite,
    train_one,
)
from .nn import KINDS, OptimConfig, save_checkpoint
from .sampler import BALANCED, RANDOM_MERGED, ConfigError, SamplerConfig

log = logging.getLogger("oodbatch")

MODE_ALIASES = {"balanced": BALANCED, "random": RANDOM_MERGED, RANDOM_MERGED: RANDOM_MERGED}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# value parsers


def _csv(s: str) -> list[str]:
    items = [x.strip() for x in str(s).split(",") if x.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _floats(s) -> list[float]:
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    try:
        return [float(x) for x in _csv(s)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _ints(s) -> list[int]:
    if isinstance(s, (list, tuple)):
        return [int(x) for x in s]
    if isinstance(s, int):
        return [s]
    try:
        return [int(x) for x in _csv(s)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _names(s) -> list[str]:
    return [str(x) for x in s] if isinstance(s, (list, tuple)) else _csv(s)


def _optional_int(s):
    if s is None or str(s).lower() in ("none", ""):
        return None
    return int(s)


def _mode(s: str) -> str:
    try:
        return MODE_ALIASES[s]
    except KeyError:
        raise argparse.ArgumentTypeError(f"mode must be 'balanced' or 'random', got {s!r}") from None


def _modes(s) -> list[str]:
    return [_mode(m) for m in _names(s)]


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


# ---------------------------------------------------------------------------
# option tables: (dest, type, default, help)

SYNTH_OPTS = [
    ("envs", int, 4, "number of environments"),
    ("n", int, 1000, "records per environment"),
    ("image_size", int, 16, "image side length in pixels"),
    ("core", float, 0.6, "label correlation of the centre (core) cells, all environments"),
    ("spurious", _floats, None, "per-environment label correlation of the corner cells (default: +0.8,-0.8,...)"),
    ("noise", float, 0.05, "per-pixel Gaussian noise std, as a fraction of full intensity"),
    ("missing", float, 0.0, "probability that a label is missing"),
    ("prevalence", float, 0.5, "positive-label probability per task"),
    ("names", _names, None, "environment names (default: e0,e1,...)"),
    ("seed", int, 0, "generator seed"),
]

TRAIN_OPTS = [
    ("epochs", int, 200, "training epochs"),
    ("batch_size", int, 64, "mini-batch size"),
    ("lr", float, 1e-3, "Adam learning rate (fixed)"),
    ("weight_decay", float, 1e-5, "coupled L2 weight decay"),
    ("beta1", float, 0.9, "Adam beta1"),
    ("beta2", float, 0.999, "Adam beta2"),
    ("eps", float, 1e-8, "Adam epsilon"),
    ("amsgrad", _bool, True, "use AMSGrad"),
    ("model", str, "mlp1", f"model kind, one of {','.join(KINDS)}"),
    ("hidden", int, 64, "hidden units (mlp1)"),
    ("target_size", int, 112, "resize / augmentation output side length"),
    ("augment", _bool, True, "random affine augmentation of training images"),
    ("max_rotation", float, 45.0, "max rotation in degrees"),
    ("max_translate", float, 0.15, "max translation as a fraction of the side"),
    ("scale_range", _floats, [0.85, 1.15], "scale range low,high"),
    ("patience", _optional_int, None, "early-stopping patience in epochs (none: run all epochs, keep best)"),
    ("train_n", _ints, None, "train subset size, or one size per train env (default: all records)"),
    ("valid_n", _optional_int, None, "validation subset size (default: all records)"),
    ("test_n", _optional_int, None, "test subset size (default: all records)"),
]

RUN_OPTS = [
    ("data", str, None, "directory holding <name>.csv / <name>.xrpk pairs (required)"),
    ("train", _names, None, "two training environments, comma-separated (required)"),
    ("valid", str, None, "validation environment (required)"),
    ("test", str, None, "test environment (required)"),
    ("mode", _mode, BALANCED, "batching mode: balanced or random"),
    ("seed", int, 0, "run seed (model init, sampling, augmentation)"),
    *TRAIN_OPTS,
]

SUITE_OPTS = [
    ("data", str, None, "directory holding <name>.csv / <name>.xrpk pairs (required)"),
    ("datasets", _names, ["NIH", "CHEX", "MIMIC", "PC"], "the four environments, in NIH,CHEX,MIMIC,PC role order"),
    ("preset", str, "paper6", f"split preset, one of {','.join(PRESETS)}"),
    ("seeds", _ints, [0, 42, 99], "seeds, comma-separated"),
    ("modes", _modes, [RANDOM_MERGED, BALANCED], "batching modes: random,balanced"),
    ("jobs", int, 1, "parallel training runs"),
    *TRAIN_OPTS,
]

BOOL_TYPES = (_bool,)


def _show_default(v) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def _add_options(p: argparse.ArgumentParser, opts, out_required: bool = True) -> None:
    p.add_argument("--config", default=None, help="JSON config file; explicit flags override its values")
    if out_required:
        p.add_argument("--out", default=None, help="output directory (required)")
    for dest, typ, default, text in opts:
        flag = "--" + dest.replace("_", "-")
        shown = "" if "(default" in text else f" (default: {_show_default(default)})"
        if typ in BOOL_TYPES:
            p.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None, help=text + shown)
        else:
            p.add_argument(flag, dest=dest, type=typ, default=None, help=text + shown)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodbatch",
        description="Balanced vs. random multi-environment batching experiments.",
        epilog="Option precedence: defaults < --config file < explicit flags.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_options(sub.add_parser("synth", help="generate synthetic environments"), SYNTH_OPTS)
    _add_options(sub.add_parser("run", help="train one leave-a-dataset-out split"), RUN_OPTS)
    _add_options(sub.add_parser("suite", help="run a split preset over seeds and modes"), SUITE_OPTS)
    rep = sub.add_parser("report", help="render a suite JSON file as a table")
    rep.add_argument("results", help="suite.json written by 'suite'")
    return parser


def resolve(args: argparse.Namespace, opts) -> dict:
    """Merge defaults, config file and flags."""
    values = {dest: default for dest, _, default, _ in opts}
    values["out"] = None
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        types = {dest: typ for dest, typ, _, _ in opts}
        types["out"] = str
        for key, val in cfg.items():
            dest = key.replace("-", "_")
            if dest not in types:
                raise UsageError(f"unknown config key {key!r}")
            try:
                values[dest] = val if val is None else types[dest](val)
            except (argparse.ArgumentTypeError, TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
    for dest in values:
        v = getattr(args, dest, None)
        if v is not None:
            values[dest] = v
    return values


def _require(values: dict, *keys: str) -> None:
    missing = [k for k in keys if values.get(k) in (None, [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def train_config(v: dict) -> TrainConfig:
    scale = v["scale_range"]
    if len(scale) != 2:
        raise UsageError("--scale-range needs exactly two values")
    train_n = v["train_n"]
    if train_n is not None:
        train_n = train_n[0] if len(train_n) == 1 else tuple(train_n)
    try:
        return TrainConfig(
            epochs=v["epochs"],
            batch_size=v["batch_size"],
            optim=OptimConfig(v["lr"], v["weight_decay"], v["beta1"], v["beta2"], v["eps"], v["amsgrad"]),
            aug=AugmentConfig(v["target_size"], v["max_rotation"], v["max_translate"], tuple(scale), v["augment"]),
            model_kind=v["model"],
            hidden_dim=v["hidden"],
            early_stop_patience=v["patience"],
            train_n=train_n,
            valid_n=v["valid_n"],
            test_n=v["test_n"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(v: dict) -> int:
    _require(v, "out")
    spurious = v["spurious"]
    if spurious is None:
        spurious = [0.8 if i % 2 == 0 else -0.8 for i in range(v["envs"])]
    try:
        cfg = SynthConfig(
            n_envs=v["envs"], n_per_env=v["n"], image_size=v["image_size"], core_strength=v["core"],
            spurious_strength=tuple(spurious), noise_std=v["noise"], missing_rate=v["missing"],
            seed=v["seed"], prevalence=v["prevalence"], names=v["names"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(v["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    for manifest, pack in generate_synthetic(cfg):
        save_environment(out, manifest, pack)
        counts = " ".join(
            f"{t}={p}/{n}/{m}" for t, (p, n, m) in zip(manifest.tasks.names, class_counts(manifest))
        )
        print(f"{manifest.name}: {len(manifest)} records, {pack.height}x{pack.width}  pos/neg/missing {counts}")
    return 0


def _load(data_dir: str, names) -> dict:
    return {name: load_environment(data_dir, name) for name in names}


def cmd_run(v: dict) -> int:
    _require(v, "data", "train", "valid", "test", "out")
    if len(v["train"]) != 2:
        raise UsageError("--train needs exactly two environments")
    cfg = train_config(v)
    plan = ExperimentPlan(tuple(v["train"]), v["valid"], v["test"], v["seed"], v["mode"])
    # surface configuration errors before touching data
    SamplerConfig(plan.sampler_mode, cfg.batch_size, plan.seed).check_envs(len(plan.train_envs))

    data = _load(v["data"], [*plan.train_envs, plan.valid_env, plan.test_env])
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", {**run_config(plan, cfg), "meta": {"created_at": _timestamp()}})
    log_path, ckpt_path = out / "run_log.jsonl", out / "best.ckpt"
    spec = cfg.model_spec(len(next(iter(data.values()))[0].tasks))

    with log_path.open("w") as fh:
        def on_epoch(record, state):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            if record["checkpointed"]:
                save_checkpoint(state, spec, ckpt_path)
            log.info("epoch %d loss %.4f valid AUC %s", record["epoch"], record["train_loss"], record["valid_mean_auc"])

        result = train_one(plan, data, cfg, on_epoch=on_epoch)

    save_checkpoint(result.best_state, result.spec, ckpt_path)
    report = result.test_report.to_json(plan.label, plan.seed)
    report.update(best_epoch=result.best_epoch, best_valid_auc=result.to_json()["best_valid_auc"])
    _write_json(out / "test_report.json", report)
    print(f"{plan.label} [{plan.sampler_mode}] seed={plan.seed}: best valid AUC "
          f"{result.best_valid_auc:.4f} at epoch {result.best_epoch}, test mean AUC {result.test_report.mean_auc:.4f}")
    return 0


def cmd_suite(v: dict) -> int:
    _require(v, "data", "out")
    cfg = train_config(v)
    plans = enumerate_plans(v["datasets"], v["preset"])
    data = _load(v["data"], v["datasets"])
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)

    def on_run(rec):
        log.info("%s %s seed=%s test AUC %s", rec["mode"], rec["split"], rec["seed"], rec["test"]["mean_auc"])

    try:
        suite = run_suite(plans, data, cfg, v["seeds"], v["modes"], jobs=v["jobs"], preset=v["preset"], on_run=on_run)
    except RunError as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None:
            _write_json(out / "suite.partial.json", {**partial.to_json(), "error": str(exc)})
        raise
    obj = suite.to_json()
    obj["config"] = cfg.to_json()
    _write_json(out / "suite.json", obj)
    table = render_table(suite)
    (out / "table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_report(path: str) -> int:
    try:
        obj = json.loads(Path(path).read_text())
        suite = SuiteResult.from_json(obj)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot read suite results {path}: {exc}") from None
    print(render_table(suite), end="")
    return 0


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.results)
        opts = {"synth": SYNTH_OPTS, "run": RUN_OPTS, "suite": SUITE_OPTS}[args.command]
        values = resolve(args, opts)
        return {"synth": cmd_synth, "run": cmd_run, "suite": cmd_suite}[args.command](values)
    except (UsageError, ConfigError) as exc:
        print(f"oodbatch {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"oodbatch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"oodbatch {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
