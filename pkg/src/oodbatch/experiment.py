"""Leave-a-dataset-out experiments: planning, training with best-validation
checkpointing, and the balanced-vs-random comparison table."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .augment import AugmentConfig, resize
from .data import DatasetManifest, ImagePack, class_counts, merge_counts, subset_sequential
from .metrics import AucReport, aggregate, masked_auc_report
from .sampler import BALANCED, MODES, RANDOM_MERGED, Batch, ConfigError, SamplerConfig, epoch_batches

log = logging.getLogger(__name__)

Env = tuple[DatasetManifest, ImagePack]

PRESETS = ("paper6", "all12")

# (train pair, valid, test) as positions into the four dataset roles NIH, CHEX, MIMIC, PC
_PAPER6 = (
    ((0, 1), 2, 3),
    ((0, 3), 2, 1),
    ((1, 2), 3, 0),
    ((0, 2), 1, 3),
    ((1, 3), 0, 2),
    ((2, 3), 1, 0),
)

MODE_TITLES = {BALANCED: "Balanced Batching", RANDOM_MERGED: "Random Batching"}


class NonFiniteLossError(RuntimeError):
    pass


class RunError(RuntimeError):
    """A training run failed inside a suite; carries the (mode, split, seed) tag."""


@dataclass(frozen=True)
class ExperimentPlan:
    train_envs: tuple[str, str]
    valid_env: str
    test_env: str
    seed: int = 0
    sampler_mode: str = BALANCED

    def __post_init__(self):
        object.__setattr__(self, "train_envs", tuple(self.train_envs))
        names = [*self.train_envs, self.valid_env, self.test_env]
        if len(set(names)) != len(names):
            raise ConfigError(f"train, valid and test environments must be distinct: {names}")
        if self.sampler_mode not in MODES:
            raise ConfigError(f"unknown sampler mode {self.sampler_mode!r}")

    @property
    def label(self) -> str:
        return f"{'_'.join(self.train_envs)}/{self.valid_env}/{self.test_env}"

    def with_(self, **kw) -> "ExperimentPlan":
        return ExperimentPlan(**{**asdict(self), **kw})


def enumerate_plans(datasets: Sequence[str], preset: str = "paper6") -> list[ExperimentPlan]:
    """Leave-a-dataset-out assignments over four datasets.

    ``datasets`` fill the roles (NIH, CHEX, MIMIC, PC) in that order.
    ``paper6`` gives the six reference split columns; ``all12`` every
    (unordered train pair, valid, test) assignment.
    """
    names = list(datasets)
    if len(names) != 4:
        raise ConfigError(f"need exactly 4 datasets, got {len(names)}")
    if len(set(names)) != 4:
        raise ConfigError(f"duplicate dataset names: {names}")
    if preset == "paper6":
        return [ExperimentPlan((names[a], names[b]), names[v], names[t]) for (a, b), v, t in _PAPER6]
    if preset == "all12":
        plans = []
        for a, b in itertools.combinations(range(4), 2):
            r1, r2 = (i for i in range(4) if i not in (a, b))
            plans.append(ExperimentPlan((names[a], names[b]), names[r1], names[r2]))
            plans.append(ExperimentPlan((names[a], names[b]), names[r2], names[r1]))
        return plans
    raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    optim: nn.OptimConfig = field(default_factory=nn.OptimConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    model_kind: str = nn.MLP1
    hidden_dim: int = 64
    early_stop_patience: int | None = None
    # int, or one size per train env (first listed env first); None = whole manifest
    train_n: int | tuple[int, ...] | None = None
    valid_n: int | None = None
    test_n: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if isinstance(self.train_n, list):
            object.__setattr__(self, "train_n", tuple(self.train_n))

    def model_spec(self, n_tasks: int) -> nn.ModelSpec:
        return nn.ModelSpec(self.model_kind, self.aug.target_size ** 2, n_tasks, self.hidden_dim)

    def to_json(self) -> dict:
        d = asdict(self)
        d["aug"]["scale_range"] = list(self.aug.scale_range)
        if isinstance(self.train_n, tuple):
            d["train_n"] = list(self.train_n)
        return d


@dataclass
class RunResult:
    plan: ExperimentPlan
    spec: nn.ModelSpec
    best_valid_auc: float
    best_epoch: int
    valid_report: AucReport  # at best_epoch
    test_report: AucReport  # evaluated with the best checkpoint
    history: list[dict]
    best_state: nn.ModelState

    def to_json(self) -> dict:
        return {
            "split": self.plan.label,
            "seed": self.plan.seed,
            "mode": self.plan.sampler_mode,
            "best_valid_auc": _nan_to_none(self.best_valid_auc),
            "best_epoch": self.best_epoch,
            "valid": self.valid_report.to_json(self.plan.label, self.plan.seed),
            "test": self.test_report.to_json(self.plan.label, self.plan.seed),
        }


def _nan_to_none(x: float):
    return None if math.isnan(x) else x


def run_config(plan: ExperimentPlan, cfg: TrainConfig) -> dict:
    """Everything that determines a run, as a JSON-able dict."""
    return {
        "train_envs": list(plan.train_envs),
        "valid_env": plan.valid_env,
        "test_env": plan.test_env,
        "seed": plan.seed,
        "sampler_mode": plan.sampler_mode,
        "loss_aggregation": "env_sum" if plan.sampler_mode == BALANCED else "merged",
        "train": cfg.to_json(),
    }


# ---------------------------------------------------------------------------
# training


def eval_features(manifest: DatasetManifest, pack: ImagePack, target_size: int) -> Batch:
    """Resize-only features for every record (validation / test path)."""
    feats = np.stack([resize(pack.image(r.image_ref), target_size).ravel() for r in manifest.records])
    raw = manifest.label_matrix
    return Batch(feats, (raw == 1).astype(np.float64), (raw >= 0).astype(np.float64),
                 np.zeros(len(manifest), dtype=np.int64), tuple(r.id for r in manifest.records))


def evaluate(state: nn.ModelState, spec: nn.ModelSpec, batch: Batch, tasks) -> AucReport:
    return masked_auc_report(nn.forward(state, spec, batch.features), batch.labels, batch.mask, tasks)


def _subset(env: Env, n: int | None) -> Env:
    manifest, pack = env
    if n is None:
        return env
    if n > len(manifest):
        raise ConfigError(f"subset size {n} exceeds {len(manifest)} records of {manifest.name!r}")
    return subset_sequential(manifest, n), pack


def _train_sizes(cfg: TrainConfig) -> tuple[int | None, int | None]:
    if cfg.train_n is None or isinstance(cfg.train_n, int):
        return cfg.train_n, cfg.train_n
    if len(cfg.train_n) != 2:
        raise ConfigError("train_n must be one size or one per training environment")
    return tuple(cfg.train_n)


def batch_loss_grads(
    state: nn.ModelState,
    spec: nn.ModelSpec,
    batch: Batch,
    mode: str,
    weights: Sequence[nn.LossWeights],
    n_envs: int,
) -> tuple[float, np.ndarray]:
    """Loss and parameter gradient of one training batch.

    Balanced mode: per-environment mean losses on the env-tagged sub-batches,
    summed.  Random mode: one loss over the merged batch (``weights[0]``).
    """
    if mode == BALANCED:
        parts = []
        for e in range(n_envs):
            sub = batch.env_rows(e)
            loss, dz = nn.wbce_loss(nn.forward(state, spec, sub.features), sub.labels, sub.mask, weights[e])
            parts.append((loss, nn.backward(state, spec, sub.features, dz)))
        return nn.env_sum_loss(parts)
    loss, dz = nn.wbce_loss(nn.forward(state, spec, batch.features), batch.labels, batch.mask, weights[0])
    return loss, nn.backward(state, spec, batch.features, dz)


def train_one(
    plan: ExperimentPlan,
    data: Mapping[str, Env],
    cfg: TrainConfig,
    on_epoch: Callable[[dict, nn.ModelState], None] | None = None,
) -> RunResult:
    """Train one plan; returns the best-validation checkpoint and its test report.

    ``on_epoch(record, state)`` is called after every epoch with the run-log
    record and the current model state.
    """
    for name in (*plan.train_envs, plan.valid_env, plan.test_env):
        if name not in data:
            raise ConfigError(f"environment {name!r} not loaded")
    scfg = SamplerConfig(plan.sampler_mode, cfg.batch_size, plan.seed)
    scfg.check_envs(len(plan.train_envs))

    n0, n1 = _train_sizes(cfg)
    train = [_subset(data[plan.train_envs[0]], n0), _subset(data[plan.train_envs[1]], n1)]
    valid_m, valid_p = _subset(data[plan.valid_env], cfg.valid_n)
    test_m, test_p = _subset(data[plan.test_env], cfg.test_n)
    tasks = train[0][0].tasks
    for m in (train[1][0], valid_m, test_m):
        if m.tasks != tasks:
            raise ConfigError(f"task set of {m.name!r} differs from {train[0][0].name!r}")

    spec = cfg.model_spec(len(tasks))
    state = nn.init_model(spec, plan.seed)
    counts = [class_counts(m) for m, _ in train]
    if plan.sampler_mode == BALANCED:
        weights = [nn.pos_weights_from_counts(c) for c in counts]
    else:
        weights = [nn.pos_weights_from_counts(merge_counts(counts))]

    valid_batch = eval_features(valid_m, valid_p, cfg.aug.target_size)
    best = None
    history = []
    since_best = 0
    for epoch in range(cfg.epochs):
        batches = epoch_batches(train, scfg, epoch, cfg.aug)
        if not batches:
            raise RuntimeError(f"empty sampler epoch {epoch} for {plan.label} ({plan.sampler_mode})")
        losses = []
        for b, batch in enumerate(batches):
            loss, grads = batch_loss_grads(state, spec, batch, plan.sampler_mode, weights, len(train))
            if not (math.isfinite(loss) and np.all(np.isfinite(grads))):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {b}: loss={loss} ({plan.label}, seed {plan.seed})"
                )
            state = nn.adam_step(state, grads, cfg.optim)
            losses.append(loss)

        report = evaluate(state, spec, valid_batch, tasks)
        score = report.mean_auc
        improved = best is None or (not math.isnan(score) and (math.isnan(best[0]) or score > best[0]))
        if improved:
            best = (score, epoch, state.copy(), report)
            since_best = 0
        else:
            since_best += 1
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "valid_mean_auc": _nan_to_none(score),
            "checkpointed": improved,
        }
        history.append(record)
        log.debug("%s seed=%s %s", plan.label, plan.seed, record)
        if on_epoch is not None:
            on_epoch(record, state)
        if cfg.early_stop_patience is not None and since_best >= cfg.early_stop_patience:
            break

    best_auc, best_epoch, best_state, best_report = best
    test_report = evaluate(best_state, spec, eval_features(test_m, test_p, cfg.aug.target_size), tasks)
    return RunResult(plan, spec, best_auc, best_epoch, best_report, test_report, history, best_state)


# ---------------------------------------------------------------------------
# suites


@dataclass
class SuiteResult:
    splits: list[str]
    seeds: list[int]
    modes: list[str]
    tasks: list[str]
    runs: list[dict] = field(default_factory=list)  # RunResult.to_json() records
    preset: str | None = None

    def to_json(self) -> dict:
        return {
            "preset": self.preset,
            "splits": self.splits,
            "seeds": self.seeds,
            "modes": self.modes,
            "tasks": self.tasks,
            "runs": self.runs,
            "table": summarize(self),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SuiteResult":
        return cls(obj["splits"], obj["seeds"], obj["modes"], obj["tasks"], obj["runs"], obj.get("preset"))


def _run_job(args):
    plan, data, cfg = args
    try:
        return train_one(plan, data, cfg).to_json()
    except Exception as exc:  # re-raised with its (mode, split, seed) tag
        raise RunError(f"run failed [{plan.sampler_mode} {plan.label} seed={plan.seed}]: {exc}") from exc


def run_suite(
    plans: Sequence[ExperimentPlan],
    data: Mapping[str, Env],
    cfg: TrainConfig,
    seeds: Sequence[int],
    modes: Sequence[str] = (RANDOM_MERGED, BALANCED),
    jobs: int = 1,
    preset: str | None = None,
    on_run: Callable[[dict], None] | None = None,
) -> SuiteResult:
    """Train every (mode, plan, seed); results are kept in that order.

    On failure the partially filled :class:`SuiteResult` is attached to the
    raised :class:`RunError` as ``.partial``.
    """
    if not plans or not seeds:
        raise ConfigError("need at least one plan and one seed")
    tasks = list(next(iter(data.values()))[0].tasks.names)
    result = SuiteResult([p.label for p in plans], list(seeds), list(modes), tasks, preset=preset)
    # check divisibility etc. before the first (possibly long) run
    for mode in modes:
        SamplerConfig(mode, cfg.batch_size).check_envs(2)
    job_plans = [p.with_(seed=s, sampler_mode=m) for m in modes for p in plans for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            futures = [ex.submit(_run_job, (p, data, cfg)) for p in job_plans]
            for fut in futures:
                try:
                    rec = fut.result()
                except RunError as exc:
                    exc.partial = result
                    for f in futures:
                        f.cancel()
                    raise
                result.runs.append(rec)
                if on_run:
                    on_run(rec)
        return result
    for p in job_plans:
        try:
            rec = _run_job((p, data, cfg))
        except RunError as exc:
            exc.partial = result
            raise
        result.runs.append(rec)
        if on_run:
            on_run(rec)
    return result


ROW_BEST_VALID = "Best Valid AUC"
ROW_AVG_TEST = "Avg Test AUC"


def summarize(suite: SuiteResult) -> dict:
    """Table-shaped summary.

    Each cell aggregates over seeds (mean, sample std); the MEAN column
    aggregates the per-split cell means over splits.
    """
    rows = [ROW_BEST_VALID, ROW_AVG_TEST, *suite.tasks]
    table = {"cell_axis": "seeds", "mean_axis": "splits", "rows": rows, "modes": {}}
    for mode in suite.modes:
        block = {}
        for row in rows:
            cells = {}
            for split in suite.splits:
                runs = [r for r in suite.runs if r["mode"] == mode and r["split"] == split]
                if not runs:
                    continue
                cells[split] = aggregate(_row_value(r, row) for r in runs).to_json()
            means = [c["mean"] for c in cells.values()]
            across = aggregate(math.nan if m is None else m for m in means)
            block[row] = {"cells": cells, "mean": _nan_to_none(across.mean), "std": _nan_to_none(across.std)}
        table["modes"][mode] = block
    return table


def _row_value(run: dict, row: str) -> float:
    if row == ROW_BEST_VALID:
        v = run["best_valid_auc"]
    elif row == ROW_AVG_TEST:
        v = run["test"]["mean_auc"]
    else:
        v = run["test"]["per_task"][row]
    return math.nan if v is None else float(v)


def fmt2(x) -> str:
    """Two decimals, half-up from the shortest repr; ``-`` for undefined."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def render_table(suite: SuiteResult) -> str:
    summary = summarize(suite)
    rows = summary["rows"]
    parts = [s.split("/") for s in suite.splits]
    col_w = max([4] + [len(x) for p in parts for x in p]) + 2
    label_w = max(len(r) for r in rows + ["Model", "TRAIN"]) + 2
    mean_w = len("0.00 ± 0.00") + 2
    header = []
    for i, role in enumerate(("TRAIN", "VALID", "TEST")):
        line = role.ljust(label_w) + "".join(p[i].ljust(col_w) for p in parts)
        line += "MEAN" if i == 0 else ""
        header.append(line.rstrip())
    rule = "-" * (label_w + col_w * len(parts) + mean_w)
    out = []
    for mode in suite.modes:
        block = summary["modes"][mode]
        out.append(f"Model: {MODE_TITLES.get(mode, mode)}")
        out.extend(header)
        out.append(rule)
        for row in rows:
            r = block[row]
            cells = "".join(fmt2(r["cells"].get(s, {}).get("mean")).ljust(col_w) for s in suite.splits)
            mean = f"{fmt2(r['mean'])} ± {fmt2(r['std'])}" if r["mean"] is not None else "-"
            out.append((row.ljust(label_w) + cells + mean).rstrip())
        out.append("")
    out.append(f"cells: mean over seeds {suite.seeds}; MEAN: mean ± sample std over splits")
    return "\n".join(out) + "\n"
