"""Mini-batch construction for multi-environment training.

Two strategies:

``random_merged``
    all training environments are pooled and a seeded permutation of the
    pool is cut into consecutive batches (each element at most once per
    epoch).
``balanced``
    every batch holds exactly ``batch_size / E`` rows from each of the ``E``
    environments.  Each environment is read from its own endless stream of
    seeded permutations, so small environments are reshuffled and recycled
    when exhausted.  An epoch is ``floor(min_env_size / (batch_size / E))``
    batches.

Index plans are cheap and computed up front; :func:`assemble_batch` turns a
plan entry into a :class:`Batch` of augmented, normalised features.  All
randomness is derived hierarchically from ``seed`` and the (epoch, batch,
row) coordinates, so the result does not depend on how many workers
assemble the batches.
"""

from __future__ import annotations

import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, augment_image
from .data import MISSING, DatasetManifest, ImagePack

RANDOM_MERGED = "random_merged"
BALANCED = "balanced"
MODES = (RANDOM_MERGED, BALANCED)

# stream tags keep the permutation and augmentation rngs disjoint
_PERM_STREAM = 1
_ROW_STREAM = 2

Env = tuple[DatasetManifest, ImagePack]


class ConfigError(ValueError):
    """Invalid experiment / sampler configuration, detected before any work."""


class EmptyEpochWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = BALANCED
    batch_size: int = 64
    seed: int = 0
    drop_last: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown sampler mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def check_envs(self, n_envs: int) -> None:
        if n_envs < 1:
            raise ConfigError("need at least one training environment")
        if self.mode == BALANCED and self.batch_size % n_envs:
            raise ConfigError(
                f"batch size not divisible by environment count ({self.batch_size} % {n_envs} != 0)"
            )


@dataclass(frozen=True)
class Batch:
    features: np.ndarray  # (rows, target_size**2) float64
    labels: np.ndarray  # (rows, tasks) float64 in {0, 1}
    mask: np.ndarray  # (rows, tasks) float64 in {0, 1}; 0 where the label is missing
    env_tags: np.ndarray  # (rows,) int
    row_ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.features.shape[0]

    def env_rows(self, env: int) -> "Batch":
        sel = self.env_tags == env
        ids = tuple(r for r, s in zip(self.row_ids, sel) if s) if self.row_ids else ()
        return Batch(self.features[sel], self.labels[sel], self.mask[sel], self.env_tags[sel], ids)


def _seed_entropy(seed: int) -> int:
    return int(seed) % (1 << 64)


def _permutation(seed: int, env: int, cycle: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([_seed_entropy(seed), _PERM_STREAM, env, cycle])
    return rng.permutation(n)


def env_key(name: str) -> int:
    """Stable integer identity of an environment, used to key its rng streams."""
    return zlib.crc32(name.encode("utf-8"))


def row_rng(seed: int, epoch: int, batch_index: int, row_index: int, key: int = 0) -> np.random.Generator:
    """Augmentation stream of a single batch row.

    ``row_index`` counts rows of the same environment (``key``) within the
    batch, so a row's stream does not depend on where other environments'
    rows sit in the batch.
    """
    return np.random.default_rng([_seed_entropy(seed), _ROW_STREAM, epoch, batch_index, key, row_index])


def _stream_slice(seed: int, env: int, n: int, start: int, stop: int) -> np.ndarray:
    """Positions ``[start, stop)`` of env's endless reshuffled index stream."""
    first, last = start // n, (stop - 1) // n
    stream = np.concatenate([_permutation(seed, env, c, n) for c in range(first, last + 1)])
    offset = first * n
    return stream[start - offset:stop - offset]


def plan_random(env_sizes: Sequence[int], cfg: SamplerConfig, epoch: int) -> list[np.ndarray]:
    """Index plan for one random-merged epoch: list of ``(rows, 2)`` arrays of (env, index)."""
    cfg.check_envs(len(env_sizes))
    pool = np.concatenate(
        [np.stack([np.full(n, e), np.arange(n)], axis=1) for e, n in enumerate(env_sizes)]
    ).astype(np.int64)
    # env slot 2**32 keeps the merged permutation apart from the per-env streams
    perm = np.random.default_rng([_seed_entropy(cfg.seed), _PERM_STREAM, 1 << 32, epoch]).permutation(len(pool))
    pool = pool[perm]
    n_full = len(pool) // cfg.batch_size
    plans = [pool[i * cfg.batch_size:(i + 1) * cfg.batch_size] for i in range(n_full)]
    if not cfg.drop_last and len(pool) % cfg.batch_size:
        plans.append(pool[n_full * cfg.batch_size:])
    if not plans:
        warnings.warn(
            f"pool of {len(pool)} rows is smaller than batch_size {cfg.batch_size}: empty epoch",
            EmptyEpochWarning,
            stacklevel=2,
        )
    return plans


def balanced_epoch_length(env_sizes: Sequence[int], cfg: SamplerConfig) -> int:
    per_env = cfg.batch_size // len(env_sizes)
    smallest = min(env_sizes)
    return smallest // per_env if cfg.drop_last else -(-smallest // per_env)


def plan_balanced(
    env_sizes: Sequence[int], cfg: SamplerConfig, epoch: int, env_keys: Sequence[int] | None = None
) -> list[np.ndarray]:
    """Index plan for one balanced epoch.

    ``env_keys`` seed each environment's permutation stream (default: the
    environment's position).
    """
    cfg.check_envs(len(env_sizes))
    if min(env_sizes) < 1:
        raise ConfigError("every training environment needs at least one record")
    per_env = cfg.batch_size // len(env_sizes)
    n_batches = balanced_epoch_length(env_sizes, cfg)
    if n_batches == 0:
        warnings.warn(
            f"smallest environment ({min(env_sizes)} rows) cannot fill {per_env} rows per batch: empty epoch",
            EmptyEpochWarning,
            stacklevel=2,
        )
        return []
    span = n_batches * per_env
    keys = list(range(len(env_sizes))) if env_keys is None else list(env_keys)
    streams = [
        _stream_slice(cfg.seed, k, n, epoch * span, (epoch + 1) * span) for k, n in zip(keys, env_sizes)
    ]
    plans = []
    for b in range(n_batches):
        rows = [
            np.stack([np.full(per_env, e), s[b * per_env:(b + 1) * per_env]], axis=1)
            for e, s in enumerate(streams)
        ]
        plans.append(np.concatenate(rows).astype(np.int64))
    return plans


def plan_epoch(
    env_sizes: Sequence[int], cfg: SamplerConfig, epoch: int, env_keys: Sequence[int] | None = None
) -> list[np.ndarray]:
    if cfg.mode == BALANCED:
        return plan_balanced(env_sizes, cfg, epoch, env_keys)
    return plan_random(env_sizes, cfg, epoch)


def assemble_batch(
    rows: np.ndarray,
    envs: Sequence[Env],
    aug: AugmentConfig,
    seed: int = 0,
    epoch: int = 0,
    batch_index: int = 0,
) -> Batch:
    """Materialise a plan entry (``(rows, 2)`` array of env / record index)."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    if len(rows) == 0:
        raise ValueError("cannot assemble an empty batch")
    n_tasks = len(envs[rows[0, 0]][0].tasks)
    feats = np.empty((len(rows), aug.target_size * aug.target_size))
    raw = np.empty((len(rows), n_tasks), dtype=np.int8)
    ids = []
    seen: dict[int, int] = {}
    for i, (e, idx) in enumerate(rows):
        manifest, pack = envs[e]
        rec = manifest.records[idx]
        pos = seen[e] = seen.get(e, -1) + 1
        rng = row_rng(seed, epoch, batch_index, pos, env_key(manifest.name)) if aug.enabled else None
        feats[i] = augment_image(pack.image(rec.image_ref), aug, rng).ravel()
        raw[i] = manifest.label_matrix[idx]
        ids.append(rec.id)
    mask = (raw != MISSING).astype(np.float64)
    labels = (raw == 1).astype(np.float64)
    return Batch(feats, labels, mask, rows[:, 0].copy(), tuple(ids))


def _epoch_batches(envs, cfg, epoch, aug, workers):
    plans = plan_epoch([len(m) for m, _ in envs], cfg, epoch, [env_key(m.name) for m, _ in envs])
    jobs = [(p, envs, aug, cfg.seed, epoch, b) for b, p in enumerate(plans)]
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            # map preserves plan order
            return list(ex.map(lambda j: assemble_batch(*j), jobs))
    return [assemble_batch(*j) for j in jobs]


def epoch_batches_random(
    envs: Sequence[Env], cfg: SamplerConfig, epoch: int, aug: AugmentConfig | None = None, workers: int = 0
) -> list[Batch]:
    if cfg.mode != RANDOM_MERGED:
        raise ConfigError(f"epoch_batches_random needs mode {RANDOM_MERGED!r}, got {cfg.mode!r}")
    return _epoch_batches(envs, cfg, epoch, aug or _infer_resize(envs), workers)


def epoch_batches_balanced(
    envs: Sequence[Env], cfg: SamplerConfig, epoch: int, aug: AugmentConfig | None = None, workers: int = 0
) -> list[Batch]:
    if cfg.mode != BALANCED:
        raise ConfigError(f"epoch_batches_balanced needs mode {BALANCED!r}, got {cfg.mode!r}")
    return _epoch_batches(envs, cfg, epoch, aug or _infer_resize(envs), workers)


def epoch_batches(envs, cfg: SamplerConfig, epoch: int, aug: AugmentConfig | None = None, workers: int = 0):
    fn = epoch_batches_balanced if cfg.mode == BALANCED else epoch_batches_random
    return fn(envs, cfg, epoch, aug, workers)


def _infer_resize(envs) -> AugmentConfig:
    # no augmentation given: pass images through at native size
    return AugmentConfig(target_size=envs[0][1].height, enabled=False)
