"""Task-vector extraction and checkpoint merging.

A checkpoint is a map of named float32 tensors; a task vector is the
elementwise delta of a fine-tuned checkpoint against the shared base it
was trained from, stamped with the base's content fingerprint so
vectors from different bases cannot be merged together silently.

Six merge methods are provided: linear, task arithmetic, SLERP, TIES,
DARE-linear, and DARE-TIES. All kernels are pure, operate in a
canonical coordinate order (sorted tensor names, row-major within each
tensor), and are deterministic regardless of dict iteration order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensorio

MERGE_METHODS = ("linear", "task_arithmetic", "slerp", "ties", "dare_linear", "dare_ties")
SWEEP_FRACTIONS = (0.3, 0.5, 0.7)

COLINEAR_SIN_EPS = 1e-7
ZERO_DIRECTION_EPS = 1e-12


class MergeError(ValueError):
    """Structure, fingerprint, or configuration violation."""


def _as_f32_map(tensors: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in tensors.items():
        if not name:
            raise MergeError("tensor name must be non-empty")
        a = np.asarray(arr).astype("<f4", copy=False)
        if not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        if not np.all(np.isfinite(a)):
            raise MergeError(f"tensor {name!r} contains non-finite values")
        out[name] = a
    return out


@dataclass(frozen=True)
class TaskVector:
    """Named-tensor delta against a base checkpoint."""

    tensors: dict[str, np.ndarray]
    base_fingerprint: str

    def __post_init__(self):
        if not self.base_fingerprint:
            raise MergeError("task vector requires a base fingerprint")
        object.__setattr__(self, "tensors", _as_f32_map(self.tensors))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.tensors))

    def element_count(self) -> int:
        return sum(int(a.size) for a in self.tensors.values())

    def flat(self) -> np.ndarray:
        """Canonical float64 flattening: sorted names, row-major within each."""
        if not self.tensors:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([self.tensors[n].reshape(-1).astype(np.float64)
                               for n in self.names])

    def with_flat(self, values: np.ndarray) -> "TaskVector":
        """Rebuild a vector with this structure from canonical flat values."""
        out: dict[str, np.ndarray] = {}
        cursor = 0
        for name in self.names:
            shape = self.tensors[name].shape
            size = self.tensors[name].size
            out[name] = values[cursor:cursor + size].astype("<f4").reshape(shape)
            cursor += size
        return TaskVector(out, self.base_fingerprint)


def _structure_mismatches(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> list[str]:
    bad = sorted(set(a) ^ set(b))
    bad += sorted(n for n in set(a) & set(b) if a[n].shape != b[n].shape)
    return bad


def _check_structure(maps: Sequence[Mapping[str, np.ndarray]], what: str) -> None:
    first = maps[0]
    for other in maps[1:]:
        bad = _structure_mismatches(first, other)
        if bad:
            shown = ", ".join(bad[:10])
            raise MergeError(f"{what} name/shape mismatch on {len(bad)} tensors: {shown}")


def _check_same_base(taus: Sequence[TaskVector]) -> str:
    fp = taus[0].base_fingerprint
    for tau in taus[1:]:
        if tau.base_fingerprint != fp:
            raise MergeError(
                "cross-base merge: task vectors were extracted against different bases "
                f"({fp[:12]}… vs {tau.base_fingerprint[:12]}…)")
    _check_structure([t.tensors for t in taus], "task vector")
    return fp


def task_vector(phi_i: Mapping[str, np.ndarray], phi_0: Mapping[str, np.ndarray]) -> TaskVector:
    """Extract tau = phi_i - phi_0, stamped with the base's fingerprint."""
    fine, base = _as_f32_map(phi_i), _as_f32_map(phi_0)
    bad = _structure_mismatches(fine, base)
    if bad:
        shown = ", ".join(bad[:10])
        raise MergeError(f"checkpoint name/shape mismatch on {len(bad)} tensors: {shown}")
    delta = {n: (fine[n].astype(np.float64) - base[n].astype(np.float64)).astype("<f4")
             for n in fine}
    return TaskVector(delta, tensorio.fingerprint(base))


def apply_to_base(phi_0: Mapping[str, np.ndarray], tau: TaskVector) -> dict[str, np.ndarray]:
    """phi_merged = phi_0 + tau; refuses a vector extracted against another base."""
    base = _as_f32_map(phi_0)
    if tensorio.fingerprint(base) != tau.base_fingerprint:
        raise MergeError("task vector was not extracted against this base checkpoint")
    bad = _structure_mismatches(base, tau.tensors)
    if bad:
        shown = ", ".join(bad[:10])
        raise MergeError(f"checkpoint name/shape mismatch on {len(bad)} tensors: {shown}")
    return {n: (base[n].astype(np.float64) + tau.tensors[n].astype(np.float64)).astype("<f4")
            for n in base}


def merge_linear(taus: Sequence[TaskVector], lambdas: Sequence[float]) -> TaskVector:
    """Weighted sum of task vectors over a shared base."""
    if not taus:
        raise MergeError("merge_linear needs at least one task vector")
    if len(taus) != len(lambdas):
        raise MergeError(f"{len(taus)} vectors but {len(lambdas)} weights")
    for lam in lambdas:
        if not lam > 0:
            raise MergeError(f"weights must be positive, got {lam}")
    _check_same_base(taus)
    acc = np.zeros_like(taus[0].flat())
    for tau, lam in zip(taus, lambdas):
        acc += lam * tau.flat()
    return taus[0].with_flat(acc)


def merge_task_arithmetic(taus: Sequence[TaskVector]) -> TaskVector:
    """Plain sum: linear merge with uniform unit weights."""
    return merge_linear(taus, [1.0] * len(taus))


def merge_slerp(tau1: TaskVector, tau2: TaskVector, t: float) -> TaskVector:
    """Spherical interpolation of global directions, linear in magnitude.

    Both vectors are flattened across all tensors into one direction
    each; the result has magnitude (1-t)*|tau1| + t*|tau2|. Near-colinear
    inputs fall back to normalized linear interpolation of directions.
    """
    if not 0.0 <= t <= 1.0:
        raise MergeError(f"slerp factor {t} outside [0, 1]")
    _check_same_base([tau1, tau2])
    if t == 0.0:
        return tau1.with_flat(tau1.flat())
    if t == 1.0:
        return tau2.with_flat(tau2.flat())

    v1, v2 = tau1.flat(), tau2.flat()
    n1, n2 = float(np.linalg.norm(v1)), float(np.linalg.norm(v2))
    if n1 == 0.0 and n2 == 0.0:
        raise MergeError("slerp of two zero vectors has no direction")
    u1 = v1 / n1 if n1 > 0 else np.zeros_like(v1)
    u2 = v2 / n2 if n2 > 0 else np.zeros_like(v2)
    magnitude = (1.0 - t) * n1 + t * n2

    cos_theta = float(np.clip(np.dot(u1, u2), -1.0, 1.0))
    sin_theta = math.sqrt(max(0.0, 1.0 - cos_theta * cos_theta))
    if n1 == 0.0 or n2 == 0.0 or sin_theta < COLINEAR_SIN_EPS:
        blend = (1.0 - t) * u1 + t * u2
        norm = float(np.linalg.norm(blend))
        if norm < ZERO_DIRECTION_EPS:
            raise MergeError("slerp direction vanished (antipodal inputs)")
        direction = blend / norm
    else:
        theta = math.acos(cos_theta)
        direction = (math.sin((1.0 - t) * theta) * u1 + math.sin(t * theta) * u2) / sin_theta
    return tau1.with_flat(magnitude * direction)


def _trim_mask(flat_abs: np.ndarray, keep: int) -> np.ndarray:
    """Mask of the `keep` largest magnitudes; threshold ties resolve to the
    earliest canonical positions so the kept count is exact."""
    n = flat_abs.size
    order = np.lexsort((np.arange(n), -flat_abs))
    mask = np.zeros(n, dtype=bool)
    mask[order[:keep]] = True
    return mask


def trim_vector(tau: TaskVector, rho: float, scope: str = "global") -> TaskVector:
    """Zero all but the top-ceil(rho*n) largest-|value| entries."""
    if not 0.0 < rho <= 1.0:
        raise MergeError(f"density {rho} outside (0, 1]")
    if scope not in ("global", "per_tensor"):
        raise MergeError(f"unknown trim scope {scope!r}")
    if rho == 1.0:
        return tau.with_flat(tau.flat())
    if scope == "global":
        flat = tau.flat()
        keep = math.ceil(rho * flat.size)
        return tau.with_flat(np.where(_trim_mask(np.abs(flat), keep), flat, 0.0))
    out = {}
    for name in tau.names:
        arr = tau.tensors[name].astype(np.float64).reshape(-1)
        keep = math.ceil(rho * arr.size)
        kept = np.where(_trim_mask(np.abs(arr), keep), arr, 0.0)
        out[name] = kept.astype("<f4").reshape(tau.tensors[name].shape)
    return TaskVector(out, tau.base_fingerprint)


def merge_ties(taus: Sequence[TaskVector], rho: float, aggregation: str = "mean",
               trim_scope: str = "global") -> TaskVector:
    """Trim, elect a sign per coordinate, then merge only agreeing entries.

    An exact sign tie (trimmed values summing to zero) outputs zero at
    that coordinate. ``aggregation`` is the reduction over agreeing
    entries: mean (default) or sum.
    """
    if not taus:
        raise MergeError("merge_ties needs at least one task vector")
    if aggregation not in ("mean", "sum"):
        raise MergeError(f"unknown aggregation {aggregation!r}")
    _check_same_base(taus)
    trimmed = np.stack([trim_vector(tau, rho, trim_scope).flat() for tau in taus])

    totals = trimmed.sum(axis=0)
    elected = np.sign(totals)
    agree = (np.sign(trimmed) == elected) & (elected != 0)
    agree_counts = agree.sum(axis=0)
    summed = np.where(agree, trimmed, 0.0).sum(axis=0)
    if aggregation == "mean":
        merged = np.divide(summed, agree_counts,
                           out=np.zeros_like(summed), where=agree_counts > 0)
    else:
        merged = summed
    return taus[0].with_flat(merged)


def _dare_keep_mask(seed: int, name: str, size: int, rho: float) -> np.ndarray:
    """Counter-based keep decisions: draw i depends only on (seed, name, i)."""
    key = int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()[:16], "little")
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.random(size) < rho


def dare_sparsify(tau: TaskVector, rho: float, seed: int) -> TaskVector:
    """Drop each entry with probability 1-rho; rescale survivors by 1/rho."""
    if not 0.0 < rho <= 1.0:
        raise MergeError(f"keep probability {rho} outside (0, 1]")
    if rho == 1.0:
        return tau.with_flat(tau.flat())
    out = {}
    for name in tau.names:
        arr = tau.tensors[name].astype(np.float64).reshape(-1)
        keep = _dare_keep_mask(seed, name, arr.size, rho)
        out[name] = np.where(keep, arr / rho, 0.0).astype("<f4").reshape(tau.tensors[name].shape)
    return TaskVector(out, tau.base_fingerprint)


def merge_dare_linear(taus: Sequence[TaskVector], rho: float, seed: int,
                      lambdas: Sequence[float] | None = None) -> TaskVector:
    """Sparsify each vector with a per-vector derived seed, then merge linearly."""
    if lambdas is None:
        lambdas = [1.0] * len(taus)
    sparse = [dare_sparsify(tau, rho, seed ^ i) for i, tau in enumerate(taus)]
    return merge_linear(sparse, lambdas)


def merge_dare_ties(taus: Sequence[TaskVector], rho: float, seed: int,
                    aggregation: str = "mean") -> TaskVector:
    """Sparsify each vector, then TIES election with trimming disabled."""
    sparse = [dare_sparsify(tau, rho, seed ^ i) for i, tau in enumerate(taus)]
    return merge_ties(sparse, rho=1.0, aggregation=aggregation)


@dataclass(frozen=True)
class MergeConfig:
    """One merge configuration: the method plus its required hyperparameters."""

    method: str
    lambdas: tuple[float, ...] | None = None
    t: float | None = None
    rho: float | None = None
    seed: int = 0
    disjoint_aggregation: str = "mean"
    trim_scope: str = "global"

    def __post_init__(self):
        if self.method not in MERGE_METHODS:
            raise MergeError(f"unknown merge method {self.method!r}")
        if self.method == "slerp":
            if self.t is None:
                raise MergeError("slerp requires an interpolation factor t")
            if not 0.0 <= self.t <= 1.0:
                raise MergeError(f"slerp factor {self.t} outside [0, 1]")
        if self.method in ("ties", "dare_linear", "dare_ties"):
            if self.rho is None:
                raise MergeError(f"{self.method} requires a density rho")
            if not 0.0 < self.rho <= 1.0:
                raise MergeError(f"density {self.rho} outside (0, 1]")
        if self.disjoint_aggregation not in ("mean", "sum"):
            raise MergeError(f"unknown aggregation {self.disjoint_aggregation!r}")

    def label(self) -> str:
        if self.method == "slerp":
            return f"slerp(t={self.t})"
        if self.method in ("ties", "dare_linear", "dare_ties"):
            return f"{self.method}(rho={self.rho})"
        return self.method


def run_merge(config: MergeConfig, taus: Sequence[TaskVector]) -> TaskVector:
    """Dispatch one configuration over extracted task vectors."""
    if config.method == "slerp" and len(taus) != 2:
        raise MergeError(f"slerp requires exactly 2 task vectors, got {len(taus)}")
    if config.method == "linear":
        lambdas = config.lambdas or tuple(1.0 for _ in taus)
        return merge_linear(taus, lambdas)
    if config.method == "task_arithmetic":
        return merge_task_arithmetic(taus)
    if config.method == "slerp":
        return merge_slerp(taus[0], taus[1], config.t)
    if config.method == "ties":
        return merge_ties(taus, config.rho, config.disjoint_aggregation, config.trim_scope)
    if config.method == "dare_linear":
        return merge_dare_linear(taus, config.rho, config.seed, config.lambdas)
    return merge_dare_ties(taus, config.rho, config.seed, config.disjoint_aggregation)


def sweep_grid(seed: int = 0) -> list[MergeConfig]:
    """The 14-configuration sweep: linear and task arithmetic with uniform
    weights, then slerp/ties/dare_linear/dare_ties at each of 0.3/0.5/0.7."""
    configs = [MergeConfig("linear"), MergeConfig("task_arithmetic")]
    configs += [MergeConfig("slerp", t=v) for v in SWEEP_FRACTIONS]
    for method in ("ties", "dare_linear", "dare_ties"):
        configs += [MergeConfig(method, rho=v, seed=seed) for v in SWEEP_FRACTIONS]
    return configs


def estimate_cumulative_compute(k: int, per_corpus_cost: float) -> tuple[float, float]:
    """Cumulative training cost after K corpus arrivals.

    Merging trains once per arrival (K*c); full retraining re-runs on
    the growing union (c * K*(K+1)/2).
    """
    if k < 1:
        raise MergeError(f"corpus count must be positive, got {k}")
    if per_corpus_cost <= 0:
        raise MergeError(f"per-corpus cost must be positive, got {per_corpus_cost}")
    merge_cost = k * per_corpus_cost
    retrain_cost = per_corpus_cost * k * (k + 1) / 2
    return merge_cost, retrain_cost


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    tensorio.save(path, _as_f32_map(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    tensors, base = tensorio.load(path)
    if base is not None:
        raise MergeError(f"{path} holds a task vector, not a checkpoint")
    return tensors


def save_task_vector(path, tau: TaskVector) -> None:
    tensorio.save(path, tau.tensors, base_fingerprint=tau.base_fingerprint)


def load_task_vector(path) -> TaskVector:
    tensors, base = tensorio.load(path)
    if base is None:
        raise MergeError(f"{path} has no base fingerprint; extract a task vector first")
    return TaskVector(tensors, base)
