"""Synthetic 1-D stochastic process: squared-exponential GP draws plus a sine.

Each realization lives on an ordered grid of 50 points spaced 0.1 apart inside
[-4, 4]; contexts are a prefix (or sorted random subset) of the targets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError
from .models import ContextTargetBatch


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GpKernelParams:
    lengthscale: float
    signal_var: float
    noise_var: float = 0.02


@dataclass(frozen=True)
class SineParams:
    amplitude: float
    omega: float
    phase: float


@dataclass(frozen=True)
class SyntheticRanges:
    """Uniform sampling ranges ``(lo, hi)`` for per-realization hyperparameters."""

    lengthscale: Tuple[float, float] = (0.5, 2.0)
    signal_var: Tuple[float, float] = (0.5, 2.0)
    noise_var: Tuple[float, float] = (0.02, 0.02)
    amplitude: Tuple[float, float] = (0.5, 1.5)
    omega: Tuple[float, float] = (0.5, 2.0)
    phase: Tuple[float, float] = (0.0, 2 * math.pi)

    def validate(self) -> None:
        bad = []
        for name in ("lengthscale", "signal_var", "noise_var", "amplitude", "omega", "phase"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                bad.append(name)
        if self.lengthscale[0] <= 0:
            bad.append("lengthscale")
        if self.omega[0] <= 0:
            bad.append("omega")
        for name in ("signal_var", "noise_var", "amplitude"):
            if getattr(self, name)[0] < 0:
                bad.append(name)
        if bad:
            raise ConfigError(f"invalid ranges: {', '.join(sorted(set(bad)))}", bad)


@dataclass(frozen=True)
class SequenceSpec:
    length: int = 50
    step: float = 0.1
    lo: float = -4.0
    hi: float = 4.0

    @property
    def span(self) -> float:
        return self.step * (self.length - 1)

    def validate(self) -> None:
        if self.length < 2 or self.step <= 0 or self.lo + self.span > self.hi + 1e-12:
            raise ConfigError("sequence does not fit inside the domain", ["length", "step"])

    def grid(self, x0: float) -> np.ndarray:
        return x0 + self.step * np.arange(self.length)

    def check(self, xs: np.ndarray, tol: float = 1e-9) -> bool:
        xs = np.asarray(xs).ravel()
        return (
            xs.size == self.length
            and bool(np.all(np.abs(np.diff(xs) - self.step) <= tol))
            and xs.min() >= self.lo - tol
            and xs.max() <= self.hi + tol
        )


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_kernel_hyperparams(rng: np.random.Generator, ranges: SyntheticRanges = SyntheticRanges()):
    ranges.validate()
    kernel = GpKernelParams(
        _uniform(rng, ranges.lengthscale), _uniform(rng, ranges.signal_var), _uniform(rng, ranges.noise_var)
    )
    sine = SineParams(_uniform(rng, ranges.amplitude), _uniform(rng, ranges.omega), _uniform(rng, ranges.phase))
    return kernel, sine


def se_kernel(xs: np.ndarray, kernel: GpKernelParams) -> np.ndarray:
    d = xs[:, None] - xs[None, :]
    return kernel.signal_var * np.exp(-(d**2) / (2.0 * kernel.lengthscale**2))


def gp_sample(kernel: GpKernelParams, xs, rng: np.random.Generator, n_samples: Optional[int] = None) -> np.ndarray:
    """Draw ``f(xs) + noise`` from the GP; shape ``(n,)`` or ``(n_samples, n)``.

    Diagonal jitter starts at ``1e-8 * signal_var`` and grows tenfold up to
    three times before giving up.
    """
    xs = np.asarray(xs, dtype=np.float64).ravel()
    n = xs.size
    shape = (n,) if n_samples is None else (n_samples, n)
    if kernel.signal_var == 0:
        eps = rng.standard_normal(shape)
        return math.sqrt(kernel.noise_var) * eps
    jitter = 1e-8 * kernel.signal_var
    base = se_kernel(xs, kernel) + kernel.noise_var * np.eye(n)
    for _ in range(4):
        try:
            chol = np.linalg.cholesky(base + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter *= 10
    else:
        raise NumericError(f"Cholesky failed for lengthscale={kernel.lengthscale}, n={n}")
    eps = rng.standard_normal(shape)
    return eps @ chol.T


@dataclass
class Realization:
    x: np.ndarray  # (n,)
    y: np.ndarray  # (n,)
    gp: np.ndarray  # GP component of y
    kernel: GpKernelParams
    sine: SineParams


def make_realization(
    rng: np.random.Generator, ranges: SyntheticRanges = SyntheticRanges(), spec: SequenceSpec = SequenceSpec()
) -> Realization:
    spec.validate()
    kernel, sine = sample_kernel_hyperparams(rng, ranges)
    x0 = float(rng.uniform(spec.lo, spec.hi - spec.span))
    xs = spec.grid(x0)
    gp = gp_sample(kernel, xs, rng)
    y = gp + sine.amplitude * np.sin(sine.omega * xs + sine.phase)
    return Realization(xs, y, gp, kernel, sine)


@dataclass(frozen=True)
class ContextPolicy:
    kind: str = "prefix"  # prefix | random
    m: int = 10

    def validate(self, n: int) -> None:
        if self.kind not in ("prefix", "random"):
            raise ConfigError(f"unknown context policy {self.kind!r}", ["context_policy"])
        if not 1 <= self.m < n:
            raise ConfigError(f"context size {self.m} outside [1, {n - 1}]", ["context_size"])


def split_context_target(n: int, rng: np.random.Generator, policy: ContextPolicy) -> Tuple[np.ndarray, np.ndarray]:
    """Index sets ``(context, target)``; targets are all ``n`` points in order."""
    policy.validate(n)
    targets = np.arange(n)
    if policy.kind == "prefix":
        return targets[: policy.m].copy(), targets
    return np.sort(rng.choice(n, size=policy.m, replace=False)), targets


def make_windows(xs: np.ndarray, window: int) -> np.ndarray:
    """``(n, d) -> (n, window, d)``: each row's most recent ``window`` values, oldest first.

    The first value is repeated to pad windows at the start of the sequence.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[:, None]
    n = xs.shape[0]
    idx = np.arange(n)[:, None] - (window - 1) + np.arange(window)[None, :]
    return xs[np.clip(idx, 0, n - 1)]


@dataclass
class RealizationBatch:
    realizations: List[Realization]
    context_idx: np.ndarray  # (B, m)
    target_idx: np.ndarray  # (B, n)

    def to_batch(self, window: Optional[int] = None) -> ContextTargetBatch:
        """Model inputs; ``window`` builds ANP_RNN sequence inputs."""
        xs = np.stack([r.x for r in self.realizations])
        ys = np.stack([r.y for r in self.realizations])[..., None]
        if window is None:
            inputs = xs[..., None]
        else:
            inputs = np.stack([make_windows(r.x, window) for r in self.realizations])
        take = lambda a, idx: np.take_along_axis(a, idx.reshape(idx.shape + (1,) * (a.ndim - 2)), axis=1)
        return ContextTargetBatch(
            take(inputs, self.context_idx),
            take(ys, self.context_idx),
            take(inputs, self.target_idx),
            take(ys, self.target_idx),
        )


def sample_batch(
    rng: np.random.Generator,
    batch_size: int,
    context_range: Tuple[int, int] = (5, 45),
    policy_kind: str = "prefix",
    ranges: SyntheticRanges = SyntheticRanges(),
    spec: SequenceSpec = SequenceSpec(),
) -> RealizationBatch:
    """One training batch; the context size is shared by the whole batch."""
    lo, hi = context_range
    if not 1 <= lo <= hi < spec.length:
        raise ConfigError(f"context range {context_range} invalid for length {spec.length}", ["context_range"])
    m = int(rng.integers(lo, hi + 1))
    reals, ctx, tgt = [], [], []
    for _ in range(batch_size):
        r = make_realization(rng, ranges, spec)
        c, t = split_context_target(spec.length, rng, ContextPolicy(policy_kind, m))
        reals.append(r)
        ctx.append(c)
        tgt.append(t)
    return RealizationBatch(reals, np.array(ctx, dtype=int).reshape(batch_size, m), np.array(tgt, dtype=int).reshape(batch_size, spec.length))


CSV_COLUMNS = ("realization_id", "index", "x", "y", "is_context")


def write_realizations_csv(path, batch: Optional[RealizationBatch]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        if batch is None:
            return
        for rid, r in enumerate(batch.realizations):
            ctx = set(int(i) for i in batch.context_idx[rid])
            for i in range(r.x.size):
                w.writerow([rid, i, repr(float(r.x[i])), repr(float(r.y[i])), int(i in ctx)])


def read_realizations_csv(path) -> RealizationBatch:
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}", missing)
        for line, row in enumerate(reader, start=2):
            try:
                rid, i = int(row["realization_id"]), int(row["index"])
                rows.setdefault(rid, []).append((i, float(row["x"]), float(row["y"]), int(row["is_context"])))
            except (TypeError, ValueError):
                raise ValueError(f"{path}: malformed row at line {line}") from None
    reals, ctx, tgt = [], [], []
    for rid in sorted(rows):
        pts = sorted(rows[rid])
        x = np.array([p[1] for p in pts])
        y = np.array([p[2] for p in pts])
        reals.append(Realization(x, y, np.full_like(y, np.nan), GpKernelParams(1.0, 1.0), SineParams(0.0, 1.0, 0.0)))
        ctx.append([k for k, p in enumerate(pts) if p[3]])
        tgt.append(list(range(len(pts))))
    if len({len(c) for c in ctx}) > 1 or len({len(t) for t in tgt}) > 1:
        raise ValueError(f"{path}: realizations must share context and target counts")
    b = len(reals)
    return RealizationBatch(reals, np.array(ctx, dtype=int).reshape(b, -1), np.array(tgt, dtype=int).reshape(b, -1))
