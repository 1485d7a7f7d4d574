"""Trajectory-prediction data: NGSIM-style records, length-L windows, metrics.

Coordinates follow the NGSIM convention: ``local_x`` is lateral and
``local_y`` longitudinal, both in meters. Features of a window are the
positions of the ``K`` nearest surrounding vehicles over the last ``L`` frames,
relative to the ego position at the first frame of the window.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .models import HALF_LOG_2PI

AXES = ("lateral", "longitudinal")


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


@dataclass(frozen=True)
class TrajectoryRecord:
    vehicle_id: int
    frame: int
    lateral: float
    longitudinal: float
    scenario: int = 0

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.lateral, self.longitudinal])


@dataclass(frozen=True)
class CsvSchema:
    vehicle_id: str = "vehicle_id"
    frame: str = "frame"
    lateral: str = "local_x"
    longitudinal: str = "local_y"
    scenario: Optional[str] = "scenario_id"  # optional column


def load_csv(path, schema: CsvSchema = CsvSchema()) -> List[TrajectoryRecord]:
    """Parse, sort by (scenario, vehicle, frame), and reject duplicate frames."""
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        for col in (schema.vehicle_id, schema.frame, schema.lateral, schema.longitudinal):
            if col not in reader.fieldnames:
                raise SchemaError(f"{path}: missing column {col!r}")
        has_scn = schema.scenario is not None and schema.scenario in reader.fieldnames
        for line, row in enumerate(reader, start=2):
            try:
                rec = TrajectoryRecord(
                    int(row[schema.vehicle_id]),
                    int(float(row[schema.frame])),
                    float(row[schema.lateral]),
                    float(row[schema.longitudinal]),
                    int(row[schema.scenario]) if has_scn else 0,
                )
            except (TypeError, ValueError):
                raise DataError(f"{path}: malformed row at line {line}") from None
            if not (math.isfinite(rec.lateral) and math.isfinite(rec.longitudinal)):
                raise DataError(f"{path}: non-finite position at line {line}")
            records.append(rec)
    records.sort(key=lambda r: (r.scenario, r.vehicle_id, r.frame))
    for a, b in zip(records, records[1:]):
        if (a.scenario, a.vehicle_id, a.frame) == (b.scenario, b.vehicle_id, b.frame):
            raise DataError(f"duplicate row for (vehicle {a.vehicle_id}, frame {a.frame})")
    return records


def write_csv(path, records: Sequence[TrajectoryRecord], schema: CsvSchema = CsvSchema()) -> None:
    cols = [schema.scenario, schema.vehicle_id, schema.frame, schema.lateral, schema.longitudinal]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([r.scenario, r.vehicle_id, r.frame, repr(r.lateral), repr(r.longitudinal)])


def split_scenarios(records: Sequence[TrajectoryRecord]) -> Dict[int, List[TrajectoryRecord]]:
    out: Dict[int, List[TrajectoryRecord]] = {}
    for r in records:
        out.setdefault(r.scenario, []).append(r)
    return out


# ---------------------------------------------------------------------------
# windows


@dataclass
class TrajectoryWindow:
    features: np.ndarray  # (L, 2K), rows oldest -> newest
    target: np.ndarray  # (2,) ego (lateral, longitudinal) at the window's last frame
    frame: int


def build_windows(
    records: Sequence[TrajectoryRecord],
    window: int,
    ego_id: int,
    slots: int = 6,
    sentinel: float = 100.0,
) -> List[TrajectoryWindow]:
    """Length-``window`` histories of the ``slots`` nearest neighbors, one per ego frame.

    Neighbors are ranked by distance to the ego at the window's last frame
    (ties by vehicle id). Missing neighbors, or frames where a neighbor is
    absent, carry ``sentinel`` in both coordinates.
    """
    if window < 1:
        raise DataError("window length must be >= 1")
    tracks: Dict[int, Dict[int, np.ndarray]] = {}
    for r in sorted(records, key=lambda r: (r.vehicle_id, r.frame)):
        track = tracks.setdefault(r.vehicle_id, {})
        if r.frame in track:
            raise DataError(f"duplicate row for (vehicle {r.vehicle_id}, frame {r.frame})")
        track[r.frame] = r.pos
    if ego_id not in tracks:
        raise DataError(f"ego vehicle {ego_id} not present")
    ego = tracks[ego_id]
    frames = sorted(ego)
    others = sorted(v for v in tracks if v != ego_id)
    out = []
    for j in range(window - 1, len(frames)):
        span = frames[j - window + 1 : j + 1]
        if span[-1] - span[0] != window - 1:
            continue  # ego track has a gap inside this window
        i = span[-1]
        origin = ego[span[0]]
        present = [(float(np.linalg.norm(tracks[v][i] - ego[i])), v) for v in others if i in tracks[v]]
        nearest = [v for _, v in sorted(present)[:slots]]
        feats = np.full((window, 2 * slots), sentinel)
        for s, v in enumerate(nearest):
            for t, f in enumerate(span):
                if f in tracks[v]:
                    feats[t, 2 * s : 2 * s + 2] = tracks[v][f] - origin
        out.append(TrajectoryWindow(feats, ego[i] - origin, i))
    return out


def stack_windows(windows: Sequence[TrajectoryWindow]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not windows:
        return np.zeros((0, 0, 0)), np.zeros((0, 2)), np.zeros(0, dtype=int)
    return (
        np.stack([w.features for w in windows]),
        np.stack([w.target for w in windows]),
        np.array([w.frame for w in windows]),
    )


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    MIN_STD = 1e-6


def fit_normalize(windows: Sequence[TrajectoryWindow]) -> NormStats:
    """Per-feature z-score statistics (features pooled over window rows)."""
    if not windows:
        raise DataError("cannot fit normalization on an empty set")
    feats, targets, _ = stack_windows(windows)
    f = feats.reshape(-1, feats.shape[-1])
    return NormStats(
        f.mean(axis=0),
        np.maximum(f.std(axis=0), NormStats.MIN_STD),
        targets.mean(axis=0),
        np.maximum(targets.std(axis=0), NormStats.MIN_STD),
    )


def apply_normalize(windows: Sequence[TrajectoryWindow], stats: NormStats) -> List[TrajectoryWindow]:
    return [
        TrajectoryWindow(
            (w.features - stats.feature_mean) / stats.feature_std,
            (w.target - stats.target_mean) / stats.target_std,
            w.frame,
        )
        for w in windows
    ]


def invert_normalize(windows: Sequence[TrajectoryWindow], stats: NormStats) -> List[TrajectoryWindow]:
    return [
        TrajectoryWindow(
            w.features * stats.feature_std + stats.feature_mean,
            w.target * stats.target_std + stats.target_mean,
            w.frame,
        )
        for w in windows
    ]


# ---------------------------------------------------------------------------
# synthetic lane changes


@dataclass(frozen=True)
class ScenarioConfig:
    lane_width: float = 3.7
    duration: float = 9.0
    frame_rate: float = 10.0
    ego_speed: Tuple[float, float] = (20.0, 30.0)
    speed_noise: float = 0.3  # m/s per sqrt(s), random walk on speed
    position_noise: float = 0.03  # m, i.i.d. lateral jitter
    neighbors: Tuple[int, int] = (2, 4)
    change_rate: Tuple[float, float] = (1.5, 3.0)  # logistic steepness, 1/s
    clear_gap: float = 12.0  # m gap to the blocking vehicle that triggers the change

    def validate(self) -> None:
        if self.frame_rate <= 0 or self.duration <= 0 or self.lane_width <= 0:
            raise ValueError("scenario needs positive duration, frame rate and lane width")
        if not 1 <= self.neighbors[0] <= self.neighbors[1]:
            raise ValueError("neighbor count range must satisfy 1 <= lo <= hi")


def logistic_profile(t: np.ndarray, start: float, width: float, t_change: float, rate: float) -> np.ndarray:
    return start + width / (1.0 + np.exp(-rate * (t - t_change)))


@dataclass
class Scenario:
    records: List[TrajectoryRecord]
    ego_id: int
    t_change: float
    rate: float
    direction: int


def synth_traffic(rng: np.random.Generator, cfg: ScenarioConfig = ScenarioConfig(), scenario: int = 0) -> Scenario:
    """One lane-change scene: ego (vehicle 0) changes lane around 2-4 neighbors.

    Vehicle 1 drives in the target lane next to the ego with a speed offset;
    the ego starts its change about one second after the gap to it reaches
    ``clear_gap`` so the timing is visible in the neighbors' relative motion.
    """
    cfg.validate()
    n = int(round(cfg.duration * cfg.frame_rate)) + 1
    dt = 1.0 / cfg.frame_rate
    t = np.arange(n) * dt
    w = cfg.lane_width
    direction = 1 if rng.random() < 0.5 else -1
    v0 = rng.uniform(*cfg.ego_speed)

    def longitudinal(x0, v):
        dv = cfg.speed_noise * math.sqrt(dt) * rng.standard_normal(n - 1)
        speeds = v + np.concatenate([[0.0], np.cumsum(dv)])
        return x0 + np.concatenate([[0.0], np.cumsum(speeds[:-1] * dt)])

    ego_lon = longitudinal(0.0, v0)
    gap0 = rng.uniform(-5.0, 5.0)
    dv_block = rng.choice([-1.0, 1.0]) * rng.uniform(2.0, 4.0)
    t_clear = (cfg.clear_gap - gap0 * np.sign(dv_block)) / abs(dv_block)
    t_change = float(np.clip(t_clear + 1.0, 2.5, 6.0))
    rate = float(rng.uniform(*cfg.change_rate))
    ego_lat = logistic_profile(t, 0.0, direction * w, t_change, rate)
    ego_lat = ego_lat + cfg.position_noise * rng.standard_normal(n)

    tracks = [(0, ego_lat, ego_lon)]
    block_lon = longitudinal(gap0, v0 + dv_block)
    tracks.append((1, direction * w + cfg.position_noise * rng.standard_normal(n), block_lon))
    n_nb = int(rng.integers(cfg.neighbors[0], cfg.neighbors[1] + 1))
    for vid in range(2, n_nb + 1):
        lane = rng.choice([0, direction, -direction])
        gap = rng.choice([-1.0, 1.0]) * rng.uniform(12.0, 40.0)
        lon = longitudinal(gap, v0 + rng.uniform(-3.0, 3.0))
        tracks.append((vid, lane * w + cfg.position_noise * rng.standard_normal(n), lon))
    records = [
        TrajectoryRecord(vid, k, float(lat[k]), float(lon[k]), scenario) for vid, lat, lon in tracks for k in range(n)
    ]
    return Scenario(records, 0, t_change, rate, direction)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class AxisReport:
    horizon_error: Dict[str, Optional[float]]
    horizon_sigma: Dict[str, Optional[float]]
    mse: float
    nll: float


@dataclass
class HorizonReport:
    axes: Dict[str, AxisReport]
    mse: float  # joint, averaged over axes
    nll: float  # joint, summed over axes per frame
    units: str = "meters"
    normalization: str = "none"
    meta: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "units": self.units,
            "normalization": self.normalization,
            "mse": self.mse,
            "nll": self.nll,
            "axes": {
                k: {"horizon_error": a.horizon_error, "horizon_sigma": a.horizon_sigma, "mse": a.mse, "nll": a.nll}
                for k, a in self.axes.items()
            },
            "meta": dict(self.meta),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def horizon_metrics(
    pred_mu: Sequence[np.ndarray],
    pred_sigma: Sequence[np.ndarray],
    truth: Sequence[np.ndarray],
    frame_rate: float,
    cutoff: Sequence[int],
    horizons: Sequence[float] = (1, 2, 3, 4),
    axes: Sequence[str] = AXES,
) -> HorizonReport:
    """Per-horizon absolute error / sigma, MSE and NLL over predicted frames.

    Each entry of the sequences is one trajectory with arrays of shape
    ``(n_frames, n_axes)``; ``cutoff[i]`` is the index of its last context
    frame. A horizon that falls beyond every trajectory is reported as None.
    """
    if frame_rate <= 0:
        raise ValueError("frame_rate must be positive")
    n_axes = len(axes)
    err_at = {h: [] for h in horizons}
    sig_at = {h: [] for h in horizons}
    sq, nll = [], []
    for mu, sg, y, c in zip(pred_mu, pred_sigma, truth, cutoff):
        mu, sg, y = (np.asarray(a, dtype=float).reshape(-1, n_axes) for a in (mu, sg, y))
        for h in horizons:
            k = c + int(round(h * frame_rate))
            if k < len(y):
                err_at[h].append(np.abs(mu[k] - y[k]))
                sig_at[h].append(sg[k])
        after = slice(c + 1, None)
        sq.append((mu[after] - y[after]) ** 2)
        nll.append(np.log(sg[after]) + (y[after] - mu[after]) ** 2 / (2 * sg[after] ** 2) + HALF_LOG_2PI)
    sq = np.concatenate(sq) if sq else np.zeros((0, n_axes))
    nll = np.concatenate(nll) if nll else np.zeros((0, n_axes))
    reports = {}
    for a, name in enumerate(axes):
        reports[name] = AxisReport(
            {f"{h:g}s": (float(np.mean([e[a] for e in err_at[h]])) if err_at[h] else None) for h in horizons},
            {f"{h:g}s": (float(np.mean([s[a] for s in sig_at[h]])) if sig_at[h] else None) for h in horizons},
            float(np.mean(sq[:, a])),
            float(np.mean(nll[:, a])),
        )
    return HorizonReport(reports, float(np.mean(sq)), float(np.mean(np.sum(nll, axis=1))))


def format_table(reports: Dict[str, HorizonReport], axis: str = "lateral") -> str:
    """Aligned text in the layout of a mean / sigma per horizon table."""
    horizons = None
    rows = []
    for name, rep in reports.items():
        ax = rep.axes[axis]
        horizons = horizons or list(ax.horizon_error)
        fmt = lambda v: "---" if v is None else f"{v:.3f}"
        rows.append([name, "mu"] + [fmt(ax.horizon_error[h]) for h in horizons] + [f"{ax.mse:.4f}", f"{ax.nll:.4f}"])
        rows.append(["", "sigma"] + [fmt(ax.horizon_sigma[h]) for h in horizons] + ["---", "---"])
    header = ["", ""] + (horizons or []) + ["MSE", "NLL"]
    table = [header] + rows
    widths = [max(len(str(r[i])) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in table)
