"""Deterministic training, target-NLL evaluation, variant comparison, and dumps."""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .autodiff import Tape, backward
from .config import ConfigError, from_kv, to_kv
from .models import (
    ContextTargetBatch,
    Model,
    ModelConfig,
    build_model,
    checkpoint_bytes,
    load_checkpoint,
)
from .synthetic import ContextPolicy, RealizationBatch, make_realization, sample_batch, split_context_target
from . import trajectory as traj

log = logging.getLogger(__name__)

DATASETS = ("synthetic", "trajectory")


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "synthetic"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 10.0  # global-norm clip; <= 0 disables
    iterations: int = 400
    batch_size: int = 16
    context_policy: str = "prefix"
    context_min: int = 5
    context_max: int = 45
    seed: int = 0
    eval_every: int = 20
    eval_seed: int = 1000003
    eval_batches: int = 4
    eval_z_samples: int = 8
    checkpoint_iterations: Tuple[int, ...] = (80, 160, 240, 320, 400)
    # keep the parameters with the best validation NLL seen at an evaluation step
    select_best: bool = False
    # trajectory source
    axis: str = "lateral"
    scenarios: int = 200
    train_scenarios: int = 160
    validation_scenarios: int = 0  # carved from the end of the training scenes
    traffic_seed: int = 7
    trajectory_csv: str = ""
    neighbor_slots: int = 6
    frame_rate: float = 10.0
    context_windows: int = 30

    def __post_init__(self):
        bad = []
        if self.dataset not in DATASETS:
            bad.append("dataset")
        if not self.learning_rate > 0:
            bad.append("learning_rate")
        if self.iterations < 1:
            bad.append("iterations")
        if self.batch_size < 1:
            bad.append("batch_size")
        if self.eval_every < 1:
            bad.append("eval_every")
        if self.context_policy not in ("prefix", "random"):
            bad.append("context_policy")
        if not 1 <= self.context_min <= self.context_max:
            bad.append("context_max")
        if self.eval_z_samples < 1:
            bad.append("eval_z_samples")
        if self.axis not in traj.AXES:
            bad.append("axis")
        if not 0 < self.train_scenarios < self.scenarios and not self.trajectory_csv:
            bad.append("train_scenarios")
        if not 0 <= self.validation_scenarios < self.train_scenarios:
            bad.append("validation_scenarios")
        if bad:
            raise ConfigError(f"invalid train config keys: {', '.join(bad)}", bad)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    name: str = ""

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        m = self.model
        if m.kind == "NP":
            return "NP"
        if m.kind == "LSTM":
            return "LSTM"
        return f"{m.kind.replace('ANP_RNN', 'ANP-LSTM')}({m.attention})"

    def to_sections(self) -> Dict[str, Dict[str, str]]:
        return {"run": {"name": self.name}, "model": to_kv(self.model), "train": to_kv(self.train)}

    def digest(self) -> str:
        text = json.dumps(self.to_sections(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:10]

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed))


def run_config_from_sections(sections: Dict[str, Dict[str, str]]) -> RunConfig:
    model = from_kv(ModelConfig, sections.get("model", {}))
    train = from_kv(TrainConfig, sections.get("train", {}))
    return RunConfig(model, train, sections.get("run", {}).get("name", ""))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.get(name, np.zeros_like(p)) * b1 + (1 - b1) * g
            v = self.v.get(name, np.zeros_like(p)) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------------------
# data sources


class SyntheticSource:
    """GP + sine sequences; every iteration draws fresh realizations."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.window = model_cfg.window if model_cfg.sequential else None

    def training_batch(self, rng) -> ContextTargetBatch:
        c = self.cfg
        rb = sample_batch(rng, c.batch_size, (c.context_min, c.context_max), c.context_policy)
        return rb.to_batch(self.window)

    def eval_realizations(self) -> List[RealizationBatch]:
        c = self.cfg
        rng = np.random.default_rng([c.eval_seed, 0])
        return [
            sample_batch(rng, c.batch_size, (c.context_min, c.context_max), c.context_policy)
            for _ in range(c.eval_batches)
        ]

    def eval_set(self) -> List[ContextTargetBatch]:
        return [rb.to_batch(self.window) for rb in self.eval_realizations()]

    def validation_set(self) -> List[ContextTargetBatch]:
        c = self.cfg
        rng = np.random.default_rng([c.eval_seed, 1])
        return [
            sample_batch(rng, c.batch_size, (c.context_min, c.context_max), c.context_policy).to_batch(self.window)
            for _ in range(c.eval_batches)
        ]


@dataclass
class TrafficData:
    """Windowed scenes per split, normalized with training statistics."""

    train_x: List[np.ndarray]
    train_y: List[np.ndarray]
    test_x: List[np.ndarray]
    test_y: List[np.ndarray]
    stats: traj.NormStats
    val_x: List[np.ndarray] = field(default_factory=list)
    val_y: List[np.ndarray] = field(default_factory=list)


@functools.lru_cache(maxsize=8)
def load_traffic(
    scenarios: int,
    train_scenarios: int,
    seed: int,
    window: int,
    slots: int,
    frame_rate: float,
    csv_path: str = "",
    validation_scenarios: int = 0,
) -> TrafficData:
    if csv_path:
        records = traj.load_csv(csv_path)
        by_scn = traj.split_scenarios(records)
        # without a designated ego, the lowest vehicle id in each scene plays that role
        scenes = [(recs, min(r.vehicle_id for r in recs)) for _, recs in sorted(by_scn.items())]
        n_train = max(1, int(round(0.8 * len(scenes))))
    else:
        cfg = traj.ScenarioConfig(frame_rate=frame_rate)
        scenes = []
        for i in range(scenarios):
            s = traj.synth_traffic(np.random.default_rng([seed, i]), cfg, scenario=i)
            scenes.append((s.records, s.ego_id))
        n_train = train_scenarios
    windows = [traj.build_windows(recs, window, ego, slots) for recs, ego in scenes]
    windows = [w for w in windows if w]
    if len(windows) < 2:
        raise traj.DataError("need at least two scenes with complete windows")
    n_train = min(n_train, len(windows) - 1)
    n_fit = n_train - validation_scenarios
    if n_fit < 1:
        raise traj.DataError(f"validation split of {validation_scenarios} leaves no training scenes")
    stats = traj.fit_normalize([w for ws in windows[:n_fit] for w in ws])
    xs, ys = [], []
    for ws in windows:
        x, y, _ = traj.stack_windows(traj.apply_normalize(ws, stats))
        xs.append(x)
        ys.append(y)
    return TrafficData(
        xs[:n_fit], ys[:n_fit], xs[n_train:], ys[n_train:], stats, xs[n_fit:n_train], ys[n_fit:n_train]
    )


class TrajectorySource:
    """Per-axis windows from lane-change scenes; one scene is one realization."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig):
        if model_cfg.x_dim != 2 * cfg.neighbor_slots:
            raise ConfigError(
                f"model x_dim {model_cfg.x_dim} must equal 2 * neighbor_slots = {2 * cfg.neighbor_slots}", ["x_dim"]
            )
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.axis = traj.AXES.index(cfg.axis)
        self.data = load_traffic(
            cfg.scenarios, cfg.train_scenarios, cfg.traffic_seed, model_cfg.window, cfg.neighbor_slots,
            cfg.frame_rate, cfg.trajectory_csv, cfg.validation_scenarios,
        )

    def _inputs(self, x: np.ndarray) -> np.ndarray:
        return x if self.model_cfg.sequential else x[..., -1, :]

    def make_batch(self, xs, ys, m: int) -> ContextTargetBatch:
        n = min(len(x) for x in xs)
        x = np.stack([self._inputs(a[:n]) for a in xs])
        y = np.stack([b[:n, self.axis : self.axis + 1] for b in ys])
        m = min(m, n - 1)
        return ContextTargetBatch(x[:, :m], y[:, :m], x, y)

    def training_batch(self, rng) -> ContextTargetBatch:
        c = self.cfg
        idx = rng.choice(len(self.data.train_x), size=min(c.batch_size, len(self.data.train_x)), replace=False)
        m = int(rng.integers(c.context_min, c.context_max + 1))
        return self.make_batch([self.data.train_x[i] for i in idx], [self.data.train_y[i] for i in idx], m)

    def eval_set(self) -> List[ContextTargetBatch]:
        d = self.data
        return [self.make_batch([x], [y], self.cfg.context_windows) for x, y in zip(d.test_x, d.test_y)]

    def validation_set(self) -> List[ContextTargetBatch]:
        d = self.data
        if not d.val_x:
            raise ConfigError("select_best needs validation_scenarios > 0", ["validation_scenarios"])
        return [self.make_batch([x], [y], self.cfg.context_windows) for x, y in zip(d.val_x, d.val_y)]

    def train_eval_set(self) -> List[ContextTargetBatch]:
        d = self.data
        return [self.make_batch([x], [y], self.cfg.context_windows) for x, y in zip(d.train_x, d.train_y)]


def make_source(model_cfg: ModelConfig, cfg: TrainConfig):
    return SyntheticSource(model_cfg, cfg) if cfg.dataset == "synthetic" else TrajectorySource(model_cfg, cfg)


# ---------------------------------------------------------------------------
# evaluation


def log_mean_exp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    mx = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(mx, axis) + np.log(np.mean(np.exp(a - mx), axis=axis))


def evaluate_nll(model, eval_set: Sequence[ContextTargetBatch], n_z_samples: int = 8, seed: int = 0) -> float:
    """Mean target NLL per output dim with z ~ q(z|s_C).

    Per target, likelihoods are averaged over the z draws (log-mean-exp)
    before averaging over targets.
    """
    total, count = 0.0, 0
    for k, batch in enumerate(eval_set):
        pred = model.predict(batch, n_z_samples, "prior", seed=[seed, k])
        y = batch.y_target[None]
        lp = -(np.log(pred.sigma_samples) + (y - pred.mu_samples) ** 2 / (2 * pred.sigma_samples**2))
        lp = lp.sum(axis=-1) - 0.5 * np.log(2 * np.pi) * y.shape[-1]
        total += float(np.sum(log_mean_exp(lp, 0)))
        count += lp.shape[1] * lp.shape[2] * y.shape[-1]
    return -total / count


# ---------------------------------------------------------------------------
# training


@dataclass
class MetricRow:
    iteration: int
    nll: float
    elbo: float
    kl: float
    seconds: float = 0.0


@dataclass
class TrainResult:
    config: RunConfig
    model: Model
    metrics: List[MetricRow]
    trace: List[Tuple[float, float, float]]  # per-iteration (nll, elbo, kl) on the training batch
    checkpoints: Dict[int, bytes] = field(default_factory=dict)
    run_dir: Optional[Path] = None
    best_iteration: Optional[int] = None  # set when ``select_best`` restored earlier parameters

    @property
    def final_nll(self) -> float:
        return self.metrics[-1].nll


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, last_good: bytes):
        self.iteration = iteration
        self.last_good = last_good
        super().__init__(f"non-finite loss at iteration {iteration}")


def metrics_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "nll", "elbo", "kl"])
    for r in rows:
        w.writerow([r.iteration, repr(r.nll), repr(r.elbo), repr(r.kl)])
    return buf.getvalue()


def timing_csv(rows: Sequence[MetricRow]) -> str:
    return "iteration,seconds\n" + "".join(f"{r.iteration},{r.seconds:.3f}\n" for r in rows)


def train(run: RunConfig, run_dir=None, progress: bool = False) -> TrainResult:
    """Optimize -ELBO (or MSE for the LSTM baseline) deterministically from ``run``.

    Every randomness source derives from ``train.seed``: parameters from the
    seed itself, iteration ``t``'s batch and z noise from ``[seed, t]``.
    """
    cfg = run.train
    model = build_model(run.model, seed=cfg.seed)
    source = make_source(run.model, cfg)
    eval_set = source.eval_set()
    val_set = source.validation_set() if cfg.select_best else None
    best = (np.inf, None, None)  # (validation nll, iteration, params)
    exclude = set(getattr(model, "trainable_exclude", ()))
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    metrics: List[MetricRow] = []
    trace = []
    checkpoints: Dict[int, bytes] = {}
    last_good = checkpoint_bytes(model)
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        rng = np.random.default_rng([cfg.seed, it])
        batch = source.training_batch(rng)
        noise = model.noise(batch.batch_size, rng)
        tape = Tape()
        pv = model.params.bind(tape)
        terms = model.loss_terms(pv, tape, batch, noise)
        loss = float(terms["loss"].value)
        if not np.isfinite(loss):
            if run_dir is not None:
                (run_dir / "last_good.ckpt").write_bytes(last_good)
            raise TrainingAborted(it, last_good)
        gmap = backward(tape, terms["loss"])
        grads = {k: gmap[v] for k, v in pv.items() if k not in exclude}
        clip_by_global_norm(grads, cfg.grad_clip)
        opt.step(model.params, grads)
        trace.append((float(terms["nll"].value), float(terms["elbo"].value), float(terms["kl"].value)))
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            if hasattr(model, "fit_noise"):
                model.fit_noise(batch)
            nll = evaluate_nll(model, eval_set, cfg.eval_z_samples, seed=cfg.eval_seed)
            row = MetricRow(it, nll, trace[-1][1], trace[-1][2], time.perf_counter() - t0)
            metrics.append(row)
            if val_set is not None:
                val_nll = evaluate_nll(model, val_set, cfg.eval_z_samples, seed=cfg.eval_seed)
                if val_nll < best[0]:
                    best = (val_nll, it, model.params.copy())
            if progress:
                log.info("%s it=%d nll=%.4f elbo=%.4f kl=%.4f", run.label, it, row.nll, row.elbo, row.kl)
        if it in cfg.checkpoint_iterations or it == cfg.iterations:
            blob = checkpoint_bytes(model, {"iteration": it, "seed": cfg.seed})
            checkpoints[it] = blob
            if run_dir is not None:
                (run_dir / f"ckpt_{it:06d}.ckpt").write_bytes(blob)
        last_good = checkpoints.get(it) or last_good
    if best[2] is not None:
        for name, value in best[2].items():
            model.params[name] = value
    if hasattr(model, "fit_noise"):
        fit_lstm_noise(model, source)
    result = TrainResult(run, model, metrics, trace, checkpoints, run_dir, best[1] if val_set is not None else None)
    if run_dir is not None:
        write_run_artifacts(result)
    return result


def fit_lstm_noise(model, source) -> None:
    """Set the LSTM baseline's noise level from training-split residuals."""
    if isinstance(source, TrajectorySource):
        batches = source.train_eval_set()
        resid = np.concatenate([(model.predict(b).mean - b.y_target).reshape(-1, b.y_target.shape[-1]) for b in batches])
        rmse = np.sqrt(np.mean(resid**2, axis=0))
        model.params["obs.log_sigma"] = np.log(np.maximum(rmse, model.config.sigma_floor))


def write_run_artifacts(result: TrainResult) -> None:
    d = result.run_dir
    (d / "metrics.csv").write_text(metrics_csv(result.metrics))
    (d / "timing.csv").write_text(timing_csv(result.metrics))
    (d / "checkpoint.ckpt").write_bytes(checkpoint_bytes(result.model, {"iteration": result.config.train.iterations, "seed": result.config.train.seed}))


def write_manifest(run_dir, run: RunConfig, extra: Optional[dict] = None) -> Path:
    manifest = {
        "tool": "ranp",
        "version": __version__,
        "config": run.to_sections(),
        "seed": run.train.seed,
        "digest": run.digest(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": sorted(p.name for p in Path(run_dir).iterdir() if p.name != "manifest.json"),
    }
    manifest.update(extra or {})
    path = Path(run_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> RunConfig:
    data = json.loads(Path(path).read_text())
    return run_config_from_sections(data["config"])


def run_dir_for(root, run: RunConfig) -> Path:
    return Path(root) / f"{run.digest()}-s{run.train.seed}"


# ---------------------------------------------------------------------------
# comparison and qualitative dumps


def compare_variants(runs: Sequence[RunConfig], root=None) -> dict:
    """Train each run and rank by final target NLL on the shared eval set."""
    if len(runs) < 2:
        raise ConfigError("compare_variants needs at least two configs")
    sources = {(r.train.dataset, r.train.eval_seed, r.train.eval_batches) for r in runs}
    if len(sources) != 1:
        raise ConfigError("compared runs must share dataset source and eval seed", ["dataset", "eval_seed"])
    rows = []
    for run in runs:
        entry = {"name": run.label, "seed": run.train.seed, "status": "ok"}
        try:
            rd = run_dir_for(root, run) if root is not None else None
            res = train(run, rd)
            if rd is not None:
                write_manifest(rd, run)
            entry["final_nll"] = res.final_nll
            entry["curve"] = [[m.iteration, m.nll] for m in res.metrics]
        except (TrainingAborted, FloatingPointError) as exc:
            entry.update(status="failed", error=str(exc), final_nll=None, curve=[])
        rows.append(entry)
    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: r["final_nll"])
    if len(ok) >= 2 and ok[0]["final_nll"] == ok[1]["final_nll"]:
        verdict = "tie"
    else:
        verdict = ok[0]["name"] if ok else "none"
    return {"variants": rows, "ordering": [r["name"] for r in ok], "verdict": verdict}


QUALITATIVE_COLUMNS = ("x", "y_true", "is_context", "pred_mu", "pred_sigma")


def qualitative_realization(eval_seed: int, n_context: int = 20) -> RealizationBatch:
    rng = np.random.default_rng([eval_seed, 99])
    r = make_realization(rng)
    c, t = split_context_target(r.x.size, rng, ContextPolicy("prefix", n_context))
    return RealizationBatch([r], c[None], t[None])


def qualitative_prediction(model, rb: RealizationBatch, n_z_samples: int = 8, seed: int = 0):
    cfg = model.config
    batch = rb.to_batch(cfg.window if cfg.sequential else None)
    return model.predict(batch, n_z_samples, "prior", seed=seed)


def dump_qualitative(
    checkpoints: Dict[int, object], rb: RealizationBatch, iterations: Sequence[int], out_dir, n_z_samples: int = 8, seed: int = 0
) -> Dict[int, Optional[Path]]:
    """Write one CSV per requested iteration; missing checkpoints map to None.

    ``checkpoints`` maps iteration to a checkpoint path or raw checkpoint bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: Dict[int, Optional[Path]] = {}
    r = rb.realizations[0]
    ctx = set(int(i) for i in rb.context_idx[0])
    for it in iterations:
        src = checkpoints.get(it)
        if src is None:
            written[it] = None
            continue
        model = load_checkpoint(src)
        pred = qualitative_prediction(model, rb, n_z_samples, seed)
        mu, sd = pred.mean[0, :, 0], pred.std[0, :, 0]
        path = out_dir / f"qualitative_{it:06d}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(QUALITATIVE_COLUMNS)
            for i in range(r.x.size):
                w.writerow([repr(float(r.x[i])), repr(float(r.y[i])), int(i in ctx), repr(float(mu[i])), repr(float(sd[i]))])
        written[it] = path
    return written


def read_qualitative_csv(path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in QUALITATIVE_COLUMNS}
