"""NP, ANP and ANP-RNN assembly, the ELBO objective, and predictive sampling.

All tensors carry a leading realization axis ``B``. Inputs are
``(B, n, d_x)`` for NP/ANP and ``(B, n, L, d_x)`` windows for ANP_RNN, whose
LSTM maps each window to a row of ``H``. The plain LSTM regressor used as a
trajectory baseline lives here too since it shares the checkpoint format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ParamStore, ShapeError, Tape, Var
from .config import ConfigError, format_value, from_kv, to_kv
from .layers import (
    ATTENTION_KINDS,
    MlpConfig,
    attend,
    init_lstm,
    init_mlp,
    init_multihead,
    lstm_encode,
    mlp_forward,
    self_attend,
)

MODEL_KINDS = ("NP", "ANP", "ANP_RNN", "LSTM")
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "ANP_RNN"
    attention: str = "multihead"
    self_attention: str = "none"
    x_dim: int = 1
    y_dim: int = 1
    hidden: int = 64
    n_hidden: int = 2
    r_dim: int = 64
    z_dim: int = 64
    lstm_dim: int = 64
    window: int = 5
    heads: int = 8
    laplace_scale: float = 1.0
    activation: str = "tanh"
    sigma_floor: float = 0.01

    def __post_init__(self):
        bad = []
        if self.kind not in MODEL_KINDS:
            bad.append("kind")
        if self.attention not in ATTENTION_KINDS:
            bad.append("attention")
        if self.self_attention != "none" and self.self_attention not in ATTENTION_KINDS:
            bad.append("self_attention")
        for k in ("x_dim", "y_dim", "hidden", "r_dim", "z_dim", "lstm_dim", "window", "heads"):
            if getattr(self, k) < 1:
                bad.append(k)
        if self.n_hidden < 0:
            bad.append("n_hidden")
        if not 0 < self.sigma_floor < 1:
            bad.append("sigma_floor")
        if self.laplace_scale <= 0:
            bad.append("laplace_scale")
        if "multihead" in (self.attention, self.self_attention) and (
            self.r_dim % self.heads or self.hidden % self.heads
        ):
            bad.append("heads")
        if bad:
            raise ConfigError(f"invalid model config keys: {', '.join(bad)}", bad)

    @property
    def cross_attention(self) -> str:
        return "uniform" if self.kind == "NP" else self.attention

    @property
    def sequential(self) -> bool:
        return self.kind in ("ANP_RNN", "LSTM")

    @property
    def feature_dim(self) -> int:
        return self.lstm_dim if self.sequential else self.x_dim

    def mlp(self, d_in: int, d_out: int) -> MlpConfig:
        return MlpConfig((d_in,) + (self.hidden,) * self.n_hidden + (d_out,), self.activation)


class Gaussian(NamedTuple):
    """Factorized Gaussian; fields are tape variables or plain arrays."""

    mu: Union[Var, np.ndarray]
    sigma: Union[Var, np.ndarray]


@dataclass
class ContextTargetBatch:
    x_context: np.ndarray
    y_context: np.ndarray
    x_target: np.ndarray
    y_target: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x_context = np.asarray(self.x_context, dtype=np.float64)
        self.y_context = np.asarray(self.y_context, dtype=np.float64)
        self.x_target = np.asarray(self.x_target, dtype=np.float64)
        if self.y_target is not None:
            self.y_target = np.asarray(self.y_target, dtype=np.float64)
        if self.y_context.ndim != 3:
            raise ShapeError("batch", [self.y_context.shape], "y_context must be (B, n_c, d_y)")
        b, n_c, _ = self.y_context.shape
        if n_c < 1:
            raise ContractError("batch: empty context set")
        if self.x_context.shape[:2] != (b, n_c):
            raise ShapeError("batch", [self.x_context.shape, self.y_context.shape], "context counts differ")
        if self.x_target.shape[0] != b or self.x_target.shape[1] < 1:
            raise ShapeError("batch", [self.x_target.shape], "targets must be (B, n_t>=1, ...)")
        if self.x_target.shape[2:] != self.x_context.shape[2:]:
            raise ShapeError("batch", [self.x_context.shape, self.x_target.shape], "input shapes differ")
        if self.y_target is not None and self.y_target.shape[:2] != self.x_target.shape[:2]:
            raise ShapeError("batch", [self.x_target.shape, self.y_target.shape], "target counts differ")

    @property
    def n_context(self) -> int:
        return self.x_context.shape[1]

    @property
    def n_target(self) -> int:
        return self.x_target.shape[1]

    @property
    def batch_size(self) -> int:
        return self.x_context.shape[0]

    def take(self, idx) -> "ContextTargetBatch":
        """Sub-batch of the realizations in ``idx``."""
        idx = np.atleast_1d(idx)
        yt = None if self.y_target is None else self.y_target[idx]
        return ContextTargetBatch(self.x_context[idx], self.y_context[idx], self.x_target[idx], yt)


# ---------------------------------------------------------------------------
# closed-form pieces shared by the tape and numpy paths


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def kl_diag_gaussians(q: Gaussian, p: Gaussian):
    """KL(q || p) summed over the last axis."""
    if _is_var(*q, *p):
        log, square = ad.log, ad.square
        total = lambda t: t.sum(axis=-1)
    else:
        log, square = np.log, np.square
        total = lambda t: np.sum(t, axis=-1)
    terms = log(p.sigma / q.sigma) + (square(q.sigma) + square(q.mu - p.mu)) / (square(p.sigma) * 2.0) - 0.5
    return total(terms)


def gaussian_nll(pred: Gaussian, y):
    """Per-point and mean negative log-likelihood of ``y`` under ``pred``."""
    if _is_var(*pred):
        y_ = y if isinstance(y, Var) else pred.mu.tape.const(y)
        per = ad.log(pred.sigma) + ad.square(y_ - pred.mu) / (ad.square(pred.sigma) * 2.0) + HALF_LOG_2PI
        return per, per.mean()
    per = np.log(pred.sigma) + np.square(y - pred.mu) / (2.0 * np.square(pred.sigma)) + HALF_LOG_2PI
    return per, float(np.mean(per))


def sample_z(params: Gaussian, noise):
    """Reparameterized draw ``mu + sigma * noise``."""
    return params.mu + params.sigma * noise


# ---------------------------------------------------------------------------
# models


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    if cfg.sequential:
        init_lstm(store, "lstm", cfg.x_dim, cfg.lstm_dim, rng)
    d_in = cfg.feature_dim
    if cfg.kind == "LSTM":
        init_mlp(store, "head", cfg.mlp(d_in, cfg.y_dim), rng)
        store.add("obs.log_sigma", np.zeros(cfg.y_dim))
        return store
    pair = d_in + cfg.y_dim
    init_mlp(store, "lat.enc", cfg.mlp(pair, cfg.hidden), rng)
    if cfg.self_attention == "multihead":
        init_multihead(store, "lat.sa", cfg.hidden, cfg.hidden, cfg.hidden, cfg.hidden, cfg.hidden, rng, cfg.heads)
    init_mlp(store, "lat.head", MlpConfig((cfg.hidden, cfg.hidden, 2 * cfg.z_dim), cfg.activation), rng)
    init_mlp(store, "det.enc", cfg.mlp(pair, cfg.r_dim), rng)
    if cfg.self_attention == "multihead":
        init_multihead(store, "det.sa", cfg.r_dim, cfg.r_dim, cfg.r_dim, cfg.r_dim, cfg.r_dim, rng, cfg.heads)
    if cfg.cross_attention in ("dotproduct", "multihead"):
        init_mlp(store, "qk", MlpConfig((d_in, cfg.hidden, cfg.hidden), cfg.activation), rng)
    if cfg.cross_attention == "multihead":
        init_multihead(store, "cross", cfg.hidden, cfg.hidden, cfg.r_dim, cfg.r_dim, cfg.r_dim, rng, cfg.heads)
    init_mlp(store, "dec", cfg.mlp(d_in + cfg.r_dim + cfg.z_dim, 2 * cfg.y_dim), rng)
    return store


def _const(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


class NeuralProcess:
    """NP / ANP / ANP_RNN over a :class:`ParamStore`.

    Methods taking ``pv`` operate on parameters bound to a tape and return tape
    variables; :meth:`elbo` and :meth:`predict` are the array-level API.
    """

    def __init__(self, config: ModelConfig, params: Optional[ParamStore] = None, seed: int = 0):
        if config.kind not in ("NP", "ANP", "ANP_RNN"):
            raise ContractError(f"NeuralProcess cannot build kind {config.kind!r}")
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    # -- tape-level components -------------------------------------------

    def transform_inputs(self, pv, x: Var) -> Var:
        cfg = self.config
        if cfg.kind != "ANP_RNN":
            raise ContractError(f"transform_inputs is only defined for ANP_RNN, not {cfg.kind}")
        if x.ndim != 4 or x.shape[2] != cfg.window or x.shape[3] != cfg.x_dim:
            raise ShapeError("transform_inputs", [x.shape], f"expected (B, n, {cfg.window}, {cfg.x_dim})")
        b, n = x.shape[:2]
        h = lstm_encode(pv, "lstm", x.reshape(b * n, cfg.window, cfg.x_dim))
        return h.reshape(b, n, cfg.lstm_dim)

    def _features(self, pv, x: Var) -> Var:
        if self.config.kind == "ANP_RNN":
            return self.transform_inputs(pv, x)
        if x.ndim != 3 or x.shape[-1] != self.config.x_dim:
            raise ShapeError("inputs", [x.shape], f"expected (B, n, {self.config.x_dim})")
        return x

    def _pair_embed(self, pv, prefix: str, sa_prefix: str, d_out: int, x: Var, y: Var) -> Var:
        cfg = self.config
        if x.shape[-2] < 1:
            raise ContractError("encoder: empty set")
        if x.shape[:-1] != y.shape[:-1]:
            raise ShapeError("encoder", [x.shape, y.shape], "row counts of inputs and outputs differ")
        emb = mlp_forward(pv, prefix, cfg.mlp(cfg.feature_dim + cfg.y_dim, d_out), ad.concat([x, y], axis=-1))
        if cfg.self_attention != "none":
            emb = self_attend(cfg.self_attention, emb, pv, sa_prefix, cfg.laplace_scale, cfg.heads)
        return emb

    def encode_latent(self, pv, h: Var, y: Var) -> Gaussian:
        """q(z | set): embed pairs, mean-pool, then map to (mu, sigma)."""
        cfg = self.config
        emb = self._pair_embed(pv, "lat.enc", "lat.sa", cfg.hidden, h, _const(h.tape, y))
        pooled = emb.mean(axis=-2)
        out = mlp_forward(pv, "lat.head", MlpConfig((cfg.hidden, cfg.hidden, 2 * cfg.z_dim), cfg.activation), pooled)
        mu = out[..., : cfg.z_dim]
        floor = cfg.sigma_floor
        sigma = ad.sigmoid(out[..., cfg.z_dim :]) * (1.0 - floor) + floor
        return Gaussian(mu, sigma)

    def encode_deterministic(self, pv, h_c: Var, y_c, h_t: Var) -> Var:
        cfg = self.config
        r_i = self._pair_embed(pv, "det.enc", "det.sa", cfg.r_dim, h_c, _const(h_c.tape, y_c))
        kind = cfg.cross_attention
        if kind in ("uniform", "laplace"):
            return attend(kind, h_t, h_c, r_i, scale=cfg.laplace_scale)
        qk = MlpConfig((cfg.feature_dim, cfg.hidden, cfg.hidden), cfg.activation)
        q = mlp_forward(pv, "qk", qk, h_t)
        k = mlp_forward(pv, "qk", qk, h_c)
        return attend(kind, q, k, r_i, pv, "cross", cfg.laplace_scale, cfg.heads)

    def decode(self, pv, h_t: Var, r: Var, z: Var) -> Gaussian:
        cfg = self.config
        b, n = h_t.shape[:2]
        if r.shape[:2] != (b, n) or z.shape[-1] != cfg.z_dim:
            raise ShapeError("decode", [h_t.shape, r.shape, z.shape])
        z_rows = ad.broadcast(z.reshape(b, 1, cfg.z_dim), (b, n, cfg.z_dim))
        out = mlp_forward(
            pv, "dec", cfg.mlp(cfg.feature_dim + cfg.r_dim + cfg.z_dim, 2 * cfg.y_dim), ad.concat([h_t, r, z_rows], axis=-1)
        )
        mu = out[..., : cfg.y_dim]
        sigma = ad.softplus(out[..., cfg.y_dim :]) + cfg.sigma_floor
        return Gaussian(mu, sigma)

    def _encode_inputs(self, pv, tape: Tape, x_c, x_t) -> Tuple[Var, Var]:
        n_c = x_c.shape[1]
        if self.config.kind == "ANP_RNN":
            # one LSTM pass over contexts and targets together
            both = self.transform_inputs(pv, tape.const(np.concatenate([x_c, x_t], axis=1)))
            return both[:, :n_c, :], both[:, n_c:, :]
        return self._features(pv, tape.const(x_c)), self._features(pv, tape.const(x_t))

    def loss_terms(self, pv, tape: Tape, batch: ContextTargetBatch, noise: np.ndarray) -> Dict[str, Var]:
        """ELBO pieces on the tape: z ~ q(z|s_T) (one draw), loss = -elbo.

        ``kl`` is normalized per target output (KL / (n_t * d_y)) so it shares
        the scale of the mean log-likelihood.
        """
        if batch.y_target is None:
            raise ContractError("elbo requires y_target")
        h_c, h_t = self._encode_inputs(pv, tape, batch.x_context, batch.x_target)
        q_c = self.encode_latent(pv, h_c, batch.y_context)
        q_t = self.encode_latent(pv, h_t, batch.y_target)
        z = sample_z(q_t, tape.const(noise))
        r = self.encode_deterministic(pv, h_c, batch.y_context, h_t)
        pred = self.decode(pv, h_t, r, z)
        _, nll = gaussian_nll(pred, batch.y_target)
        kl = kl_diag_gaussians(q_t, q_c).mean() * (1.0 / (batch.n_target * self.config.y_dim))
        loss = nll + kl
        return {"loss": loss, "nll": nll, "kl": kl, "elbo": -loss}

    def noise(self, batch_size: int, seed) -> np.ndarray:
        return np.random.default_rng(seed).standard_normal((batch_size, self.config.z_dim))

    def loss_fn(self, batch: ContextTargetBatch, noise: np.ndarray):
        """Closure ``(tape, pv) -> loss`` for gradient checks and training."""
        return lambda tape, pv: self.loss_terms(pv, tape, batch, noise)["loss"]

    def elbo(self, batch: ContextTargetBatch, seed=0) -> Tuple[float, float, float]:
        """Return ``(elbo, nll_term, kl_term)`` for one reparameterized z draw."""
        tape = Tape()
        terms = self.loss_terms(self.params.bind(tape), tape, batch, self.noise(batch.batch_size, seed))
        return float(terms["elbo"].value), float(terms["nll"].value), float(terms["kl"].value)

    def predict(
        self,
        batch: ContextTargetBatch,
        n_z_samples: int = 1,
        mode: str = "prior",
        seed=0,
        noise: Optional[np.ndarray] = None,
    ) -> "Prediction":
        """Predictive distribution at ``batch.x_target`` given the contexts.

        ``mode='prior'`` draws z from q(z|s_C); ``'mean-z'`` fixes z at its mean.
        ``noise`` (shape ``(S, B, d_z)``) overrides the seeded draws.
        """
        if n_z_samples < 1:
            raise ContractError("predict: n_z_samples must be >= 1")
        if mode not in ("prior", "mean-z"):
            raise ContractError(f"predict: unknown mode {mode!r}")
        tape = Tape()
        pv = self.params.bind(tape)
        h_c, h_t = self._encode_inputs(pv, tape, batch.x_context, batch.x_target)
        q_c = self.encode_latent(pv, h_c, batch.y_context)
        r = self.encode_deterministic(pv, h_c, batch.y_context, h_t)
        b = batch.batch_size
        if noise is None:
            noise = np.random.default_rng(seed).standard_normal((n_z_samples, b, self.config.z_dim))
        mus, sigmas = [], []
        for s in range(n_z_samples):
            z = q_c.mu if mode == "mean-z" else sample_z(q_c, tape.const(noise[s]))
            pred = self.decode(pv, h_t, r, z)
            mus.append(pred.mu.value)
            sigmas.append(pred.sigma.value)
        return Prediction(np.stack(mus), np.stack(sigmas))


class LstmRegressor:
    """Plain LSTM point regressor: window -> LSTM -> MLP -> mean.

    Trained on squared error; ``obs.log_sigma`` is a homoscedastic noise
    level set from training residuals so the baseline can report an NLL.
    """

    trainable_exclude = ("obs.log_sigma",)

    def __init__(self, config: ModelConfig, params: Optional[ParamStore] = None, seed: int = 0):
        if config.kind != "LSTM":
            raise ContractError("LstmRegressor requires kind LSTM")
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def _mean(self, pv, x: Var) -> Var:
        cfg = self.config
        b, n = x.shape[:2]
        h = lstm_encode(pv, "lstm", x.reshape(b * n, cfg.window, cfg.x_dim)).reshape(b, n, cfg.lstm_dim)
        return mlp_forward(pv, "head", cfg.mlp(cfg.lstm_dim, cfg.y_dim), h)

    def loss_terms(self, pv, tape: Tape, batch: ContextTargetBatch, noise=None) -> Dict[str, Var]:
        if batch.y_target is None:
            raise ContractError("loss requires y_target")
        mu = self._mean(pv, tape.const(batch.x_target))
        mse = ad.square(mu - tape.const(batch.y_target)).mean()
        sigma = np.exp(self.params["obs.log_sigma"])
        nll = mse * float(0.5 / np.mean(sigma) ** 2) + float(np.mean(np.log(sigma)) + HALF_LOG_2PI)
        zero = tape.const(0.0)
        return {"loss": mse, "nll": nll, "kl": zero, "elbo": -nll}

    def noise(self, batch_size: int, seed) -> np.ndarray:
        return np.zeros((batch_size, 1))

    def loss_fn(self, batch, noise=None):
        return lambda tape, pv: self.loss_terms(pv, tape, batch)["loss"]

    def fit_noise(self, batch: ContextTargetBatch) -> None:
        pred = self.predict(batch)
        resid = pred.mean - batch.y_target
        rmse = np.sqrt(np.mean(resid**2, axis=(0, 1)))
        self.params["obs.log_sigma"] = np.log(np.maximum(rmse, self.config.sigma_floor))

    def predict(self, batch: ContextTargetBatch, n_z_samples: int = 1, mode: str = "prior", seed=0, noise=None):
        tape = Tape()
        mu = self._mean(self.params.bind(tape), tape.const(batch.x_target)).value
        sigma = np.broadcast_to(np.exp(self.params["obs.log_sigma"]), mu.shape)
        return Prediction(mu[None], np.array(sigma)[None])


@dataclass
class Prediction:
    """Per-z-sample decoder outputs ``(S, B, n, d_y)`` and their mixture moments."""

    mu_samples: np.ndarray
    sigma_samples: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.mu_samples.mean(axis=0)

    @property
    def variance(self) -> np.ndarray:
        # law of total variance over the equally weighted z samples
        second = np.mean(self.sigma_samples**2 + self.mu_samples**2, axis=0)
        return np.maximum(second - self.mean**2, 0.0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


Model = Union[NeuralProcess, LstmRegressor]


def build_model(config: ModelConfig, params: Optional[ParamStore] = None, seed: int = 0) -> Model:
    cls = LstmRegressor if config.kind == "LSTM" else NeuralProcess
    return cls(config, params, seed)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = "RANP-CHECKPOINT 1"


def checkpoint_bytes(model: Model, extra: Optional[Dict[str, str]] = None) -> bytes:
    lines = [_CKPT_MAGIC]
    for k, v in to_kv(model.config).items():
        lines.append(f"{k} = {v}")
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k} = {format_value(v)}")
    lines.append("END")
    return ("\n".join(lines) + "\n").encode("utf-8") + model.params.to_bytes()


def save_checkpoint(path, model: Model, extra: Optional[Dict[str, str]] = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, extra))
    return path


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> Tuple[ModelConfig, Dict[str, str], ParamStore]:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def parse_checkpoint(data: bytes, path: str = "<bytes>") -> Tuple[ModelConfig, Dict[str, str], ParamStore]:
    marker = b"\nEND\n"
    end = data.find(marker)
    if not data.startswith(_CKPT_MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = data[:end].decode("utf-8").splitlines()[1:]
    cfg_kv, meta = {}, {}
    for line in header:
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            cfg_kv[key] = value
    try:
        config = from_kv(ModelConfig, cfg_kv)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: bad config header: {exc}") from None
    params = ParamStore.from_bytes(data[end + len(marker) :])
    expected = init_params(config, 0)
    if expected.names() != params.names() or any(expected[k].shape != params[k].shape for k in params):
        raise CheckpointError(f"{path}: parameters do not match the config header")
    return config, meta, params


def load_checkpoint(path) -> Model:
    """Model from a checkpoint path or raw checkpoint bytes."""
    if isinstance(path, (bytes, bytearray)):
        config, _, params = parse_checkpoint(bytes(path))
    else:
        config, _, params = read_checkpoint(path)
    return build_model(config, params)


def small_config(kind: str, attention: str = "multihead", **kw) -> ModelConfig:
    """Narrow widths for finite-difference checks (8 heads of width 1)."""
    base = dict(hidden=8, r_dim=8, z_dim=8, lstm_dim=8, window=3, n_hidden=1)
    base.update(kw)
    return ModelConfig(kind=kind, attention=attention, **base)


def with_kind(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)
