"""Conditional density models: Gaussian-mixture math, a mixture density network
trained by hand-rolled backprop, and a linear-Gaussian reference model.

Both the outcome density f(y | x, t) and the treatment density f(t | x)
(the generalized propensity score) are represented as conditional Gaussian
mixtures. Any object with a ``query``/``query_batch`` pair satisfying
:class:`DensityModel` can be plugged into the estimation pipeline, which is
how the simulation oracle substitutes for a trained network in tests.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.special import ndtr

from .core import (
    Dataset,
    FineTuneFailedError,
    FloatArray,
    TrainingDivergedError,
    ValidationError,
)

_SQRT_2PI = math.sqrt(2.0 * math.pi)
VARIANCE_FLOOR = 1e-6

EXTRACTOR_HIDDEN_CANDIDATES = (8, 16, 32, 64)
HEAD_HIDDEN_CANDIDATES = (16, 32, 64, 128)
LEARNING_RATE_GRID = tuple(round(k * 1e-4, 10) for k in range(1, 11))
COMPONENT_RANGE = (3, 30)


@dataclass(frozen=True)
class ConditionalGaussianMixture:
    """A K-component Gaussian mixture: simplex weights, means and positive variances."""

    weights: FloatArray
    means: FloatArray
    variances: FloatArray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if not (w.shape == mu.shape == var.shape) or w.ndim != 1 or w.size == 0:
            raise ValidationError("weights, means, variances must be equal-length vectors")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValidationError("weights must be nonnegative and sum to 1")
        if np.any(var <= 0):
            raise ValidationError("variances must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def n_components(self) -> int:
        return self.weights.size


def mixture_pdf(m: ConditionalGaussianMixture, v) -> float | FloatArray:
    """Density of the mixture at ``v`` (scalar or vector)."""
    v_arr = np.asarray(v, dtype=np.float64)
    z = (v_arr[..., None] - m.means) / np.sqrt(m.variances)
    comp = np.exp(-0.5 * z * z) / (_SQRT_2PI * np.sqrt(m.variances))
    out = comp @ m.weights
    return float(out) if np.isscalar(v) or v_arr.ndim == 0 else out


def mixture_cdf(m: ConditionalGaussianMixture, v) -> float | FloatArray:
    """Distribution function of the mixture at ``v``; nondecreasing in v."""
    v_arr = np.asarray(v, dtype=np.float64)
    z = (v_arr[..., None] - m.means) / np.sqrt(m.variances)
    out = ndtr(z) @ m.weights
    return float(out) if np.isscalar(v) or v_arr.ndim == 0 else out


def mixture_mean(m: ConditionalGaussianMixture) -> float:
    """First moment: the weight-weighted sum of component means."""
    return float(m.weights @ m.means)


@runtime_checkable
class DensityModel(Protocol):
    """Contract shared by trained networks, the linear model and simulation oracles.

    ``query`` returns the conditional mixture at one point; outcome models
    take (x, t), treatment-density models take x alone (t is None).
    ``query_batch`` returns stacked (weights, means, variances) arrays of
    shape (n, K). ``refit`` returns a model updated on a resample without
    mutating the original; a cap of 0 epochs must return the model unchanged.
    """

    def query(self, x: FloatArray, t: float | None = None) -> ConditionalGaussianMixture: ...

    def query_batch(
        self, x: FloatArray, t: FloatArray | None = None
    ) -> tuple[FloatArray, FloatArray, FloatArray]: ...

    def refit(self, data: Dataset, epochs_cap: int) -> "DensityModel": ...


def model_mean_batch(model: DensityModel, x: FloatArray, t: FloatArray | None = None) -> FloatArray:
    """Conditional means at many query points in one forward pass."""
    w, mu, _ = model.query_batch(x, t)
    return np.sum(w * mu, axis=1)


def model_pdf_batch(
    model: DensityModel, x: FloatArray, v: FloatArray, t: FloatArray | None = None
) -> FloatArray:
    """Conditional density at one point ``v_i`` per row; used for propensity values."""
    w, mu, var = model.query_batch(x, t)
    v = np.asarray(v, dtype=np.float64)
    z = (v[:, None] - mu) / np.sqrt(var)
    comp = np.exp(-0.5 * z * z) / (_SQRT_2PI * np.sqrt(var))
    return np.einsum("nk,nk->n", comp, w)


@dataclass(frozen=True)
class MdnConfig:
    """Hyperparameters of the mixture density network.

    ``extractor_hidden`` are the two feature-extractor layer widths,
    ``head_hidden`` the two density-head widths, ``n_components`` the number
    of Gaussian components. The activation slope, dropout rate and early
    stopping patience are fixed; the rest is fine-tunable.
    """

    extractor_hidden: tuple[int, int] = (32, 32)
    head_hidden: tuple[int, int] = (64, 64)
    n_components: int = 10
    learning_rate: float = 5e-4
    leaky_slope: float = 0.04
    dropout_p: float = 0.04
    patience_epochs: int = 5
    max_epochs: int = 500
    batch_size_cap: int = 2048
    valid_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if len(self.extractor_hidden) != 2 or len(self.head_hidden) != 2:
            raise ValidationError("hidden sizes must be pairs")
        sizes = tuple(self.extractor_hidden) + tuple(self.head_hidden)
        if any(int(s) <= 0 for s in sizes):
            raise ValidationError("hidden sizes must be positive")
        if not (COMPONENT_RANGE[0] <= self.n_components <= COMPONENT_RANGE[1]):
            raise ValidationError(
                f"n_components must lie in {COMPONENT_RANGE}, got {self.n_components}"
            )
        if not (1e-4 - 1e-12 <= self.learning_rate <= 1e-3 + 1e-12):
            raise ValidationError("learning_rate must lie in [1e-4, 1e-3]")
        if self.max_epochs <= 0:
            raise ValidationError("max_epochs must be positive")
        if not (0.0 < self.valid_fraction < 0.5):
            raise ValidationError("valid_fraction must lie in (0, 0.5)")


@dataclass(frozen=True)
class TrainReport:
    epochs_run: int
    final_train_nll: float
    final_valid_nll: float


def _softplus(s: FloatArray) -> FloatArray:
    return np.logaddexp(0.0, s)


def _log_softmax(z: FloatArray) -> FloatArray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class MixtureDensityNetwork:
    """Conditional Gaussian mixture parameterized by a small dense network.

    Architecture: two feature-extractor layers and two head layers, each
    linear + leaky ReLU + dropout, feeding three parallel linear layers that
    emit component logits, means and raw variances. Variances go through a
    softplus map plus a small floor so they stay strictly positive. The
    network is trained by minimizing the mixture negative log-likelihood
    with Adam; gradients are computed in closed form for this fixed graph,
    which keeps training deterministic for a fixed seed (single-threaded).
    """

    def __init__(self, in_dim: int, config: MdnConfig):
        self.in_dim = int(in_dim)
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        e1, e2 = config.extractor_hidden
        h1, h2 = config.head_hidden
        k = config.n_components
        dims = [self.in_dim, e1, e2, h1, h2]
        self.weights: list[FloatArray] = []
        self.biases: list[FloatArray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = math.sqrt(2.0 / fan_in)
            self.weights.append(self._rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        # zero head weights: the network starts as an input-independent mixture
        # and only adds conditional structure the likelihood asks for; the
        # component symmetry is broken by the data-quantile bias init in fit()
        self.w_pi = np.zeros((h2, k))
        self.b_pi = np.zeros(k)
        self.w_mu = np.zeros((h2, k))
        self.b_mu = self._rng.normal(0.0, 0.5, size=k)
        self.w_var = np.zeros((h2, k))
        # start component variances near 1 (softplus(0.5413) ~ 1) for standardized targets
        self.b_var = np.full(k, 0.5413)
        self._adam_state = None
        self._data_initialized = False

    # ---- parameter plumbing -------------------------------------------------

    def _params(self) -> list[FloatArray]:
        return [
            *self.weights,
            *self.biases,
            self.w_pi,
            self.b_pi,
            self.w_mu,
            self.b_mu,
            self.w_var,
            self.b_var,
        ]

    def _set_params(self, params: list[FloatArray]) -> None:
        n_layers = len(self.weights)
        self.weights = [p.copy() for p in params[:n_layers]]
        self.biases = [p.copy() for p in params[n_layers : 2 * n_layers]]
        (self.w_pi, self.b_pi, self.w_mu, self.b_mu, self.w_var, self.b_var) = [
            p.copy() for p in params[2 * n_layers :]
        ]

    def clone(self) -> "MixtureDensityNetwork":
        """Independent copy sharing nothing with the original."""
        other = copy.deepcopy(self)
        return other

    # ---- forward / backward -------------------------------------------------

    def _forward(self, inputs: FloatArray, train_rng=None):
        """Run the trunk; returns head arrays and, when training, the backprop cache."""
        acts = [inputs]
        masks = []
        slope = self.config.leaky_slope
        keep = 1.0 - self.config.dropout_p
        h = inputs
        for w, b in zip(self.weights, self.biases):
            pre = h @ w + b
            h = np.where(pre > 0, pre, slope * pre)
            if train_rng is not None and self.config.dropout_p > 0:
                mask = (train_rng.random(h.shape) < keep) / keep
                h = h * mask
            else:
                mask = None
            masks.append(mask)
            acts.append(pre)
        z_pi = h @ self.w_pi + self.b_pi
        z_mu = h @ self.w_mu + self.b_mu
        z_var = h @ self.w_var + self.b_var
        return h, z_pi, z_mu, z_var, acts, masks

    def _mixture_params(self, z_pi, z_mu, z_var):
        log_pi = _log_softmax(z_pi)
        var = _softplus(z_var) + VARIANCE_FLOOR
        return log_pi, z_mu, var

    @staticmethod
    def _nll_terms(y: FloatArray, log_pi, mu, var):
        # overflow here is a divergence signal handled by the caller, not a bug
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            diff = y[:, None] - mu
            log_comp = -0.5 * diff * diff / var - 0.5 * np.log(2.0 * math.pi * var)
            log_joint = log_pi + log_comp
            m = log_joint.max(axis=1, keepdims=True)
            lse = m[:, 0] + np.log(np.exp(log_joint - m).sum(axis=1))
            resp = np.exp(log_joint - lse[:, None])
        return -lse, resp, diff

    def _loss_and_grads(self, inputs: FloatArray, y: FloatArray, train_rng):
        n = inputs.shape[0]
        h, z_pi, z_mu, z_var, acts, masks = self._forward(inputs, train_rng)
        log_pi, mu, var = self._mixture_params(z_pi, z_mu, z_var)
        nll, resp, diff = self._nll_terms(y, log_pi, mu, var)
        loss = float(nll.mean())
        if not np.isfinite(loss):
            return loss, None

        pi = np.exp(log_pi)
        d_z_pi = (pi - resp) / n
        d_mu = -resp * diff / var / n
        d_var_raw = -resp * (diff * diff - var) / (2.0 * var * var) / n
        d_z_var = d_var_raw * _sigmoid(z_var)

        grads = {}
        grads["w_pi"] = h.T @ d_z_pi
        grads["b_pi"] = d_z_pi.sum(axis=0)
        grads["w_mu"] = h.T @ d_mu
        grads["b_mu"] = d_mu.sum(axis=0)
        grads["w_var"] = h.T @ d_z_var
        grads["b_var"] = d_z_var.sum(axis=0)

        d_h = d_z_pi @ self.w_pi.T + d_mu @ self.w_mu.T + d_z_var @ self.w_var.T
        slope = self.config.leaky_slope
        grads["weights"] = [None] * len(self.weights)
        grads["biases"] = [None] * len(self.biases)
        for li in reversed(range(len(self.weights))):
            pre = acts[li + 1]
            if masks[li] is not None:
                d_h = d_h * masks[li]
            d_pre = d_h * np.where(pre > 0, 1.0, slope)
            layer_in = acts[li] if li == 0 else self._post_activation(acts[li], masks[li - 1])
            grads["weights"][li] = layer_in.T @ d_pre
            grads["biases"][li] = d_pre.sum(axis=0)
            d_h = d_pre @ self.weights[li].T
        return loss, grads

    def _post_activation(self, pre: FloatArray, mask) -> FloatArray:
        out = np.where(pre > 0, pre, self.config.leaky_slope * pre)
        if mask is not None:
            out = out * mask
        return out

    def _adam_step(self, grads) -> None:
        flat_grads = [
            *grads["weights"],
            *grads["biases"],
            grads["w_pi"],
            grads["b_pi"],
            grads["w_mu"],
            grads["b_mu"],
            grads["w_var"],
            grads["b_var"],
        ]
        params = self._params()
        if self._adam_state is None:
            self._adam_state = {
                "step": 0,
                "m": [np.zeros_like(p) for p in params],
                "v": [np.zeros_like(p) for p in params],
            }
        st = self._adam_state
        st["step"] += 1
        lr = self.config.learning_rate
        b1, b2, eps = 0.9, 0.999, 1e-8
        bc1 = 1.0 - b1 ** st["step"]
        bc2 = 1.0 - b2 ** st["step"]
        new_params = []
        for p, g, m, v in zip(params, flat_grads, st["m"], st["v"]):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            new_params.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        self._set_params(new_params)

    # ---- training -----------------------------------------------------------

    def _dataset_nll(self, inputs: FloatArray, y: FloatArray) -> float:
        _, z_pi, z_mu, z_var, _, _ = self._forward(inputs, train_rng=None)
        log_pi, mu, var = self._mixture_params(z_pi, z_mu, z_var)
        nll, _, _ = self._nll_terms(y, log_pi, mu, var)
        return float(nll.mean())

    def fit(
        self,
        inputs: FloatArray,
        y: FloatArray,
        max_epochs: int | None = None,
        reset_optimizer: bool = True,
    ) -> TrainReport:
        """Train on (inputs, y) with early stopping on an internal validation split.

        Stops once the mean of the last 5 validation losses exceeds the mean
        of the 5 losses recorded 5 epochs earlier, then restores the
        parameters that achieved the best validation loss.
        """
        cfg = self.config
        n = inputs.shape[0]
        epochs = cfg.max_epochs if max_epochs is None else int(max_epochs)
        if epochs == 0:
            nll = self._dataset_nll(inputs, y)
            return TrainReport(0, nll, nll)
        perm = self._rng.permutation(n)
        n_valid = max(1, int(round(cfg.valid_fraction * n)))
        valid_idx, train_idx = perm[:n_valid], perm[n_valid:]
        if train_idx.size == 0:
            raise ValidationError("not enough rows for a train/validation split")
        return self._train_loop(
            inputs[train_idx],
            y[train_idx],
            inputs[valid_idx],
            y[valid_idx],
            epochs=epochs,
            reset_optimizer=reset_optimizer,
        )

    def _init_heads_from_target(self, y: FloatArray) -> None:
        """Seed component means at target quantiles and variances at the target spread."""
        k = self.config.n_components
        levels = (np.arange(k) + 0.5) / k
        self.b_mu = np.quantile(y, levels)
        spread = max(float(np.var(y)), 1e-2)
        # inverse softplus so the initial component variance equals the spread
        self.b_var = np.full(k, spread + np.log1p(-np.exp(-spread)))
        self._data_initialized = True

    def _train_loop(
        self,
        x_tr: FloatArray,
        y_tr: FloatArray,
        x_va: FloatArray,
        y_va: FloatArray,
        epochs: int,
        reset_optimizer: bool = True,
    ) -> TrainReport:
        cfg = self.config
        if reset_optimizer:
            self._adam_state = None
            if not self._data_initialized:
                self._init_heads_from_target(y_tr)
        batch = x_tr.shape[0] if x_tr.shape[0] <= cfg.batch_size_cap else 512
        patience = cfg.patience_epochs
        valid_hist: list[float] = []
        best_nll = np.inf
        best_params = None
        epochs_run = 0
        final_train = np.inf
        for epoch in range(1, epochs + 1):
            order = self._rng.permutation(x_tr.shape[0])
            for start in range(0, x_tr.shape[0], batch):
                sl = order[start : start + batch]
                loss, grads = self._loss_and_grads(x_tr[sl], y_tr[sl], self._rng)
                if grads is None:
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch}"
                    )
                self._adam_step(grads)
                final_train = loss
            v = self._dataset_nll(x_va, y_va)
            if not np.isfinite(v):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
            valid_hist.append(v)
            epochs_run = epoch
            if v < best_nll:
                best_nll = v
                best_params = [p.copy() for p in self._params()]
            if len(valid_hist) >= 2 * patience:
                recent = float(np.mean(valid_hist[-patience:]))
                earlier = float(np.mean(valid_hist[-2 * patience : -patience]))
                if recent > earlier:
                    break
        if best_params is not None:
            self._set_params(best_params)
        return TrainReport(epochs_run, final_train, best_nll)

    # ---- queries ------------------------------------------------------------

    def query_batch(self, x: FloatArray, t: FloatArray | None = None):
        inputs = _stack_inputs(x, t, self.in_dim)
        _, z_pi, z_mu, z_var, _, _ = self._forward(inputs, train_rng=None)
        log_pi, mu, var = self._mixture_params(z_pi, z_mu, z_var)
        return np.exp(log_pi), mu, var

    def query(self, x: FloatArray, t: float | None = None) -> ConditionalGaussianMixture:
        t_arr = None if t is None else np.array([float(t)])
        w, mu, var = self.query_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)), t_arr)
        return ConditionalGaussianMixture(w[0] / w[0].sum(), mu[0], var[0])

    def refit(self, data: Dataset, epochs_cap: int) -> "MixtureDensityNetwork":
        return warm_start_refit(self, data, epochs_cap)


def _sigmoid(z: FloatArray) -> FloatArray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _stack_inputs(x: FloatArray, t: FloatArray | None, expected_dim: int) -> FloatArray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if t is None:
        inputs = x
    else:
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(x.shape[0], float(t))
        inputs = np.column_stack([x, t])
    if inputs.shape[1] != expected_dim:
        raise ValidationError(
            f"model expects {expected_dim} input columns, got {inputs.shape[1]}"
        )
    return inputs


class _TargetKind:
    OUTCOME = "outcome"
    GPS = "gps"


def _training_arrays(data: Dataset, target: str) -> tuple[FloatArray, FloatArray, int]:
    if target == _TargetKind.OUTCOME:
        return np.column_stack([data.x, data.t]), data.y, data.p + 1
    if target == _TargetKind.GPS:
        return data.x, data.t, data.p
    raise ValidationError(f"unknown target kind {target!r}")


def fit_outcome_density(data: Dataset, config: MdnConfig) -> tuple[MixtureDensityNetwork, TrainReport]:
    """Fit the conditional outcome density f(y | x, t) by maximum likelihood."""
    if data.n < 20:
        raise ValidationError(f"need at least 20 rows to fit a density, got {data.n}")
    inputs, y, in_dim = _training_arrays(data, _TargetKind.OUTCOME)
    model = MixtureDensityNetwork(in_dim, config)
    report = model.fit(inputs, y)
    model._source_target = _TargetKind.OUTCOME
    return model, report


def fit_gps(data: Dataset, config: MdnConfig) -> tuple[MixtureDensityNetwork, TrainReport]:
    """Fit the treatment density f(t | x) with the same machinery (target = t)."""
    if data.n < 20:
        raise ValidationError(f"need at least 20 rows to fit a density, got {data.n}")
    inputs, y, in_dim = _training_arrays(data, _TargetKind.GPS)
    model = MixtureDensityNetwork(in_dim, config)
    report = model.fit(inputs, y)
    model._source_target = _TargetKind.GPS
    return model, report


def warm_start_refit(
    model: MixtureDensityNetwork, resample: Dataset, epochs_cap: int
) -> MixtureDensityNetwork:
    """Continue training a fitted network on a resample, starting from its weights.

    The source model is left untouched; a cap of 0 returns an identical copy.
    Used by the bootstrap so each resample pays a handful of epochs instead
    of a full cold start.
    """
    if epochs_cap < 0:
        raise ValidationError("epochs_cap must be >= 0")
    target = getattr(model, "_source_target", _TargetKind.OUTCOME)
    inputs, y, in_dim = _training_arrays(resample, target)
    if in_dim != model.in_dim:
        raise ValidationError("resample dimensionality does not match the fitted model")
    out = model.clone()
    if epochs_cap == 0:
        return out
    out.fit(inputs, y, max_epochs=epochs_cap, reset_optimizer=False)
    return out


class LinearGaussianModel:
    """Single-Gaussian conditional model: mean linear in the inputs, constant variance.

    Fit by least squares; serves both as a cheap nuisance model and as a
    reference implementation of the density-model contract.
    """

    def __init__(self, coef: FloatArray, sigma2: float, in_dim: int, target: str):
        self.coef = np.asarray(coef, dtype=np.float64)
        self.sigma2 = max(float(sigma2), VARIANCE_FLOOR)
        self.in_dim = int(in_dim)
        self._source_target = target

    @classmethod
    def fit_outcome(cls, data: Dataset) -> "LinearGaussianModel":
        inputs, y, in_dim = _training_arrays(data, _TargetKind.OUTCOME)
        return cls._fit(inputs, y, in_dim, _TargetKind.OUTCOME)

    @classmethod
    def fit_gps(cls, data: Dataset) -> "LinearGaussianModel":
        inputs, y, in_dim = _training_arrays(data, _TargetKind.GPS)
        return cls._fit(inputs, y, in_dim, _TargetKind.GPS)

    @classmethod
    def _fit(cls, inputs, y, in_dim, target):
        design = np.column_stack([np.ones(inputs.shape[0]), inputs])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        resid = y - design @ coef
        sigma2 = float(resid @ resid) / max(1, inputs.shape[0] - design.shape[1])
        return cls(coef, sigma2, in_dim, target)

    def query_batch(self, x: FloatArray, t: FloatArray | None = None):
        inputs = _stack_inputs(x, t, self.in_dim)
        mean = self.coef[0] + inputs @ self.coef[1:]
        n = inputs.shape[0]
        return (
            np.ones((n, 1)),
            mean[:, None],
            np.full((n, 1), self.sigma2),
        )

    def query(self, x: FloatArray, t: float | None = None) -> ConditionalGaussianMixture:
        t_arr = None if t is None else np.array([float(t)])
        w, mu, var = self.query_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)), t_arr)
        return ConditionalGaussianMixture(w[0], mu[0], var[0])

    def refit(self, data: Dataset, epochs_cap: int) -> "LinearGaussianModel":
        if epochs_cap == 0:
            return self
        if self._source_target == _TargetKind.OUTCOME:
            return LinearGaussianModel.fit_outcome(data)
        return LinearGaussianModel.fit_gps(data)


# ---- hyperparameter fine-tuning ---------------------------------------------


def sample_mdn_config(rng: np.random.Generator, max_epochs: int, seed: int) -> MdnConfig:
    """Draw one hyperparameter triple from the fine-tuning search space."""
    lr = float(rng.choice(LEARNING_RATE_GRID))
    k = int(rng.integers(COMPONENT_RANGE[0], COMPONENT_RANGE[1] + 1))
    extractor = tuple(int(v) for v in rng.choice(EXTRACTOR_HIDDEN_CANDIDATES, size=2))
    head = tuple(int(v) for v in rng.choice(HEAD_HIDDEN_CANDIDATES, size=2))
    return MdnConfig(
        extractor_hidden=extractor,
        head_hidden=head,
        n_components=k,
        learning_rate=lr,
        max_epochs=max_epochs,
        seed=seed,
    )


def draw_tuning_splits(n: int, n_splits: int, rng: np.random.Generator) -> list:
    """Random 80/10/10 train/validation/test index triples."""
    splits = []
    for _ in range(n_splits):
        perm = rng.permutation(n)
        n_train = int(round(0.8 * n))
        n_valid = int(round(0.1 * n))
        splits.append(
            (
                perm[:n_train],
                perm[n_train : n_train + n_valid],
                perm[n_train + n_valid :],
            )
        )
    return splits


def score_config(
    data: Dataset, config: MdnConfig, splits: list, target: str = "outcome"
) -> float:
    """Mean test NLL of one configuration across the given splits."""
    inputs, y, in_dim = _training_arrays(data, target)
    test_nlls = []
    for train_idx, valid_idx, test_idx in splits:
        model = MixtureDensityNetwork(in_dim, config)
        model._train_loop(
            inputs[train_idx],
            y[train_idx],
            inputs[valid_idx],
            y[valid_idx],
            epochs=config.max_epochs,
        )
        test_nlls.append(model._dataset_nll(inputs[test_idx], y[test_idx]))
    return float(np.mean(test_nlls))


def fine_tune(
    data: Dataset,
    n_candidates: int = 100,
    n_splits: int = 2,
    seed: int = 0,
    target: str = _TargetKind.OUTCOME,
    max_epochs: int = 500,
) -> MdnConfig:
    """Random-search hyperparameter selection over 80/10/10 splits.

    Draws ``n_candidates`` configurations, trains each on the train part of
    ``n_splits`` random splits (early stopping on the validation part) and
    returns the configuration with the smallest mean test NLL. Candidates
    whose training diverges are skipped; if every one diverges the search
    fails.
    """
    if n_candidates < 1 or n_splits < 1:
        raise ValidationError("need at least one candidate and one split")
    if data.n < 10:
        raise ValidationError("dataset too small for an 80/10/10 split")
    rng = np.random.default_rng(seed)
    candidates = [
        sample_mdn_config(rng, max_epochs, seed + 1000 + c) for c in range(n_candidates)
    ]
    splits = draw_tuning_splits(data.n, n_splits, rng)
    scores = np.full(n_candidates, np.inf)
    for ci, cand in enumerate(candidates):
        try:
            scores[ci] = score_config(data, cand, splits, target)
        except TrainingDivergedError:
            continue
    best = int(np.argmin(scores))
    if not np.isfinite(scores[best]):
        raise FineTuneFailedError("every hyperparameter candidate diverged")
    return candidates[best]


# ---- serialization ----------------------------------------------------------

FORMAT_VERSION = 1


def save_model(model, path) -> None:
    """Write a fitted model to a self-describing JSON file."""
    if isinstance(model, MixtureDensityNetwork):
        params = model._params()
        payload = {
            "format_version": FORMAT_VERSION,
            "kind": "mdn",
            "target": getattr(model, "_source_target", _TargetKind.OUTCOME),
            "in_dim": model.in_dim,
            "config": {
                "extractor_hidden": list(model.config.extractor_hidden),
                "head_hidden": list(model.config.head_hidden),
                "n_components": model.config.n_components,
                "learning_rate": model.config.learning_rate,
                "max_epochs": model.config.max_epochs,
                "seed": model.config.seed,
            },
            "layer_shapes": [list(p.shape) for p in params],
            "params": np.concatenate([p.ravel() for p in params]).tolist(),
        }
    elif isinstance(model, LinearGaussianModel):
        payload = {
            "format_version": FORMAT_VERSION,
            "kind": "linear_gaussian",
            "target": model._source_target,
            "in_dim": model.in_dim,
            "coef": model.coef.tolist(),
            "sigma2": model.sigma2,
        }
    else:
        raise ValidationError(f"cannot serialize model of type {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_model(path):
    """Inverse of :func:`save_model`."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported model format version {version!r}")
    if payload["kind"] == "linear_gaussian":
        return LinearGaussianModel(
            np.asarray(payload["coef"], dtype=np.float64),
            payload["sigma2"],
            payload["in_dim"],
            payload["target"],
        )
    if payload["kind"] != "mdn":
        raise ValidationError(f"unknown model kind {payload['kind']!r}")
    cfg_raw = payload["config"]
    cfg = MdnConfig(
        extractor_hidden=tuple(cfg_raw["extractor_hidden"]),
        head_hidden=tuple(cfg_raw["head_hidden"]),
        n_components=cfg_raw["n_components"],
        learning_rate=cfg_raw["learning_rate"],
        max_epochs=cfg_raw["max_epochs"],
        seed=cfg_raw["seed"],
    )
    model = MixtureDensityNetwork(payload["in_dim"], cfg)
    flat = np.asarray(payload["params"], dtype=np.float64)
    shapes = [tuple(s) for s in payload["layer_shapes"]]
    params = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        params.append(flat[offset : offset + size].reshape(shape))
        offset += size
    if offset != flat.size:
        raise ValidationError("parameter payload size mismatch")
    model._set_params(params)
    model._source_target = payload["target"]
    return model
