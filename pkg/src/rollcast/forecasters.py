"""Reference forecasters and the first-order trainer.

Four framework-free models: naive persistence, per-region AR(1), a
trend/remainder linear decomposition, and a graph-linear model consuming
the mixing operator. The trainable models share one full-batch gradient
descent loop over a flat parameter vector; gradients are analytic
(including all active patches) and checked against finite differences in
the tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d
from sklearn.base import BaseEstimator

from . import patches as patchmod
from .panel import CALENDAR_CATEGORIES, Sample, chrono_split
from .params import ParamLayout
from .patches import (
    NGM_MARGIN,
    PatchConfig,
    TidHead,
    masked_mse_loss,
    rate_features,
    rate_head_backward,
    rate_head_forward,
    sigmoid,
    softplus,
    tid_backward,
    tid_forward,
)
from .validation import freeze

MODEL_KINDS = ("naive", "ar1", "dlinear", "graph_linear", "external")
TRAINABLE_KINDS = ("dlinear", "graph_linear")

DEFAULT_KERNELS = {"daily": 7, "weekly": 3}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    hyperparameters: dict = field(default_factory=dict)
    horizon: int = 1

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.01
    seed: int = 0
    loss: str = "mse"
    l2: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.loss not in ("mse", "filtered_mse"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass(frozen=True)
class FittedModel:
    """Parameters with a named layout plus training diagnostics.

    ``aux`` carries non-trainable constants a forward pass needs (trend
    kernel, time normalization for the einn module).
    """

    spec: ModelSpec
    layout: ParamLayout
    values: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (self.layout.size,):
            raise ValueError("parameter vector does not match layout")
        if not np.all(np.isfinite(vals)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "values", freeze(vals))

    def blocks(self) -> dict[str, np.ndarray]:
        return self.layout.unflatten(self.values)

    def tid_head(self) -> TidHead | None:
        blocks = self.blocks()
        if "tid.embed" not in blocks:
            return None
        return TidHead(
            embedding_table=blocks["tid.embed"], w1=blocks["tid.w1"], b1=blocks["tid.b1"],
            w2=blocks["tid.w2"], b2=blocks["tid.b2"],
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "spec": {"kind": self.spec.kind, "hyperparameters": self.spec.hyperparameters,
                         "horizon": self.spec.horizon},
                "layout": [[name, list(shape)] for name, shape in self.layout.blocks],
                "values": [float(v) for v in self.values],
                "diagnostics": self.diagnostics,
                "aux": self.aux,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        raw = json.loads(text)
        return cls(
            spec=ModelSpec(**raw["spec"]),
            layout=ParamLayout(tuple((name, tuple(shape)) for name, shape in raw["layout"])),
            values=np.array(raw["values"], dtype=np.float64),
            diagnostics=raw.get("diagnostics", {}),
            aux=raw.get("aux", {}),
        )


# ---------------------------------------------------------------------------
# Simple forecasters


def naive_forecast(sample: Sample) -> np.ndarray:
    """Persistence: the last observed row, for every horizon."""
    return np.asarray(sample.history[-1], dtype=np.float64).copy()


def fit_ar1(series: np.ndarray) -> FittedModel:
    """Least-squares fit of x[t+1] = c + phi * x[t] per region.

    A (near-)constant region degenerates to phi=0 with c at the constant.
    NaN cells (missing observations) drop the pairs they touch.
    """
    values = np.asarray(series, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] < 3:
        raise ValueError("ar1 needs at least 3 observations per region")
    n = values.shape[1]
    c = np.zeros(n)
    phi = np.zeros(n)
    residual_sq = []
    for j in range(n):
        x, y = values[:-1, j], values[1:, j]
        ok = np.isfinite(x) & np.isfinite(y)
        x, y = x[ok], y[ok]
        if x.size < 2:
            c[j] = float(np.nanmean(values[:, j]))
            continue
        xc = x - x.mean()
        denom = float(xc @ xc)
        if denom < 1e-12 * max(1.0, float(x @ x)):
            phi[j] = 0.0
            c[j] = float(y.mean())
        else:
            phi[j] = float(xc @ (y - y.mean())) / denom
            c[j] = float(y.mean() - phi[j] * x.mean())
        residual_sq.append(np.mean((y - (c[j] + phi[j] * x)) ** 2))
    layout = ParamLayout((("base.c", (n,)), ("base.phi", (n,))))
    diagnostics = {"train_loss": float(np.mean(residual_sq)) if residual_sq else float("nan"),
                   "epochs_run": 0}
    return FittedModel(spec=ModelSpec(kind="ar1"), layout=layout,
                       values=layout.flatten({"base.c": c, "base.phi": phi}),
                       diagnostics=diagnostics)


def ar1_forecast(model: FittedModel, last_values: np.ndarray, horizon: int) -> np.ndarray:
    """Iterate the fitted recursion ``horizon`` times from the origin value."""
    blocks = model.blocks()
    x = np.asarray(last_values, dtype=np.float64).copy()
    for _ in range(horizon):
        x = blocks["base.c"] + blocks["base.phi"] * x
    return x


# ---------------------------------------------------------------------------
# Trainable forward passes


def trend_decompose(histories: np.ndarray, kernel: int) -> tuple[np.ndarray, np.ndarray]:
    """Split histories into a centered-moving-average trend (edges padded by
    replication) and the remainder."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("trend kernel must be a positive odd integer")
    H = np.asarray(histories, dtype=np.float64)
    trend = uniform_filter1d(H, size=kernel, axis=-2, mode="nearest")
    return trend, H - trend


def _dlinear_forward(blocks, trend, resid):
    return (
        np.einsum("blj,l->bj", trend, blocks["base.w_trend"]) + blocks["base.b_trend"]
        + np.einsum("blj,l->bj", resid, blocks["base.w_resid"]) + blocks["base.b_resid"]
    )


def _graph_linear_forward(blocks, H, mixed):
    return (
        np.einsum("bli,l->bi", H, blocks["base.w_self"])
        + np.einsum("bli,l->bi", mixed, blocks["base.w_mix"])
        + blocks["base.bias"]
    )


def forecast_dlinear(sample: Sample, model: FittedModel) -> np.ndarray:
    """Apply a fitted decomposition-linear model to one sample."""
    blocks = model.blocks()
    L = blocks["base.w_trend"].shape[0]
    if sample.history.shape[0] != L:
        raise ValueError(f"history has {sample.history.shape[0]} rows, model expects {L}")
    trend, resid = trend_decompose(sample.history[None], int(model.aux.get("kernel", 1)))
    out = _dlinear_forward(blocks, trend, resid)[0]
    head = model.tid_head()
    if head is not None:
        out = patchmod.apply_tid(out, sample.calendar_indicator, head)
    return out


def forecast_graph_linear(sample: Sample, mixing: np.ndarray, model: FittedModel) -> np.ndarray:
    """Apply a fitted graph-linear model to one sample."""
    blocks = model.blocks()
    P = mixing.matrix if hasattr(mixing, "matrix") else np.asarray(mixing, dtype=np.float64)
    L = blocks["base.w_self"].shape[0]
    n = blocks["base.bias"].shape[0]
    if sample.history.shape != (L, n) or P.shape != (n, n):
        raise ValueError("history/mixing dimensions do not match the fitted model")
    out = _graph_linear_forward(blocks, sample.history[None], sample.history[None] @ P.T)[0]
    head = model.tid_head()
    if head is not None:
        out = patchmod.apply_tid(out, sample.calendar_indicator, head)
    return out


# ---------------------------------------------------------------------------
# Layout construction and initialization


def build_layout(kind: str, lookback: int, n: int, config: PatchConfig,
                 calendar_categories: int) -> ParamLayout:
    blocks: list[tuple[str, tuple[int, ...]]] = []
    if kind == "dlinear":
        blocks += [("base.w_trend", (lookback,)), ("base.b_trend", ()),
                   ("base.w_resid", (lookback,)), ("base.b_resid", ())]
    elif kind == "graph_linear":
        blocks += [("base.w_self", (lookback,)), ("base.w_mix", (lookback,)),
                   ("base.bias", (n,))]
    else:
        raise ValueError(f"model kind {kind!r} is not gradient-trainable")
    if config.tid:
        d, hidden = config.tid.embed_dim, config.tid.hidden_width
        blocks += [("tid.embed", (calendar_categories, d)), ("tid.w1", (hidden, d)),
                   ("tid.b1", (hidden,)), ("tid.w2", (n, hidden)), ("tid.b2", (n,))]
    if config.epi:
        blocks += [("epi.w_beta", (patchmod.RATE_FEATURES,)), ("epi.b_beta", ()),
                   ("epi.w_gamma", (patchmod.RATE_FEATURES,)), ("epi.b_gamma", ())]
    if config.einn:
        blocks += [("einn.poly", (3, n, config.einn.basis_degree + 1)),
                   ("einn.raw_beta", (n,)), ("einn.raw_gamma", (n,))]
    return ParamLayout(tuple(blocks))


def init_params(layout: ParamLayout, kind: str, rng: np.random.Generator,
                populations: np.ndarray | None = None) -> np.ndarray:
    """Deterministic-under-seed initialization.

    Base weights start at persistence (select the last observation), so
    training begins from a sane forecaster. The calendar head starts with a
    zero output layer so the initial correction is exactly zero while
    gradients still flow through the random embedding.
    """
    theta = layout.zeros()
    blocks = layout.unflatten(theta)
    if kind == "dlinear":
        blocks["base.w_trend"][-1] = 1.0
        blocks["base.w_resid"][-1] = 1.0
    else:
        blocks["base.w_self"][-1] = 1.0
    if "tid.embed" in blocks:
        # Unit-scale embedding and first layer keep the hidden activations
        # O(1); with the output layer at zero the initial correction is 0
        # but its gradient is not starved.
        blocks["tid.embed"][...] = rng.normal(0.0, 1.0, blocks["tid.embed"].shape)
        blocks["tid.w1"][...] = rng.normal(0.0, 1.0 / math.sqrt(blocks["tid.w1"].shape[1]),
                                           blocks["tid.w1"].shape)
    if "einn.poly" in blocks:
        if populations is None:
            raise ValueError("einn initialization needs the population vector")
        blocks["einn.poly"][0, :, 0] = 0.9 * populations
        blocks["einn.poly"][1, :, 0] = 0.05 * populations
    return theta


# ---------------------------------------------------------------------------
# Composed objective


@dataclass
class ObjectiveContext:
    """Everything theta-independent about one batch, precomputed once."""

    kind: str
    layout: ParamLayout
    config: PatchConfig
    targets: np.ndarray                    # (B, n)
    indicators: np.ndarray                 # (B,)
    loss_kind: str                         # "mse" | "filtered"
    filter_c: float
    l2: float
    horizon: int
    # base-model features
    H: np.ndarray | None = None            # (B, L, n) graph_linear
    mixed: np.ndarray | None = None        # (B, L, n) graph_linear
    trend: np.ndarray | None = None        # (B, L, n) dlinear
    resid: np.ndarray | None = None        # (B, L, n) dlinear
    # epi branch
    P: np.ndarray | None = None
    populations: np.ndarray | None = None
    features: np.ndarray | None = None     # (B, 3, n), standardized
    x_last: np.ndarray | None = None       # (B, n), raw last observations
    state0: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    gamma_offset: np.ndarray | float = 0.0
    # einn branch
    powers: np.ndarray | None = None       # (B, degree+1)
    dpowers: np.ndarray | None = None


def build_context(
    samples: list[Sample],
    kind: str,
    layout: ParamLayout,
    config: PatchConfig,
    loss_kind: str,
    filter_c: float,
    l2: float,
    *,
    mixing: np.ndarray | None = None,
    populations: np.ndarray | None = None,
    kernel: int | None = None,
    einn_time: tuple[float, float] | None = None,
) -> ObjectiveContext:
    if not samples:
        raise ValueError("empty batch")
    horizons = {s.horizon for s in samples}
    shapes = {s.history.shape for s in samples}
    if len(horizons) != 1 or len(shapes) != 1:
        raise ValueError("samples must share lookback, region count, and horizon")
    H = np.stack([s.history for s in samples])
    ctx = ObjectiveContext(
        kind=kind,
        layout=layout,
        config=config,
        targets=np.stack([s.target for s in samples]),
        indicators=np.array([s.calendar_indicator for s in samples], dtype=np.intp),
        loss_kind=loss_kind,
        filter_c=filter_c,
        l2=l2,
        horizon=next(iter(horizons)),
    )
    if kind == "dlinear":
        if kernel is None:
            raise ValueError("dlinear needs a trend kernel")
        ctx.trend, ctx.resid = trend_decompose(H, kernel)
    elif kind == "graph_linear":
        if mixing is None:
            raise ValueError("graph_linear needs the mixing operator")
        ctx.H = H
        ctx.mixed = H @ np.asarray(mixing, dtype=np.float64).T
    if config.epi or config.einn:
        if populations is None:
            raise ValueError("epidemic branches need the population vector")
        ctx.populations = np.asarray(populations, dtype=np.float64)
    if config.epi:
        if mixing is None:
            raise ValueError("the epi patch needs the mixing operator")
        ctx.P = np.asarray(mixing, dtype=np.float64)
        # Standardized features keep the rate head trainable at the shared
        # learning rate regardless of the panel's count scale; the stats are
        # batch constants, so gradients stay analytic.
        feats = rate_features(H)
        mean = feats.mean(axis=(0, 2), keepdims=True)
        std = np.maximum(feats.std(axis=(0, 2), keepdims=True), 1e-12)
        ctx.features = (feats - mean) / std
        ctx.x_last = H[:, -1, :]
        I0 = np.clip(ctx.x_last, 0.0, ctx.populations)
        ctx.state0 = (ctx.populations - I0, I0, np.zeros_like(I0))
        if config.epi.variant == "ngm":
            ctx.gamma_offset = ctx.P.sum(axis=1) + NGM_MARGIN
    if config.einn:
        if einn_time is None:
            raise ValueError("einn needs the batch time normalization")
        t0, scale = einn_time
        tau = (np.array([float(s.target_index) for s in samples]) - t0) / scale
        degree = config.einn.basis_degree
        ctx.powers = tau[:, None] ** np.arange(degree + 1)
        ctx.dpowers = np.zeros_like(ctx.powers)
        ctx.dpowers[:, 1:] = np.arange(1, degree + 1) * tau[:, None] ** np.arange(degree)
    return ctx


def _base_forward(blocks, ctx: ObjectiveContext) -> np.ndarray:
    if ctx.kind == "dlinear":
        return _dlinear_forward(blocks, ctx.trend, ctx.resid)
    return _graph_linear_forward(blocks, ctx.H, ctx.mixed)


def _base_backward(g, blocks, ctx: ObjectiveContext, grads) -> None:
    if ctx.kind == "dlinear":
        grads["base.w_trend"] += np.einsum("bj,blj->l", g, ctx.trend)
        grads["base.b_trend"] += g.sum()
        grads["base.w_resid"] += np.einsum("bj,blj->l", g, ctx.resid)
        grads["base.b_resid"] += g.sum()
    else:
        grads["base.w_self"] += np.einsum("bi,bli->l", g, ctx.H)
        grads["base.w_mix"] += np.einsum("bi,bli->l", g, ctx.mixed)
        grads["base.bias"] += g.sum(axis=0)


def _epi_terms(blocks, ctx: ObjectiveContext, grads) -> tuple[float, bool]:
    """Auxiliary mechanistic penalty and its gradient into the rate head.

    Returns (penalty value without the lambda factor applied... the value
    returned is already weighted) and a flag for diagnostics.
    """
    cfg = ctx.config.epi
    lam = cfg.lambda_epi
    B, n = ctx.targets.shape
    beta, gamma, rcache = rate_head_forward(blocks, ctx.features, ctx.gamma_offset)
    if cfg.variant == "ngm":
        x = ctx.x_last
        systems = gamma[:, :, None] * np.eye(n) - ctx.P
        u = np.linalg.solve(systems, x[:, :, None])[:, :, 0]
        r = beta * u
        diff = r - ctx.targets
        penalty = float(np.mean(diff**2))
        gr = 2.0 * lam * diff / (B * n)
        gbeta = u * gr
        gu = beta * gr
        v = np.linalg.solve(np.transpose(systems, (0, 2, 1)), gu[:, :, None])[:, :, 0]
        ggamma = -u * v
    else:
        S, I, R = (arr.copy() for arr in ctx.state0)
        totals = S + I + R
        caches = []
        z = None
        for _ in range(ctx.horizon):
            S, I, R, z, cache = patchmod._sir_step(S, I, R, beta, gamma, ctx.P,
                                                   ctx.populations, totals, cfg.dt)
            caches.append(cache)
        if cfg.variant == "sir_percent":
            r = cfg.scale_s * z / ctx.populations
            tgt = cfg.scale_s * ctx.targets / ctx.populations
            chain = cfg.scale_s / ctx.populations
        else:
            r, tgt, chain = z, ctx.targets, 1.0
        diff = r - tgt
        penalty = float(np.mean(diff**2))
        gz_last = 2.0 * lam * diff / (B * n) * chain
        gS = np.zeros_like(S)
        gI = np.zeros_like(I)
        gR = np.zeros_like(R)
        gbeta = np.zeros_like(beta)
        ggamma = np.zeros_like(gamma)
        for tau in reversed(range(ctx.horizon)):
            gz_extra = gz_last if tau == ctx.horizon - 1 else 0.0
            gS, gI, gR, gb, gg = patchmod._sir_step_vjp(
                gS, gI, gR, gz_extra, beta, gamma, ctx.P, ctx.populations, cfg.dt, caches[tau]
            )
            gbeta += gb
            ggamma += gg
    rate_head_backward(gbeta, ggamma, rcache, grads)
    return lam * penalty, penalty


def _einn_terms(blocks, ctx: ObjectiveContext, yhat, grads) -> tuple[float, np.ndarray, dict]:
    """EINN penalty terms; returns (weighted sum, gradient on yhat, parts)."""
    cfg = ctx.config.einn
    B, n = ctx.targets.shape
    C = blocks["einn.poly"]
    states_raw = np.einsum("cnk,bk->bcn", C, ctx.powers)
    derivs = np.einsum("cnk,bk->bcn", C, ctx.dpowers)
    pos = states_raw > 0
    states = np.where(pos, states_raw, 0.0)
    beta = softplus(blocks["einn.raw_beta"])
    gamma = softplus(blocks["einn.raw_gamma"])
    S, I = states[:, 0, :], states[:, 1, :]
    pops = ctx.populations
    z = beta * (S / pops) * I
    rhs = np.stack([-z, z - gamma * I, gamma * I], axis=1)
    resid = derivs - rhs
    dyn = float(np.mean(resid**2))
    data = float(np.sum((z - ctx.targets) ** 2) / B)
    align = float(np.sum((yhat - z) ** 2) / B)
    total = cfg.lambda_dyn * dyn + cfg.lambda_data * data + cfg.lambda_align * align

    gresid = 2.0 * cfg.lambda_dyn * resid / resid.size
    gderivs = gresid
    grhs = -gresid
    gz = grhs[:, 1, :] - grhs[:, 0, :]
    g_gI = (grhs[:, 2, :] - grhs[:, 1, :])  # gradient on the gamma*I product
    ggamma_vec = (g_gI * I).sum(axis=0)
    gI_lat = g_gI * gamma
    gz = gz + 2.0 * cfg.lambda_data * (z - ctx.targets) / B
    g_yhat = 2.0 * cfg.lambda_align * (yhat - z) / B
    gz = gz - 2.0 * cfg.lambda_align * (yhat - z) / B
    gbeta_vec = (gz * (S / pops) * I).sum(axis=0)
    gS_lat = gz * beta * I / pops
    gI_lat = gI_lat + gz * beta * S / pops
    gstates = np.zeros_like(states)
    gstates[:, 0, :] = gS_lat
    gstates[:, 1, :] = gI_lat
    gstates_raw = gstates * pos
    grads["einn.poly"] += (np.einsum("bcn,bk->cnk", gstates_raw, ctx.powers)
                           + np.einsum("bcn,bk->cnk", gderivs, ctx.dpowers))
    grads["einn.raw_beta"] += gbeta_vec * sigmoid(blocks["einn.raw_beta"])
    grads["einn.raw_gamma"] += ggamma_vec * sigmoid(blocks["einn.raw_gamma"])
    parts = {"dyn": dyn, "data": data, "align": align}
    return total, g_yhat, parts


def objective_value_and_grad(theta: np.ndarray, ctx: ObjectiveContext):
    """Value and gradient of the composed training objective.

    The objective is the base prediction loss plus whatever patch terms are
    active, plus an optional L2 penalty on all parameters. Returns
    (loss, grad, parts).
    """
    blocks = ctx.layout.unflatten(np.asarray(theta, dtype=np.float64))
    grads_theta = ctx.layout.zeros()
    grads = ctx.layout.unflatten(grads_theta)
    parts: dict[str, float] = {}

    yhat = _base_forward(blocks, ctx)
    tid_cache = None
    if ctx.config.tid:
        delta, tid_cache = tid_forward(blocks, ctx.indicators)
        yhat = yhat + delta

    if ctx.loss_kind == "filtered":
        base_loss, g_yhat, kept = masked_mse_loss(yhat, ctx.targets, ctx.filter_c)
        parts["kept"] = kept
    else:
        diff = yhat - ctx.targets
        base_loss = float(np.mean(diff**2))
        g_yhat = 2.0 * diff / diff.size
    parts["base"] = base_loss
    total = base_loss

    if ctx.config.epi:
        weighted, raw = _epi_terms(blocks, ctx, grads)
        total += weighted
        parts["epi"] = raw
    if ctx.config.einn:
        weighted, g_extra, einn_parts = _einn_terms(blocks, ctx, yhat, grads)
        total += weighted
        g_yhat = g_yhat + g_extra
        parts.update(einn_parts)

    if ctx.config.tid:
        tid_backward(g_yhat, blocks, tid_cache, grads)
    _base_backward(g_yhat, blocks, ctx, grads)

    if ctx.l2 > 0:
        total += ctx.l2 * float(theta @ theta)
        grads_theta += 2.0 * ctx.l2 * theta
    parts["total"] = total
    return total, grads_theta, parts


def prediction_loss(theta: np.ndarray, ctx: ObjectiveContext) -> float:
    """Validation criterion: the configured base loss of the (patched)
    predictions, without auxiliary terms."""
    blocks = ctx.layout.unflatten(np.asarray(theta, dtype=np.float64))
    yhat = _base_forward(blocks, ctx)
    if ctx.config.tid:
        delta, _ = tid_forward(blocks, ctx.indicators)
        yhat = yhat + delta
    if ctx.loss_kind == "filtered":
        loss, _, _ = masked_mse_loss(yhat, ctx.targets, ctx.filter_c)
        return loss
    return float(np.mean((yhat - ctx.targets) ** 2))


# ---------------------------------------------------------------------------
# Trainer


def gradient_descent(value_and_grad, theta0: np.ndarray, epochs: int,
                     learning_rate: float, validation_loss) -> tuple[np.ndarray, dict]:
    """Plain full-batch gradient descent with checkpoint-best selection.

    The returned parameters are those of the epoch (including the starting
    point, epoch 0) with the lowest validation loss.
    """
    theta = np.asarray(theta0, dtype=np.float64).copy()
    val_history = [float(validation_loss(theta))]
    best_val, best_theta, best_epoch = val_history[0], theta.copy(), 0
    train_loss = float("nan")
    for epoch in range(1, epochs + 1):
        train_loss, grad, _ = value_and_grad(theta)
        if not math.isfinite(train_loss):
            raise RuntimeError(f"non-finite training loss at epoch {epoch}")
        theta -= learning_rate * grad
        if not np.all(np.isfinite(theta)):
            raise RuntimeError(f"non-finite parameters at epoch {epoch}")
        val = float(validation_loss(theta))
        val_history.append(val)
        if val < best_val:
            best_val, best_theta, best_epoch = val, theta.copy(), epoch
    diagnostics = {
        "epochs_run": epochs,
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "final_train_loss": float(train_loss),
        "final_val_loss": val_history[-1],
        "val_history": val_history,
    }
    return best_theta, diagnostics


def train(
    spec: ModelSpec,
    train_samples: list[Sample],
    validation_samples: list[Sample],
    config: TrainConfig,
    patch_config: PatchConfig | None = None,
    *,
    mixing=None,
    populations: np.ndarray | None = None,
    frequency: str = "daily",
) -> FittedModel:
    """Fit a trainable model (with any active patches) by full-batch
    gradient descent on the composed objective.

    Deterministic in (spec, data, config, patches, seed). Patches only
    apply to the gradient-trainable kinds; persistence and AR(1) are fit
    elsewhere and reject patches.
    """
    patch_config = patch_config or PatchConfig()
    if spec.kind not in TRAINABLE_KINDS:
        raise ValueError(f"model kind {spec.kind!r} is not gradient-trainable")
    if not train_samples:
        raise ValueError("empty training set")
    if not validation_samples:
        raise ValueError("empty validation set")
    P = mixing.matrix if hasattr(mixing, "matrix") else mixing
    pops = None
    if populations is not None:
        pops = populations.populations if hasattr(populations, "populations") else np.asarray(populations, dtype=np.float64)

    lookback, n = train_samples[0].history.shape
    layout = build_layout(spec.kind, lookback, n, patch_config, CALENDAR_CATEGORIES[frequency])
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    theta0 = init_params(layout, spec.kind, rng, populations=pops)

    kernel = None
    aux: dict = {}
    if spec.kind == "dlinear":
        kernel = int(spec.hyperparameters.get("kernel", DEFAULT_KERNELS[frequency]))
        aux["kernel"] = kernel
    einn_time = None
    if patch_config.einn:
        times = np.array([float(s.target_index) for s in train_samples])
        span = float(times.max() - times.min())
        einn_time = (float(times.min()), span if span > 0 else 1.0)
        aux["einn_time"] = list(einn_time)

    loss_kind = "filtered" if (patch_config.filter or config.loss == "filtered_mse") else "mse"
    filter_c = patch_config.filter.c if patch_config.filter else patchmod.DEFAULT_FENCE_MULTIPLIER

    common = dict(kind=spec.kind, layout=layout, config=patch_config, loss_kind=loss_kind,
                  filter_c=filter_c, mixing=P, populations=pops, kernel=kernel,
                  einn_time=einn_time)
    ctx_train = build_context(train_samples, l2=config.l2, **common)
    ctx_val = build_context(validation_samples, l2=0.0, **common)

    best, diagnostics = gradient_descent(
        lambda th: objective_value_and_grad(th, ctx_train),
        theta0,
        config.epochs,
        config.learning_rate,
        lambda th: prediction_loss(th, ctx_val),
    )
    diagnostics["patches"] = patch_config.active_ids()
    return FittedModel(spec=spec, layout=layout, values=best,
                       diagnostics=diagnostics, aux=aux)


def predict(model: FittedModel, samples: list[Sample], mixing=None) -> np.ndarray:
    """Point forecasts for a batch of samples, shape (B, n)."""
    kind = model.spec.kind
    if kind == "naive":
        return np.stack([naive_forecast(s) for s in samples])
    if kind == "ar1":
        return np.stack([ar1_forecast(model, s.history[-1], s.horizon) for s in samples])
    if kind == "dlinear":
        return np.stack([forecast_dlinear(s, model) for s in samples])
    if kind == "graph_linear":
        if mixing is None:
            raise ValueError("graph_linear prediction needs the mixing operator")
        return np.stack([forecast_graph_linear(s, mixing, model) for s in samples])
    raise ValueError(f"cannot predict for model kind {kind!r}")


def make_naive_model(horizon: int = 1) -> FittedModel:
    return FittedModel(spec=ModelSpec(kind="naive", horizon=horizon),
                       layout=ParamLayout(()), values=np.zeros(0))


# ---------------------------------------------------------------------------
# Estimator facade


class NaiveForecaster(BaseEstimator):
    """Persistence baseline: predicts the last observed value at any lead."""

    def __init__(self, horizon: int = 1):
        self.horizon = horizon

    def fit(self, samples=None, validation=None, **kwargs):
        self.model_ = make_naive_model(self.horizon)
        return self

    def predict(self, samples, **kwargs):
        return np.stack([naive_forecast(s) for s in samples])


class AR1Forecaster(BaseEstimator):
    """Per-region AR(1) fit by least squares on a contiguous series."""

    def __init__(self, horizon: int = 1):
        self.horizon = horizon

    def fit(self, series, validation=None, **kwargs):
        self.model_ = fit_ar1(series)
        return self

    def predict(self, samples, **kwargs):
        return np.stack([ar1_forecast(self.model_, s.history[-1], s.horizon) for s in samples])


class _TrainableForecaster(BaseEstimator):
    _kind = ""

    def __init__(self, horizon=1, epochs=500, learning_rate=0.01, l2=0.0,
                 loss="mse", seed=0, patches=None):
        self.horizon = horizon
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2 = l2
        self.loss = loss
        self.seed = seed
        self.patches = patches

    def _spec(self) -> ModelSpec:
        return ModelSpec(kind=self._kind, hyperparameters=self._hyper(), horizon=self.horizon)

    def _hyper(self) -> dict:
        return {}

    def fit(self, samples, validation=None, *, mixing=None, populations=None,
            frequency="daily"):
        if validation is None:
            samples, validation = chrono_split(list(samples), 0.8)
        config = TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                             seed=self.seed, loss=self.loss, l2=self.l2)
        self.model_ = train(self._spec(), list(samples), list(validation), config,
                            PatchConfig.from_dict(self.patches), mixing=mixing,
                            populations=populations, frequency=frequency)
        return self

    def predict(self, samples, *, mixing=None):
        return predict(self.model_, list(samples), mixing=mixing)


class DLinearForecaster(_TrainableForecaster):
    """Trend/remainder decomposition with shared linear readouts."""

    _kind = "dlinear"

    def __init__(self, horizon=1, kernel=None, epochs=500, learning_rate=0.01,
                 l2=0.0, loss="mse", seed=0, patches=None):
        super().__init__(horizon=horizon, epochs=epochs, learning_rate=learning_rate,
                         l2=l2, loss=loss, seed=seed, patches=patches)
        self.kernel = kernel

    def _hyper(self) -> dict:
        return {} if self.kernel is None else {"kernel": int(self.kernel)}


class GraphLinearForecaster(_TrainableForecaster):
    """Linear readout over the raw window plus its neighbor-mixed copy."""

    _kind = "graph_linear"
