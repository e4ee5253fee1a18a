"""Model-agnostic epidemic priors ("patches") over node-level forecasters.

Four composable patches modify a base forecaster's objective without
touching its architecture:

* ``tid`` — an additive calendar correction from an embedding + small MLP.
* ``filter`` — masks zero and fence-outlying targets out of the loss.
* ``sir_incidence`` / ``sir_percent`` / ``ngm`` — an auxiliary mechanistic
  branch whose output is penalized toward the target (regularizer only;
  it never replaces the base forecast).
* ``einn`` — a time-only latent compartmental module tied to the data and
  to the base prediction, with an ODE-residual penalty.

Every forward here has a matching hand-written backward; the pair is
validated against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import DEFAULT_FENCE_MULTIPLIER, build_filter_mask
from .validation import freeze

EPI_VARIANTS = ("sir_incidence", "sir_percent", "ngm")
PATCH_IDS = ("tid", "filter", "sir_incidence", "sir_percent", "ngm", "einn")

# Margin added to the recovery rate in the NGM variant so diag(gamma) - P
# stays strictly diagonally dominant and the linear solve cannot blow up.
NGM_MARGIN = 1e-3


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class TidConfig:
    embed_dim: int = 4
    hidden_width: int = 8


@dataclass(frozen=True)
class FilterConfig:
    c: float = DEFAULT_FENCE_MULTIPLIER


@dataclass(frozen=True)
class EpiConfig:
    variant: str = "sir_incidence"
    lambda_epi: float = 0.1
    scale_s: float = 100.0
    dt: float = 1.0

    def __post_init__(self):
        if self.variant not in EPI_VARIANTS:
            raise ValueError(f"unknown epi variant {self.variant!r}")
        if self.lambda_epi < 0:
            raise ValueError("lambda_epi must be >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.scale_s <= 0:
            raise ValueError("scale_s must be > 0")


@dataclass(frozen=True)
class EinnConfig:
    lambda_dyn: float = 0.1
    lambda_data: float = 0.1
    lambda_align: float = 0.1
    basis_degree: int = 3

    def __post_init__(self):
        if min(self.lambda_dyn, self.lambda_data, self.lambda_align) < 0:
            raise ValueError("einn weights must be >= 0")
        if self.basis_degree < 1:
            raise ValueError("basis_degree must be >= 1")


@dataclass(frozen=True)
class PatchConfig:
    """Selection of active patches with their weights. An empty config is
    the identity: losses and predictions match the unpatched model."""

    tid: TidConfig | None = None
    filter: FilterConfig | None = None
    epi: EpiConfig | None = None
    einn: EinnConfig | None = None

    def active_ids(self) -> list[str]:
        ids = []
        if self.tid:
            ids.append("tid")
        if self.filter:
            ids.append("filter")
        if self.epi:
            ids.append(self.epi.variant)
        if self.einn:
            ids.append("einn")
        return ids

    @property
    def is_empty(self) -> bool:
        return not self.active_ids()

    def needs_population(self) -> bool:
        return bool(self.epi) or bool(self.einn)

    def needs_mixing(self) -> bool:
        return bool(self.epi)

    def to_dict(self) -> dict:
        out: dict = {}
        if self.tid:
            out["tid"] = {"embed_dim": self.tid.embed_dim, "hidden_width": self.tid.hidden_width}
        if self.filter:
            out["filter"] = {"c": self.filter.c}
        if self.epi:
            out["epi"] = {"variant": self.epi.variant, "lambda_epi": self.epi.lambda_epi,
                          "scale_s": self.epi.scale_s, "dt": self.epi.dt}
        if self.einn:
            out["einn"] = {"lambda_dyn": self.einn.lambda_dyn, "lambda_data": self.einn.lambda_data,
                           "lambda_align": self.einn.lambda_align, "basis_degree": self.einn.basis_degree}
        return out

    @classmethod
    def from_dict(cls, raw: dict | None) -> "PatchConfig":
        raw = raw or {}
        unknown = set(raw) - {"tid", "filter", "epi", "einn"}
        if unknown:
            raise ValueError(f"unknown patch keys {sorted(unknown)}")
        return cls(
            tid=TidConfig(**raw["tid"]) if "tid" in raw else None,
            filter=FilterConfig(**raw["filter"]) if "filter" in raw else None,
            epi=EpiConfig(**raw["epi"]) if "epi" in raw else None,
            einn=EinnConfig(**raw["einn"]) if "einn" in raw else None,
        )


# ---------------------------------------------------------------------------
# Shared positive-rate nonlinearity


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# TID calendar correction


@dataclass(frozen=True)
class TidHead:
    """Embedding table + one-hidden-layer MLP producing a per-region
    additive correction from the target's calendar indicator."""

    embedding_table: np.ndarray   # (categories, embed_dim)
    w1: np.ndarray                # (hidden, embed_dim)
    b1: np.ndarray                # (hidden,)
    w2: np.ndarray                # (n, hidden)
    b2: np.ndarray                # (n,)

    def __post_init__(self):
        for name in ("embedding_table", "w1", "b1", "w2", "b2"):
            object.__setattr__(self, name, freeze(np.asarray(getattr(self, name), dtype=np.float64)))

    def correction(self, indicator: int) -> np.ndarray:
        if not 0 <= indicator < self.embedding_table.shape[0]:
            raise ValueError(
                f"calendar indicator {indicator} outside range 0..{self.embedding_table.shape[0] - 1}"
            )
        hidden = np.tanh(self.w1 @ self.embedding_table[indicator] + self.b1)
        return self.w2 @ hidden + self.b2


def apply_tid(base_prediction: np.ndarray, indicator: int, head: TidHead) -> np.ndarray:
    """Add the head's correction; it depends only on the indicator, so two
    forecasts for the same target time shift by the same vector."""
    base = np.asarray(base_prediction, dtype=np.float64)
    delta = head.correction(indicator)
    if delta.shape != base.shape:
        raise ValueError("correction length does not match prediction length")
    return base + delta


def tid_forward(blocks: dict[str, np.ndarray], indicators: np.ndarray) -> tuple[np.ndarray, dict]:
    """Batched corrections for integer indicators; returns (B, n) deltas."""
    emb = blocks["tid.embed"][indicators]                      # (B, d)
    pre = emb @ blocks["tid.w1"].T + blocks["tid.b1"]          # (B, hidden)
    hid = np.tanh(pre)
    delta = hid @ blocks["tid.w2"].T + blocks["tid.b2"]        # (B, n)
    return delta, {"emb": emb, "hid": hid, "indicators": indicators}


def tid_backward(g_delta: np.ndarray, blocks: dict[str, np.ndarray],
                 cache: dict, grads: dict[str, np.ndarray]) -> None:
    hid, emb, indicators = cache["hid"], cache["emb"], cache["indicators"]
    grads["tid.w2"] += g_delta.T @ hid
    grads["tid.b2"] += g_delta.sum(axis=0)
    g_hid = g_delta @ blocks["tid.w2"]
    g_pre = g_hid * (1.0 - hid**2)
    grads["tid.w1"] += g_pre.T @ emb
    grads["tid.b1"] += g_pre.sum(axis=0)
    g_emb = g_pre @ blocks["tid.w1"]
    np.add.at(grads["tid.embed"], indicators, g_emb)


# ---------------------------------------------------------------------------
# Filtered loss


def masked_mse_loss(predictions: np.ndarray, targets: np.ndarray,
                    c: float) -> tuple[float, np.ndarray, int]:
    """MSE over target entries kept by the fence mask built from this
    batch's targets. Masked coordinates contribute nothing to the loss and
    receive exactly zero gradient. Returns (loss, dloss/dpred, kept)."""
    preds = np.asarray(predictions, dtype=np.float64)
    ys = np.asarray(targets, dtype=np.float64)
    mask = build_filter_mask(ys.ravel(), c).keep.reshape(ys.shape)
    kept = int(mask.sum())
    if kept == 0:
        return 0.0, np.zeros_like(preds), 0
    diff = np.where(mask, preds - ys, 0.0)
    loss = float(np.sum(diff**2) / kept)
    return loss, 2.0 * diff / kept, kept


def filtered_loss(predictions: np.ndarray, targets: np.ndarray,
                  c: float = DEFAULT_FENCE_MULTIPLIER) -> float:
    loss, _, _ = masked_mse_loss(predictions, targets, c)
    return loss


# ---------------------------------------------------------------------------
# SIR auxiliary branch


@dataclass(frozen=True)
class SirState:
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class EpiRates:
    """Per-node transmission/recovery rates, strictly positive by
    construction of the rate head."""

    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        gamma = np.asarray(self.gamma, dtype=np.float64)
        if np.any(beta <= 0) or np.any(gamma <= 0):
            raise ValueError("rates must be strictly positive")
        object.__setattr__(self, "beta", freeze(beta))
        object.__setattr__(self, "gamma", freeze(gamma))


def init_sir_states(history: np.ndarray, populations: np.ndarray) -> SirState:
    """Observation-consistent starting state: the last observed row seeds
    the infectious compartment (clamped into [0, population]), nobody is
    removed yet, and the susceptible remainder closes the balance."""
    pops = np.asarray(populations, dtype=np.float64)
    last = np.asarray(history, dtype=np.float64)[-1]
    infectious = np.clip(last, 0.0, pops)
    return SirState(S=pops - infectious, I=infectious, R=np.zeros_like(pops))


def _sir_step(S, I, R, beta, gamma, P, pops, totals, dt):
    """One forward-Euler step with conservation-preserving clamping.

    New infections flow S->I, recoveries I->R. After the raw update the
    infectious and removed parts are clamped at zero and S is recomputed
    from the per-node total, so the total is anchored rather than drifting;
    a pathological overshoot of S cascades into I (and then R), keeping all
    components nonnegative without creating or destroying mass.
    """
    Imix = I @ P.T
    z = dt * beta * (S / pops) * Imix
    rec = dt * gamma * I
    I1 = I + z - rec
    R1 = R + rec
    mI = I1 > 0
    mR = R1 > 0
    I2 = np.where(mI, I1, 0.0)
    R2 = np.where(mR, R1, 0.0)
    Sraw = totals - I2 - R2
    mS = Sraw > 0
    S2 = np.where(mS, Sraw, 0.0)
    d = Sraw - S2
    I3 = I2 + d
    mI3 = I3 > 0
    I4 = np.where(mI3, I3, 0.0)
    R3 = R2 + (I3 - I4)
    cache = {"S": S, "I": I, "Imix": Imix, "z": z,
             "mI": mI, "mR": mR, "mS": mS, "mI3": mI3}
    return S2, I4, R3, z, cache


def _sir_step_vjp(gS2, gI4, gR3, gz_extra, beta, gamma, P, pops, dt, cache):
    """Adjoint of ``_sir_step``: maps output gradients (and any direct
    gradient on this step's incidence) back to input-state and rate
    gradients."""
    S, I, Imix, z = cache["S"], cache["I"], cache["Imix"], cache["z"]
    mI, mR, mS, mI3 = cache["mI"], cache["mR"], cache["mS"], cache["mI3"]

    # R3 = R2 + (I3 - I4); I4 = max(I3, 0)
    gR2 = gR3.copy()
    gI3 = gI4 * mI3 + gR3 * (1.0 - mI3)
    # I3 = I2 + d; d = Sraw - S2 = min(Sraw, 0); S2 = max(Sraw, 0)
    gI2 = gI3.copy()
    gSraw = gS2 * mS + gI3 * (1.0 - mS)
    # Sraw = totals - I2 - R2 (totals carry no trainable dependence)
    gI2 -= gSraw
    gR2 -= gSraw
    gI1 = gI2 * mI
    gR1 = gR2 * mR
    # I1 = I + z - rec; R1 = R + rec
    gI_in = gI1.copy()
    gz = gI1 - 0.0
    grec = gR1 - gI1
    gz = gz + gz_extra
    # rec = dt * gamma * I
    ggamma = dt * I * grec
    gI_in += dt * gamma * grec
    # z = dt * beta * (S / pops) * Imix
    gbeta = dt * (S / pops) * Imix * gz
    gS_in = dt * beta * Imix / pops * gz
    gImix = dt * beta * (S / pops) * gz
    gI_in += gImix @ P
    gR_in = gR1
    return gS_in, gI_in, gR_in, gbeta, ggamma


def sir_rollout(
    state0: SirState,
    rates: EpiRates,
    P: np.ndarray,
    populations: np.ndarray,
    dt: float,
    horizon: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll the compartmental system ``horizon`` Euler steps with rates held
    fixed, returning the per-step incidence path and the final-step
    incidence (the regularizer output for lead ``horizon``).

    Incidence at step tau covers the interval from tau to tau+1, so the
    lead-h output is the incidence produced on the final step.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    P = np.asarray(P, dtype=np.float64)
    pops = np.asarray(populations, dtype=np.float64)
    S, I, R = (np.asarray(x, dtype=np.float64).copy() for x in (state0.S, state0.I, state0.R))
    batched = S.ndim == 2
    if not batched:
        S, I, R = S[None, :], I[None, :], R[None, :]
    totals = S + I + R
    path = np.empty((horizon,) + S.shape)
    for tau in range(horizon):
        S, I, R, z, _ = _sir_step(S, I, R, rates.beta, rates.gamma, P, pops, totals, dt)
        path[tau] = z
    incidence = path[-1]
    if not batched:
        path = path[:, 0, :]
        incidence = incidence[0]
    return path, incidence


def sir_percent(incidence: np.ndarray, populations: np.ndarray, scale: float) -> np.ndarray:
    """Population-normalized incidence (e.g. scale=100 for percent)."""
    pops = np.asarray(populations, dtype=np.float64)
    if np.any(pops <= 0):
        raise ValueError("populations must be strictly positive")
    return scale * np.asarray(incidence, dtype=np.float64) / pops


def ngm_propagate(rates: EpiRates, P: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Next-generation propagation diag(beta) (diag(gamma) - P)^-1 x.

    Solved directly rather than materializing the propagation matrix.
    Requires diag(gamma) - P strictly diagonally dominant, which the rate
    head guarantees by offsetting gamma above P's row sums.
    """
    P = np.asarray(P, dtype=np.float64)
    beta = np.atleast_2d(rates.beta)
    gamma = np.atleast_2d(rates.gamma)
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rowsums = np.abs(P).sum(axis=1) - np.abs(np.diag(P))
    if np.any(gamma - np.diag(P) <= rowsums):
        raise ValueError("gamma too small: diag(gamma) - P is not strictly diagonally dominant")
    n = P.shape[0]
    systems = gamma[:, :, None] * np.eye(n) - P
    u = np.linalg.solve(systems, xs[:, :, None])[:, :, 0]
    out = beta * u
    return out if np.asarray(x).ndim == 2 else out[0]


def epi_regularized_loss(
    base_loss: float,
    auxiliary: np.ndarray,
    target: np.ndarray,
    lambda_epi: float,
    populations: np.ndarray | None = None,
    scale: float | None = None,
) -> float:
    """Base loss plus lambda_epi times the MSE between the auxiliary output
    and the (correspondingly normalized, for the percent variant) target."""
    if lambda_epi < 0:
        raise ValueError("lambda_epi must be >= 0")
    aux = np.asarray(auxiliary, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if populations is not None and scale is not None:
        tgt = scale * tgt / np.asarray(populations, dtype=np.float64)
    return float(base_loss + lambda_epi * np.mean((aux - tgt) ** 2))


# ---------------------------------------------------------------------------
# Rate head

RATE_FEATURES = 3  # last value, window mean, window slope


def rate_features(histories: np.ndarray) -> np.ndarray:
    """Per-node summaries of the lookback window: last value, mean, and OLS
    slope. Shape (B, 3, n) for (B, L, n) histories."""
    H = np.asarray(histories, dtype=np.float64)
    if H.ndim == 2:
        H = H[None]
    L = H.shape[1]
    idx = np.arange(L, dtype=np.float64)
    idxc = idx - idx.mean()
    denom = float(idxc @ idxc) if L > 1 else 1.0
    slope = np.einsum("bln,l->bn", H, idxc) / denom
    return np.stack([H[:, -1, :], H.mean(axis=1), slope], axis=1)


def rate_head_forward(blocks: dict[str, np.ndarray], features: np.ndarray,
                      gamma_offset: np.ndarray | float = 0.0) -> tuple[np.ndarray, np.ndarray, dict]:
    """Map per-node features through linear + softplus to positive rates.

    ``gamma_offset`` shifts the recovery rate (used by the NGM variant to
    enforce diagonal dominance structurally).
    """
    pre_b = np.einsum("bfn,f->bn", features, blocks["epi.w_beta"]) + blocks["epi.b_beta"]
    pre_g = np.einsum("bfn,f->bn", features, blocks["epi.w_gamma"]) + blocks["epi.b_gamma"]
    # softplus underflows to 0 below about -745; the floor keeps the rates
    # strictly positive (its gradient there is already zero).
    beta = np.maximum(softplus(pre_b), 1e-12)
    gamma = np.maximum(softplus(pre_g), 1e-12) + gamma_offset
    return beta, gamma, {"pre_b": pre_b, "pre_g": pre_g, "features": features}


def rate_head_backward(gbeta: np.ndarray, ggamma: np.ndarray, cache: dict,
                       grads: dict[str, np.ndarray]) -> None:
    db = gbeta * sigmoid(cache["pre_b"])
    dg = ggamma * sigmoid(cache["pre_g"])
    grads["epi.w_beta"] += np.einsum("bn,bfn->f", db, cache["features"])
    grads["epi.b_beta"] += db.sum()
    grads["epi.w_gamma"] += np.einsum("bn,bfn->f", dg, cache["features"])
    grads["epi.b_gamma"] += dg.sum()


def rate_head(history: np.ndarray, w_beta, b_beta, w_gamma, b_gamma,
              mixing: np.ndarray | None = None, variant: str = "sir_incidence") -> EpiRates:
    """Convenience single-sample rate head used outside the trainer.

    Operates on raw features; inside the trainer the same map sees
    batch-standardized features so its conditioning does not depend on the
    panel's count scale.
    """
    blocks = {
        "epi.w_beta": np.asarray(w_beta, dtype=np.float64),
        "epi.b_beta": np.asarray(b_beta, dtype=np.float64),
        "epi.w_gamma": np.asarray(w_gamma, dtype=np.float64),
        "epi.b_gamma": np.asarray(b_gamma, dtype=np.float64),
    }
    offset = 0.0
    if variant == "ngm":
        if mixing is None:
            raise ValueError("ngm variant needs the mixing operator for its gamma offset")
        offset = np.asarray(mixing).sum(axis=1) + NGM_MARGIN
    feats = rate_features(history)
    beta, gamma, _ = rate_head_forward(blocks, feats, offset)
    return EpiRates(beta=beta[0], gamma=gamma[0])


# ---------------------------------------------------------------------------
# EINN time module


@dataclass(frozen=True)
class EinnTimeModule:
    """Per-node polynomial latent trajectories over normalized time plus
    the positive rates closing the incidence output map."""

    coefficients: np.ndarray   # (3, n, degree+1) for S, I, R
    raw_beta: np.ndarray       # (n,)
    raw_gamma: np.ndarray      # (n,)
    time_origin: float
    time_scale: float

    def normalize(self, t):
        return (np.asarray(t, dtype=np.float64) - self.time_origin) / self.time_scale

    def latents(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Clamped latent (S, I, R) and raw polynomial time derivatives at
        native times ``t``; shapes (B, 3, n)."""
        tau = np.atleast_1d(self.normalize(t))
        degree = self.coefficients.shape[2] - 1
        powers = tau[:, None] ** np.arange(degree + 1)
        dpowers = np.zeros_like(powers)
        if degree >= 1:
            dpowers[:, 1:] = np.arange(1, degree + 1) * tau[:, None] ** np.arange(degree)
        states = np.einsum("cnk,bk->bcn", self.coefficients, powers)
        derivs = np.einsum("cnk,bk->bcn", self.coefficients, dpowers)
        return np.maximum(states, 0.0), derivs


def einn_objective(
    base_predictions: np.ndarray,
    targets: np.ndarray,
    target_times: np.ndarray,
    module: EinnTimeModule,
    populations: np.ndarray,
    weights: EinnConfig,
) -> tuple[float, dict[str, float]]:
    """Auxiliary objective of the EINN patch, with component breakdown.

    total = base MSE
          + lambda_dyn  * mean squared ODE residual at the batch's times
          + lambda_data * mean ||r - y||^2
          + lambda_align* mean ||y_hat - r||^2

    where r is the incidence implied by the latent states. The single
    residual term plays both the ODE-fit and gradient-matching roles: the
    polynomial's analytic time derivative is matched to the compartmental
    right-hand side.
    """
    preds = np.atleast_2d(np.asarray(base_predictions, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    pops = np.asarray(populations, dtype=np.float64)
    parts = _einn_terms(preds, ys, np.atleast_1d(target_times), module, pops)
    total = (
        parts["base"]
        + weights.lambda_dyn * parts["dyn"]
        + weights.lambda_data * parts["data"]
        + weights.lambda_align * parts["align"]
    )
    parts["total"] = float(total)
    return float(total), parts


def _einn_terms(preds, ys, times, module: EinnTimeModule, pops) -> dict[str, float]:
    states, derivs = module.latents(times)
    beta = softplus(module.raw_beta)
    gamma = softplus(module.raw_gamma)
    S, I = states[:, 0, :], states[:, 1, :]
    z = beta * (S / pops) * I
    rhs = np.stack([-z, z - gamma * I, gamma * I], axis=1)
    resid = derivs - rhs
    return {
        "base": float(np.mean((preds - ys) ** 2)),
        "dyn": float(np.mean(resid**2)),
        "data": float(np.sum((z - ys) ** 2) / ys.shape[0]),
        "align": float(np.sum((preds - z) ** 2) / ys.shape[0]),
    }
