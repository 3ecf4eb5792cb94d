"""Multi-channel recurrent risk model with attention recalibration.

Architecture, per visit t of one patient:

* each clinical feature is a separate channel: its scalar history up to t is
  encoded by a bidirectional GRU (per-channel weights), and the channel
  embedding is forward-last-state + backward-first-state;
* the static baseline vector is embedded with one affine map;
* a squeeze vector (elementwise mean of the baseline embedding and all
  channel embeddings) is projected to a query, each channel embedding to a
  key, and the query-key inner products pass through softmax or sparsemax to
  give per-feature attention;
* the attention-weighted sum of channel embeddings, concatenated with the
  baseline embedding, feeds a sigmoid head that outputs the one-year risk.

Dynamic prediction re-encodes the visit prefix for every t, so a prediction
at t can never observe later visits. ``forward_batch`` evaluates many
prefixes of one patient in a single sweep by running all backward chains
as a masked batch; it matches encoding each prefix separately to float
rounding (risk and attention agree bitwise in practice, raw scores to the
last ulp of the query projection).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, DomainError, UsageError
from .records import PatientRecord

ACTIVATIONS = ("softmax", "sparsemax")


@dataclass(frozen=True)
class ModelConfig:
    num_features: int
    baseline_dim: int = 4
    hidden_size: int = 16
    activation: str = "softmax"
    seed: int = 0

    def __post_init__(self):
        if self.num_features < 1:
            raise ConfigError(f"num_features must be >= 1, got {self.num_features}")
        if self.baseline_dim < 1:
            raise ConfigError(f"baseline_dim must be >= 1, got {self.baseline_dim}")
        if self.hidden_size < 1:
            raise ConfigError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class GruChannel:
    """One direction of one channel's GRU (scalar input, h-dim state)."""

    w_update: Tensor
    u_update: Tensor
    b_update: Tensor
    w_reset: Tensor
    u_reset: Tensor
    b_reset: Tensor
    w_cand: Tensor
    u_cand: Tensor
    b_cand: Tensor


@dataclass
class GruStack:
    """All channels of one direction, stacked: (N, h) inputs, (N, h, h)
    recurrences, (N, h) biases per gate."""

    w_update: Tensor
    u_update: Tensor
    b_update: Tensor
    w_reset: Tensor
    u_reset: Tensor
    b_reset: Tensor
    w_cand: Tensor
    u_cand: Tensor
    b_cand: Tensor

    def channel(self, n: int) -> GruChannel:
        return GruChannel(*(Tensor(getattr(self, f.name).data[n])
                            for f in fields(GruChannel)))


@dataclass
class ModelParams:
    fwd: GruStack
    bwd: GruStack
    emb_weight: Tensor       # (h, N0)
    emb_bias: Tensor         # (h,)
    query_weight: Tensor     # (h, h)
    query_bias: Tensor       # (h,)
    key_weight: Tensor       # (N, h, h)
    key_bias: Tensor         # (N, h)
    head_weight: Tensor      # (2h,)
    head_bias: Tensor        # ()

    def named(self) -> dict[str, Tensor]:
        out = {}
        for direction, stack in (("fwd", self.fwd), ("bwd", self.bwd)):
            for f in fields(GruStack):
                out[f"{direction}.{f.name}"] = getattr(stack, f.name)
        out["emb_weight"] = self.emb_weight
        out["emb_bias"] = self.emb_bias
        out["query_weight"] = self.query_weight
        out["query_bias"] = self.query_bias
        out["key_weight"] = self.key_weight
        out["key_bias"] = self.key_bias
        out["head_weight"] = self.head_weight
        out["head_bias"] = self.head_bias
        return out

    def copy(self) -> "ModelParams":
        named = self.named()
        arrays = {k: v.data.copy() for k, v in named.items()}
        return params_from_arrays(arrays)


def _gru_stack_from(arrays: dict[str, np.ndarray], direction: str) -> GruStack:
    return GruStack(*(Tensor(arrays[f"{direction}.{f.name}"], requires_grad=True)
                      for f in fields(GruStack)))


def params_from_arrays(arrays: dict[str, np.ndarray]) -> ModelParams:
    return ModelParams(
        fwd=_gru_stack_from(arrays, "fwd"),
        bwd=_gru_stack_from(arrays, "bwd"),
        emb_weight=Tensor(arrays["emb_weight"], requires_grad=True),
        emb_bias=Tensor(arrays["emb_bias"], requires_grad=True),
        query_weight=Tensor(arrays["query_weight"], requires_grad=True),
        query_bias=Tensor(arrays["query_bias"], requires_grad=True),
        key_weight=Tensor(arrays["key_weight"], requires_grad=True),
        key_bias=Tensor(arrays["key_bias"], requires_grad=True),
        head_weight=Tensor(arrays["head_weight"], requires_grad=True),
        head_bias=Tensor(arrays["head_bias"], requires_grad=True),
    )


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    Draw order is fixed by field order, so one seed always reproduces the
    same parameters bitwise.
    """
    rng = np.random.default_rng(config.seed)
    n, h, n0 = config.num_features, config.hidden_size, config.baseline_dim

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def gru_stack():
        spec = {}
        for gate in ("update", "reset", "cand"):
            spec[f"w_{gate}"] = uniform((n, h), 1)
            spec[f"u_{gate}"] = uniform((n, h, h), h)
            spec[f"b_{gate}"] = np.zeros((n, h))
        return GruStack(**{k: Tensor(v, requires_grad=True) for k, v in spec.items()})

    return ModelParams(
        fwd=gru_stack(),
        bwd=gru_stack(),
        emb_weight=Tensor(uniform((h, n0), n0), requires_grad=True),
        emb_bias=Tensor(np.zeros(h), requires_grad=True),
        query_weight=Tensor(uniform((h, h), h), requires_grad=True),
        query_bias=Tensor(np.zeros(h), requires_grad=True),
        key_weight=Tensor(uniform((n, h, h), h), requires_grad=True),
        key_bias=Tensor(np.zeros((n, h)), requires_grad=True),
        head_weight=Tensor(uniform((2 * h,), 2 * h), requires_grad=True),
        head_bias=Tensor(np.zeros(()), requires_grad=True),
    )


def gru_cell(x: float, h_prev, params: GruChannel) -> Tensor:
    """One GRU step for one channel.

    update z and reset r gates are logistic; the candidate applies the reset
    gate to the previous state inside its recurrent term; the new state is
    (1 - z) * h_prev + z * candidate.
    """
    h_prev = ad.as_tensor(h_prev)
    hd = params.u_update.data.shape[0]
    if h_prev.data.shape != (hd,):
        raise DimensionError(
            f"h_prev shape {h_prev.data.shape} does not match hidden size {hd}")
    x = float(x)
    pre_z = ad.add(ad.add(ad.mul(params.w_update, x),
                          ad.matmul(params.u_update, h_prev)), params.b_update)
    z = ad.sigmoid(pre_z)
    pre_r = ad.add(ad.add(ad.mul(params.w_reset, x),
                          ad.matmul(params.u_reset, h_prev)), params.b_reset)
    r = ad.sigmoid(pre_r)
    pre_c = ad.add(ad.add(ad.mul(params.w_cand, x),
                          ad.matmul(params.u_cand, ad.mul(r, h_prev))), params.b_cand)
    cand = ad.tanh(pre_c)
    return ad.add(ad.mul(ad.sub(1.0, z), h_prev), ad.mul(z, cand))


def encode_channel(series, params_fwd: GruChannel, params_bwd: GruChannel) -> Tensor:
    """Bi-GRU embedding of one channel's scalar series (forward last state
    plus backward first state)."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 1 or series.size == 0:
        raise DomainError(f"series must be a non-empty 1-D array, got shape {series.shape}")
    hd = params_fwd.u_update.data.shape[0]
    h = np.zeros(hd)
    for x in series:
        h = gru_cell(x, h, params_fwd)
    hb = np.zeros(hd)
    for x in series[::-1]:
        hb = gru_cell(x, hb, params_bwd)
    return ad.add(h, hb)


def embed_baseline(baseline, params: ModelParams) -> Tensor:
    return ad.affine(params.emb_weight, params.emb_bias, baseline)


def squeeze_embeddings(embeddings: list) -> Tensor:
    """Elementwise mean of the baseline and channel embeddings."""
    if not embeddings:
        raise DomainError("squeeze needs at least one embedding")
    total = embeddings[0]
    for e in embeddings[1:]:
        total = ad.add(total, e)
    return ad.mul(total, 1.0 / len(embeddings))


def attention_weights(squeeze, channel_embs, params: ModelParams,
                      activation: str = "softmax") -> tuple[Tensor, Tensor]:
    """Per-feature attention for one visit.

    Returns (attention, scores) where scores are the raw query-key inner
    products and attention is their softmax or sparsemax.
    """
    if activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    q = ad.affine(params.query_weight, params.query_bias, squeeze)
    keys = ad.add(ad.channel_matvec(params.key_weight, channel_embs), params.key_bias)
    scores = ad.ssum(ad.mul(ad.reshape(q, (1, -1)), keys), axis=-1)
    act = ad.softmax if activation == "softmax" else ad.sparsemax
    return act(scores), scores


def predict_head(weighted, baseline_emb, params: ModelParams) -> Tensor:
    """Sigmoid risk from the attention-weighted context and baseline embedding."""
    s = ad.concat([weighted, baseline_emb], axis=0)
    logit = ad.add(ad.ssum(ad.mul(s, params.head_weight)), params.head_bias)
    return ad.sigmoid(logit)


@dataclass(frozen=True)
class VisitPrediction:
    visit_index: int             # 1-based prefix length
    risk: float
    attention: np.ndarray        # (N,)
    scores: np.ndarray           # (N,) raw attention scores


def _check_record(record: PatientRecord, config: ModelConfig) -> None:
    if record.values.shape[1] != config.num_features:
        raise ConfigError(
            f"record has {record.values.shape[1]} features, model expects "
            f"{config.num_features}")
    if record.baseline.shape != (config.baseline_dim,):
        raise ConfigError(
            f"record baseline shape {record.baseline.shape} does not match "
            f"baseline_dim {config.baseline_dim}")
    if np.isnan(record.values).any() or np.isnan(record.baseline).any():
        raise DomainError("record contains missing values; impute before prediction")


def _cmv(u: np.ndarray, hm: np.ndarray) -> np.ndarray:
    # (m, N, i) through per-channel (N, o, i); same kernel as ad.channel_matvec.
    return np.matmul(hm.transpose(1, 0, 2), u.transpose(0, 2, 1)).transpose(1, 0, 2)


def _cmv_t(u: np.ndarray, gm: np.ndarray) -> np.ndarray:
    # Transposed map of _cmv: pushes an (m, N, o) gradient back to (m, N, i).
    return np.matmul(gm.transpose(1, 0, 2), u).transpose(1, 0, 2)


def _gru_step_stack(x_col: np.ndarray, h, g: GruStack,
                    active: np.ndarray | None = None) -> Tensor:
    """One stacked GRU step for all channels, fused into a single tape entry.

    ``h`` is (N, h) or (m, N, h); ``x_col`` is the constant (N, 1) input
    column. With ``active`` (an (m, 1, 1) mask) rows where the mask is false
    keep their previous state, which lets many backward chains of different
    lengths advance together. The hand-written pullback mirrors the
    composed-op gradient exactly.
    """
    h = ad.as_tensor(h)
    lead = h.data.shape[:-2]
    n, hd = h.data.shape[-2:]
    hm = h.data.reshape(-1, n, hd)
    m = hm.shape[0]

    wz, uz, bz = g.w_update, g.u_update, g.b_update
    wr, ur, br = g.w_reset, g.u_reset, g.b_reset
    wc, uc, bc = g.w_cand, g.u_cand, g.b_cand

    z = ad.sigmoid_np((wz.data * x_col + _cmv(uz.data, hm)) + bz.data)
    r = ad.sigmoid_np((wr.data * x_col + _cmv(ur.data, hm)) + br.data)
    rh = r * hm
    c = np.tanh((wc.data * x_col + _cmv(uc.data, rh)) + bc.data)
    h_new = (1.0 - z) * hm + z * c
    if active is not None:
        mask = np.broadcast_to(active, (m, 1, 1))
        out_data = np.where(mask, h_new, hm)
    else:
        mask = None
        out_data = h_new
    out_data = out_data.reshape(*lead, n, hd)

    def pullback(grad):
        gm = grad.reshape(-1, n, hd)
        if mask is not None:
            dh = gm * ~mask
            gm = gm * mask
        else:
            dh = np.zeros_like(gm)
        dz = gm * (c - hm)
        dc = gm * z
        dh = dh + gm * (1.0 - z)

        dpre_c = dc * (1.0 - c * c)
        drh = _cmv_t(uc.data, dpre_c)
        dr = drh * hm
        dh = dh + drh * r
        dpre_r = dr * r * (1.0 - r)
        dh = dh + _cmv_t(ur.data, dpre_r)
        dpre_z = dz * z * (1.0 - z)
        dh = dh + _cmv_t(uz.data, dpre_z)

        def ugrad(dpre, hin):
            return np.matmul(dpre.transpose(1, 2, 0), hin.transpose(1, 0, 2))

        return [
            (dpre_z * x_col).sum(axis=0), ugrad(dpre_z, hm), dpre_z.sum(axis=0),
            (dpre_r * x_col).sum(axis=0), ugrad(dpre_r, hm), dpre_r.sum(axis=0),
            (dpre_c * x_col).sum(axis=0), ugrad(dpre_c, rh), dpre_c.sum(axis=0),
            dh.reshape(grad.shape),
        ]

    return ad.custom(out_data, [wz, uz, bz, wr, ur, br, wc, uc, bc, h], pullback)


def forward_batch(record: PatientRecord, ts: list[int], params: ModelParams,
                  config: ModelConfig, activation: str | None = None
                  ) -> tuple[Tensor, Tensor, Tensor]:
    """Risk, attention, and scores tensors for several prefixes of one patient.

    ``ts`` holds 1-based visit indices. The forward GRU runs once over the
    longest requested prefix (forward states are prefix-shared); the
    backward GRU runs one chain per requested prefix, all advanced together
    with an activity mask so a chain only consumes visits <= its own t.
    Returns (risk (m,), attention (m, N), scores (m, N)).
    """
    _check_record(record, config)
    if not ts:
        raise DomainError("ts must name at least one visit")
    T = record.num_visits
    for t in ts:
        if not 1 <= t <= T:
            raise UsageError(f"visit index {t} out of range 1..{T}")
    act = activation if activation is not None else config.activation
    if act not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {act!r}")

    X = record.values
    n, hd = config.num_features, config.hidden_size
    m = len(ts)
    tmax = max(ts)
    wanted = set(ts)

    h = np.zeros((n, hd))
    fwd_states: dict[int, Tensor] = {}
    for j in range(1, tmax + 1):
        h = _gru_step_stack(X[j - 1][:, None], h, params.fwd)
        if j in wanted:
            fwd_states[j] = h
    fwd_stack = ad.stack([fwd_states[t] for t in ts], axis=0)       # (m, N, h)

    ts_arr = np.array(ts)
    S = np.zeros((m, n, hd))
    for j in range(tmax, 0, -1):
        active = (ts_arr >= j)[:, None, None]
        S = _gru_step_stack(X[j - 1][:, None], S, params.bwd, active=active)

    f = ad.add(fwd_stack, S)                                        # (m, N, h)
    f0 = embed_baseline(record.baseline, params)                    # (h,)
    fsqz = ad.mul(ad.add(ad.ssum(f, axis=1), f0), 1.0 / (n + 1))    # (m, h)
    q = ad.add(ad.matmul(fsqz, ad.transpose(params.query_weight)), params.query_bias)
    keys = ad.add(ad.channel_matvec(params.key_weight, f), params.key_bias)
    scores = ad.ssum(ad.mul(ad.reshape(q, (m, 1, hd)), keys), axis=2)   # (m, N)
    alpha = (ad.softmax if act == "softmax" else ad.sparsemax)(scores)
    weighted = ad.ssum(ad.mul(ad.reshape(alpha, (m, n, 1)), f), axis=1)  # (m, h)
    f0_rows = ad.mul(ad.reshape(f0, (1, hd)), np.ones((m, 1)))
    s = ad.concat([weighted, f0_rows], axis=1)                      # (m, 2h)
    logits = ad.add(ad.ssum(ad.mul(s, params.head_weight), axis=1), params.head_bias)
    risk = ad.sigmoid(logits)
    return risk, alpha, scores


def forward_visits(record: PatientRecord, ts: list[int], params: ModelParams,
                   config: ModelConfig, activation: str | None = None
                   ) -> list[VisitPrediction]:
    risk, alpha, scores = forward_batch(record, ts, params, config, activation)
    return [VisitPrediction(t, float(risk.data[i]), alpha.data[i].copy(),
                            scores.data[i].copy())
            for i, t in enumerate(ts)]


def forward_prefix(record: PatientRecord, t: int, params: ModelParams,
                   config: ModelConfig, activation: str | None = None) -> VisitPrediction:
    """Risk and attention at visit t, computed from visits 1..t only."""
    return forward_visits(record, [t], params, config, activation)[0]


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams, config: ModelConfig,
                    extras: dict | None = None) -> None:
    """Write a self-contained JSON checkpoint (parameters are row-major
    float64 decimals that round-trip bitwise)."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.named().items()
        },
    }
    if extras:
        payload.update(extras)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format_version {version!r}; "
            f"this build reads version {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(payload["config"])
    reference = init_params(config)
    arrays = {}
    for name, t in reference.named().items():
        entry = payload["params"].get(name)
        if entry is None:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != t.data.shape:
            raise ConfigError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, "
                f"expected {t.data.shape}")
        arrays[name] = arr
    extras = {k: v for k, v in payload.items()
              if k not in ("format_version", "config", "params")}
    return params_from_arrays(arrays), config, extras
