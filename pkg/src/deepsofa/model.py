"""GRU + causal attention mortality network with hand-written backprop.

Shapes: ``B`` sequences, ``T`` hours (padded to the longest in the batch),
``d`` input channels, ``k`` hidden units. Row ``t`` of every output depends
only on input hours ``0..t``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .container import read_container, write_container
from .ingest import EncounterSeries
from .numerics import dropout_mask, glorot_uniform, make_rng, masked_softmax, sigmoid
from .variables import VAR_INDEX, resolve_subset

logger = logging.getLogger(__name__)

ATTENTION_MODES = ("self_attention", "self_attention_literal", "global_attention", "last_hidden")
PROB_CLAMP = 1e-7
CHECKPOINT_VERSION = 1

GRU_KEYS = ("W_r", "U_r", "b_r", "W_z", "U_z", "b_z", "W_x", "U", "b_h")


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    dropout_p: float = 0.2
    l2_lambda: float = 1e-6
    batch_size: int = 16
    patience_epochs: int = 5
    max_epochs: int = 50
    attention_mode: str = "self_attention"
    feature_subset: str = "all"
    seed: int = 0
    scale_attention: bool = False
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        resolve_subset(self.feature_subset)

    @property
    def columns(self) -> tuple[str, ...]:
        return resolve_subset(self.feature_subset)

    @property
    def input_dim(self) -> int:
        return len(self.columns)


@dataclass
class PredictionTrajectory:
    probs: np.ndarray  # (T,)
    attention: np.ndarray  # (T, T) lower triangular
    hidden_final: np.ndarray  # (k,)

    def attention_diagonal(self) -> np.ndarray:
        return np.diag(self.attention).copy()


# ---------------------------------------------------------------- parameters


def init_params(config: ModelConfig, input_dim: Optional[int] = None) -> dict:
    d = config.input_dim if input_dim is None else input_dim
    k = config.hidden_dim
    rng = make_rng(config.seed, 0)
    p = {}
    for gate, rec in (("r", "U_r"), ("z", "U_z"), ("x", "U")):
        p[f"W_{gate}"] = glorot_uniform(rng, k, d)
        p[rec] = glorot_uniform(rng, k, k)
        p["b_h" if gate == "x" else f"b_{gate}"] = np.zeros(k)
    p = {key: p[key] for key in GRU_KEYS}
    mode = config.attention_mode
    if mode.startswith("self_attention"):
        for key in ("W_Q", "W_K", "W_V"):
            p[key] = glorot_uniform(rng, k, k)
    elif mode == "global_attention":
        p["W_att"] = glorot_uniform(rng, 1, k)
    p["W_Y"] = glorot_uniform(rng, 1, k)
    p["b_Y"] = np.zeros(1)
    return p


# ---------------------------------------------------------------- forward


def gru_step(params: dict, x, h_prev):
    """One GRU update for a single vector or a batch of row vectors."""
    r = sigmoid(x @ params["W_r"].T + h_prev @ params["U_r"].T + params["b_r"])
    z = sigmoid(x @ params["W_z"].T + h_prev @ params["U_z"].T + params["b_z"])
    hc = np.tanh(x @ params["W_x"].T + params["b_h"] + r * (h_prev @ params["U"].T))
    return (1.0 - z) * h_prev + z * hc


def _attention_logits(params, H, mode, scale):
    """Logits (B, T, T); entry [b, t, i] scores key i for query row t."""
    B, T, k = H.shape
    if mode == "self_attention":
        Q = H @ params["W_Q"].T
        K = H @ params["W_K"].T
        return Q @ K.transpose(0, 2, 1) * scale, Q, K
    if mode == "self_attention_literal":
        Q = H @ params["W_Q"].T
        K = H @ params["W_K"].T
        s = (Q * K).sum(-1) * scale
        return np.broadcast_to(s[:, None, :], (B, T, T)), Q, K
    if mode == "global_attention":
        s = (H @ params["W_att"].T)[..., 0]
        return np.broadcast_to(s[:, None, :], (B, T, T)), None, None
    raise ValueError(mode)


def _causal_mask(T):
    return np.tril(np.ones((T, T), dtype=bool))


def attention_scale(config: ModelConfig) -> float:
    return 1.0 / np.sqrt(config.hidden_dim) if config.scale_attention else 1.0


def forward_batch(params, X, lengths, config: ModelConfig, train=False, rng=None, keep_cache=False):
    """Run the network on a padded batch ``X`` (B, T, d).

    Returns ``(probs (B, T), attention (B, T, T), cache)``; padded rows are
    computed but carry no meaning.
    """
    B, T, _ = X.shape
    k = params["U"].shape[0]
    mode = config.attention_mode

    Wi = np.concatenate([params["W_r"], params["W_z"], params["W_x"]])
    bi = np.concatenate([params["b_r"], params["b_z"], params["b_h"]])
    Uh = np.concatenate([params["U_r"], params["U_z"]])
    Xp = X @ Wi.T + bi

    H = np.empty((B, T, k))
    R = np.empty((B, T, k))
    Z = np.empty((B, T, k))
    HC = np.empty((B, T, k))
    UH = np.empty((B, T, k))
    Hprev = np.empty((B, T, k))
    h = np.zeros((B, k))
    for t in range(T):
        g = h @ Uh.T
        r = sigmoid(Xp[:, t, :k] + g[:, :k])
        z = sigmoid(Xp[:, t, k : 2 * k] + g[:, k:])
        u = h @ params["U"].T
        hc = np.tanh(Xp[:, t, 2 * k :] + r * u)
        Hprev[:, t] = h
        h = (1.0 - z) * h + z * hc
        H[:, t], R[:, t], Z[:, t], HC[:, t], UH[:, t] = h, r, z, hc, u

    mask = _causal_mask(T)
    Q = K = V = None
    if mode == "last_hidden":
        A = np.broadcast_to(np.eye(T), (B, T, T))
        C = H
    else:
        S, Q, K = _attention_logits(params, H, mode, attention_scale(config))
        A = masked_softmax(S, mask=mask)
        if mode == "global_attention":
            C = A @ H
        else:
            V = H @ params["W_V"].T
            C = A @ V

    if train and config.dropout_p > 0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        M = dropout_mask(rng, C.shape, config.dropout_p)
        Cd = C * M
    else:
        M = None
        Cd = C
    logits = (Cd @ params["W_Y"].T)[..., 0] + params["b_Y"][0]
    probs = sigmoid(logits)
    cache = None
    if keep_cache:
        cache = dict(X=X, H=H, R=R, Z=Z, HC=HC, UH=UH, Hprev=Hprev, A=A, C=C, M=M, Cd=Cd, Q=Q, K=K, V=V)
    return probs, np.array(A), cache


def sequence_loss(probs, label) -> float:
    """Target-replicated cross-entropy: mean over hours of BCE against the stay label."""
    p = np.clip(np.asarray(probs, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = float(label)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def loss(trajectory: PredictionTrajectory, label) -> float:
    return sequence_loss(trajectory.probs, label)


def batch_loss(probs, lengths, labels) -> float:
    return float(np.mean([sequence_loss(probs[b, :L], labels[b]) for b, L in enumerate(lengths)]))


# ---------------------------------------------------------------- backward


def backward_batch(params, cache, probs, lengths, labels, config: ModelConfig) -> dict:
    """Gradient of the mean per-sequence loss with respect to every parameter."""
    X, H, A, C, Cd, M = cache["X"], cache["H"], cache["A"], cache["C"], cache["Cd"], cache["M"]
    B, T, k = H.shape
    mode = config.attention_mode
    lengths = np.asarray(lengths)
    y = np.asarray(labels, dtype=float)[:, None]
    valid = np.arange(T)[None, :] < lengths[:, None]
    inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    dlogit = np.where(valid & inside, (probs - y) / (lengths[:, None] * B), 0.0)

    g = {}
    g["W_Y"] = np.einsum("bt,btk->k", dlogit, Cd)[None, :]
    g["b_Y"] = np.array([dlogit.sum()])
    dCd = dlogit[..., None] * params["W_Y"][0]
    dC = dCd * M if M is not None else dCd

    dH = np.zeros_like(H)
    if mode == "last_hidden":
        dH += dC
    else:
        if mode == "global_attention":
            dA = dC @ H.transpose(0, 2, 1)
            dH += A.transpose(0, 2, 1) @ dC
        else:
            V = cache["V"]
            dA = dC @ V.transpose(0, 2, 1)
            dV = A.transpose(0, 2, 1) @ dC
            g["W_V"] = np.einsum("bti,btj->ij", dV, H)
            dH += dV @ params["W_V"]
        dS = A * (dA - (A * dA).sum(-1, keepdims=True))
        scale = attention_scale(config)
        if mode == "self_attention":
            Q, K = cache["Q"], cache["K"]
            dQ = dS @ K * scale
            dK = dS.transpose(0, 2, 1) @ Q * scale
        elif mode == "self_attention_literal":
            Q, K = cache["Q"], cache["K"]
            ds = dS.sum(1)[..., None] * scale
            dQ = ds * K
            dK = ds * Q
        else:
            ds = dS.sum(1)
            g["W_att"] = np.einsum("bi,bik->k", ds, H)[None, :]
            dH += ds[..., None] * params["W_att"][0]
        if mode.startswith("self_attention"):
            g["W_Q"] = np.einsum("bti,btj->ij", dQ, H)
            g["W_K"] = np.einsum("bti,btj->ij", dK, H)
            dH += dQ @ params["W_Q"] + dK @ params["W_K"]

    # backprop through time
    R, Z, HC, UH, Hprev = cache["R"], cache["Z"], cache["HC"], cache["UH"], cache["Hprev"]
    dAr = np.empty_like(H)
    dAz = np.empty_like(H)
    dAh = np.empty_like(H)
    dU_in = np.empty_like(H)
    Uh = np.concatenate([params["U_r"], params["U_z"]])
    U = params["U"]
    dh = np.zeros((B, k))
    for t in range(T - 1, -1, -1):
        dh = dh + dH[:, t]
        r, z, hc, u, hp = R[:, t], Z[:, t], HC[:, t], UH[:, t], Hprev[:, t]
        dz = dh * (hc - hp)
        dhc = dh * z
        dah = dhc * (1.0 - hc * hc)
        dr = dah * u
        du = dah * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dAr[:, t], dAz[:, t], dAh[:, t], dU_in[:, t] = dar, daz, dah, du
        dh = dh * (1.0 - z) + du @ U + np.concatenate([dar, daz], axis=1) @ Uh
    g["W_r"] = np.einsum("bti,btj->ij", dAr, X)
    g["W_z"] = np.einsum("bti,btj->ij", dAz, X)
    g["W_x"] = np.einsum("bti,btj->ij", dAh, X)
    g["U_r"] = np.einsum("bti,btj->ij", dAr, Hprev)
    g["U_z"] = np.einsum("bti,btj->ij", dAz, Hprev)
    g["U"] = np.einsum("bti,btj->ij", dU_in, Hprev)
    g["b_r"] = dAr.sum((0, 1))
    g["b_z"] = dAz.sum((0, 1))
    g["b_h"] = dAh.sum((0, 1))
    return {key: g[key] for key in params}


def pad_batch(sequences):
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    T = int(lengths.max())
    d = sequences[0].shape[1]
    X = np.zeros((len(sequences), T, d))
    for b, s in enumerate(sequences):
        X[b, : len(s)] = s
    return X, lengths


def gradients(params, batch, config: ModelConfig, rng=None, train=None):
    """Mean-batch-loss gradient for ``batch`` = list of (normalized inputs (T, d), label).

    Dropout is active when ``config.dropout_p > 0`` and an ``rng`` is given,
    unless ``train`` says otherwise. Returns ``(loss, grads)``.
    """
    if not batch:
        raise ValueError("empty batch")
    X, lengths = pad_batch([x for x, _ in batch])
    labels = np.array([y for _, y in batch], dtype=float)
    if train is None:
        train = rng is not None and config.dropout_p > 0
    probs, _, cache = forward_batch(params, X, lengths, config, train=train, rng=rng, keep_cache=True)
    return batch_loss(probs, lengths, labels), backward_batch(params, cache, probs, lengths, labels, config)


# ---------------------------------------------------------------- attention routes


def attend(hiddens, params, mode: str, scale: float = 1.0):
    """Context vector and weights for the last row of ``hiddens`` (t, k)."""
    Hs = np.asarray(hiddens, dtype=float)
    t = Hs.shape[0]
    if t < 1:
        raise ValueError("need at least one hidden state")
    if mode == "last_hidden":
        w = np.zeros(t)
        w[-1] = 1.0
        return Hs[-1].copy(), w
    if mode == "global_attention":
        w = masked_softmax(Hs @ params["W_att"][0])
        return w @ Hs, w
    K = Hs @ params["W_K"].T
    if mode == "self_attention":
        logits = K @ (params["W_Q"] @ Hs[-1]) * scale
    else:
        logits = (Hs @ params["W_Q"].T * K).sum(-1) * scale
    w = masked_softmax(logits)
    return w @ (Hs @ params["W_V"].T), w


def attend_sequence_copy(H, params, mode: str, scale: float = 1.0):
    """Causal attention via the T x T sequence-copy construction.

    The sequence is copied into T rows and row t keeps entries 0..t through a
    multiplicative lower-triangular mask. Used to cross-check the additive
    masking in :func:`forward_batch`.
    """
    H = np.asarray(H, dtype=float)
    T, k = H.shape
    tri = np.tril(np.ones((T, T)))
    copies = np.broadcast_to(H, (T, T, k)) * tri[..., None]  # row t: h_0..h_t then zeros
    if mode == "last_hidden":
        return H.copy(), np.eye(T)
    if mode == "global_attention":
        logits = copies @ params["W_att"][0]
        values = copies
    else:
        keys = copies @ params["W_K"].T
        if mode == "self_attention":
            q = H @ params["W_Q"].T
            logits = np.einsum("tik,tk->ti", keys, q) * scale
        else:
            logits = (copies @ params["W_Q"].T * keys).sum(-1) * scale
        values = copies @ params["W_V"].T
    contexts = np.empty((T, k))
    weights = np.zeros((T, T))
    for t in range(T):
        shift = logits[t, : t + 1].max()
        e = np.exp(logits[t] - shift) * tri[t]
        weights[t] = e / e.sum()
        contexts[t] = weights[t] @ values[t]
    return contexts, weights


# ---------------------------------------------------------------- model bundle


@dataclass
class DeepSofaModel:
    config: ModelConfig
    params: dict
    mean: np.ndarray
    std: np.ndarray

    @property
    def column_index(self) -> np.ndarray:
        return np.array([VAR_INDEX[c] for c in self.config.columns])

    def inputs(self, series: EncounterSeries) -> np.ndarray:
        return normalize(series.grid, self.column_index, self.mean, self.std)

    def forward(self, series_list, train=False, rng=None):
        X, lengths = pad_batch([self.inputs(s) for s in series_list])
        probs, att, _ = forward_batch(self.params, X, lengths, self.config, train=train, rng=rng)
        return [(probs[b, :L], att[b, :L, :L]) for b, L in enumerate(lengths)]

    def save(self, path) -> None:
        meta = {"config": dataclasses.asdict(self.config), "param_keys": list(self.params)}
        arrays = {"norm_mean": self.mean, "norm_std": self.std}
        arrays.update({f"param/{k}": v for k, v in self.params.items()})
        write_container(path, "deepsofa-checkpoint", CHECKPOINT_VERSION, meta, arrays)

    @classmethod
    def load(cls, path) -> "DeepSofaModel":
        _, meta, arrays = read_container(path, kind="deepsofa-checkpoint", max_version=CHECKPOINT_VERSION)
        config = ModelConfig(**meta["config"])
        params = {k: arrays[f"param/{k}"] for k in meta["param_keys"]}
        return cls(config, params, arrays["norm_mean"], arrays["norm_std"])


def normalize(grid, columns, mean, std) -> np.ndarray:
    return (grid[:, columns] - mean) / std


def fit_normalization(cohort, columns) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std over all hours of the training cohort."""
    stacked = np.concatenate([s.grid[:, columns] for s in cohort])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


# ---------------------------------------------------------------- streaming


class StreamingPredictor:
    """Hour-by-hour inference; attention over past hours is recomputed each hour."""

    def __init__(self, model: DeepSofaModel):
        self.model = model
        p = model.params
        self._k = p["U"].shape[0]
        self._h = np.zeros(self._k)
        self._hiddens: list[np.ndarray] = []
        self._scale = attention_scale(model.config)
        self.probs: list[float] = []
        self.rows: list[np.ndarray] = []

    def push(self, grid_row) -> tuple[float, np.ndarray]:
        m = self.model
        x = normalize(np.asarray(grid_row, dtype=float)[None, :], m.column_index, m.mean, m.std)[0]
        self._h = gru_step(m.params, x, self._h)
        self._hiddens.append(self._h)
        context, w = attend(np.array(self._hiddens), m.params, m.config.attention_mode, self._scale)
        prob = float(sigmoid(np.array([context @ m.params["W_Y"][0] + m.params["b_Y"][0]]))[0])
        self.probs.append(prob)
        self.rows.append(w)
        return prob, w

    def trajectory(self) -> PredictionTrajectory:
        T = len(self.probs)
        att = np.zeros((T, T))
        for t, w in enumerate(self.rows):
            att[t, : t + 1] = w
        return PredictionTrajectory(np.array(self.probs), att, self._h.copy())


def predict_stream(model: DeepSofaModel, series: EncounterSeries) -> PredictionTrajectory:
    sp = StreamingPredictor(model)
    for row in series.grid:
        sp.push(row)
    return sp.trajectory()


def forward(model: DeepSofaModel, series: EncounterSeries, train_mode=False, rng=None) -> PredictionTrajectory:
    X = model.inputs(series)[None]
    probs, att, cache = forward_batch(
        model.params, X, np.array([series.T]), model.config, train=train_mode, rng=rng, keep_cache=True
    )
    return PredictionTrajectory(probs[0], att[0], cache["H"][0, -1].copy())
