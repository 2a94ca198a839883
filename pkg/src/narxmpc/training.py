"""Excitation design, datasets, and simulation-error training.

Models are trained by minimizing the open-loop (simulation) mean square
error over randomly extracted fixed-length subsequences, with gradients
accumulated by reverse sweeps through the full rollout.  A penalty on the
window-Lipschitz margin keeps the learned dynamics contractive.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nnarx import (Array, FfnnLayer, FfnnParams, InputBox, NnarxModel,
                    Normalization, _act, _act_deriv_from_output,
                    contraction_margin, contraction_margin_with_grad,
                    eta_batch, make_model)


class TrainingDiverged(RuntimeError):
    pass


def _col(a) -> Array:
    a = np.asarray(a, float)
    return a[:, None] if a.ndim == 1 else a


# ---------------------------------------------------------------------------
# Time series containers


@dataclass
class IoSequence:
    """Sampled input/output record: u in plant-input units, y in output units."""

    tau_s: float
    u: Array
    y: Array

    def __post_init__(self):
        self.u = _col(self.u)
        self.y = _col(self.y)
        if self.tau_s <= 0:
            raise ValueError("sampling period must be positive")
        if len(self.u) != len(self.y):
            raise ValueError("input and output records differ in length")

    def __len__(self) -> int:
        return len(self.u)

    def window(self, start: int, length: int) -> "IoSequence":
        return IoSequence(self.tau_s, self.u[start:start + length],
                          self.y[start:start + length])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u", "y"])
            for k in range(len(self)):
                w.writerow([repr(float(k * self.tau_s)),
                            *(repr(float(v)) for v in self.u[k]),
                            *(repr(float(v)) for v in self.y[k])])

    @staticmethod
    def from_csv(path) -> "IoSequence":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, rows = rows[0], rows[1:]
        if header[:3] != ["t", "u", "y"]:
            raise ValueError("expected header t,u,y")
        t = np.array([float(r[0]) for r in rows])
        u = np.array([[float(r[1])] for r in rows])
        y = np.array([[float(r[2])] for r in rows])
        tau = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return IoSequence(tau, u, y)


@dataclass
class Dataset:
    """Fixed-length subsequences split across distinct experiments."""

    train: list[IoSequence]
    val: list[IoSequence]
    test: list[IoSequence]

    def __post_init__(self):
        lengths = {len(s) for part in (self.train, self.val, self.test) for s in part}
        if len(lengths) > 1:
            raise ValueError("all subsequences must share one length")

    @property
    def subsequence_length(self) -> int:
        return len(self.train[0]) if self.train else 0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 2000
    patience: int = 200
    penalty_weight: float = 0.1
    margin_target: float = 0.95
    batch_size: int | None = None
    seed: int = 0
    normalization: Normalization | None = None
    margin_retries: int = 3

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


# ---------------------------------------------------------------------------
# Excitation and dataset assembly


def generate_mprs(levels, dwell_range, length: int, seed: int,
                  box: InputBox | None = None) -> Array:
    """Multilevel pseudo-random excitation: hold a uniformly drawn level for
    a uniformly drawn dwell, repeated to the requested length."""
    levels = np.asarray(levels, float).ravel()
    lo, hi = int(dwell_range[0]), int(dwell_range[1])
    if lo < 1 or hi < lo:
        raise ValueError("dwell range must satisfy 1 <= min <= max")
    if box is not None and not all(box.contains([lv]) for lv in levels):
        raise ValueError("excitation level outside the input box")
    rng = np.random.default_rng(seed)
    out = np.empty(length)
    k = 0
    while k < length:
        dwell = int(rng.integers(lo, hi + 1))
        level = levels[int(rng.integers(0, len(levels)))]
        out[k:k + dwell] = level
        k += dwell
    return out


def extract_subsequences(seq: IoSequence, T_s: int, count: int,
                         seed: int) -> list[IoSequence]:
    """Randomly placed windows of length T_s; windows may overlap."""
    if T_s > len(seq):
        raise ValueError("subsequence length exceeds the record")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(seq) - T_s + 1, size=count)
    return [seq.window(int(s), T_s) for s in starts]


def compute_normalization(seqs: list[IoSequence]) -> Normalization:
    u = np.concatenate([s.u for s in seqs], axis=0)
    y = np.concatenate([s.y for s in seqs], axis=0)
    u_scale = np.maximum(u.std(axis=0), 1e-12)
    y_scale = np.maximum(y.std(axis=0), 1e-12)
    return Normalization(u.mean(axis=0), u_scale, y.mean(axis=0), y_scale)


def _stack_normalized(seqs: list[IoSequence], norm: Normalization):
    U = np.stack([norm.norm_u(s.u) for s in seqs])
    Y = np.stack([norm.norm_y(s.y) for s in seqs])
    return U, Y


# ---------------------------------------------------------------------------
# Simulation loss with reverse-sweep gradient


def _rollout(params: FfnnParams, N: int, U: Array, Y: Array, keep: bool):
    """Free-run simulation over a batch: the first N+1 samples seed the
    window (the window holds y back to k and u back to k-N, so one extra
    input sample is consumed), the rest is the prediction span."""
    B, T, m = U.shape
    p = Y.shape[2]
    q = m + p
    n = N * q
    K = T - 1 - N
    if K < 1:
        raise ValueError("subsequence too short for the regression window")
    X = np.empty((B, n))
    for j in range(N):
        X[:, j * q:j * q + p] = Y[:, j + 1]
        X[:, j * q + p:(j + 1) * q] = U[:, j]
    Yhat = np.empty((B, K, p))
    hiddens = [] if keep else None
    for t in range(K):
        k = N + t
        out, hidden = eta_batch(params, X, U[:, k], keep_hidden=True)
        Yhat[:, t] = out
        if keep:
            hiddens.append(hidden)
        Xn = np.empty_like(X)
        Xn[:, :n - q] = X[:, q:]
        Xn[:, n - q:n - m] = out
        Xn[:, n - m:] = U[:, k]
        X = Xn
    return Yhat, hiddens


def _zeros_like_params(params: FfnnParams):
    g = []
    for layer in params.layers:
        g += [np.zeros_like(layer.W), np.zeros_like(layer.U), np.zeros_like(layer.b)]
    g += [np.zeros_like(params.U0), np.zeros_like(params.b0)]
    return g


def _pack(grads) -> Array:
    return np.concatenate([g.ravel() for g in grads])


def simulation_mse(params: FfnnParams, N: int, U: Array, Y: Array) -> float:
    Yhat, _ = _rollout(params, N, U, Y, keep=False)
    err = Yhat - Y[:, N + 1:]
    return float(np.sum(err * err) / (err.shape[0] * err.shape[1]))


def simulation_loss(params: FfnnParams, N: int, U: Array, Y: Array,
                    penalty_weight: float = 0.0, margin_target: float = 0.95):
    """Mean squared free-run error plus a soft hinge on the contraction
    margin; returns the loss and its gradient in to_vector() layout."""
    B, T, m = U.shape
    p = Y.shape[2]
    q = m + p
    n = N * q
    K = T - 1 - N
    Yhat, hiddens = _rollout(params, N, U, Y, keep=True)
    E = Yhat - Y[:, N + 1:]
    scale = 1.0 / (B * K)
    loss = float(np.sum(E * E)) * scale

    M = len(params.layers)
    grads = _zeros_like_params(params)
    GX = np.zeros((B, n))
    for t in reversed(range(K)):
        k = N + t
        hidden = hiddens[t]
        dY = 2.0 * scale * E[:, t] + GX[:, n - q:n - m]
        dH = dY @ params.U0
        grads[3 * M] += dY.T @ hidden[-1]
        grads[3 * M + 1] += dY.sum(axis=0)
        for l in range(M - 1, -1, -1):
            layer = params.layers[l]
            dPre = dH * _act_deriv_from_output(layer.activation, hidden[l + 1])
            grads[3 * l] += dPre.T @ U[:, k]
            grads[3 * l + 1] += dPre.T @ hidden[l]
            grads[3 * l + 2] += dPre.sum(axis=0)
            dH = dPre @ layer.U
        GXn = np.zeros_like(GX)
        GXn[:, q:] = GX[:, :n - q]
        GXn += dH
        GX = GXn
    grad = _pack(grads)

    if penalty_weight > 0.0:
        r, dr = contraction_margin_with_grad(params)
        z = r - margin_target
        loss += penalty_weight * float(np.logaddexp(0.0, z))
        grad += penalty_weight / (1.0 + np.exp(-z)) * dr
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer and training loop


class Adam:
    """Adaptive moment estimation on a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def update(self, vec: Array, grad: Array) -> Array:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return vec - self.lr * mh / (np.sqrt(vh) + self.eps)


def init_params(N: int, m: int, p: int, hidden=(30,), seed: int = 0,
                activation: str = "tanh") -> FfnnParams:
    """Uniform init in +-0.5/sqrt(fan_in); keeps the initial margin small."""
    rng = np.random.default_rng(seed)
    n = N * (m + p)
    layers = []
    prev = n
    for h in hidden:
        bound = 0.5 / np.sqrt(prev + m)
        layers.append(FfnnLayer(
            W=rng.uniform(-bound, bound, size=(h, m)),
            U=rng.uniform(-bound, bound, size=(h, prev)),
            b=np.zeros(h),
            activation=activation,
        ))
        prev = h
    bound = 0.5 / np.sqrt(prev)
    return FfnnParams(layers,
                      U0=rng.uniform(-bound, bound, size=(p, prev)),
                      b0=np.zeros(p))


def train(model: NnarxModel, dataset: Dataset, config: TrainConfig):
    """Simulation-error minimization with early stopping on validation MSE.

    Returns the weights snapshot with the best validation loss and the
    per-epoch history.  The returned model must satisfy the contraction
    gate margin < 1; training restarts with a tenfold penalty otherwise.
    """
    if not dataset.train or not dataset.val:
        raise ValueError("training and validation partitions must be nonempty")
    norm = config.normalization or compute_normalization(dataset.train)
    Ut, Yt = _stack_normalized(dataset.train, norm)
    Uv, Yv = _stack_normalized(dataset.val, norm)
    N = model.N
    params0 = model.params.copy()

    penalty = config.penalty_weight
    last_history = None
    for attempt in range(config.margin_retries):
        params, history = _fit(params0.copy(), N, Ut, Yt, Uv, Yv, config, penalty)
        last_history = history
        if contraction_margin(params) < 1.0:
            trained = make_model(N, params, norm)
            return trained, history
        penalty *= 10.0
        history["margin_retry_penalty"] = penalty
    raise TrainingDiverged(
        "contraction margin stayed >= 1 after "
        f"{config.margin_retries} attempts (last margin "
        f"{last_history['epochs'][-1]['margin']:.4f})")


def _fit(params: FfnnParams, N: int, Ut, Yt, Uv, Yv, config: TrainConfig,
         penalty: float):
    rng = np.random.default_rng(config.seed)
    vec = params.to_vector()
    adam = Adam(vec.size, config.learning_rate)
    B = Ut.shape[0]
    bs = config.batch_size or B
    best_val = np.inf
    best_vec = vec.copy()
    best_epoch = 0
    epochs = []
    stall = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(B)
        train_loss = 0.0
        nb = 0
        for s in range(0, B, bs):
            idx = np.sort(order[s:s + bs])
            cur = params.from_vector(vec)
            loss, grad = simulation_loss(cur, N, Ut[idx], Yt[idx],
                                         penalty, config.margin_target)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}")
            vec = adam.update(vec, grad)
            train_loss += loss
            nb += 1
        cur = params.from_vector(vec)
        val = simulation_mse(cur, N, Uv, Yv)
        margin = contraction_margin(cur)
        epochs.append({"epoch": epoch, "train_loss": train_loss / nb,
                       "val_loss": val, "margin": margin})
        if val < best_val - 1e-15:
            best_val = val
            best_vec = vec.copy()
            best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    history = {"epochs": epochs, "best_epoch": best_epoch,
               "best_val_loss": best_val, "epochs_run": len(epochs),
               "penalty_weight": penalty}
    return params.from_vector(best_vec), history


# ---------------------------------------------------------------------------
# Goodness of fit


def fit_index(y_model, y_plant) -> float:
    """Percent agreement of a free-run simulation against the record:
    100 * (1 - sum_k ||y_k - yp_k|| / sum_k ||yp_k - yp_avg||)."""
    ym = _col(y_model)
    yp = _col(y_plant)
    if ym.shape != yp.shape or len(ym) < 2:
        raise ValueError("sequences must share a length of at least 2")
    avg = yp.mean(axis=0)
    denom = float(np.sum(np.linalg.norm(yp - avg, axis=1)))
    if denom == 0.0:
        raise ValueError("plant output is constant; fit index undefined")
    num = float(np.sum(np.linalg.norm(ym - yp, axis=1)))
    return 100.0 * (1.0 - num / denom)


def evaluate_fit(model: NnarxModel, seq: IoSequence) -> float:
    """FIT of the model's free run on a held-out record, seeded with the
    record's first N+1 samples; computed in physical units."""
    norm = model.normalization or Normalization.identity(model.m, model.p)
    U = norm.norm_u(seq.u)[None, :, :]
    Y = norm.norm_y(seq.y)[None, :, :]
    Yhat, _ = _rollout(model.params, model.N, U, Y, keep=False)
    y_sim = norm.denorm_y(Yhat[0])
    return fit_index(y_sim, seq.y[model.N + 1:])
