"""Neural NARX models in shift-register state-space form.

The next output is a feed-forward network of the past N outputs and inputs.
Stacking that window as a state vector turns the regression into a
state-space system whose A, B_u, B_x, C matrices are fixed 0/1 shift
operators; the network is the only learned component.  Because the state is
a window of measured data, it is always known in closed loop and no
observer is needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

TANH = "tanh"
IDENTITY = "identity"
_ACTIVATIONS = (TANH, IDENTITY)

# Power iteration settings for spectral norms.
_SN_TOL = 1e-9
_SN_MAXITER = 500


def _act(kind: str, a: Array) -> Array:
    if kind == TANH:
        return np.tanh(a)
    return a


def _act_deriv_from_output(kind: str, h: Array) -> Array:
    # tanh' expressed through the activation output; identity' == 1.
    if kind == TANH:
        return 1.0 - h * h
    return np.ones_like(h)


def activation_lipschitz(kind: str) -> float:
    """Lipschitz constant of the activation; both supported kinds give 1."""
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")
    return 1.0


@dataclass
class FfnnLayer:
    """One hidden layer h = act(W u + U h_prev + b); the input u is fed to
    every layer, the first layer sees the state window as h_prev."""

    W: Array
    U: Array
    b: Array
    activation: str = TANH

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, float))
        self.U = np.atleast_2d(np.asarray(self.U, float))
        self.b = np.asarray(self.b, float).ravel()
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        h = self.W.shape[0]
        if self.U.shape[0] != h or self.b.shape[0] != h:
            raise ValueError("layer width mismatch between W, U, b")


@dataclass
class FfnnParams:
    """Weights of the regression network: hidden layers plus the linear
    output map y = U0 h_M + b0."""

    layers: list[FfnnLayer]
    U0: Array
    b0: Array

    def __post_init__(self):
        self.U0 = np.atleast_2d(np.asarray(self.U0, float))
        self.b0 = np.asarray(self.b0, float).ravel()
        if not self.layers:
            raise ValueError("at least one hidden layer is required")
        m = self.layers[0].W.shape[1]
        prev = self.layers[0].U.shape[1]
        for l, layer in enumerate(self.layers):
            if layer.W.shape[1] != m:
                raise ValueError(f"layer {l}: input width {layer.W.shape[1]} != {m}")
            if layer.U.shape[1] != prev:
                raise ValueError(f"layer {l}: U expects {layer.U.shape[1]} features, got {prev}")
            prev = layer.U.shape[0]
        if self.U0.shape[1] != prev:
            raise ValueError("output map width does not match last hidden layer")
        if self.b0.shape[0] != self.U0.shape[0]:
            raise ValueError("b0 length does not match output rows")

    @property
    def n_in(self) -> int:
        return self.layers[0].U.shape[1]

    @property
    def m(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def p(self) -> int:
        return self.U0.shape[0]

    def to_vector(self) -> Array:
        parts = []
        for layer in self.layers:
            parts += [layer.W.ravel(), layer.U.ravel(), layer.b]
        parts += [self.U0.ravel(), self.b0]
        return np.concatenate(parts)

    def from_vector(self, vec: Array) -> "FfnnParams":
        """New params with the same shapes, weights taken from a flat vector."""
        vec = np.asarray(vec, float)
        i = 0
        layers = []
        for layer in self.layers:
            nW, nU, nb = layer.W.size, layer.U.size, layer.b.size
            W = vec[i:i + nW].reshape(layer.W.shape); i += nW
            U = vec[i:i + nU].reshape(layer.U.shape); i += nU
            b = vec[i:i + nb].copy(); i += nb
            layers.append(FfnnLayer(W, U, b, layer.activation))
        U0 = vec[i:i + self.U0.size].reshape(self.U0.shape); i += self.U0.size
        b0 = vec[i:i + self.b0.size].copy(); i += self.b0.size
        if i != vec.size:
            raise ValueError("flat vector length does not match parameter shapes")
        return FfnnParams(layers, U0, b0)

    def copy(self) -> "FfnnParams":
        return self.from_vector(self.to_vector())


@dataclass
class Normalization:
    """Per-channel affine scaling between physical and normalized units."""

    u_mean: Array
    u_scale: Array
    y_mean: Array
    y_scale: Array

    def __post_init__(self):
        for name in ("u_mean", "u_scale", "y_mean", "y_scale"):
            setattr(self, name, np.asarray(getattr(self, name), float).ravel())
        if np.any(self.u_scale <= 0) or np.any(self.y_scale <= 0):
            raise ValueError("scales must be strictly positive")

    def norm_u(self, u):
        return (np.asarray(u, float) - self.u_mean) / self.u_scale

    def denorm_u(self, u):
        return np.asarray(u, float) * self.u_scale + self.u_mean

    def norm_y(self, y):
        return (np.asarray(y, float) - self.y_mean) / self.y_scale

    def denorm_y(self, y):
        return np.asarray(y, float) * self.y_scale + self.y_mean

    @staticmethod
    def identity(m: int, p: int) -> "Normalization":
        return Normalization(np.zeros(m), np.ones(m), np.zeros(p), np.ones(p))


@dataclass
class InputBox:
    """Componentwise input bounds; the admissible input set is compact."""

    lower: Array
    upper: Array

    def __post_init__(self):
        self.lower = np.asarray(self.lower, float).ravel()
        self.upper = np.asarray(self.upper, float).ravel()
        if self.lower.shape != self.upper.shape:
            raise ValueError("bound vectors differ in length")
        if np.any(self.lower >= self.upper):
            raise ValueError("lower bounds must be strictly below upper bounds")

    def clip(self, u):
        return np.clip(np.asarray(u, float), self.lower, self.upper)

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, float)
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))

    def violation(self, u) -> float:
        u = np.asarray(u, float)
        return float(np.max(np.maximum.reduce(
            [np.zeros_like(u), self.lower - u, u - self.upper])))

    def normalized(self, norm: Normalization) -> "InputBox":
        return InputBox(norm.norm_u(self.lower), norm.norm_u(self.upper))


def build_shift_matrices(N: int, m: int, p: int):
    """Fixed 0/1 matrices (A, B_u, B_x, C) realizing the window shift.

    State blocks are ordered oldest first, each block [y; u]; one step drops
    the oldest block and appends [new output; applied input].
    """
    if N < 1 or m < 1 or p != m:
        raise ValueError("require N >= 1, m >= 1 and p == m (square system)")
    q = m + p
    n = N * q
    A = np.zeros((n, n))
    if N > 1:
        A[:n - q, q:] = np.eye(n - q)
    B_x = np.zeros((n, p))
    B_x[n - q:n - m, :] = np.eye(p)
    B_u = np.zeros((n, m))
    B_u[n - m:, :] = np.eye(m)
    C = np.zeros((p, n))
    C[:, n - q:n - m] = np.eye(p)
    return A, B_u, B_x, C


@dataclass
class NnarxModel:
    """Window model y+ = eta(window, u) with its state-space realization.

    Immutable after construction; every operation below is a pure function
    of (model, arguments), so instances are safe to share across threads.
    """

    N: int
    m: int
    p: int
    params: FfnnParams
    A: Array = field(repr=False)
    B_u: Array = field(repr=False)
    B_x: Array = field(repr=False)
    C: Array = field(repr=False)
    normalization: Normalization | None = None

    @property
    def n(self) -> int:
        return self.N * (self.m + self.p)

    @property
    def y_slot(self) -> slice:
        q = self.m + self.p
        return slice(self.n - q, self.n - self.m)

    @property
    def u_slot(self) -> slice:
        return slice(self.n - self.m, self.n)

    def state_input_selector(self) -> Array:
        """0/1 matrix stacking one input vector into every u slot of the window."""
        q = self.m + self.p
        P = np.zeros((self.n, self.m))
        for i in range(self.N):
            P[i * q + self.p:(i + 1) * q, :] = np.eye(self.m)
        return P

    def stacked_state(self, y, u) -> Array:
        """Window filled with a constant (y, u) pair; the equilibrium state shape."""
        y = np.asarray(y, float).ravel()
        u = np.asarray(u, float).ravel()
        return np.tile(np.concatenate([y, u]), self.N)


def make_model(N: int, params: FfnnParams,
               normalization: Normalization | None = None) -> NnarxModel:
    m, p = params.m, params.p
    if p != m:
        raise ValueError("square systems only (p == m)")
    if params.n_in != N * (m + p):
        raise ValueError(
            f"first layer expects {params.n_in} state features, window gives {N * (m + p)}")
    A, B_u, B_x, C = build_shift_matrices(N, m, p)
    return NnarxModel(N=N, m=m, p=p, params=params, A=A, B_u=B_u, B_x=B_x, C=C,
                      normalization=normalization)


# ---------------------------------------------------------------------------
# Forward evaluation


def eta_batch(params: FfnnParams, X: Array, U_in: Array,
              keep_hidden: bool = False):
    """Network output for a batch of (state, input) rows.

    X is (B, n), U_in is (B, m); returns (B, p) and, when requested, the
    per-layer activation outputs needed for reverse sweeps.
    """
    H = X
    hidden = [X] if keep_hidden else None
    for layer in params.layers:
        H = _act(layer.activation, U_in @ layer.W.T + H @ layer.U.T + layer.b)
        if keep_hidden:
            hidden.append(H)
    out = H @ params.U0.T + params.b0
    return (out, hidden) if keep_hidden else out


def eta(model: NnarxModel, x: Array, u: Array) -> Array:
    """Regression output eta(x, u) for a single state window."""
    x = np.asarray(x, float).ravel()
    u = np.asarray(u, float).ravel()
    if x.shape[0] != model.n or u.shape[0] != model.m:
        raise ValueError("state or input dimension mismatch")
    return eta_batch(model.params, x[None, :], u[None, :])[0]


def shift_window(model: NnarxModel, x: Array, new_y: Array, new_u: Array) -> Array:
    """Drop the oldest block, append [new_y; new_u]; batched on leading axes."""
    q = model.m + model.p
    out = np.empty_like(x)
    out[..., :x.shape[-1] - q] = x[..., q:]
    out[..., -q:-model.m] = new_y
    out[..., -model.m:] = new_u
    return out


def step(model: NnarxModel, x: Array, u: Array) -> Array:
    """One state update x+ = A x + B_u u + B_x eta(x, u)."""
    x = np.asarray(x, float).ravel()
    u = np.asarray(u, float).ravel()
    return shift_window(model, x, eta(model, x, u), u)


def output(model: NnarxModel, x: Array) -> Array:
    return np.asarray(x, float)[..., model.y_slot]


def simulate(model: NnarxModel, x0: Array, u_seq: Array) -> Array:
    """Open-loop rollout; returns len(u_seq) + 1 outputs including C x0.

    Inputs are used as given: the model is defined for all u, saturation
    is a plant/controller concern.
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, float))
    if u_seq.shape[0] == 1 and model.m == 1 and u_seq.shape[1] != 1:
        u_seq = u_seq.T
    if u_seq.shape[0] == 0:
        raise ValueError("input sequence must be nonempty")
    x = np.asarray(x0, float).ravel().copy()
    ys = np.empty((u_seq.shape[0] + 1, model.p))
    ys[0] = output(model, x)
    for k in range(u_seq.shape[0]):
        x = step(model, x, u_seq[k])
        ys[k + 1] = output(model, x)
    return ys


# ---------------------------------------------------------------------------
# Jacobians


def eta_jacobians(params: FfnnParams, x: Array, u: Array):
    """Analytic (d eta/dx, d eta/du) at one point, by forward chain rule."""
    x = np.asarray(x, float).ravel()
    u = np.asarray(u, float).ravel()
    Jx = None
    Ju = None
    H = x
    for layer in params.layers:
        H = _act(layer.activation, layer.W @ u + layer.U @ H + layer.b)
        D = _act_deriv_from_output(layer.activation, H)[:, None]
        if Jx is None:
            Jx = D * layer.U
            Ju = D * layer.W
        else:
            Jx = D * (layer.U @ Jx)
            Ju = D * (layer.W + layer.U @ Ju)
    return params.U0 @ Jx, params.U0 @ Ju


def jacobians(model: NnarxModel, x: Array, u: Array):
    """Linearization (A_d, B_d) of the state update at (x, u)."""
    Jx, Ju = eta_jacobians(model.params, x, u)
    return model.A + model.B_x @ Jx, model.B_u + model.B_x @ Ju


# ---------------------------------------------------------------------------
# Contraction surrogate


def _power_svd(M: Array, tol: float = _SN_TOL, maxiter: int = _SN_MAXITER):
    """Dominant singular triple of M by alternating power iteration."""
    M = np.asarray(M, float)
    if M.size == 0 or not M.any():
        return 0.0, np.zeros(M.shape[0]), np.zeros(M.shape[1])
    # Deterministic start; a fixed pseudo-random vector avoids the
    # measure-zero orthogonal-start stall of structured all-ones starts.
    v = np.random.default_rng(1789).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    u = np.zeros(M.shape[0])
    for _ in range(maxiter):
        w = M @ v
        s = np.linalg.norm(w)
        if s == 0.0:
            return 0.0, u, v
        u = w / s
        z = M.T @ u
        sigma = np.linalg.norm(z)
        v_new = z / sigma
        # converge on the singular vector, not just the value: the value
        # settles quadratically faster, but gradients need the vectors
        done = np.max(np.abs(v_new - v)) < tol
        v = v_new
        if done:
            break
    return float(sigma), u, v


def spectral_norm(M: Array) -> float:
    return _power_svd(M)[0]


def contraction_margin(params: FfnnParams) -> float:
    """Lipschitz constant of eta with respect to the state window:
    the product of the hidden-layer spectral norms (times the activation
    Lipschitz constants) scaled by the output-map norm.  Values below one
    certify that repeated window shifts contract output differences, the
    stability condition enforced during training.
    """
    r = spectral_norm(params.U0)
    for layer in params.layers:
        r *= activation_lipschitz(layer.activation) * spectral_norm(layer.U)
    return float(r)


def contraction_margin_with_grad(params: FfnnParams):
    """Margin and its gradient in the to_vector() layout.

    d||U||_2 / dU = u1 v1' with the dominant singular pair; W and bias
    entries do not enter the margin.
    """
    triples = [_power_svd(layer.U) for layer in params.layers]
    s0, u0, v0 = _power_svd(params.U0)
    sigmas = [t[0] for t in triples]
    lips = [activation_lipschitz(layer.activation) for layer in params.layers]
    r = s0 * float(np.prod([L * s for L, s in zip(lips, sigmas)]))
    grads = []
    for layer, (s, u, v), L in zip(params.layers, triples, lips):
        dU = np.zeros_like(layer.U)
        if s > 0.0 and r > 0.0:
            dU = (r / s) * np.outer(u, v)
        grads += [np.zeros_like(layer.W).ravel(), dU.ravel(),
                  np.zeros_like(layer.b)]
    dU0 = np.zeros_like(params.U0)
    if s0 > 0.0 and r > 0.0:
        dU0 = (r / s0) * np.outer(u0, v0)
    grads += [dU0.ravel(), np.zeros_like(params.b0)]
    return float(r), np.concatenate(grads)


# ---------------------------------------------------------------------------
# Serialization (decimal text, bit-exact round trip via shortest repr)


def _mat(a: Array):
    return [[float(v) for v in row] for row in np.atleast_2d(a)]


def model_to_dict(model: NnarxModel) -> dict:
    doc = {
        "kind": "nnarx",
        "N": model.N,
        "m": model.m,
        "p": model.p,
        "layers": [
            {
                "activation": layer.activation,
                "W": _mat(layer.W),
                "U": _mat(layer.U),
                "b": [float(v) for v in layer.b],
            }
            for layer in model.params.layers
        ],
        "U0": _mat(model.params.U0),
        "b0": [float(v) for v in model.params.b0],
    }
    if model.normalization is not None:
        nz = model.normalization
        doc["normalization"] = {
            "u_mean": [float(v) for v in nz.u_mean],
            "u_scale": [float(v) for v in nz.u_scale],
            "y_mean": [float(v) for v in nz.y_mean],
            "y_scale": [float(v) for v in nz.y_scale],
        }
    return doc


def model_from_dict(doc: dict) -> NnarxModel:
    if doc.get("kind") != "nnarx":
        raise ValueError("not a model document")
    layers = [FfnnLayer(np.array(d["W"], float), np.array(d["U"], float),
                        np.array(d["b"], float), d["activation"])
              for d in doc["layers"]]
    params = FfnnParams(layers, np.array(doc["U0"], float), np.array(doc["b0"], float))
    norm = None
    if "normalization" in doc:
        nd = doc["normalization"]
        norm = Normalization(np.array(nd["u_mean"]), np.array(nd["u_scale"]),
                             np.array(nd["y_mean"]), np.array(nd["y_scale"]))
    return make_model(int(doc["N"]), params, norm)


def save_model(model: NnarxModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> NnarxModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
