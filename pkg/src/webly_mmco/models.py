"""Per-class binary classifiers with exact gradients and Adam.

Every class gets an independent sigmoid head. The linear model is
``sigmoid(W[c] @ x + b[c])``; the MLP shares one ReLU hidden layer across
classes and has a per-class output row.

Training losses are evaluated in logit form, ``softplus(z) - y*z``, which is
the cross-entropy of the unclamped sigmoid. :func:`predict` and
:func:`binary_cross_entropy` apply the ``EPS`` clamp for reported values.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS = 1e-7
LINEAR = "linear"
MLP = "mlp"
MODEL_FORMAT = "webly-mmco-model/1"


@dataclass
class ClassifierParams:
    kind: str
    dim: int
    n_classes: int
    tensors: dict
    hidden_units: int = 0

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.kind, self.dim, self.n_classes,
                                {k: v.copy() for k, v in self.tensors.items()}, self.hidden_units)

    def equals(self, other: "ClassifierParams") -> bool:
        return (self.kind == other.kind and self.dim == other.dim
                and self.n_classes == other.n_classes and self.hidden_units == other.hidden_units
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in sorted(self.tensors)])


def init_params(kind: str, dim: int, n_classes: int, hidden_units: int = 64, seed: int = 0) -> ClassifierParams:
    """Linear heads start at zero; the MLP hidden layer is Glorot-uniform, its output layer zero."""
    if kind == LINEAR:
        t = {"W": np.zeros((n_classes, dim)), "b": np.zeros(n_classes)}
        return ClassifierParams(LINEAR, dim, n_classes, t, 0)
    if kind == MLP:
        if hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        a = np.sqrt(6.0 / (dim + hidden_units))
        rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
        t = {
            "W1": rng.uniform(-a, a, size=(hidden_units, dim)),
            "b1": np.zeros(hidden_units),
            "W2": np.zeros((n_classes, hidden_units)),
            "b2": np.zeros(n_classes),
        }
        return ClassifierParams(MLP, dim, n_classes, t, hidden_units)
    raise ValueError(f"unknown classifier kind {kind!r}")


def _check_dim(params: ClassifierParams, X: np.ndarray) -> None:
    if X.shape[-1] != params.dim:
        raise ValueError(f"feature dim {X.shape[-1]} does not match model dim {params.dim}")


def logits(params: ClassifierParams, X: np.ndarray) -> np.ndarray:
    """(n, C) class logits for a (n, dim) batch."""
    return forward(params, X)[0]


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def predict_proba(params: ClassifierParams, X: np.ndarray) -> np.ndarray:
    return np.clip(sigmoid(logits(params, X)), EPS, 1.0 - EPS)


def predict(params: ClassifierParams, x, c: int) -> float:
    """Clamped probability that ``x`` belongs to class ``c``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict takes a single feature vector")
    return float(predict_proba(params, x[None, :])[0, c])


def binary_cross_entropy(s, y):
    s = np.clip(s, EPS, 1.0 - EPS)
    out = -(y * np.log(s) + (1 - y) * np.log1p(-s))
    return float(out) if np.ndim(out) == 0 else out


def logit_losses(z: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Elementwise cross-entropy of sigmoid(z) against Y, evaluated stably."""
    return np.logaddexp(0.0, z) - Y * z


def weighted_loss(params: ClassifierParams, X, Y, V, classes=None) -> float:
    """sum_n sum_c V[n,c] * L(Y[n,c], g(x_n, c)) over the selected classes."""
    z = logits(params, X)
    mask = _class_mask(params.n_classes, classes)
    return float(np.sum(V * mask * logit_losses(z, Y)))


def _class_mask(C: int, classes) -> np.ndarray:
    if classes is None:
        return np.ones(C)
    m = np.zeros(C)
    m[list(classes)] = 1.0
    return m


def forward(params: ClassifierParams, X: np.ndarray) -> tuple:
    """Logits plus whatever the backward pass needs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_dim(params, X)
    t = params.tensors
    if params.kind == LINEAR:
        return X @ t["W"].T + t["b"], (X,)
    A = X @ t["W1"].T + t["b1"]
    H = np.maximum(A, 0.0)
    return H @ t["W2"].T + t["b2"], (X, A, H)


def backward(params: ClassifierParams, z: np.ndarray, cache: tuple, Y, V) -> dict:
    """Gradient of sum V * L(Y, sigmoid(z)) given a :func:`forward` result."""
    G = V * (sigmoid(z) - Y)
    t = params.tensors
    if params.kind == LINEAR:
        (X,) = cache
        return {"W": G.T @ X, "b": G.sum(axis=0)}
    X, A, H = cache
    dH = (G @ t["W2"]) * (A > 0)
    return {"W2": G.T @ H, "b2": G.sum(axis=0), "W1": dH.T @ X, "b1": dH.sum(axis=0)}


def weighted_gradient(params: ClassifierParams, X, Y, V, classes=None) -> dict:
    """Exact gradient of :func:`weighted_loss` with respect to every tensor."""
    z, cache = forward(params, X)
    Y = np.asarray(Y, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Y.shape != z.shape or V.shape != Y.shape:
        raise ValueError(f"labels {Y.shape} and weights {V.shape} must both be {z.shape}")
    return backward(params, z, cache, Y, V * _class_mask(params.n_classes, classes))


def finite_difference_check(params: ClassifierParams, X, Y, V, h: float = 1e-5,
                            n_coords: int = 40, seed: int = 0, classes=None) -> float:
    """Max relative error between :func:`weighted_gradient` and central differences.

    Checks a random subsample of ``n_coords`` coordinates per tensor. The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, 1)``, so
    coordinates with tiny gradients are judged on absolute error. Returns 0
    when both sides vanish.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    grad = weighted_gradient(params, X, Y, V, classes)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params.tensors):
        theta = params.tensors[name]
        flat = theta.reshape(-1)
        k = min(n_coords, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            old = flat[i]
            flat[i] = old + h
            fp = weighted_loss(params, X, Y, V, classes)
            flat[i] = old - h
            fm = weighted_loss(params, X, Y, V, classes)
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            ana = grad[name].reshape(-1)[i]
            if num == 0.0 and ana == 0.0:
                continue
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1.0))
    return worst


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.epsilon, self.step,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params: ClassifierParams, grad: dict, state: AdamState,
              weight_decay: float = 0.0) -> tuple:
    """One bias-corrected Adam update. Returns new (params, state); inputs are untouched."""
    new_params, new_state = params.copy(), state.copy()
    new_state.step += 1
    t = new_state.step
    b1, b2 = new_state.beta1, new_state.beta2
    for name, theta in new_params.tensors.items():
        g = grad[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
        if weight_decay:
            g = g + weight_decay * theta
        m = new_state.m.get(name, np.zeros_like(theta))
        v = new_state.v.get(name, np.zeros_like(theta))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_state.m[name], new_state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        theta -= new_state.lr * m_hat / (np.sqrt(v_hat) + new_state.epsilon)
    return new_params, new_state


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------

def save_model(params: ClassifierParams, path, class_names=(), modality: str = "") -> None:
    """Write a model container: JSON manifest plus float64 little-endian tensors (npz)."""
    manifest = {
        "version": MODEL_FORMAT,
        "kind": params.kind,
        "dim": params.dim,
        "n_classes": params.n_classes,
        "hidden_units": params.hidden_units,
        "class_names": list(class_names),
        "modality": modality,
        "tensors": sorted(params.tensors),
    }
    arrays = {f"tensor_{k}": np.ascontiguousarray(v, dtype="<f8") for k, v in params.tensors.items()}
    arrays["manifest"] = np.frombuffer(json.dumps(manifest).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> tuple:
    """Returns (params, manifest dict)."""
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(z["manifest"].tobytes().decode("utf-8"))
        if manifest.get("version") != MODEL_FORMAT:
            raise ValueError(f"{path}: unsupported model version {manifest.get('version')!r}")
        tensors = {k: z[f"tensor_{k}"].astype(np.float64) for k in manifest["tensors"]}
    params = ClassifierParams(manifest["kind"], int(manifest["dim"]), int(manifest["n_classes"]),
                              tensors, int(manifest["hidden_units"]))
    return params, manifest
