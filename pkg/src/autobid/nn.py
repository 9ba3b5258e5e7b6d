"""Small MLPs on flat parameter vectors with hand-written backprop.

Parameters live in one float64 vector. Layer ``l`` stores its weight matrix
(shape ``out x in``, row-major) followed by its bias. A parameter array of shape
``(E, P)`` evaluates ``E`` different networks, one per input row.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"AUTOBIDP1\n"


@dataclass(frozen=True)
class MLPSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    output: str = "identity"  # or "squash"
    out_range: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer_sizes {self.layer_sizes}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output not in ("identity", "squash"):
            raise ValueError(f"unknown output transform {self.output!r}")
        if self.output == "squash":
            if self.out_range is None or not self.out_range[0] < self.out_range[1]:
                raise ValueError("squash output needs out_range lo < hi")
            object.__setattr__(self, "out_range", tuple(float(v) for v in self.out_range))

    @property
    def shapes(self) -> list[tuple[int, int]]:
        s = self.layer_sizes
        return [(s[i + 1], s[i]) for i in range(len(s) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]


def mlp(n_in: int, n_out: int = 1, hidden=(64, 64), activation="tanh", out_range=None) -> MLPSpec:
    if out_range is None:
        return MLPSpec((n_in, *hidden, n_out), activation)
    return MLPSpec((n_in, *hidden, n_out), activation, "squash", tuple(out_range))


def layer_slices(spec: MLPSpec) -> list[tuple[slice, slice]]:
    out, pos = [], 0
    for o, i in spec.shapes:
        w = slice(pos, pos + o * i)
        pos += o * i
        b = slice(pos, pos + o)
        pos += o
        out.append((w, b))
    return out


def unpack(spec: MLPSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of ``(W, b)`` per layer; works for ``(P,)`` and ``(E, P)`` theta."""
    lead = theta.shape[:-1]
    return [
        (theta[..., ws].reshape(*lead, o, i), theta[..., bs])
        for (ws, bs), (o, i) in zip(layer_slices(spec), spec.shapes)
    ]


def init_params(spec: MLPSpec, rng: np.random.Generator, out_scale: float = 0.01) -> np.ndarray:
    theta = np.zeros(spec.n_params)
    layers = unpack(spec, theta)
    for k, (W, _) in enumerate(layers):
        o, i = W.shape
        bound = np.sqrt(6.0 / (i + o))
        if k == len(layers) - 1:
            bound *= out_scale
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return theta


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _dact(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(z.dtype)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _affine(W, b, x):
    if W.ndim == 3:
        return np.einsum("eoi,ei->eo", W, x) + b
    return x @ W.T + b


def forward(spec: MLPSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    return forward_cache(spec, theta, x)[0]


def forward_cache(spec: MLPSpec, theta: np.ndarray, x: np.ndarray):
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    if theta.shape[-1] != spec.n_params:
        raise ValueError(f"theta has {theta.shape[-1]} entries, spec needs {spec.n_params}")
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"input has {x.shape[-1]} features, spec expects {spec.n_in}")
    if theta.ndim == 2 and theta.shape[0] != x.shape[0]:
        raise ValueError("per-row theta needs one parameter row per input row")
    layers = unpack(spec, theta)
    acts = [x]
    pre = []
    h = x
    for k, (W, b) in enumerate(layers):
        z = _affine(W, b, h)
        pre.append(z)
        if k < len(layers) - 1:
            h = _act(spec.activation, z)
            acts.append(h)
        else:
            h = z
    if spec.output == "squash":
        lo, hi = spec.out_range
        sig = _sigmoid(h)
        out = lo + (hi - lo) * sig
    else:
        sig = None
        out = h
    cache = (acts, pre, sig, theta.ndim == 2)
    return (out[0] if single else out), cache


def backward(spec: MLPSpec, theta: np.ndarray, cache, dout: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dout * output)`` with respect to theta.

    For per-row theta the result has shape ``(E, P)``.
    """
    acts, pre, sig, per_row = cache
    dout = np.asarray(dout, dtype=float).reshape(pre[-1].shape)
    if spec.output == "squash":
        lo, hi = spec.out_range
        dz = dout * (hi - lo) * sig * (1.0 - sig)
    else:
        dz = dout
    layers = unpack(spec, np.asarray(theta, dtype=float))
    grad = np.zeros((acts[0].shape[0], spec.n_params) if per_row else spec.n_params)
    slices = layer_slices(spec)
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        ws, bs = slices[k]
        h_in = acts[k]
        if per_row:
            grad[:, ws] = (dz[:, :, None] * h_in[:, None, :]).reshape(len(dz), -1)
            grad[:, bs] = dz
        else:
            grad[ws] = (dz.T @ h_in).ravel()
            grad[bs] = dz.sum(axis=0)
        if k > 0:
            dh = np.einsum("eoi,eo->ei", W, dz) if per_row else dz @ W
            dz = dh * _dact(spec.activation, pre[k - 1], acts[k])
    return grad


def input_gradient(spec: MLPSpec, theta: np.ndarray, x: np.ndarray, dout=None) -> np.ndarray:
    """d(sum(dout * output))/dx, shape like x."""
    out, (acts, pre, sig, per_row) = forward_cache(spec, theta, np.atleast_2d(x))
    dout = np.ones_like(out) if dout is None else np.asarray(dout, dtype=float).reshape(out.shape)
    if spec.output == "squash":
        lo, hi = spec.out_range
        dz = dout * (hi - lo) * sig * (1.0 - sig)
    else:
        dz = dout
    layers = unpack(spec, np.asarray(theta, dtype=float))
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        dh = np.einsum("eoi,eo->ei", W, dz) if per_row else dz @ W
        if k > 0:
            dz = dh * _dact(spec.activation, pre[k - 1], acts[k])
    return dh.reshape(np.shape(x))


# --- losses ----------------------------------------------------------------


def expectile_loss(u, tau: float):
    """``|tau - 1{u<0}| * u**2``, elementwise."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    u = np.asarray(u, dtype=float)
    return np.abs(tau - (u < 0)) * u * u


def expectile_grad(u, tau: float):
    u = np.asarray(u, dtype=float)
    return 2.0 * np.abs(tau - (u < 0)) * u


def loss_and_dout(kind: str, pred: np.ndarray, y: np.ndarray, tau: float = 0.5, weights=None):
    """Mean loss over the batch and d(mean loss)/d(pred)."""
    u = y - pred
    if kind == "squared":
        per = u * u
        dper = -2.0 * u
    elif kind == "expectile":
        per = expectile_loss(u, tau)
        dper = -expectile_grad(u, tau)
    else:
        raise ValueError(f"unknown loss {kind!r}")
    n = len(u)
    if weights is not None:
        per = per * weights
        dper = dper * weights
    return float(per.sum() / n), dper / n


# --- optimisation ----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 3e-4
    batch_size: int = 256
    gradient_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0 or self.batch_size < 1 or self.gradient_steps < 0:
            raise ValueError("step_size, batch_size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decay rates must lie in (0, 1)")


class Adam:
    def __init__(self, n: int, step_size: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0
        self.lr, self.b1, self.b2, self.eps = step_size, beta1, beta2, eps

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.k)
        vhat = self.v / (1 - self.b2 ** self.k)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def fold_input_scaling(spec: MLPSpec, theta: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Turn a net trained on ``(x - mean) / std`` into one taking raw x."""
    theta = theta.copy()
    W, b = unpack(spec, theta)[0]
    Wn = W / std
    b -= Wn @ mean
    W[...] = Wn
    return theta


def fold_output_scaling(spec: MLPSpec, theta: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Turn a net predicting ``(y - mean) / std`` into one predicting raw y."""
    if spec.output != "identity":
        raise ValueError("output scaling only applies to identity outputs")
    theta = theta.copy()
    W, b = unpack(spec, theta)[-1]
    W *= std
    b *= std
    b += mean
    return theta


def standardizer(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    return mean, std


def train_regression(
    spec: MLPSpec,
    X: np.ndarray,
    y: np.ndarray,
    config: TrainConfig = TrainConfig(),
    loss: str = "squared",
    tau: float = 0.5,
    theta0: np.ndarray | None = None,
    normalize: bool = True,
) -> np.ndarray:
    """Fit ``spec`` to ``(X, y)`` with Adam on minibatches; returns raw-space theta."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(len(X), -1)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.shape[1] != spec.n_out:
        raise ValueError("target width does not match spec output")
    rng = np.random.default_rng(config.seed)
    xm, xs = standardizer(X) if normalize else (np.zeros(spec.n_in), np.ones(spec.n_in))
    scale_out = normalize and spec.output == "identity" and spec.n_out == 1
    ym, ys = (float(y.mean()), float(y.std()) or 1.0) if scale_out else (0.0, 1.0)
    Xn = (X - xm) / xs
    yn = (y - ym) / ys
    theta = init_params(spec, rng) if theta0 is None else _to_normalized(spec, theta0, xm, xs, ym, ys, scale_out)
    opt = Adam(spec.n_params, config.step_size, config.beta1, config.beta2)
    n = len(Xn)
    bs = min(config.batch_size, n)
    for _ in range(config.gradient_steps):
        idx = rng.integers(0, n, size=bs)
        pred, cache = forward_cache(spec, theta, Xn[idx])
        _, dout = loss_and_dout(loss, pred, yn[idx], tau)
        opt.step(theta, backward(spec, theta, cache, dout))
    if scale_out:
        theta = fold_output_scaling(spec, theta, ym, ys)
    return fold_input_scaling(spec, theta, xm, xs)


def _to_normalized(spec, theta, xm, xs, ym, ys, scale_out):
    # inverse of the two folds, so warm starts resume from the given function
    theta = theta.copy()
    W, b = unpack(spec, theta)[0]
    b += W @ xm
    W *= xs
    if scale_out:
        W, b = unpack(spec, theta)[-1]
        b -= ym
        W /= ys
        b /= ys
    return theta


# --- persistence -----------------------------------------------------------


def save_params(path: str | Path, spec: MLPSpec, theta: np.ndarray) -> None:
    """Binary file: magic line, one JSON header line, then little-endian float64."""
    theta = np.asarray(theta, dtype="<f8")
    if theta.shape != (spec.n_params,):
        raise ValueError("theta does not match spec")
    header = json.dumps({"spec": asdict(spec), "n": spec.n_params}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header + b"\n")
        fh.write(theta.tobytes())


def load_params(path: str | Path) -> tuple[MLPSpec, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a parameter file")
    rest = raw[len(_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    s = header["spec"]
    spec = MLPSpec(tuple(s["layer_sizes"]), s["activation"], s["output"],
                   None if s["out_range"] is None else tuple(s["out_range"]))
    body = rest[nl + 1:]
    if len(body) != 8 * header["n"] or header["n"] != spec.n_params:
        raise ValueError(f"{path}: parameter count mismatch")
    return spec, np.frombuffer(body, dtype="<f8").astype(float)


# --- gradient verification -------------------------------------------------


def batch_loss(spec: MLPSpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray, loss: str = "squared",
               tau: float = 0.5, weights=None) -> float:
    return loss_and_dout(loss, forward(spec, theta, X), y, tau, weights)[0]


def numeric_gradient(spec: MLPSpec, theta: np.ndarray, X, y, loss="squared", tau=0.5, weights=None,
                     h: float = 1e-5) -> np.ndarray:
    """Central finite differences of :func:`batch_loss`, one coordinate at a time."""
    theta = np.array(theta, dtype=float)
    g = np.empty_like(theta)
    for i in range(len(theta)):
        old = theta[i]
        theta[i] = old + h
        up = batch_loss(spec, theta, X, y, loss, tau, weights)
        theta[i] = old - h
        down = batch_loss(spec, theta, X, y, loss, tau, weights)
        theta[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def gradient_check(spec: MLPSpec, theta: np.ndarray, X, y, loss="squared", tau=0.5, weights=None,
                   h: float = 1e-5, floor: float = 1e-9) -> float:
    """Largest componentwise relative error between backprop and central differences.

    The denominator is ``max(|g|, |g_fd|, floor)`` so coordinates whose true
    gradient is exactly zero (dead ReLU units) are compared in absolute terms.
    """
    pred, cache = forward_cache(spec, theta, X)
    _, dout = loss_and_dout(loss, pred, y, tau, weights)
    g = backward(spec, theta, cache, dout)
    fd = numeric_gradient(spec, theta, X, y, loss, tau, weights, h)
    return float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)))
