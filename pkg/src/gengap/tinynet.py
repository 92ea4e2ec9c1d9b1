"""Small fully-connected classifiers with hand-written backprop.

A network is ``input -> [affine -> batch-norm? -> ReLU -> dropout?] * L ->
affine -> scalar``. Trainable parameters live in one flat float64 vector;
per-layer arrays are views into it so optimizers update everything with a
few vector ops.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

Mode = Literal["training", "inference"]

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
ADAGRAD_INITIAL_ACCUMULATOR = 0.1
ADAGRAD_EPSILON = 1e-7
FLOAT32_MAX = float(np.finfo(np.float32).max)
DIVERGENCE_CHECK_EVERY = 100

FULL_WIDTHS = (4, 8, 16)
FULL_OPTIMIZERS = ("sgd", "adam")
FULL_LEARNING_RATES = (0.1, 0.01, 0.001)
FULL_BATCH_SIZES = (32, 64, 128)
FULL_DROPOUT_RATES = (0.0, 0.25, 0.5)
OPTIMIZERS = ("sgd", "adam", "adagrad")


class DivergedError(ArithmeticError):
    """Raised when an operation needs finite parameters and the net has none."""


@dataclass(frozen=True)
class NetHparams:
    layer_widths: tuple[int, ...]
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    batch_size: int = 32
    batch_norm: bool = False
    dropout_rate: float = 0.0
    hparam_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if not self.layer_widths:
            raise ValueError("need at least one hidden layer")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def depth(self) -> int:
        return len(self.layer_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetHparams":
        return cls(
            layer_widths=tuple(d["layer_widths"]),
            optimizer=d["optimizer"],
            learning_rate=float(d["learning_rate"]),
            batch_size=int(d["batch_size"]),
            batch_norm=bool(d["batch_norm"]),
            dropout_rate=float(d["dropout_rate"]),
            hparam_id=int(d.get("hparam_id", 0)),
        )

    def config_key(self) -> tuple:
        """Identity of the configuration, ignoring ``hparam_id``."""
        return (self.layer_widths, self.optimizer, self.learning_rate,
                self.batch_size, self.batch_norm, self.dropout_rate)


def _param_layout(hp: NetHparams, input_dim: int) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    fan_in = input_dim
    for i, width in enumerate(hp.layer_widths):
        layout.append((f"W{i}", (fan_in, width)))
        layout.append((f"b{i}", (width,)))
        if hp.batch_norm:
            layout.append((f"gamma{i}", (width,)))
            layout.append((f"beta{i}", (width,)))
        fan_in = width
    L = hp.depth
    layout.append((f"W{L}", (fan_in, 1)))
    layout.append((f"b{L}", (1,)))
    return layout


def _views(flat: np.ndarray, layout) -> dict[str, np.ndarray]:
    views, offset = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape))
        views[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    return views


def _group_layers(views: dict[str, np.ndarray], hp: NetHparams):
    layers = []
    for i in range(hp.depth):
        layers.append((views[f"W{i}"], views[f"b{i}"],
                       views.get(f"gamma{i}"), views.get(f"beta{i}")))
    L = hp.depth
    return layers, (views[f"W{L}"], views[f"b{L}"])


class Network:
    """Parameters and batch-norm buffers for one classifier."""

    def __init__(self, hparams: NetHparams, theta: np.ndarray, input_dim: int = 2,
                 moving: dict[str, np.ndarray] | None = None):
        self.hparams = hparams
        self.input_dim = input_dim
        self.layout = _param_layout(hparams, input_dim)
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if theta.shape != (expected,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({expected},)")
        self.theta = np.asarray(theta, dtype=np.float64)
        self.params = _views(self.theta, self.layout)
        self.layers, self.head = _group_layers(self.params, hparams)
        if moving is None:
            moving = {}
            if hparams.batch_norm:
                for i, w in enumerate(hparams.layer_widths):
                    moving[f"mean{i}"] = np.zeros(w)
                    moving[f"var{i}"] = np.ones(w)
        self.moving = moving

    @property
    def depth(self) -> int:
        return self.hparams.depth

    def copy(self) -> "Network":
        return Network(self.hparams, self.theta.copy(), self.input_dim,
                       {k: v.copy() for k, v in self.moving.items()})

    def is_finite(self) -> bool:
        if not np.all(np.isfinite(self.theta)):
            return False
        return all(np.all(np.isfinite(v)) for v in self.moving.values())

    def save(self, path: str | Path) -> None:
        """JSON checkpoint: hparams, shape manifest, flat parameter arrays."""
        payload = {
            "hparams": self.hparams.to_dict(),
            "input_dim": self.input_dim,
            "manifest": [[name, list(shape)] for name, shape in self.layout],
            "theta": self.theta.tolist(),
            "moving": {k: v.tolist() for k, v in sorted(self.moving.items())},
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        hp = NetHparams.from_dict(payload["hparams"])
        net = cls(hp, np.array(payload["theta"], dtype=np.float64), payload["input_dim"],
                  {k: np.array(v, dtype=np.float64) for k, v in payload["moving"].items()})
        manifest = [(n, tuple(s)) for n, s in payload["manifest"]]
        if manifest != net.layout:
            raise ValueError(f"checkpoint manifest does not match hparams in {path}")
        return net


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init(hparams: NetHparams, init_seed: int, input_dim: int = 2) -> Network:
    """Glorot-uniform kernels, zero biases, unit BN scale, zero BN shift."""
    rng = np.random.default_rng(init_seed)
    layout = _param_layout(hparams, input_dim)
    theta = np.zeros(sum(int(np.prod(s)) for _, s in layout))
    views = _views(theta, layout)
    for name, shape in layout:
        if name.startswith("W"):
            b = glorot_bound(*shape)
            views[name][...] = rng.uniform(-b, b, size=shape)
        elif name.startswith("gamma"):
            views[name][...] = 1.0
    return Network(hparams, theta, input_dim)


@dataclass
class ForwardTrace:
    """Activations ``x^0 .. x^(L+1)``; the last entry has shape (n, 1).

    ``cache`` holds what backprop needs and is not part of the public data.
    """

    activations: list[np.ndarray]
    mode: str
    cache: list[dict] = field(default_factory=list, repr=False)

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1][:, 0]


def forward(net: Network, X: np.ndarray, mode: Mode = "inference",
            rng: np.random.Generator | None = None,
            masks: Sequence[np.ndarray | None] | None = None) -> ForwardTrace:
    """Batched forward pass. ``X`` is (n, input_dim) or a single input vector.

    In training mode batch-norm uses batch statistics and dropout masks are
    drawn from ``rng`` unless ``masks`` (one per hidden layer) are supplied.
    """
    if mode not in ("training", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    if not net.is_finite():
        raise DivergedError("network parameters are not finite")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return _forward(net, X, mode, rng, masks)


def _forward(net: Network, X: np.ndarray, mode: str, rng, masks) -> ForwardTrace:
    hp = net.hparams
    training = mode == "training"
    rate = hp.dropout_rate if training else 0.0
    if rate > 0 and masks is None and rng is None:
        raise ValueError("training mode with dropout needs an rng or explicit masks")
    n = X.shape[0]

    a = X
    activations, cache = [X], []
    for i, (W, b, gamma, beta) in enumerate(net.layers):
        z = a @ W
        z += b
        c: dict = {}
        if gamma is not None:
            if training:
                mu = z.sum(axis=0) / n
                z -= mu
                var = (z * z).sum(axis=0) / n
            else:
                mu, var = net.moving[f"mean{i}"], net.moving[f"var{i}"]
                z -= mu
            inv = 1.0 / np.sqrt(var + BN_EPSILON)
            z *= inv
            c.update(mu=mu, var=var, inv=inv, zhat=z)
            z = z * gamma
            z += beta
        gate = (z > 0).astype(np.float64)
        if rate > 0:
            mask = masks[i] if masks is not None else (
                (rng.random(z.shape) >= rate) / (1.0 - rate))
            gate *= mask
        h = z * gate
        c["gate"] = gate
        cache.append(c)
        activations.append(h)
        a = h
    W, b = net.head
    activations.append(a @ W + b)
    return ForwardTrace(activations, mode, cache)


def forward_from(net: Network, layer: int, activation: np.ndarray) -> np.ndarray:
    """Inference-mode output when ``x^layer`` is replaced by ``activation``."""
    L = net.depth
    if not 0 <= layer <= L + 1:
        raise ValueError(f"layer must lie in [0, {L + 1}], got {layer}")
    a = np.atleast_2d(np.asarray(activation, dtype=np.float64))
    if layer == L + 1:
        return a[:, 0]
    for i in range(layer, L):
        W, b, gamma, beta = net.layers[i]
        z = a @ W + b
        if gamma is not None:
            inv = 1.0 / np.sqrt(net.moving[f"var{i}"] + BN_EPSILON)
            z = (z - net.moving[f"mean{i}"]) * inv * gamma + beta
        a = np.maximum(z, 0.0)
    W, b = net.head
    return (a @ W + b)[:, 0]


class GradBuffer:
    """Flat gradient vector with per-layer views matching a network's layout."""

    def __init__(self, net: Network):
        self.flat = np.zeros_like(net.theta)
        views = _views(self.flat, net.layout)
        self.layers, self.head = _group_layers(views, net.hparams)


def backward(net: Network, trace: ForwardTrace, d_output: np.ndarray,
             buffer: GradBuffer | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Backpropagate ``d_output`` (n,) = dLoss/df through ``trace``.

    Returns the flat parameter gradient (layout of ``net.theta``) and the
    gradient with respect to every activation ``x^0 .. x^(L+1)``. A reused
    ``buffer`` is overwritten in place.
    """
    L = net.depth
    buf = buffer or GradBuffer(net)
    acts = trace.activations
    training = trace.mode == "training"
    n = acts[0].shape[0]

    da = np.asarray(d_output, dtype=np.float64).reshape(-1, 1)
    act_grads: list[np.ndarray] = [None] * (L + 2)  # type: ignore[list-item]
    act_grads[L + 1] = da
    gW, gb = buf.head
    W, _ = net.head
    np.matmul(acts[L].T, da, out=gW)
    gb[0] = da.sum()
    da = da @ W.T
    for i in reversed(range(L)):
        act_grads[i + 1] = da
        c = trace.cache[i]
        W, _, gamma, _ = net.layers[i]
        gW, gb, ggamma, gbeta = buf.layers[i]
        dz = da * c["gate"]
        if gamma is not None:
            zhat, inv = c["zhat"], c["inv"]
            np.sum(dz * zhat, axis=0, out=ggamma)
            np.sum(dz, axis=0, out=gbeta)
            dzhat = dz * gamma
            if training:
                dz = (dzhat - gbeta * gamma / n - zhat * (ggamma * gamma / n)) * inv
            else:
                dz = dzhat * inv
        np.matmul(acts[i].T, dz, out=gW)
        np.sum(dz, axis=0, out=gb)
        da = dz @ W.T
    act_grads[0] = da
    return buf.flat, act_grads


def sigmoid_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean logistic loss for +-1 labels and its gradient w.r.t. the logits."""
    margin = labels * logits
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    # d/df softplus(-y f) = -y * sigmoid(-y f)
    grad = -labels * np.exp(-np.logaddexp(0.0, margin)) / len(logits)
    return loss, grad


def mse(predictions: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    r = predictions - targets
    return float(np.mean(r * r)), 2.0 * r / len(r)


def loss_and_grad(net: Network, X: np.ndarray, y: np.ndarray, mode: Mode = "training",
                  rng: np.random.Generator | None = None, masks=None,
                  loss: str = "xent") -> tuple[float, np.ndarray, ForwardTrace]:
    trace = forward(net, X, mode, rng=rng, masks=masks)
    fn = sigmoid_xent if loss == "xent" else mse
    value, d_out = fn(trace.output, y)
    flat, _ = backward(net, trace, d_out)
    return value, flat, trace


class Optimizer:
    """SGD, Adam or Adagrad over a flat parameter vector."""

    def __init__(self, kind: str, learning_rate: float, size: int):
        if kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = learning_rate
        self.t = 0
        if kind == "adam":
            self.m = np.zeros(size)
            self.v = np.zeros(size)
        elif kind == "adagrad":
            self.accum = np.full(size, ADAGRAD_INITIAL_ACCUMULATOR)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        if self.kind == "sgd":
            theta -= self.lr * grad
        elif self.kind == "adam":
            self.m *= ADAM_BETA1
            self.m += (1 - ADAM_BETA1) * grad
            self.v *= ADAM_BETA2
            self.v += (1 - ADAM_BETA2) * grad * grad
            m_hat = self.m / (1 - ADAM_BETA1 ** self.t)
            v_hat = self.v / (1 - ADAM_BETA2 ** self.t)
            theta -= self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)
        else:
            self.accum += grad * grad
            theta -= self.lr * grad / (np.sqrt(self.accum) + ADAGRAD_EPSILON)


def _update_moving(net: Network, trace: ForwardTrace) -> None:
    for i, c in enumerate(trace.cache):
        for key, stat in (("mean", c["mu"]), ("var", c["var"])):
            buf = net.moving[f"{key}{i}"]
            buf *= BN_MOMENTUM
            buf += (1.0 - BN_MOMENTUM) * stat


def _diverged(net: Network, loss: float) -> bool:
    if not np.isfinite(loss) or abs(loss) > FLOAT32_MAX:
        return True
    if not net.is_finite():
        return True
    return bool(np.max(np.abs(net.theta)) > FLOAT32_MAX)


@dataclass
class TrainOutcome:
    net: Network
    diverged: bool
    steps_run: int
    final_loss: float


def _hidden_offsets(hp: NetHparams) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(hp.layer_widths)[:-1]]).astype(np.int64)


def _draw(rng: np.random.Generator, n: int, batch: int, hp: NetHparams):
    """One step's randomness: batch indices, then dropout uniforms if needed."""
    idx = rng.integers(0, n, size=batch)
    u = rng.random((batch, sum(hp.layer_widths))) if hp.dropout_rate > 0 else None
    return idx, u


def train(net: Network, X: np.ndarray, y: np.ndarray, steps: int, train_seed: int,
          loss: str = "xent", optimizer: Optimizer | None = None,
          engine: str = "compiled") -> TrainOutcome:
    """Mini-batch training on a copy of ``net``.

    Batches of ``min(batch_size, n)`` are drawn with replacement from a
    stream seeded by ``train_seed``; the same stream drives dropout.
    ``engine="numpy"`` runs the reference implementation; ``"compiled"``
    runs the numba kernel on the identical random stream.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if loss not in ("xent", "mse"):
        raise ValueError(f"unknown loss {loss!r}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    net = net.copy()
    hp = net.hparams
    batch = min(hp.batch_size, n)
    rng = np.random.default_rng(train_seed)
    opt = optimizer or Optimizer(hp.optimizer, hp.learning_rate, net.theta.size)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if engine == "numpy":
            return _train_numpy(net, X, y, steps, rng, batch, loss, opt)
        if engine == "compiled":
            return _train_compiled(net, X, y, steps, rng, batch, loss, opt)
    raise ValueError(f"unknown engine {engine!r}")


def _train_numpy(net, X, y, steps, rng, batch, loss, opt) -> TrainOutcome:
    hp = net.hparams
    offsets = _hidden_offsets(hp)
    buf = GradBuffer(net)
    loss_fn = sigmoid_xent if loss == "xent" else mse
    value = float("nan")
    for step in range(1, steps + 1):
        idx, u = _draw(rng, len(y), batch, hp)
        masks = None
        if u is not None:
            keep = 1.0 / (1.0 - hp.dropout_rate)
            masks = [(u[:, o:o + w] >= hp.dropout_rate) * keep
                     for o, w in zip(offsets, hp.layer_widths)]
        trace = _forward(net, X[idx], "training", None, masks)
        value, d_out = loss_fn(trace.output, y[idx])
        backward(net, trace, d_out, buf)
        opt.step(net.theta, buf.flat)
        if hp.batch_norm:
            _update_moving(net, trace)
        if step % DIVERGENCE_CHECK_EVERY == 0 or step == steps:
            if _diverged(net, value):
                return TrainOutcome(net, True, step, value)
    return TrainOutcome(net, False, steps, value)


def _train_compiled(net, X, y, steps, rng, batch, loss, opt) -> TrainOutcome:
    from gengap import _kernel

    hp = net.hparams
    L = hp.depth
    index = {name: i for i, (name, _) in enumerate(net.layout)}
    starts = np.concatenate([[0], np.cumsum([int(np.prod(s)) for _, s in net.layout])])
    off = lambda name: int(starts[index[name]]) if name in index else -1  # noqa: E731
    dims = np.array([net.input_dim, *hp.layer_widths, 1], dtype=np.int64)
    w_off = np.array([off(f"W{i}") for i in range(L + 1)], dtype=np.int64)
    b_off = np.array([off(f"b{i}") for i in range(L + 1)], dtype=np.int64)
    g_off = np.array([off(f"gamma{i}") for i in range(L)], dtype=np.int64)
    be_off = np.array([off(f"beta{i}") for i in range(L)], dtype=np.int64)
    h_off = _hidden_offsets(hp)
    H = int(sum(hp.layer_widths))
    if hp.batch_norm:
        mov_mean = np.concatenate([net.moving[f"mean{i}"] for i in range(L)])
        mov_var = np.concatenate([net.moving[f"var{i}"] for i in range(L)])
    else:
        mov_mean = mov_var = np.zeros(1)
    kind = {"sgd": _kernel.SGD, "adam": _kernel.ADAM, "adagrad": _kernel.ADAGRAD}[opt.kind]
    size = net.theta.size
    if opt.kind == "adam":
        opt_a, opt_b = opt.m, opt.v
    elif opt.kind == "adagrad":
        opt_a, opt_b = opt.accum, np.zeros(1)
    else:
        opt_a = opt_b = np.zeros(1)
    grad = np.zeros(size)
    loss_kind = _kernel.XENT if loss == "xent" else _kernel.MSE

    def sync_moving():
        for i, o in enumerate(h_off if hp.batch_norm else []):
            w = hp.layer_widths[i]
            net.moving[f"mean{i}"][...] = mov_mean[o:o + w]
            net.moving[f"var{i}"][...] = mov_var[o:o + w]

    done = 0
    value = float("nan")
    while done < steps:
        chunk = min(DIVERGENCE_CHECK_EVERY, steps - done)
        idx = np.empty((chunk, batch), dtype=np.int64)
        drop_u = np.zeros((chunk, batch, H) if hp.dropout_rate > 0 else (1, 1, 1))
        for s in range(chunk):
            i_s, u_s = _draw(rng, len(y), batch, hp)
            idx[s] = i_s
            if u_s is not None:
                drop_u[s] = u_s
        value = _kernel.run_steps(
            net.theta, grad, mov_mean, mov_var, opt_a, opt_b, opt.t,
            X, y, idx, drop_u, dims, w_off, b_off, g_off, be_off, h_off,
            hp.batch_norm, float(hp.dropout_rate), kind, float(opt.lr), loss_kind,
            BN_EPSILON, BN_MOMENTUM, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, ADAGRAD_EPSILON)
        opt.t += chunk
        done += chunk
        sync_moving()
        if _diverged(net, value):
            return TrainOutcome(net, True, done, value)
    return TrainOutcome(net, False, steps, value)


def predict(net: Network, X: np.ndarray) -> np.ndarray:
    return forward(net, X, "inference").output


def accuracy(net: Network, X: np.ndarray, y: np.ndarray) -> float:
    """Fraction with ``sign(f(x)) == label``; a zero logit counts as wrong."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    f = predict(net, X)
    return float(np.mean(np.sign(f) == y))


def grad_wrt_activation(net: Network, trace: ForwardTrace, layer: int) -> np.ndarray:
    """Rows of df/dx^layer for every input in an inference-mode ``trace``."""
    L = net.depth
    if not 0 <= layer <= L + 1:
        raise ValueError(f"layer must lie in [0, {L + 1}], got {layer}")
    if trace.mode != "inference":
        raise ValueError("activation gradients are defined on inference-mode traces")
    if layer == L + 1:
        return np.ones((trace.activations[0].shape[0], 1))
    n = trace.activations[0].shape[0]
    _, act_grads = backward(net, trace, np.ones(n))
    return act_grads[layer]


def all_activation_grads(net: Network, trace: ForwardTrace) -> list[np.ndarray]:
    """``grad_wrt_activation`` for every layer from a single backward pass.

    Each output depends only on its own input row in inference mode, so a
    unit upstream gradient yields per-row gradients.
    """
    if trace.mode != "inference":
        raise ValueError("activation gradients are defined on inference-mode traces")
    n = trace.activations[0].shape[0]
    _, act_grads = backward(net, trace, np.ones(n))
    act_grads[-1] = np.ones((n, 1))
    return act_grads
