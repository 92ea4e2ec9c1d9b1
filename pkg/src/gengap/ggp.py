"""Generalization-gap predictors over margin signatures.

Three families:

* ``linear``: OLS on the row-sum of the signature.
* ``dnn``: 5 -> 16 -> 16 -> 16 -> 1 ReLU regressor on the row-sum.
* ``rnn``: an Elman cell (16 tanh units) reads the rows as a sequence; its
  final hidden state feeds 3 dense ReLU layers of 16 and a linear output.

Both networks train with Adagrad (lr 0.1) on mean squared error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gengap import tinynet
from gengap.margin_sig import SignatureMatrix

FAMILIES = ("linear", "dnn", "rnn")
TASK_MODES = ("dataset_dependent", "dataset_independent")

LINEAR_LAMBDA = 0.5
MODE_LAMBDA = {"dataset_dependent": 0.5, "dataset_independent": 2.5}
DNN_STEPS = {"dataset_dependent": 5000, "dataset_independent": 25000}
RNN_STEPS = {"dataset_dependent": 2500, "dataset_independent": 25000}
BATCH_SIZE = 64
LEARNING_RATE = 0.1
HIDDEN = 16
HEAD_WIDTHS = (16, 16, 16)
NUM_FEATURES = 5


class ConfigurationError(ValueError):
    """Signature lambda does not fit the model or task mode."""


@dataclass(frozen=True)
class GgpExample:
    signature: SignatureMatrix
    label: float
    net_id: int = 0
    variation_id: int = 0
    data_seed: int = 0
    hparam_id: int = 0


@dataclass
class GgpModel:
    family: str
    lam: float
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        manifest = {
            "family": self.family,
            "lambda": self.lam,
            "shapes": {k: list(v.shape) for k, v in sorted(self.params.items())},
            "meta": self.meta,
            "params": {k: v.ravel().tolist() for k, v in sorted(self.params.items())},
        }
        Path(path).write_text(json.dumps(manifest, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GgpModel":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        params = {k: np.array(v, dtype=np.float64).reshape(d["shapes"][k])
                  for k, v in d["params"].items()}
        return cls(d["family"], float(d["lambda"]), params, d.get("meta", {}))


def aggregate_sum(signature: SignatureMatrix | np.ndarray) -> np.ndarray:
    rows = signature.rows if isinstance(signature, SignatureMatrix) else np.asarray(signature)
    return rows.sum(axis=0)


def _common_lambda(examples: Sequence[GgpExample]) -> float:
    lams = {ex.signature.lam for ex in examples}
    if len(lams) != 1:
        raise ConfigurationError(f"examples mix lambda values {sorted(lams)}")
    return lams.pop()


def _check_mode_lambda(lam: float, task_mode: str) -> None:
    if task_mode not in TASK_MODES:
        raise ValueError(f"unknown task mode {task_mode!r}")
    if not np.isclose(lam, MODE_LAMBDA[task_mode]):
        raise ConfigurationError(
            f"{task_mode} predictors need lambda={MODE_LAMBDA[task_mode]}, got {lam}")


def _design(examples: Sequence[GgpExample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.vstack([aggregate_sum(ex.signature) for ex in examples])
    y = np.array([ex.label for ex in examples], dtype=np.float64)
    return X, y


# ---------------------------------------------------------------- linear

def fit_linear(examples: Sequence[GgpExample]) -> GgpModel:
    """Least squares with intercept; least-norm solution when rank deficient."""
    if len(examples) < NUM_FEATURES + 1:
        raise ValueError(f"linear fit needs >= {NUM_FEATURES + 1} examples, got {len(examples)}")
    lam = _common_lambda(examples)
    X, y = _design(examples)
    A = np.hstack([X, np.ones((len(y), 1))])
    sol, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    return GgpModel("linear", lam, {"coef": sol[:-1], "intercept": sol[-1:]},
                    {"rank": int(rank), "rank_deficient": bool(rank < A.shape[1]),
                     "n": len(y)})


# ---------------------------------------------------------------- dnn

def _dnn_hparams() -> tinynet.NetHparams:
    return tinynet.NetHparams(HEAD_WIDTHS, "adagrad", LEARNING_RATE, BATCH_SIZE)


def fit_dnn(examples: Sequence[GgpExample], task_mode: str, seed: int = 0,
            steps: int | None = None) -> GgpModel:
    if not examples:
        raise ValueError("need at least one example")
    lam = _common_lambda(examples)
    _check_mode_lambda(lam, task_mode)
    steps = DNN_STEPS[task_mode] if steps is None else steps
    X, y = _design(examples)
    rng = np.random.default_rng(seed)
    init_seed, train_seed = rng.integers(0, 2**63, size=2)
    net = tinynet.init(_dnn_hparams(), int(init_seed), input_dim=NUM_FEATURES)
    out = tinynet.train(net, X, y, steps, int(train_seed), loss="mse")
    return GgpModel("dnn", lam, {"theta": out.net.theta.copy()},
                    {"task_mode": task_mode, "steps": steps, "seed": seed,
                     "final_loss": out.final_loss, "diverged": out.diverged})


# ---------------------------------------------------------------- rnn

def _rnn_layout() -> list[tuple[str, tuple[int, ...]]]:
    return [("Wx", (NUM_FEATURES, HIDDEN)), ("Wh", (HIDDEN, HIDDEN)), ("bh", (HIDDEN,))]


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class RecurrentRegressor:
    """Elman cell + dense head sharing one flat parameter vector."""

    def __init__(self, theta: np.ndarray):
        self.cell_size = sum(int(np.prod(s)) for _, s in _rnn_layout())
        self.theta = theta
        off, self.cell = 0, {}
        for name, shape in _rnn_layout():
            size = int(np.prod(shape))
            self.cell[name] = theta[off:off + size].reshape(shape)
            off += size
        self.head = tinynet.Network(_dnn_hparams(), theta[self.cell_size:], input_dim=HIDDEN)

    @classmethod
    def size(cls) -> int:
        cell = sum(int(np.prod(s)) for _, s in _rnn_layout())
        head = sum(int(np.prod(s)) for _, s in tinynet._param_layout(_dnn_hparams(), HIDDEN))
        return cell + head

    @classmethod
    def init(cls, seed: int) -> "RecurrentRegressor":
        rng = np.random.default_rng(seed)
        theta = np.zeros(cls.size())
        model = cls(theta)
        b = tinynet.glorot_bound(NUM_FEATURES, HIDDEN)
        model.cell["Wx"][...] = rng.uniform(-b, b, size=(NUM_FEATURES, HIDDEN))
        model.cell["Wh"][...] = _orthogonal(rng, HIDDEN)
        head = tinynet.init(_dnn_hparams(), int(rng.integers(0, 2**63)), input_dim=HIDDEN)
        theta[model.cell_size:] = head.theta
        return model

    def run_cell(self, seqs: np.ndarray, lengths: np.ndarray):
        """Final hidden states for right-padded ``seqs`` (B, T, 5).

        Padded steps carry the previous state through unchanged.
        """
        B, T, _ = seqs.shape
        Wx, Wh, bh = self.cell["Wx"], self.cell["Wh"], self.cell["bh"]
        h = np.zeros((B, HIDDEN))
        states, new_states, live = [h], [], []
        for t in range(T):
            m = (t < lengths)[:, None].astype(np.float64)
            hn = np.tanh(seqs[:, t] @ Wx + h @ Wh + bh)
            h = m * hn + (1.0 - m) * h
            states.append(h)
            new_states.append(hn)
            live.append(m)
        return h, (states, new_states, live)

    def predict(self, seqs: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        h, _ = self.run_cell(seqs, lengths)
        return tinynet.forward(self.head, h, "inference").output

    def loss_and_grad(self, seqs: np.ndarray, lengths: np.ndarray, y: np.ndarray):
        h, (states, new_states, live) = self.run_cell(seqs, lengths)
        trace = tinynet.forward(self.head, h, "inference")
        value, d_out = tinynet.mse(trace.output, y)
        grad = np.zeros_like(self.theta)
        head_grad, act_grads = tinynet.backward(self.head, trace, d_out)
        grad[self.cell_size:] = head_grad
        gcell = RecurrentRegressor(grad).cell
        Wh = self.cell["Wh"]
        dh = act_grads[0]
        for t in reversed(range(seqs.shape[1])):
            m, hn = live[t], new_states[t]
            da = dh * m * (1.0 - hn * hn)
            gcell["Wx"] += seqs[:, t].T @ da
            gcell["Wh"] += states[t].T @ da
            gcell["bh"] += da.sum(axis=0)
            dh = dh * (1.0 - m) + da @ Wh.T
        return value, grad


def pad_signatures(signatures: Sequence[SignatureMatrix]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in signatures], dtype=np.int64)
    seqs = np.zeros((len(signatures), int(lengths.max()), NUM_FEATURES))
    for i, s in enumerate(signatures):
        seqs[i, :len(s)] = s.rows
    return seqs, lengths


def fit_rnn(examples: Sequence[GgpExample], task_mode: str, seed: int = 0,
            steps: int | None = None) -> GgpModel:
    if not examples:
        raise ValueError("need at least one example")
    lam = _common_lambda(examples)
    _check_mode_lambda(lam, task_mode)
    steps = RNN_STEPS[task_mode] if steps is None else steps
    seqs, lengths = pad_signatures([ex.signature for ex in examples])
    y = np.array([ex.label for ex in examples], dtype=np.float64)
    rng = np.random.default_rng(seed)
    model = RecurrentRegressor.init(int(rng.integers(0, 2**63)))
    opt = tinynet.Optimizer("adagrad", LEARNING_RATE, model.theta.size)
    batch = min(BATCH_SIZE, len(y))
    value = float("nan")
    for _ in range(steps):
        idx = rng.integers(0, len(y), size=batch)
        value, grad = model.loss_and_grad(seqs[idx], lengths[idx], y[idx])
        opt.step(model.theta, grad)
    return GgpModel("rnn", lam, {"theta": model.theta.copy()},
                    {"task_mode": task_mode, "steps": steps, "seed": seed,
                     "final_loss": value})


# ---------------------------------------------------------------- scoring

def fit(family: str, examples: Sequence[GgpExample], task_mode: str, seed: int = 0,
        steps: int | None = None) -> GgpModel:
    if family == "linear":
        return fit_linear(examples)
    if family == "dnn":
        return fit_dnn(examples, task_mode, seed=seed, steps=steps)
    if family == "rnn":
        return fit_rnn(examples, task_mode, seed=seed, steps=steps)
    raise ValueError(f"unknown family {family!r}")


def predict_many(model: GgpModel, signatures: Sequence[SignatureMatrix]) -> np.ndarray:
    for s in signatures:
        if not np.isclose(s.lam, model.lam):
            raise ConfigurationError(
                f"model expects lambda={model.lam}, signature has {s.lam}")
    if model.family == "linear":
        X = np.vstack([aggregate_sum(s) for s in signatures])
        return X @ model.params["coef"] + model.params["intercept"][0]
    if model.family == "dnn":
        net = tinynet.Network(_dnn_hparams(), model.params["theta"], input_dim=NUM_FEATURES)
        X = np.vstack([aggregate_sum(s) for s in signatures])
        return tinynet.predict(net, X)
    if model.family == "rnn":
        seqs, lengths = pad_signatures(signatures)
        return RecurrentRegressor(model.params["theta"]).predict(seqs, lengths)
    raise ValueError(f"unknown family {model.family!r}")


def predict(model: GgpModel, signature: SignatureMatrix) -> float:
    return float(predict_many(model, [signature])[0])
