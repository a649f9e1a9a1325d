"""
Numpy multilayer perceptron used as the beam classifier.

Layers are affine maps with ReLU on the hidden layers and a softmax head:
M~_w -> 64 -> 64 -> 128 -> Q by default.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from src.data_utils import BeamDataset, Split
from src.errors import ArtifactFormatError, ConfigError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (64, 64, 128)
LOG_CLAMP = 1e-12
MODEL_MAGIC = b"BTMD"
MODEL_VERSION = 1


def parameter_count(layer_dims: Sequence[int]) -> int:
    """Weights plus biases of a fully connected stack: sum of d_l * d_(l+1) + d_(l+1)."""
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


@dataclass
class MlpModel:
    layer_dims: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    rng_seed: int = 0
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2:
            raise ConfigError(f"need at least input and output dims, got {self.layer_dims}")
        expected = list(zip(self.layer_dims[:-1], self.layer_dims[1:]))
        if [w.shape for w in self.weights] != expected:
            raise ShapeError(f"weight shapes do not match layer dims {self.layer_dims}")
        if [b.shape for b in self.biases] != [(d,) for _, d in expected]:
            raise ShapeError(f"bias shapes do not match layer dims {self.layer_dims}")

    @classmethod
    def initialize(
        cls,
        n_inputs: int,
        n_classes: int = 128,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        seed: int = 0,
    ) -> "MlpModel":
        """He-uniform weights (limit sqrt(6 / fan_in)) and zero biases."""
        dims = (n_inputs, *hidden, n_classes)
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims=dims, weights=weights, biases=biases, rng_seed=seed)

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_hidden_layers(self) -> int:
        return len(self.layer_dims) - 2

    @property
    def n_parameters(self) -> int:
        return parameter_count(self.layer_dims)

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in layer order: W0, b0, W1, b1, ..."""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_dims=self.layer_dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            rng_seed=self.rng_seed,
            history=list(self.history),
        )


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    layer_reps: List[np.ndarray]


def _activations(m: MlpModel, x: np.ndarray) -> List[np.ndarray]:
    """Input followed by every layer output (post-ReLU for hidden layers, logits last)."""
    if x.shape[-1] != m.n_inputs:
        raise ShapeError(f"model expects {m.n_inputs} features, got {x.shape[-1]}")
    acts = [x]
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = acts[-1] @ w + b
        acts.append(z if i == last else np.maximum(z, 0.0))
    return acts


def forward(m: MlpModel, x: np.ndarray) -> ForwardResult:
    """
    Logits, softmax probabilities and per-layer representations.

    ``x`` may be one feature vector or a batch (one row per sample).

    Raises:
        ShapeError: If the feature dimension does not match the model input.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    acts = _activations(m, np.atleast_2d(x))
    logits = acts[-1]
    probs = softmax(logits, axis=-1)
    reps = acts[1:]
    if single:
        return ForwardResult(logits[0], probs[0], [r[0] for r in reps])
    return ForwardResult(logits, probs, reps)


def predict_proba(m: MlpModel, x: np.ndarray) -> np.ndarray:
    return forward(m, x).probs


def predict(m: MlpModel, x: np.ndarray) -> np.ndarray:
    return np.argmax(predict_proba(m, x), axis=-1)


def loss(m: MlpModel, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy with the log clamped at 1e-12."""
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ConfigError("loss needs a non-empty batch")
    probs = predict_proba(m, np.atleast_2d(features))
    picked = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(picked, LOG_CLAMP))))


def _backward(m: MlpModel, acts: List[np.ndarray], delta: np.ndarray):
    """Backprop ``delta`` (dL/dlogits) through the stack; returns (dW, db, dL/dx)."""
    d_weights, d_biases = [None] * len(m.weights), [None] * len(m.biases)
    for i in range(len(m.weights) - 1, -1, -1):
        d_weights[i] = acts[i].T @ delta
        d_biases[i] = delta.sum(axis=0)
        delta = delta @ m.weights[i].T
        if i > 0:
            delta = delta * (acts[i] > 0.0)
    return d_weights, d_biases, delta


def _output_delta(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    delta = probs.copy()
    delta[np.arange(labels.size), labels] -= 1.0
    return delta


def grad(m: MlpModel, features: np.ndarray, labels: np.ndarray) -> List[np.ndarray]:
    """
    Analytic gradient of ``loss`` with respect to every parameter.

    Returns arrays in the order of ``MlpModel.parameters()``.
    """
    labels = np.asarray(labels, dtype=int)
    acts = _activations(m, np.atleast_2d(np.asarray(features, dtype=np.float64)))
    delta = _output_delta(softmax(acts[-1], axis=-1), labels) / labels.size
    d_weights, d_biases, _ = _backward(m, acts, delta)
    return [p for pair in zip(d_weights, d_biases) for p in pair]


def input_gradient(m: MlpModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of each row's own cross-entropy with respect to that row's features."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    acts = _activations(m, np.atleast_2d(x))
    delta = _output_delta(softmax(acts[-1], axis=-1), labels)
    _, _, dx = _backward(m, acts, delta)
    return dx[0] if single else dx


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")


class Adam:
    def __init__(self, params: List[np.ndarray], tc: TrainConfig):
        self.tc = tc
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.tc.beta1, self.tc.beta2
        correction1 = 1.0 - b1**self.t
        correction2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.tc.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.tc.epsilon)


def fit(m: MlpModel, features: np.ndarray, labels: np.ndarray, tc: TrainConfig) -> MlpModel:
    """
    Mini-batch Adam on (features, labels), reshuffled every epoch.

    Returns a trained copy; ``history`` gets one mean loss per epoch.

    Raises:
        TrainingError: If an epoch ends with a non-finite loss.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n = labels.size
    if n == 0:
        raise ConfigError("training needs at least one row")
    if features.shape[1] != m.n_inputs:
        raise ShapeError(f"model expects {m.n_inputs} features, got {features.shape[1]}")

    model = m.copy()
    params = model.parameters()
    optimizer = Adam(params, tc)
    rng = np.random.default_rng(tc.seed)

    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            xb, yb = features[idx], labels[idx]
            acts = _activations(model, xb)
            probs = softmax(acts[-1], axis=-1)
            total += -np.sum(np.log(np.maximum(probs[np.arange(idx.size), yb], LOG_CLAMP)))
            d_weights, d_biases, _ = _backward(model, acts, _output_delta(probs, yb) / idx.size)
            optimizer.step(params, [g for pair in zip(d_weights, d_biases) for g in pair])
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"loss became {epoch_loss} at epoch {epoch + 1}")
        model.history.append(float(epoch_loss))
        if (epoch + 1) % tc.log_every == 0 or epoch + 1 == tc.epochs:
            logger.info(f"Epoch {epoch + 1}/{tc.epochs}: train loss {epoch_loss:.4f}")
    return model


def train(m: MlpModel, ds: BeamDataset, tc: TrainConfig) -> MlpModel:
    """Train on the train-split rows of ``ds``."""
    features, labels = ds.rows(Split.TRAIN)
    logger.info(
        f"Training {m.layer_dims} ({m.n_parameters} parameters) on {labels.size} rows"
    )
    return fit(m, features, labels, tc)


def finetune(pretrained: MlpModel, augmented: BeamDataset, tc: TrainConfig) -> MlpModel:
    """Continue training a pretrained model on the augmented train rows with a fresh optimizer."""
    if augmented.n_features != pretrained.n_inputs:
        raise ShapeError(
            f"pretrained model takes {pretrained.n_inputs} features, "
            f"dataset has {augmented.n_features}"
        )
    return train(pretrained, augmented, tc)


def fgsm(m: MlpModel, x: np.ndarray, label, epsilon: float) -> np.ndarray:
    """x + epsilon * sign(dL/dx), one step of the fast gradient sign method."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    return x + epsilon * np.sign(input_gradient(m, x, label))


def topk_from_probs(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest probabilities, descending; ties go to the lower index."""
    if not 1 <= k <= probs.shape[-1]:
        raise ConfigError(f"k must lie in [1, {probs.shape[-1]}], got {k}")
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def topk(m: MlpModel, x: np.ndarray, k: int) -> np.ndarray:
    return topk_from_probs(predict_proba(m, x), k)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(m: MlpModel, path: Union[str, Path], metadata: Optional[dict] = None) -> Path:
    """
    Binary checkpoint (dims, then float64 parameters) plus a JSON sidecar.

    The sidecar lands next to the checkpoint with a ``.json`` suffix.
    """
    path = Path(path)
    dims = m.layer_dims
    chunks = [struct.pack("<4sHH", MODEL_MAGIC, MODEL_VERSION, len(dims))]
    chunks.append(struct.pack(f"<{len(dims)}I", *dims))
    chunks.append(struct.pack("<Q", m.rng_seed))
    chunks += [p.astype("<f8").tobytes() for p in m.parameters()]
    path.write_bytes(b"".join(chunks))

    sidecar = {
        "layer_dims": list(dims),
        "n_parameters": m.n_parameters,
        "rng_seed": m.rng_seed,
        "final_train_loss": m.history[-1] if m.history else None,
    }
    sidecar.update(metadata or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path: Union[str, Path]) -> MlpModel:
    data = Path(path).read_bytes()
    magic, version, n_dims = struct.unpack_from("<4sHH", data, 0)
    if magic != MODEL_MAGIC:
        raise ArtifactFormatError(f"{path} has magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != MODEL_VERSION:
        raise ArtifactFormatError(f"unsupported model version {version} in {path}")
    offset = struct.calcsize("<4sHH")
    dims = struct.unpack_from(f"<{n_dims}I", data, offset)
    offset += 4 * n_dims
    (seed,) = struct.unpack_from("<Q", data, offset)
    offset += 8

    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, "<f8", fan_in * fan_out, offset).reshape(fan_in, fan_out)
        offset += w.nbytes
        b = np.frombuffer(data, "<f8", fan_out, offset)
        offset += b.nbytes
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpModel(layer_dims=dims, weights=weights, biases=biases, rng_seed=seed)
