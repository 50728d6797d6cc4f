"""FM + MLP click-style interest model with hand-written gradients.

The logit of a row ``x`` is::

    z = s * z_fm(x) + head . mlp(x) + c

where ``z_fm`` is a second-order factorization machine, ``mlp`` a stack of
ReLU layers fed with the same ``x`` and ``head``/``c`` a linear read-out.
With ``merge="sum"`` the FM scale ``s`` stays at 1; with ``"concat"`` it is
learned, i.e. the read-out acts on the concatenation ``[z_fm, mlp(x)]``.

Inputs are dense vectors or CSR matrices (one row per pair).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.stats import rankdata

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
WEIGHTS_FORMAT = "edgecast.weights"
WEIGHTS_VERSION = 1
MERGES = ("sum", "concat")


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class ModelWeights:
    w: np.ndarray  # (D,)
    Y: np.ndarray  # (D, k)
    layers: list  # [(W (in, out), b (out,)), ...]
    head: np.ndarray  # (last hidden,)
    head_bias: float = 0.0
    fm_scale: float = 1.0
    merge: str = "sum"

    def __post_init__(self):
        if self.merge not in MERGES:
            raise ValueError(f"merge must be one of {MERGES}")
        if self.Y.ndim != 2 or self.Y.shape[0] != self.w.shape[0] or self.Y.shape[1] < 1:
            raise ValueError("Y must be (dim, k) with k >= 1")
        width = self.dim
        for W, b in self.layers:
            if W.shape[0] != width or b.shape != (W.shape[1],):
                raise ValueError("MLP layer shapes do not chain")
            width = W.shape[1]
        if self.head.shape != (width if self.layers else 0,):
            raise ValueError("read-out size must match the last MLP layer")

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @property
    def k(self) -> int:
        return self.Y.shape[1]

    def tensors(self) -> dict:
        out = {"w": self.w, "Y": self.Y, "head": self.head,
               "head_bias": np.array(self.head_bias), "fm_scale": np.array(self.fm_scale)}
        for i, (W, b) in enumerate(self.layers):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.w.copy(), self.Y.copy(), [(W.copy(), b.copy()) for W, b in self.layers],
                            self.head.copy(), float(self.head_bias), float(self.fm_scale), self.merge)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors().values())


@dataclass(frozen=True)
class TrainConfig:
    k: int = 16
    hidden: tuple = (32, 16)
    learning_rate: float = 0.01
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 1
    seed: int = 0
    init_scale: float = 0.01
    merge: str = "sum"
    threshold: float = 0.5

    def __post_init__(self):
        if self.k < 1 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("k, batch_size, max_epochs and patience must be positive")
        if not self.learning_rate > 0 or not self.init_scale > 0:
            raise ValueError("learning rate and init scale must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        if self.merge not in MERGES:
            raise ValueError(f"merge must be one of {MERGES}")


def init_weights(dim: int, config: TrainConfig) -> ModelWeights:
    rng = np.random.default_rng(config.seed)
    a = config.init_scale
    w = rng.uniform(-a, a, dim)
    Y = rng.uniform(-a, a, (dim, config.k))
    layers, width = [], dim
    for h in config.hidden:
        layers.append((rng.uniform(-a, a, (width, h)), np.zeros(h)))
        width = h
    head = rng.uniform(-a, a, width if layers else 0)
    return ModelWeights(w, Y, layers, head, 0.0, 1.0, config.merge)


def _rows(x):
    if sp.issparse(x):
        return sp.csr_matrix(x)
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def _square(X):
    return X.multiply(X) if sp.issparse(X) else X * X


def _check_dim(weights: ModelWeights, X):
    if X.shape[1] != weights.dim:
        raise ValueError(f"feature dimension {X.shape[1]} does not match model dimension {weights.dim}")


def fm_forward(weights: ModelWeights, x):
    """``<w, x> + 1/2 sum_f [(sum_m y_mf x_m)^2 - sum_m y_mf^2 x_m^2]`` per row."""
    X = _rows(x)
    _check_dim(weights, X)
    XY = np.asarray(X @ weights.Y)
    sq = np.asarray(_square(X) @ (weights.Y ** 2))
    z = np.asarray(X @ weights.w).reshape(-1) + 0.5 * (XY ** 2 - sq).sum(axis=1)
    return z if np.ndim(x) == 2 or sp.issparse(x) else float(z[0])


def fm_pairwise(weights: ModelWeights, x) -> float:
    """Naive ``O(d^2)`` evaluation of the FM on one dense vector."""
    x = np.asarray(x, dtype=float)
    total = float(weights.w @ x)
    for m in range(x.size):
        for i in range(m + 1, x.size):
            total += float(weights.Y[m] @ weights.Y[i]) * x[m] * x[i]
    return total


def _mlp(weights: ModelWeights, X):
    acts = []
    h = X
    for W, b in weights.layers:
        h = np.maximum(np.asarray(h @ W) + b, 0.0)
        acts.append(h)
    return acts


def mlp_forward(weights: ModelWeights, x) -> np.ndarray:
    """ReLU activations of the last MLP layer (rows x width)."""
    X = _rows(x)
    _check_dim(weights, X)
    acts = _mlp(weights, X)
    out = acts[-1] if acts else np.zeros((X.shape[0], 0))
    return out if np.ndim(x) == 2 or sp.issparse(x) else out[0]


def _forward(weights: ModelWeights, X):
    XY = np.asarray(X @ weights.Y)
    X2 = _square(X)
    z_fm = np.asarray(X @ weights.w).reshape(-1) + 0.5 * (XY ** 2 - np.asarray(X2 @ (weights.Y ** 2))).sum(axis=1)
    acts = _mlp(weights, X)
    z = weights.fm_scale * z_fm + weights.head_bias
    if acts:
        z = z + acts[-1] @ weights.head
    return z, z_fm, XY, X2, acts


def logits(weights: ModelWeights, x) -> np.ndarray:
    X = _rows(x)
    _check_dim(weights, X)
    return _forward(weights, X)[0]


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def predict(weights: ModelWeights, x):
    """Interest score ``sigmoid(clamp(z, +-30))``, strictly inside (0, 1)."""
    p = _sigmoid(np.clip(logits(weights, x), -LOGIT_CLAMP, LOGIT_CLAMP))
    return p if np.ndim(x) == 2 or sp.issparse(x) else float(p[0])


def loss(predictions, labels) -> float:
    """Mean binary cross-entropy of scores against 0/1 labels."""
    p = np.asarray(predictions, dtype=float)
    r = np.asarray(labels, dtype=float)
    if p.shape != r.shape:
        raise ValueError("predictions and labels differ in length")
    lo = 1.0 / (1.0 + math.exp(LOGIT_CLAMP))
    p = np.clip(p, lo, 1.0 - lo)
    return float(-np.mean(r * np.log(p) + (1.0 - r) * np.log1p(-p)))


def _logit_loss(z, r):
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    return np.logaddexp(0.0, zc) - r * zc


def batch_loss(weights: ModelWeights, x, labels) -> float:
    X = _rows(x)
    return float(np.mean(_logit_loss(_forward(weights, X)[0], np.asarray(labels, float))))


def _loss_and_grad(weights: ModelWeights, X, r):
    n = X.shape[0]
    z, z_fm, XY, X2, acts = _forward(weights, X)
    value = float(np.mean(_logit_loss(z, r)))
    inside = np.abs(z) < LOGIT_CLAMP
    dz = np.where(inside, _sigmoid(np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)) - r, 0.0) / n

    g = {}
    ds = dz * weights.fm_scale
    XT = X.T
    g["w"] = np.asarray(XT @ ds).reshape(-1)
    g["Y"] = np.asarray(XT @ (ds[:, None] * XY)) - weights.Y * np.asarray(X2.T @ ds).reshape(-1)[:, None]
    g["fm_scale"] = float(dz @ z_fm) if weights.merge == "concat" else 0.0
    g["head_bias"] = float(dz.sum())
    layer_grads = []
    if acts:
        g["head"] = acts[-1].T @ dz
        delta = np.outer(dz, weights.head) * (acts[-1] > 0)
        for i in range(len(weights.layers) - 1, -1, -1):
            W, _ = weights.layers[i]
            below = acts[i - 1] if i > 0 else X
            dW = np.asarray(below.T @ delta)
            layer_grads.append((dW, delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ W.T) * (acts[i - 1] > 0)
        layer_grads.reverse()
    else:
        g["head"] = np.zeros(0)
    g["layers"] = layer_grads
    return value, g


def gradients(weights: ModelWeights, x, labels) -> dict:
    """Gradient of the mean cross-entropy of a batch with respect to every
    tensor: keys ``w``, ``Y``, ``layers`` (list of ``(dW, db)``), ``head``,
    ``head_bias`` and ``fm_scale`` (0 unless ``merge == "concat"``)."""
    X = _rows(x)
    _check_dim(weights, X)
    r = np.asarray(labels, dtype=float)
    if r.shape != (X.shape[0],) or X.shape[0] == 0:
        raise ValueError("labels must be a nonempty vector matching the batch")
    return _loss_and_grad(weights, X, r)[1]


def _step(weights: ModelWeights, g: dict, lr: float) -> None:
    weights.w -= lr * g["w"]
    weights.Y -= lr * g["Y"]
    for (W, b), (dW, db) in zip(weights.layers, g["layers"]):
        W -= lr * dW
        b -= lr * db
    weights.head -= lr * g["head"]
    weights.head_bias -= lr * g["head_bias"]
    weights.fm_scale -= lr * g["fm_scale"]


def auc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counted half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Share of rows whose ``score >= threshold`` matches the label."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean((s >= threshold) == y))


def evaluate(weights: ModelWeights, x, labels, threshold: float = 0.5):
    """``(AUC, ACC)``; AUC is ``nan`` with a warning for single-class labels."""
    scores = predict(weights, _rows(x))
    acc = accuracy(scores, labels, threshold)
    try:
        value = auc(scores, labels)
    except ValueError:
        log.warning("single-class evaluation set; AUC undefined")
        value = math.nan
    return value, acc


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    auc: float
    acc: float


EPOCH_COLUMNS = ("epoch", "train_loss", "val_loss", "auc", "acc")


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def train(X_train, y_train, X_val, y_val, config: TrainConfig = TrainConfig(), weights: ModelWeights | None = None):
    """Mini-batch gradient descent with early stopping on validation loss.

    Training stops once the validation loss has risen against the previous
    epoch ``patience`` times in a row, or after ``max_epochs``. The weights
    of the epoch with the lowest validation loss are returned.
    """
    X_train, X_val = _rows(X_train), _rows(X_val)
    y_train = np.asarray(y_train, float)
    y_val = np.asarray(y_val, float)
    if X_train.shape[0] == 0 or X_val.shape[0] == 0:
        raise ValueError("training and validation sets must be nonempty")
    model = init_weights(X_train.shape[1], config) if weights is None else weights.copy()
    _check_dim(model, X_train)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    n = X_train.shape[0]
    result = TrainResult(model.copy())
    best_val = math.inf
    prev_val = math.inf
    worse = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, g = _loss_and_grad(model, X_train[idx], y_train[idx])
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite batch loss in epoch {epoch}")
            _step(model, g, config.learning_rate)
        if not model.all_finite():
            raise TrainingDiverged(f"weights became non-finite in epoch {epoch}; lower the learning rate")
        train_loss = batch_loss(model, X_train, y_train)
        val_scores = predict(model, X_val)
        val_loss = loss(val_scores, y_val)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")
        try:
            val_auc = auc(val_scores, y_val)
        except ValueError:
            val_auc = math.nan
        rec = EpochRecord(epoch, train_loss, val_loss, val_auc, accuracy(val_scores, y_val, config.threshold))
        result.history.append(rec)
        log.info("epoch %d train %.5f val %.5f auc %.4f", epoch, train_loss, val_loss, val_auc)
        if val_loss < best_val:
            best_val = val_loss
            result.weights = model.copy()
            result.best_epoch = epoch
        worse = worse + 1 if val_loss > prev_val else 0
        prev_val = val_loss
        if worse >= config.patience:
            result.stopped_early = True
            break
    return result


def save_weights(weights: ModelWeights, path, schema_hash: str = "") -> None:
    meta = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "merge": weights.merge,
        "layers": len(weights.layers),
        "schema_hash": schema_hash,
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **weights.tensors())


def load_weights(path, schema_hash: str | None = None) -> ModelWeights:
    """Load weights; with ``schema_hash`` the stored hash must match."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != WEIGHTS_FORMAT or meta.get("version") != WEIGHTS_VERSION:
            raise ValueError(f"{path} is not a supported weights file")
        if schema_hash is not None and meta["schema_hash"] != schema_hash:
            raise ValueError(
                f"weights were trained with schema {meta['schema_hash']}, current schema is {schema_hash}"
            )
        layers = [(z[f"W{i}"].copy(), z[f"b{i}"].copy()) for i in range(meta["layers"])]
        return ModelWeights(z["w"].copy(), z["Y"].copy(), layers, z["head"].copy(),
                            float(z["head_bias"]), float(z["fm_scale"]), meta["merge"])


def weights_schema_hash(path) -> str:
    with np.load(Path(path), allow_pickle=False) as z:
        return json.loads(str(z["meta"]))["schema_hash"]

