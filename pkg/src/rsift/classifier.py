"""1-D convolutional streamline classifier written directly in numpy.

Network (valid padding, stride 1)::

    input (L,) -> conv(k=5, C1) -> ReLU -> maxpool(2)
               -> conv(k=3, C2) -> ReLU -> maxpool(2)
               -> flatten -> dense(H) -> ReLU -> dropout(0.5)
               -> dense(1) + sigmoid   |   dense(K) + softmax

Binary and multi-class models differ only in the output layer. Everything
is float64 so gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tractogram import NormalizationRecord, resample

N_POINTS = 22
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b", "out_w", "out_b")
_MAGIC = b"RSIFTCNN"
_VERSION = 1


def preprocess(streamline, record: NormalizationRecord, n_points: int = N_POINTS) -> np.ndarray:
    """Resample, normalize to [-1, 1] and interleave as x1, y1, z1, x2, ..."""
    pts = np.asarray(streamline, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("degenerate streamline")
    pts = record.apply(resample(pts, n_points))
    # a record fitted on other streamlines can map slightly outside the range
    return np.clip(pts, -1.0, 1.0).reshape(-1)


def preprocess_all(streamlines, record: NormalizationRecord | None = None,
                   n_points: int = N_POINTS) -> np.ndarray:
    if record is None:
        record = NormalizationRecord.fit(streamlines)
    return np.stack([preprocess(s, record, n_points) for s in streamlines])


# ---------------------------------------------------------------------------
# Layers


def conv1d(x, w, b):
    """x: (B, L, Cin), w: (K, Cin, Cout) -> (B, L-K+1, Cout) and the im2col view."""
    k, cin, cout = w.shape
    cols = sliding_window_view(x, k, axis=1)  # (B, Lout, Cin, K)
    cols = cols.transpose(0, 1, 3, 2).reshape(x.shape[0], -1, k * cin)
    return cols @ w.reshape(k * cin, cout) + b, cols


def conv1d_backward(dout, cols, w, in_len):
    k, cin, cout = w.shape
    bsz, lout, _ = dout.shape
    dw = (cols.reshape(-1, k * cin).T @ dout.reshape(-1, cout)).reshape(k, cin, cout)
    db = dout.sum(axis=(0, 1))
    dcols = (dout @ w.reshape(k * cin, cout).T).reshape(bsz, lout, k, cin)
    dx = np.zeros((bsz, in_len, cin))
    for j in range(k):
        dx[:, j:j + lout, :] += dcols[:, :, j, :]
    return dx, dw, db


def maxpool(x):
    """Pool size 2 along the length axis; a trailing odd element is dropped."""
    bsz, length, c = x.shape
    half = length // 2
    win = x[:, :2 * half, :].reshape(bsz, half, 2, c)
    arg = np.argmax(win, axis=2)
    return np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :], arg


def maxpool_backward(dout, arg, in_len):
    bsz, half, c = dout.shape
    dwin = np.zeros((bsz, half, 2, c))
    np.put_along_axis(dwin, arg[:, :, None, :], dout[:, :, None, :], axis=2)
    dx = np.zeros((bsz, in_len, c))
    dx[:, :2 * half, :] = dwin.reshape(bsz, 2 * half, c)
    return dx


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Model


@dataclass
class Architecture:
    input_len: int = 3 * N_POINTS
    kernel1: int = 5
    filters1: int = 16
    kernel2: int = 3
    filters2: int = 32
    hidden: int = 128
    n_out: int = 1
    dropout: float = 0.5

    def shapes(self) -> dict:
        l1 = self.input_len - self.kernel1 + 1
        p1 = l1 // 2
        l2 = p1 - self.kernel2 + 1
        p2 = l2 // 2
        if min(l1, p1, l2, p2) < 1:
            raise ValueError(f"input length {self.input_len} too short for this network")
        return {"conv1": l1, "pool1": p1, "conv2": l2, "pool2": p2, "flat": p2 * self.filters2}


class ConvClassifier:
    def __init__(self, arch: Architecture | None = None, seed: int = 0, params: dict | None = None):
        self.arch = arch or Architecture()
        self.shape_chain = self.arch.shapes()
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_NAMES}

    @property
    def binary(self) -> bool:
        return self.arch.n_out == 1

    def _init_params(self, rng) -> dict:
        a = self.arch
        flat = self.shape_chain["flat"]

        def glorot(shape, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape)

        return {
            "conv1_w": glorot((a.kernel1, 1, a.filters1), a.kernel1, a.kernel1 * a.filters1),
            "conv1_b": np.zeros(a.filters1),
            "conv2_w": glorot((a.kernel2, a.filters1, a.filters2), a.kernel2 * a.filters1,
                              a.kernel2 * a.filters2),
            "conv2_b": np.zeros(a.filters2),
            "dense_w": glorot((flat, a.hidden), flat, a.hidden),
            "dense_b": np.zeros(a.hidden),
            "out_w": glorot((a.hidden, a.n_out), a.hidden, a.n_out),
            "out_b": np.zeros(a.n_out),
        }

    def forward(self, x, train: bool = False, rng=None):
        """Return ``(output, cache)``.

        ``output`` is the sigmoid score ``(B,)`` for binary models and the
        softmax matrix ``(B, K)`` otherwise. ``cache`` holds every layer's
        activations; ``cache["dense"]`` is the hidden dense activation.
        """
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.arch.input_len:
            raise ValueError(f"expected input length {self.arch.input_len}, got {x.shape[1]}")
        c = {"x": x}
        z1, c["cols1"] = conv1d(x[:, :, None], p["conv1_w"], p["conv1_b"])
        c["z1"] = z1
        a1 = np.maximum(z1, 0.0)
        c["p1"], c["arg1"] = maxpool(a1)
        z2, c["cols2"] = conv1d(c["p1"], p["conv2_w"], p["conv2_b"])
        c["z2"] = z2
        a2 = np.maximum(z2, 0.0)
        p2, c["arg2"] = maxpool(a2)
        c["flat"] = p2.reshape(len(x), -1)
        z3 = c["flat"] @ p["dense_w"] + p["dense_b"]
        c["z3"] = z3
        h = np.maximum(z3, 0.0)
        c["dense"] = h
        if train and self.arch.dropout > 0:
            keep = 1.0 - self.arch.dropout
            c["mask"] = (rng.random(h.shape) < keep) / keep
            h = h * c["mask"]
        c["h"] = h
        logits = h @ p["out_w"] + p["out_b"]
        c["logits"] = logits
        out = sigmoid(logits[:, 0]) if self.binary else softmax(logits)
        c["out"] = out
        return out, c

    def loss(self, x, y, train=False, rng=None) -> float:
        out, c = self.forward(x, train, rng)
        return self._loss_from_cache(c, y)

    def _loss_from_cache(self, c, y) -> float:
        z = c["logits"]
        if self.binary:
            z = z[:, 0]
            y = np.asarray(y, dtype=np.float64)
            # stable binary cross-entropy on logits
            return float(np.mean(np.logaddexp(0.0, z) - y * z))
        y = np.asarray(y, dtype=np.int64)
        zmax = z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        return float(np.mean(logsum - z[np.arange(len(y)), y]))

    def backward(self, cache, y) -> dict:
        """Gradients of the mean batch cross-entropy w.r.t. every parameter."""
        p = self.params
        bsz = len(cache["x"])
        if self.binary:
            dlogits = ((cache["out"] - np.asarray(y, dtype=np.float64)) / bsz)[:, None]
        else:
            onehot = np.zeros_like(cache["out"])
            onehot[np.arange(bsz), np.asarray(y, dtype=np.int64)] = 1.0
            dlogits = (cache["out"] - onehot) / bsz
        g = {"out_w": cache["h"].T @ dlogits, "out_b": dlogits.sum(axis=0)}
        dh = dlogits @ p["out_w"].T
        if "mask" in cache:
            dh = dh * cache["mask"]
        dz3 = dh * (cache["z3"] > 0)
        g["dense_w"] = cache["flat"].T @ dz3
        g["dense_b"] = dz3.sum(axis=0)
        dp2 = (dz3 @ p["dense_w"].T).reshape(bsz, -1, self.arch.filters2)
        da2 = maxpool_backward(dp2, cache["arg2"], cache["z2"].shape[1])
        dz2 = da2 * (cache["z2"] > 0)
        dp1, g["conv2_w"], g["conv2_b"] = conv1d_backward(dz2, cache["cols2"], p["conv2_w"],
                                                           cache["p1"].shape[1])
        da1 = maxpool_backward(dp1, cache["arg1"], cache["z1"].shape[1])
        dz1 = da1 * (cache["z1"] > 0)
        _, g["conv1_w"], g["conv1_b"] = conv1d_backward(dz1, cache["cols1"], p["conv1_w"],
                                                         self.arch.input_len)
        return g

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- persistence --------------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        a = self.arch
        dims = [a.input_len, a.kernel1, a.filters1, a.kernel2, a.filters2, a.hidden, a.n_out]
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<II", _VERSION, len(dims)))
            f.write(struct.pack(f"<{len(dims)}I", *dims))
            f.write(struct.pack("<d", a.dropout))
            for name in PARAM_NAMES:
                f.write(self.params[name].astype("<f8").tobytes())
        meta = {"architecture": asdict(a), "shape_chain": self.shape_chain}
        meta.update(metadata or {})
        with open(str(path) + ".json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "ConvClassifier":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:8] != _MAGIC:
            raise ValueError("not a classifier checkpoint")
        version, ndims = struct.unpack_from("<II", raw, 8)
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dims = struct.unpack_from(f"<{ndims}I", raw, 16)
        off = 16 + 4 * ndims
        (dropout,) = struct.unpack_from("<d", raw, off)
        off += 8
        arch = Architecture(*dims, dropout=dropout)
        model = cls(arch, params={k: np.zeros(1) for k in PARAM_NAMES})
        shapes = {k: v.shape for k, v in model._init_params(np.random.default_rng(0)).items()}
        params = {}
        for name in PARAM_NAMES:
            size = int(np.prod(shapes[name]))
            params[name] = np.frombuffer(raw, "<f8", size, off).reshape(shapes[name]).copy()
            off += 8 * size
        model.params = params
        return model


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# Optimizer


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteGradientError(f"non-finite gradient in {bad} at step {self.t + 1}")
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Training


def balanced_batches(labels, batch_size: int, rng) -> list:
    """One epoch of class-balanced batches (arrays of sample indices).

    The epoch length is set by the largest class, whose samples each appear
    exactly once. Smaller classes are reshuffled and reused whenever they are
    exhausted. Classes are interleaved round-robin, so every batch holds an
    equal share of each class (within one sample).
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two nonempty classes")
    pools = [np.flatnonzero(labels == c) for c in classes]
    longest = max(len(p) for p in pools)
    streams = []
    for pool in pools:
        parts, total = [], 0
        while total < longest:
            parts.append(rng.permutation(pool))
            total += len(pool)
        streams.append(np.concatenate(parts)[:longest])
    order = np.stack(streams, axis=1).reshape(-1)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


@dataclass
class TrainConfig:
    batch_size: int = 50
    epochs: int = 5
    folds: int = 5
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    filters1: int = 16
    filters2: int = 32
    hidden: int = 128
    dropout: float = 0.5

    @classmethod
    def for_classes(cls, n_classes: int, **kw) -> "TrainConfig":
        kw.setdefault("batch_size", 50 if n_classes == 2 else 60)
        cfg = cls(**kw)
        if n_classes > 2 and cfg.batch_size % n_classes:
            raise ValueError("multi-class batch size must be divisible by the class count")
        return cfg

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def architecture(self, input_len: int, n_classes: int) -> Architecture:
        return Architecture(input_len=input_len, filters1=self.filters1, filters2=self.filters2,
                            hidden=self.hidden, n_out=1 if n_classes == 2 else n_classes,
                            dropout=self.dropout)


def train(features, labels, config: TrainConfig, rng=None, model=None, log=None) -> ConvClassifier:
    """Train on integer class labels ``0..K-1`` (binary: 1 = positive)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_classes = max(2, int(y.max()) + 1)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if model is None:
        model = ConvClassifier(config.architecture(x.shape[1], n_classes),
                               seed=int(rng.integers(2 ** 63)))
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    for epoch in range(config.epochs):
        losses = []
        for batch in balanced_batches(y, config.batch_size, rng):
            out, cache = model.forward(x[batch], train=True, rng=rng)
            losses.append(model._loss_from_cache(cache, y[batch]))
            opt.step(model.params, model.backward(cache, y[batch]))
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} loss {np.mean(losses):.4f}")
    return model


@dataclass
class Prediction:
    labels: np.ndarray
    scores: np.ndarray  # (M,) sigmoid scores or (M, K) class probabilities
    features: np.ndarray  # hidden dense activations, (M, H)


def predict(model: ConvClassifier, features, threshold: float = 0.5, chunk: int = 4096) -> Prediction:
    """Eval-mode inference. Binary: label = score >= threshold; else argmax."""
    x = np.asarray(features, dtype=np.float64)
    outs, feats = [], []
    for i in range(0, len(x), chunk):
        out, cache = model.forward(x[i:i + chunk], train=False)
        outs.append(out)
        feats.append(cache["dense"])
    if outs:
        scores = np.concatenate(outs)
        dense = np.concatenate(feats)
    else:
        scores = np.zeros((0,) if model.binary else (0, model.arch.n_out))
        dense = np.zeros((0, model.arch.hidden))
    if model.binary:
        labels = (scores >= threshold).astype(np.int64)
    else:
        labels = np.argmax(scores, axis=1)
    return Prediction(labels, scores, dense)


def binary_metrics(truth, predicted) -> dict:
    truth = np.asarray(truth).astype(bool)
    predicted = np.asarray(predicted).astype(bool)
    tp = int(np.sum(truth & predicted))
    tn = int(np.sum(~truth & ~predicted))
    fp = int(np.sum(~truth & predicted))
    fn = int(np.sum(truth & ~predicted))
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return {
        "accuracy": (tp + tn) / len(truth) if len(truth) else float("nan"),
        "sensitivity": sens,
        "specificity": spec,
        "balanced_accuracy": 0.5 * (sens + spec),
        "tp": tp, "tn": tn, "fp": fp, "fn": fn,
    }


def multiclass_metrics(truth, predicted, n_classes: int) -> dict:
    truth = np.asarray(truth)
    predicted = np.asarray(predicted)
    recalls = []
    for c in range(n_classes):
        sel = truth == c
        recalls.append(float(np.mean(predicted[sel] == c)) if sel.any() else float("nan"))
    return {
        "accuracy": float(np.mean(truth == predicted)) if len(truth) else float("nan"),
        "recall": recalls,
        "balanced_accuracy": float(np.mean(recalls)),
    }


def stratified_folds(labels, n_folds: int, rng) -> np.ndarray:
    """Fold index per sample; each class is spread round-robin over the folds."""
    labels = np.asarray(labels)
    fold = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold[idx] = np.arange(len(idx)) % n_folds
    return fold


@dataclass
class CVResult:
    models: list
    metrics: list
    folds: np.ndarray
    selected: int

    @property
    def model(self) -> ConvClassifier:
        return self.models[self.selected]

    def mean(self, key: str) -> float:
        return float(np.mean([m[key] for m in self.metrics]))


def _imbalance(metrics: dict) -> float:
    if "sensitivity" in metrics:
        return abs(metrics["sensitivity"] - metrics["specificity"])
    return float(np.max(metrics["recall"]) - np.min(metrics["recall"]))


def train_cv(features, labels, config: TrainConfig, log=None) -> CVResult:
    """Stratified k-fold training; selects the fold model with the most balanced recalls."""
    y = np.asarray(labels, dtype=np.int64)
    n_classes = max(2, int(y.max()) + 1)
    rng = np.random.default_rng(config.seed)
    folds = stratified_folds(y, config.folds, rng)
    models, metrics = [], []
    for k in range(config.folds):
        tr, va = folds != k, folds == k
        if len(np.unique(y[tr])) < n_classes or len(np.unique(y[va])) < n_classes:
            raise ValueError(f"fold {k} is missing a class")
        model = train(features[tr], y[tr], config, rng=rng,
                      log=(lambda s, k=k: log(f"fold {k + 1}: {s}")) if log else None)
        pred = predict(model, features[va])
        if n_classes == 2:
            m = binary_metrics(y[va], pred.labels)
        else:
            m = multiclass_metrics(y[va], pred.labels, n_classes)
        m["fold"] = k
        models.append(model)
        metrics.append(m)
    selected = min(range(len(models)), key=lambda i: (_imbalance(metrics[i]), -metrics[i]["accuracy"], i))
    return CVResult(models, metrics, folds, selected)
