"""Minimal neural networks with exact reverse-mode gradients.

Three architectures cover the benchmark: a linear-logistic-regression model
(one dense layer), a four-layer ReLU MLP, and a small CNN (four 2x2
convolutions, one max-pool, dense head). Everything ends in a two-unit
softmax. Layers are plain numpy float64 with hand-written backward passes,
which keeps gradients exact and runs deterministic.

Training is Adam on cross-entropy, no regularization, full batch by
default, with the weight snapshot taken at the epoch of minimum validation
loss.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialize

ACCURACY_GATE = 0.80


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


# --------------------------------------------------------------------------
# layers


class Dense:
    kind = "dense"

    def __init__(self, in_dim, out_dim, rng=None):
        limit = 1.0 / np.sqrt(in_dim)
        if rng is None:
            self.w = np.zeros((in_dim, out_dim))
        else:
            self.w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        self.b = np.zeros(out_dim)

    def forward(self, x):
        return x @ self.w + self.b, x

    def backward(self, dout, cache, collect=None):
        if collect is not None:
            collect.append(cache.T @ dout)
            collect.append(dout.sum(axis=0))
        return dout @ self.w.T

    def params(self):
        return [self.w, self.b]

    def spec(self):
        return {"kind": self.kind, "in_dim": self.w.shape[0], "out_dim": self.w.shape[1]}


class ReLU:
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dout, cache, collect=None, rule="plain"):
        if rule == "plain":
            return dout * cache
        if rule == "guided":
            return dout * cache * (dout > 0)
        if rule == "deconv":
            return dout * (dout > 0)
        raise ValueError(f"unknown ReLU rule {rule!r}")

    def params(self):
        return []

    def spec(self):
        return {"kind": self.kind}


class Conv2D:
    """2-D convolution, stride 1, 'same' output via bottom/right zero padding."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=2, rng=None):
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        fan_in = in_ch * kernel * kernel
        limit = 1.0 / np.sqrt(fan_in)
        if rng is None:
            self.w = np.zeros((out_ch, in_ch, kernel, kernel))
        else:
            self.w = rng.uniform(-limit, limit, size=(out_ch, in_ch, kernel, kernel))
        self.b = np.zeros(out_ch)

    def _pad(self, x):
        p = self.kernel - 1
        return np.pad(x, ((0, 0), (0, 0), (0, p), (0, p)))

    def forward(self, x):
        n, _, h, w = x.shape
        xp = self._pad(x)
        out = np.zeros((n, self.out_ch, h, w))
        for di in range(self.kernel):
            for dj in range(self.kernel):
                out += np.einsum(
                    "ncij,oc->noij", xp[:, :, di : di + h, dj : dj + w], self.w[:, :, di, dj]
                )
        return out + self.b[None, :, None, None], xp

    def backward(self, dout, cache, collect=None):
        xp = cache
        n, _, hp, wp = xp.shape
        h, w = dout.shape[2], dout.shape[3]
        if collect is not None:
            dw = np.zeros_like(self.w)
            for di in range(self.kernel):
                for dj in range(self.kernel):
                    dw[:, :, di, dj] = np.einsum(
                        "noij,ncij->oc", dout, xp[:, :, di : di + h, dj : dj + w]
                    )
            collect.append(dw)
            collect.append(dout.sum(axis=(0, 2, 3)))
        dxp = np.zeros((n, self.in_ch, hp, wp))
        for di in range(self.kernel):
            for dj in range(self.kernel):
                dxp[:, :, di : di + h, dj : dj + w] += np.einsum(
                    "noij,oc->ncij", dout, self.w[:, :, di, dj]
                )
        return dxp[:, :, :h, :w]

    def params(self):
        return [self.w, self.b]

    def spec(self):
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "kernel": self.kernel,
        }


class MaxPool2D:
    kind = "maxpool2d"

    def __init__(self, size=2):
        self.size = size

    def forward(self, x):
        n, c, h, w = x.shape
        s = self.size
        tiles = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        tiles = tiles.reshape(n, c, h // s, w // s, s * s)
        idx = tiles.argmax(axis=-1)  # first maximum wins on ties
        out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dout, cache, collect=None):
        idx, shape = cache
        n, c, h, w = shape
        s = self.size
        dtiles = np.zeros((n, c, h // s, w // s, s * s))
        np.put_along_axis(dtiles, idx[..., None], dout[..., None], axis=-1)
        dtiles = dtiles.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return dtiles.reshape(n, c, h, w)

    def params(self):
        return []

    def spec(self):
        return {"kind": self.kind, "size": self.size}


class Flatten:
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache, collect=None):
        return dout.reshape(cache)

    def params(self):
        return []

    def spec(self):
        return {"kind": self.kind}


class Softmax:
    """Marker for the output activation; gradients run on the logits."""

    kind = "softmax"

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True), None

    def params(self):
        return []

    def spec(self):
        return {"kind": self.kind}


_LAYER_KINDS = {c.kind: c for c in (Dense, ReLU, Conv2D, MaxPool2D, Flatten, Softmax)}


# --------------------------------------------------------------------------
# model


class Model:
    """A layer stack over flat inputs; conv stacks reshape to (1, H, W)."""

    def __init__(self, layers, input_shape, name: str = "model"):
        self.layers = layers
        self.input_shape = tuple(input_shape)  # (D,) flat or (H, W) image
        self.name = name

    # -- plumbing

    @property
    def needs_image(self) -> bool:
        return len(self.input_shape) == 2

    def _shape_in(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        d = int(np.prod(self.input_shape))
        if x.shape[1] != d:
            raise ValueError(f"expected {d} features, got {x.shape[1]}")
        if self.needs_image:
            return x.reshape(x.shape[0], 1, *self.input_shape)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def clone_weights(self):
        return [p.copy() for p in self.parameters()]

    def set_weights(self, weights):
        for p, w in zip(self.parameters(), weights, strict=True):
            p[...] = w

    # -- passes

    def forward_logits(self, x, keep_caches: bool = False):
        h = self._shape_in(x)
        caches = []
        for layer in self.layers:
            if isinstance(layer, Softmax):
                break
            h, cache = layer.forward(h)
            if keep_caches:
                caches.append(cache)
        return (h, caches) if keep_caches else h

    def forward(self, x):
        """Class probabilities, rows summing to one."""
        logits = self.forward_logits(x)
        return Softmax().forward(logits)[0]

    def predict(self, x):
        return self.forward_logits(x).argmax(axis=1)

    def _backward(self, dlogits, caches, relu_rule="plain", collect=None):
        d = dlogits
        stack = [l for l in self.layers if not isinstance(l, Softmax)]
        per_layer = []
        for layer, cache in zip(reversed(stack), reversed(caches)):
            bucket = [] if collect is not None and layer.params() else None
            if isinstance(layer, ReLU):
                d = layer.backward(d, cache, rule=relu_rule)
            else:
                d = layer.backward(d, cache, collect=bucket)
            if bucket is not None:
                per_layer.append(bucket)
        if collect is not None:
            for bucket in reversed(per_layer):
                collect.extend(bucket)
        return d

    def input_gradient(self, x, target="margin", class_index=None, relu_rule="plain"):
        """Gradient of a scalar logit readout with respect to the input.

        ``target`` selects the scalar: ``"margin"`` is the chosen class logit
        minus the other class logit, ``"logit"`` the chosen class logit
        alone. ``class_index`` defaults to the predicted class per sample.
        ``relu_rule`` switches the ReLU backward pass between ``plain``,
        ``guided`` (only positive upstream gradients through active units)
        and ``deconv`` (only positive upstream gradients, activity ignored).
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logits, caches = self.forward_logits(x, keep_caches=True)
        n = logits.shape[0]
        if class_index is None:
            k = logits.argmax(axis=1)
        else:
            k = np.full(n, class_index, dtype=int)
        dlogits = np.zeros_like(logits)
        dlogits[np.arange(n), k] = 1.0
        if target == "margin":
            dlogits[np.arange(n), 1 - k] = -1.0
        elif target != "logit":
            raise ValueError(f"unknown target {target!r}")
        dx = self._backward(dlogits, caches, relu_rule=relu_rule)
        return dx.reshape(n, -1)

    def param_gradients(self, x, labels):
        """Mean cross-entropy loss and gradients for every parameter array."""
        x = np.asarray(x, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        logits, caches = self.forward_logits(x, keep_caches=True)
        n = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        grads = []
        self._backward(dlogits, caches, collect=grads)
        return loss, grads

    def loss(self, x, labels):
        logits = self.forward_logits(x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        n = logits.shape[0]
        return float(np.mean(log_z - shifted[np.arange(n), np.asarray(labels, dtype=np.int64)]))

    def accuracy(self, x, labels):
        return float(np.mean(self.predict(x) == np.asarray(labels)))

    # -- serialization

    def spec(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.spec() for layer in self.layers],
        }

    @classmethod
    def from_spec(cls, spec) -> "Model":
        layers = []
        for ls in spec["layers"]:
            kind = _LAYER_KINDS[ls["kind"]]
            kwargs = {k: v for k, v in ls.items() if k != "kind"}
            if kind is Dense:
                layers.append(Dense(kwargs["in_dim"], kwargs["out_dim"]))
            elif kind is Conv2D:
                layers.append(Conv2D(kwargs["in_ch"], kwargs["out_ch"], kwargs["kernel"]))
            elif kind is MaxPool2D:
                layers.append(MaxPool2D(kwargs["size"]))
            else:
                layers.append(kind())
        return cls(layers, tuple(spec["input_shape"]), name=spec.get("name", "model"))


# --------------------------------------------------------------------------
# architectures


def build_llr(input_dim: int, seed: int = 0) -> Model:
    rng = np.random.default_rng([seed, 0])
    return Model([Dense(input_dim, 2, rng), Softmax()], (input_dim,), name="llr")


def build_mlp(input_dim: int, hidden=(64, 64, 64), seed: int = 0) -> Model:
    layers = []
    dims = [input_dim, *hidden]
    for i in range(len(hidden)):
        rng = np.random.default_rng([seed, i])
        layers += [Dense(dims[i], dims[i + 1], rng), ReLU()]
    rng = np.random.default_rng([seed, len(hidden)])
    layers += [Dense(dims[-1], 2, rng), Softmax()]
    return Model(layers, (input_dim,), name="mlp")


def build_cnn(height: int, width: int, channels: int = 4, conv_layers: int = 4, seed: int = 0) -> Model:
    layers = []
    in_ch = 1
    for i in range(conv_layers):
        rng = np.random.default_rng([seed, i])
        layers += [Conv2D(in_ch, channels, 2, rng), ReLU()]
        in_ch = channels
    layers.append(MaxPool2D(2))
    layers.append(Flatten())
    rng = np.random.default_rng([seed, conv_layers])
    flat = channels * (height // 2) * (width // 2)
    layers += [Dense(flat, 2, rng), Softmax()]
    return Model(layers, (height, width), name="cnn")


def build_model(name: str, height: int, width: int, seed: int = 0, hidden=(64, 64, 64)) -> Model:
    if name == "llr":
        return build_llr(height * width, seed=seed)
    if name == "mlp":
        return build_mlp(height * width, hidden=hidden, seed=seed)
    if name == "cnn":
        return build_cnn(height, width, seed=seed)
    raise ValueError(f"unknown model {name!r}")


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr: float = 0.004  # 0.0004 for RIGID
    batch_size: int | None = None  # None = full batch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
        }


def learning_rate_for(scenario: str) -> float:
    return 0.0004 if scenario == "RIGID" else 0.004


class Adam:
    def __init__(self, params, config: TrainConfig):
        self.config = config
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        c = self.config
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v, strict=True):
            m[...] = c.beta1 * m + (1 - c.beta1) * g
            v[...] = c.beta2 * v + (1 - c.beta2) * g * g
            m_hat = m / (1 - c.beta1**self.t)
            v_hat = v / (1 - c.beta2**self.t)
            p -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


@dataclass
class TrainedModel:
    model: Model
    config: TrainConfig
    log: list  # [(epoch, train_loss, val_loss)]
    best_epoch: int
    test_accuracy: float
    gate_passed: bool

    def save(self, path) -> None:
        path = Path(path)
        params = self.model.parameters()
        sections = [(f"p{i}", p, "f8") for i, p in enumerate(params)]
        payload = path.with_suffix(".bin")
        layout = serialize.write_payload(payload, sections)
        serialize.dump_json(
            {
                "format_version": serialize.FORMAT_VERSION,
                "kind": "trained_model",
                "model": self.model.spec(),
                "train_config": self.config.to_dict(),
                "best_epoch": self.best_epoch,
                "test_accuracy": self.test_accuracy,
                "gate_passed": self.gate_passed,
                "payload": payload.name,
                "layout": layout,
            },
            path,
        )
        log_path = path.with_suffix(".log.csv")
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{tl!r},{vl!r}" for e, tl, vl in self.log]
        log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainedModel":
        path = Path(path)
        meta = serialize.load_json(path)
        model = Model.from_spec(meta["model"])
        arrays = serialize.read_payload(path.parent / meta["payload"], meta["layout"])
        model.set_weights([arrays[f"p{i}"] for i in range(len(arrays))])
        log = []
        log_path = path.with_suffix(".log.csv")
        if log_path.exists():
            for line in log_path.read_text().strip().splitlines()[1:]:
                e, tl, vl = line.split(",")
                log.append((int(e), float(tl), float(vl)))
        cfg = meta["train_config"]
        cfg["batch_size"] = cfg.get("batch_size")
        return cls(
            model=model,
            config=TrainConfig(**cfg),
            log=log,
            best_epoch=meta["best_epoch"],
            test_accuracy=meta["test_accuracy"],
            gate_passed=meta["gate_passed"],
        )


def train(model: Model, data, config: TrainConfig) -> TrainedModel:
    """Fit ``model`` on the dataset's train split, early-stopping on val loss.

    ``data`` is anything with ``flat_pixels()``, ``labels`` and
    ``split_indices``. The returned weights are the snapshot from the epoch
    with minimum validation loss (earliest on ties); test accuracy and the
    80% gate flag are computed with those weights.
    """
    flat = data.flat_pixels()
    labels = np.asarray(data.labels, dtype=np.int64)
    train_idx, val_idx, test_idx = data.split_indices
    if min(len(train_idx), len(val_idx), len(test_idx)) == 0:
        raise ValueError("dataset needs non-empty train/val/test splits")
    x_train, y_train = flat[train_idx], labels[train_idx]
    x_val, y_val = flat[val_idx], labels[val_idx]

    opt = Adam(model.parameters(), config)
    shuffle_rng = np.random.default_rng([config.seed, 99])
    log = []
    best_val = np.inf
    best_epoch = -1
    best_weights = model.clone_weights()

    for epoch in range(config.epochs):
        if config.batch_size is None:
            loss, grads = model.param_gradients(x_train, y_train)
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            opt.step(model.parameters(), grads)
        else:
            order = shuffle_rng.permutation(len(x_train))
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                loss, grads = model.param_gradients(x_train[batch], y_train[batch])
                if not np.isfinite(loss):
                    raise DivergenceError(epoch)
                opt.step(model.parameters(), grads)
        train_loss = model.loss(x_train, y_train)
        val_loss = model.loss(x_val, y_val)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergenceError(epoch)
        log.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_weights = model.clone_weights()

    model.set_weights(best_weights)
    test_accuracy = model.accuracy(flat[test_idx], labels[test_idx])
    return TrainedModel(
        model=model,
        config=config,
        log=log,
        best_epoch=best_epoch,
        test_accuracy=test_accuracy,
        gate_passed=test_accuracy >= ACCURACY_GATE,
    )
