"""Linear classification head on top of the kernel layer, training and model files."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, FormatVersionError, NumericalError, ParseError
from .kernel import KernelParams, default_beta
from .nystroem import AnchorSet, forward_batch, init_anchors, layer_backward
from .seqdata import Alphabet, circle_positions, spawn_rngs

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOSS_KINDS = ("class_balanced_ce", "bce_logits")


# ------------------------------------------------------------------ configs

@dataclass
class ModelConfig:
    num_anchors: int = 50
    k: int = 1
    alpha: float = 1.0
    beta: float | None = None  # None: L^2 / 10
    sigma: float = 4.0
    hidden: tuple = (200,)
    init_samples: int | None = None  # None: max(10 n, 3000)
    epsilon: float = 1e-6

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.num_anchors < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("anchor and hidden-layer sizes must be positive")

    def kernel_params(self, seq_length):
        beta = default_beta(seq_length) if self.beta is None else self.beta
        return KernelParams(self.k, self.alpha, beta, self.sigma)


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.1
    factor: float = 0.1
    patience: int = 10
    min_lr: float = 0.0
    threshold: float = 1e-4
    loss: str = "class_balanced_ce"
    cb_beta: float = 0.999
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    freeze_positions: bool = False
    detach_inv_sqrt: bool = False
    weight_decay: float = 0.0  # L2 on dense weights, added to their gradients

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.factor < 1:
            raise ConfigError("factor must lie in (0, 1)")
        if not 0 <= self.cb_beta < 1:
            raise ConfigError("cb_beta must lie in [0, 1)")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.lr < 0 or self.patience < 0 or self.min_lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr, patience, min_lr and weight_decay must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


# ------------------------------------------------------------------ model

@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.activation != "identity":
            raise ConfigError(f"only linear layers are supported, got activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ConfigError("dense layer weights must be (out, in) with a matching bias")


def init_dense(sizes, rng):
    """Linear layers with the usual ``U(-1/sqrt(in), 1/sqrt(in))`` initialisation."""
    layers = []
    for fan_in, fan_out in itertools.pairwise(sizes):
        bound = 1.0 / math.sqrt(fan_in)
        layers.append(DenseLayer(rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                                 rng.uniform(-bound, bound, size=fan_out)))
    return layers


@dataclass
class CmknModel:
    alphabet: Alphabet
    params: KernelParams
    seq_length: int
    anchors: AnchorSet
    layers: list
    class_names: tuple = ("0", "1")
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        expected = self.anchors.n * self.num_positions
        if self.layers[0].weights.shape[1] != expected:
            raise ConfigError(f"first dense layer expects {self.layers[0].weights.shape[1]} inputs, "
                              f"kernel layer yields {expected}")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if b.weights.shape[1] != a.weights.shape[0]:
                raise ConfigError("dense layer sizes do not chain")
        out = self.layers[-1].weights.shape[0]
        if out not in (1, len(self.class_names)):
            raise ConfigError(f"output size {out} matches neither 1 logit nor {len(self.class_names)} classes")

    @property
    def num_positions(self):
        return self.seq_length - self.params.k + 1

    @property
    def single_logit(self):
        return self.layers[-1].weights.shape[0] == 1

    def check_input(self, x):
        if x.length != self.seq_length:
            raise ValueError(f"sequence {x.id!r} has length {x.length}, model expects {self.seq_length}")
        if x.matrix.shape[0] != self.alphabet.size:
            raise ValueError(f"sequence {x.id!r} uses a different alphabet")

    def encode_batch(self, seqs):
        for s in seqs:
            self.check_input(s)
        k = self.params.k
        return np.stack([s.windows(k) for s in seqs]), circle_positions(self.seq_length, self.num_positions)


def head_forward(layers, features):
    acts = [features]
    for layer in layers:
        acts.append(acts[-1] @ layer.weights.T + layer.bias)
    return acts


def head_backward(layers, acts, grad_logits):
    grads = []
    g = grad_logits
    for layer, a in zip(reversed(layers), reversed(acts[:-1])):
        grads.append((g.T @ a, g.sum(axis=0)))
        g = g @ layer.weights
    grads.reverse()
    return grads, g


def logits_batch(model, seqs):
    windows, positions = model.encode_batch(seqs)
    psi, _ = forward_batch(windows, positions, model.anchors)
    return head_forward(model.layers, psi.reshape(len(seqs), -1))[-1]


def model_forward(model, x):
    """Logit vector for one sequence (anchor-major flattening of the layer output)."""
    return logits_batch(model, [x])[0]


def probabilities_from_logits(logits, single_logit):
    logits = np.atleast_2d(logits)
    if single_logit:
        p1 = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        return np.column_stack([1.0 - p1, p1])
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(model, x):
    """Class probabilities for one sequence or a list of sequences."""
    if isinstance(x, (list, tuple)):
        return probabilities_from_logits(logits_batch(model, list(x)), model.single_logit)
    return probabilities_from_logits(logits_batch(model, [x]), model.single_logit)[0]


# ------------------------------------------------------------------ losses

def class_balanced_weights(counts, cb_beta):
    """Effective-number class weights ``(1-b)/(1-b^n_c)``, normalised to sum to #classes."""
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 1):
        raise ValueError("every class needs at least one sample")
    if not 0 <= cb_beta < 1:
        raise ValueError("cb_beta must lie in [0, 1)")
    if cb_beta == 0:
        raw = np.ones_like(counts)
    else:
        raw = (1.0 - cb_beta) / (1.0 - np.power(cb_beta, counts))
    return raw * len(counts) / raw.sum()


def loss(logits, label, weights=None, kind="class_balanced_ce"):
    """Loss of one sample and its gradient with respect to the logits."""
    value, grad = batch_loss(np.atleast_2d(logits), np.array([label]), weights, kind)
    return value, grad[0]


def batch_loss(logits, labels, weights=None, kind="class_balanced_ce"):
    """Mean weighted loss over a batch and its gradient with respect to ``logits``."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    b = logits.shape[0]
    if kind == "bce_logits":
        z = logits[:, 0]
        y = labels.astype(float)
        per = np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
        dz = 1.0 / (1.0 + np.exp(-z)) - y
        w = np.ones(b) if weights is None else np.asarray(weights)[labels]
        return float(np.sum(w * per) / b), (w * dz / b)[:, None]
    if kind != "class_balanced_ce":
        raise ValueError(f"unknown loss kind {kind!r}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    per = logsum - z[np.arange(b), labels]
    prob = np.exp(z - logsum[:, None])
    prob[np.arange(b), labels] -= 1.0
    w = np.ones(b) if weights is None else np.asarray(weights)[labels]
    return float(np.sum(w * per) / b), prob * (w / b)[:, None]


# --------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr):
    """In-place bias-corrected Adam update of every array in ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without
    relative improvement of ``threshold``."""

    def __init__(self, lr, factor=0.1, patience=10, min_lr=0.0, threshold=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, epoch_loss):
        if epoch_loss < self.best * (1.0 - self.threshold):
            self.best = epoch_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            if new_lr < self.lr:
                self.reductions += 1
            self.lr = new_lr
            self.bad_epochs = 0
        return self.lr


# ------------------------------------------------------------------ train

def _common_length(ds):
    lengths = {int(s.length) for s in ds.sequences}
    if len(lengths) != 1:
        raise ValueError(f"training needs equally long sequences, found lengths {sorted(lengths)}")
    return lengths.pop()


def config_hash(model_config, train_config):
    blob = json.dumps({"model": asdict(model_config), "train": asdict(train_config)},
                      sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(ds, model_config, train_config, rng_init, rng_dense):
    length = _common_length(ds)
    params = model_config.kernel_params(length)
    anchors = init_anchors(ds, model_config.num_anchors, params, rng_init,
                           m=model_config.init_samples, epsilon=model_config.epsilon)
    n_out = 1 if train_config.loss == "bce_logits" else len(ds.class_names)
    p = length - params.k + 1
    layers = init_dense([anchors.n * p, *model_config.hidden, n_out], rng_dense)
    return CmknModel(ds.alphabet, params, length, anchors, layers, ds.class_names)


def loss_and_grads(model, windows, positions, labels, weights, kind, detach_inv_sqrt=False):
    """Loss of a batch plus gradients for every dense parameter and the anchors."""
    psi, cache = forward_batch(windows, positions, model.anchors)
    b = psi.shape[0]
    acts = head_forward(model.layers, psi.reshape(b, -1))
    value, grad_logits = batch_loss(acts[-1], labels, weights, kind)
    dense_grads, g_in = head_backward(model.layers, acts, grad_logits)
    grad_m, grad_p = layer_backward(cache, g_in.reshape(psi.shape), model.anchors, detach_inv_sqrt)
    return value, acts[-1], dense_grads, grad_m, grad_p


def train(ds, model_config, train_config, rng=None):
    """Train a model end to end; returns ``(model, history)``.

    ``history`` holds one dict per epoch with the mean training loss, the
    learning rate used during the epoch and the training accuracy.
    """
    if train_config.loss == "bce_logits" and len(ds.class_names) != 2:
        raise ConfigError("bce_logits needs a binary dataset")
    labels = ds.labels
    if np.any(labels < 0):
        raise ValueError("training data must be labelled")
    seed = train_config.seed if rng is None else rng
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2 ** 63))
    rng_init, rng_dense, rng_order = spawn_rngs(seed, 3)
    model = build_model(ds, model_config, train_config, rng_init, rng_dense)
    model.training_meta = {"seed": int(seed), "epochs": train_config.epochs,
                           "config_hash": config_hash(model_config, train_config)}
    windows, positions = model.encode_batch(ds.sequences)
    n = len(ds)
    weights = None
    if train_config.loss == "class_balanced_ce":
        weights = class_balanced_weights(np.maximum(ds.class_counts, 1), train_config.cb_beta)
    batch = n if train_config.batch_size is None else min(train_config.batch_size, n)
    anchors = model.anchors
    state = AdamState()
    sched = ReduceLROnPlateau(train_config.lr, train_config.factor, train_config.patience,
                              train_config.min_lr, train_config.threshold)
    history = []
    for epoch in range(1, train_config.epochs + 1):
        lr = sched.lr
        order = np.arange(n) if batch == n else rng_order.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            value, logits, dense_grads, grad_m, grad_p = loss_and_grads(
                model, windows[idx], positions, labels[idx], weights, train_config.loss,
                train_config.detach_inv_sqrt)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, lr={lr}")
            total += value * len(idx)
            pred = (logits[:, 0] > 0).astype(int) if model.single_logit else logits.argmax(axis=1)
            correct += int(np.sum(pred == labels[idx]))
            params = [a for layer in model.layers for a in (layer.weights, layer.bias)]
            if train_config.weight_decay:
                dense_grads = [(gw + train_config.weight_decay * layer.weights, gb)
                               for (gw, gb), layer in zip(dense_grads, model.layers)]
            grads = [g for pair in dense_grads for g in pair]
            params.append(anchors.motifs)
            grads.append(grad_m)
            if not train_config.freeze_positions:
                params.append(anchors.positions)
                grads.append(grad_p)
            adam_step(params, grads, state, lr)
            anchors.project_()
        epoch_loss = total / n
        history.append({"epoch": epoch, "loss": epoch_loss, "lr": lr, "accuracy": correct / n})
        log.debug("epoch %d loss %.6f lr %.3g acc %.4f", epoch, epoch_loss, lr, correct / n)
        sched.step(epoch_loss)
    return model, history


# --------------------------------------------------------------- model I/O

_REQUIRED = ("format_version", "alphabet", "kernel_params", "sequence_length", "anchors",
             "dense_layers", "class_names", "kzz_digest", "training_meta")


def model_to_dict(model):
    return {
        "format_version": FORMAT_VERSION,
        "alphabet": model.alphabet.to_dict(),
        "kernel_params": model.params.to_dict(),
        "sequence_length": model.seq_length,
        "anchors": model.anchors.to_dict(),
        "dense_layers": [{"weights": l.weights.tolist(), "bias": l.bias.tolist(),
                          "activation": l.activation} for l in model.layers],
        "class_names": list(model.class_names),
        "kzz_digest": model.anchors.kzz_digest(),
        "training_meta": model.training_meta,
    }


def model_from_dict(data):
    for key in _REQUIRED:
        if key not in data:
            raise ParseError(f"model file is missing field {key!r}")
    if data["format_version"] != FORMAT_VERSION:
        raise FormatVersionError(
            f"model format version {data['format_version']} is not supported (expected {FORMAT_VERSION})")
    try:
        params = KernelParams.from_dict(data["kernel_params"])
        anchors = AnchorSet.from_dict(data["anchors"], params)
        layers = [DenseLayer(l["weights"], l["bias"], l.get("activation", "identity"))
                  for l in data["dense_layers"]]
        alphabet = Alphabet.from_dict(data["alphabet"])
    except KeyError as exc:
        raise ParseError(f"model file is missing field {exc.args[0]!r}") from None
    if anchors.kzz_digest() != data["kzz_digest"]:
        raise ParseError("anchor Gram matrix digest mismatch: model file is corrupted")
    return CmknModel(alphabet, params, int(data["sequence_length"]), anchors, layers,
                     tuple(data["class_names"]), dict(data["training_meta"]))


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"model file {path} is not valid JSON: {exc}") from None
    return model_from_dict(data)


__all__ = [
    "AdamState", "CmknModel", "DenseLayer", "ModelConfig", "ReduceLROnPlateau", "TrainConfig",
    "adam_step", "batch_loss", "class_balanced_weights", "load_model", "loss", "model_forward",
    "predict", "save_model", "train",
]
