"""Small MLP encoder with hand-written backprop, SGD and the training loop.

The encoder stands in for a face-recognition backbone: inputs are
``d_in x N`` column matrices, outputs ``d x N`` embeddings. The prototype
matrix ``W`` (``d x n``) is trained jointly with the encoder under the
margin loss plus the Inter-Prototype penalty.
"""

import dataclasses
import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_math import as_matrix, cosine_matrix
from .data import BatchSampler
from .losses import MarginConfig, total_loss

IP_TARGETS = ("child_only", "all_identities", "off")
CHECKPOINT_FORMAT = "interproto-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when a loss or gradient goes non-finite during training."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    relu: bool


@dataclass
class EncoderParams:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        for k, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise ValueError(f"layer {k}: bias must match weight rows")
            if k and layer.weight.shape[1] != self.layers[k - 1].weight.shape[0]:
                raise ValueError(f"layer {k}: input width does not chain with layer {k - 1}")

    @property
    def d_in(self):
        return self.layers[0].weight.shape[1]

    @property
    def d_out(self):
        return self.layers[-1].weight.shape[0]

    def named_arrays(self):
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"layer{k}.weight"] = layer.weight
            out[f"layer{k}.bias"] = layer.bias
        return out

    def replace(self, arrays):
        return EncoderParams([
            Layer(arrays[f"layer{k}.weight"], arrays[f"layer{k}.bias"], layer.relu)
            for k, layer in enumerate(self.layers)
        ])


def _tensor_rng(seed, name):
    # one stream per named tensor so adding tensors never shifts other draws
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


def init_encoder(d_in, hidden, d_out, seed):
    """Kaiming-scaled weights and zero biases; ReLU on hidden layers only."""
    widths = [d_in, *hidden, d_out]
    layers = []
    for k in range(len(widths) - 1):
        fan_in, fan_out = widths[k], widths[k + 1]
        rng = _tensor_rng(seed, f"layer{k}.weight")
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append(Layer(w, np.zeros(fan_out), relu=k < len(widths) - 2))
    return EncoderParams(layers)


def init_prototypes(d, n, seed):
    w = _tensor_rng(seed, "prototypes").standard_normal((d, n))
    return w / np.linalg.norm(w, axis=0)


@dataclass
class ForwardCache:
    inputs: list  # activation fed into each layer
    pre: list  # pre-activation of each layer
    weights: list
    relu: list


def encode_forward(params, inputs):
    """Embed the columns of ``inputs`` (d_in x N); returns (features, cache)."""
    a = as_matrix(inputs, "inputs")
    if a.shape[0] != params.d_in:
        raise ValueError(f"input has {a.shape[0]} rows, encoder expects {params.d_in}")
    cache = ForwardCache([], [], [], [])
    for layer in params.layers:
        cache.inputs.append(a)
        z = layer.weight @ a + layer.bias[:, None]
        cache.pre.append(z)
        cache.weights.append(layer.weight)
        cache.relu.append(layer.relu)
        a = np.maximum(z, 0.0) if layer.relu else z
    return a, cache


def encode_backward(cache, grad_features):
    """Reverse-mode gradients of a scalar loss for every weight and bias.

    Returns a dict keyed like :meth:`EncoderParams.named_arrays`.
    """
    g = np.asarray(grad_features, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise ValueError(
            f"upstream gradient shape {g.shape} does not match cached output {cache.pre[-1].shape}")
    grads = {}
    for k in reversed(range(len(cache.pre))):
        if cache.relu[k]:
            g = g * (cache.pre[k] > 0)
        grads[f"layer{k}.weight"] = g @ cache.inputs[k].T
        grads[f"layer{k}.bias"] = g.sum(axis=1)
        if k:
            g = cache.weights[k].T @ g
    return grads


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    lr_decay_epochs: Sequence[int] = (17, 25)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    margin: MarginConfig = field(default_factory=MarginConfig)
    apply_ip_to: str = "child_only"
    hidden: Sequence[int] = (64,)
    embed_dim: int = 16
    rho: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.apply_ip_to not in IP_TARGETS:
            raise ValueError(f"apply_ip_to must be one of {IP_TARGETS}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def lr_at(self, epoch):
        """Learning rate for 1-based ``epoch``."""
        passed = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** passed

    def to_dict(self):
        return dataclasses.asdict(self)


def config_digest(obj):
    """SHA-256 over canonical JSON; independent of key order."""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset, tuple, np.ndarray)):
        return sorted(o) if isinstance(o, (set, frozenset)) else list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def sgd_step(params, prototypes, grads, state, cfg, lr=None):
    """One momentum-SGD update of encoder and prototypes.

    ``v <- momentum * v + g + weight_decay * p`` and ``p <- p - lr * v``;
    biases get no weight decay. Returns new ``(params, prototypes, state)``;
    the inputs are not modified.
    """
    lr = cfg.lr if lr is None else lr
    arrays = dict(params.named_arrays())
    arrays["prototypes"] = prototypes
    new_state = {}
    updated = {}
    for name, p in arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
        step = g
        if cfg.weight_decay and not name.endswith(".bias"):
            step = step + cfg.weight_decay * p
        if cfg.momentum:
            step = cfg.momentum * state.get(name, 0.0) + step
        new_state[name] = step
        updated[name] = p - lr * step
    protos = updated.pop("prototypes")
    return params.replace(updated), protos, new_state


@dataclass
class PrototypeHead:
    W: np.ndarray
    child_ids: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.child_ids = np.asarray(self.child_ids, dtype=np.int64).reshape(-1)
        n = self.W.shape[1]
        if np.any((self.child_ids < 0) | (self.child_ids >= n)):
            raise ValueError(f"child_ids must lie in [0, {n})")


def mean_offdiag_abs_cos(W, ids):
    """Mean |cosine| over ordered distinct pairs of the given columns."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        return float("nan")
    c = cosine_matrix(W[:, ids], W[:, ids])
    k = ids.size
    return float((np.sum(np.abs(c)) - np.sum(np.abs(np.diag(c)))) / (k * (k - 1)))


@dataclass
class RunLedgerEntry:
    run_id: str
    seed: int
    config_digest: str
    records: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def lines(self):
        """JSON-lines form: a header, one line per epoch, then the final record."""
        head = {"type": "run", "run_id": self.run_id, "seed": self.seed,
                "config_digest": self.config_digest, **self.notes}
        out = [json.dumps(head, sort_keys=True)]
        out += [json.dumps({"type": "epoch", **r}, sort_keys=True) for r in self.records]
        out.append(json.dumps({"type": "final", **self.final}, sort_keys=True))
        return out


def ip_targets(cfg, dataset):
    child = dataset.child_ids()
    if cfg.apply_ip_to == "off" or cfg.margin.lambda_ip == 0:
        return None
    if cfg.apply_ip_to == "all_identities":
        return np.arange(dataset.n_identities)
    return child


def train(dataset, cfg, run_id=None, on_epoch=None):
    """Train encoder and prototypes on ``dataset``.

    Each step embeds a batch, evaluates the combined loss, backpropagates
    into the encoder and updates encoder and prototypes with momentum SGD.
    Deterministic for a given ``cfg.seed``.

    Returns ``(params, head, ledger)``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    present = np.unique(dataset.identities)
    if present.size != dataset.n_identities:
        raise ValueError("every identity needs at least one sample")
    targets = ip_targets(cfg, dataset)
    if targets is not None and len(targets) < 2:
        raise ValueError(
            f"Inter-Prototype loss needs >= 2 target identities, dataset has {len(targets)}")
    margin_cfg = cfg.margin
    if targets is None and margin_cfg.lambda_ip != 0:
        margin_cfg = dataclasses.replace(margin_cfg, lambda_ip=0.0)

    child_ids = dataset.child_ids()
    params = init_encoder(dataset.dim, list(cfg.hidden), cfg.embed_dim, cfg.seed)
    W = init_prototypes(cfg.embed_dim, dataset.n_identities, cfg.seed)
    state = {}
    sampler = BatchSampler(dataset, min(cfg.batch_size, len(dataset)), rho=cfg.rho, seed=cfg.seed)
    inputs = dataset.inputs
    labels = dataset.identities
    flags = dataset.child_mask

    digest = config_digest(cfg)
    ledger = RunLedgerEntry(run_id or f"seed{cfg.seed}", cfg.seed, digest,
                            notes={"dropped_tail_per_epoch": sampler.dropped,
                                   "batches_per_epoch": sampler.batches_per_epoch()})
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        sums = np.zeros(3)
        batches = sampler.epoch(epoch)
        for b, idx in enumerate(batches):
            feats, cache = encode_forward(params, inputs[:, idx])
            res = total_loss(feats, W, labels[idx], targets, margin_cfg, is_child=flags[idx])
            if not np.isfinite(res.loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}", epoch, b)
            grads = encode_backward(cache, res.grad_features)
            grads["prototypes"] = res.grad_prototypes
            try:
                params, W, state = sgd_step(params, W, grads, state, cfg, lr=lr)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch} batch {b}", epoch, b) from None
            sums += (res.loss, res.parts["margin"], res.parts["ip"])
        means = sums / max(len(batches), 1)
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": float(means[0]),
            "margin_loss": float(means[1]),
            "ip_loss": float(means[2]),
            "child_mean_abs_cos": mean_offdiag_abs_cos(W, child_ids),
            "min_prototype_norm": float(np.min(np.linalg.norm(W, axis=0))),
        }
        ledger.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    ledger.final = {
        "child_mean_abs_cos": ledger.records[-1]["child_mean_abs_cos"],
        "all_mean_abs_cos": mean_offdiag_abs_cos(W, np.arange(dataset.n_identities)),
    }
    return params, PrototypeHead(W, child_ids), ledger


def embed(params, dataset_or_inputs):
    """Embeddings as a ``d x N`` matrix."""
    x = getattr(dataset_or_inputs, "inputs", dataset_or_inputs)
    return encode_forward(params, x)[0]


def checkpoint_dict(params, head, digest):
    layers = [{
        "weight_shape": list(layer.weight.shape),
        "weight": layer.weight.ravel().tolist(),
        "bias": layer.bias.tolist(),
        "relu": layer.relu,
    } for layer in params.layers]
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_digest": digest,
        "layers": layers,
        "prototypes_shape": list(head.W.shape),
        "prototypes": head.W.ravel().tolist(),
        "child_ids": [int(i) for i in head.child_ids],
    }


def checkpoint_bytes(params, head, digest):
    """Canonical JSON encoding; floats use shortest round-trip repr."""
    text = json.dumps(checkpoint_dict(params, head, digest), sort_keys=True, separators=(",", ":"))
    return (text + "\n").encode("utf-8")


def save_checkpoint(path, params, head, digest):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(params, head, digest))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(params, head, config_digest)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an interproto checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    layers = [Layer(np.array(l["weight"], dtype=np.float64).reshape(l["weight_shape"]),
                    np.array(l["bias"], dtype=np.float64), bool(l["relu"]))
              for l in doc["layers"]]
    W = np.array(doc["prototypes"], dtype=np.float64).reshape(doc["prototypes_shape"])
    return EncoderParams(layers), PrototypeHead(W, doc["child_ids"]), doc["config_digest"]
