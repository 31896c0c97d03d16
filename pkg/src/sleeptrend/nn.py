"""From-scratch 1-D convolutional network on numpy.

Layers are described declaratively (LayerSpec), parameters live in plain
arrays, and forward/backward are explicit so the gradients can be checked
against finite differences. Everything runs in the dtype the model was
built with: float32 for training and inference, float64 for gradient
checks.

Convolutions are cross-correlations with stride 1 and same padding, the
convention used by every mainstream deep learning toolkit. The softmax
layer must be last; its backward pass is fused with the cross-entropy
loss, so backward() consumes integer class targets directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (ChecksumMismatch, ConfigError, InvalidEpoch,
                     ShapeMismatch)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch

LAYER_KINDS = ("conv1d", "batchnorm", "relu", "maxpool", "global_avg_pool",
               "dropout", "dense", "softmax")

# trainable arrays per kind, in checkpoint blob order
TRAINABLE = {"conv1d": ("w", "b"), "batchnorm": ("gamma", "beta"),
             "dense": ("w", "b")}
# persisted but not trained
STATE = {"batchnorm": ("running_mean", "running_var")}


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer."""

    kind: str
    out_channels: int | None = None
    kernel: int | None = None
    pool: int | None = None
    rate: float | None = None
    units: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


def reference_architecture() -> list[LayerSpec]:
    """The published 1-minute single-channel classifier: three conv blocks,
    global average pooling, dropout, and a two-way softmax head. 5,082
    trainable parameters on a 3840-sample input."""
    return [
        LayerSpec("conv1d", out_channels=8, kernel=3),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("maxpool", pool=4),
        LayerSpec("conv1d", out_channels=16, kernel=11),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("maxpool", pool=4),
        LayerSpec("conv1d", out_channels=24, kernel=9),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("global_avg_pool"),
        LayerSpec("dropout", rate=0.2),
        LayerSpec("dense", units=2),
        LayerSpec("softmax"),
    ]


@dataclass
class Model:
    specs: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    input_len: int
    in_channels: int
    n_classes: int
    dtype: np.dtype
    seed: int = 0


@dataclass
class ForwardTrace:
    probs: np.ndarray
    logits: np.ndarray
    caches: list
    shapes: list[tuple]
    mode: str


def he_uniform_init(fan_in: int, shape: tuple, seed) -> np.ndarray:
    """Uniform init on [-sqrt(6/fan_in), +sqrt(6/fan_in)], reproducible
    for a given seed."""
    if fan_in <= 0:
        raise ConfigError(f"fan_in {fan_in} must be positive")
    limit = np.sqrt(6.0 / fan_in)
    rng = np.random.default_rng(seed)
    return rng.uniform(-limit, limit, size=shape)


def _walk_shapes(specs: Sequence[LayerSpec], input_len: int,
                 in_channels: int):
    """Yield (spec, incoming shape) while validating the stack. Shapes are
    (channels, length) for map layers and (features,) after pooling."""
    shape: tuple = (in_channels, input_len)
    for i, spec in enumerate(specs):
        yield spec, shape
        vector = len(shape) == 1
        if spec.kind == "conv1d":
            if vector:
                raise ShapeMismatch(f"layer {i}: conv1d needs a channel map")
            if not spec.out_channels or not spec.kernel:
                raise ConfigError(f"layer {i}: conv1d needs channels+kernel")
            if spec.kernel % 2 != 1:
                raise ShapeMismatch(f"layer {i}: same padding needs odd "
                                    f"kernel, got {spec.kernel}")
            shape = (spec.out_channels, shape[1])
        elif spec.kind == "batchnorm":
            if vector:
                raise ShapeMismatch(f"layer {i}: batchnorm needs a "
                                    f"channel map")
        elif spec.kind == "maxpool":
            if not spec.pool or spec.pool < 2:
                raise ConfigError(f"layer {i}: bad maxpool factor")
            if vector:
                raise ShapeMismatch(f"layer {i}: maxpool needs a channel "
                                    f"map")
            if shape[1] % spec.pool != 0:
                raise ShapeMismatch(
                    f"layer {i}: length {shape[1]} not divisible by pool "
                    f"{spec.pool}")
            shape = (shape[0], shape[1] // spec.pool)
        elif spec.kind == "global_avg_pool":
            if vector:
                raise ShapeMismatch(f"layer {i}: already pooled")
            shape = (shape[0],)
        elif spec.kind == "dropout":
            if spec.rate is None or not 0.0 <= spec.rate < 1.0:
                raise ConfigError(f"layer {i}: dropout rate {spec.rate}")
        elif spec.kind == "dense":
            if not vector:
                raise ShapeMismatch(f"layer {i}: dense needs a vector input")
            if not spec.units:
                raise ConfigError(f"layer {i}: dense needs units")
            shape = (spec.units,)
        elif spec.kind == "softmax":
            if not vector:
                raise ShapeMismatch(f"layer {i}: softmax needs a vector "
                                    f"input")
            if i != len(specs) - 1:
                raise ShapeMismatch("softmax must be the final layer")
    if not specs or specs[-1].kind != "softmax":
        raise ShapeMismatch("the network must end in softmax")
    yield None, shape


def build_model(specs: Sequence[LayerSpec], input_len: int,
                in_channels: int = 1, seed: int = 0,
                dtype=np.float32) -> Model:
    """Validate the stack and initialize parameters (He-uniform weights,
    zero biases, identity batchnorm)."""
    specs = list(specs)
    params: list[dict[str, np.ndarray]] = []
    final_shape = None
    for idx, (spec, shape) in enumerate(_walk_shapes(specs, input_len,
                                                     in_channels)):
        if spec is None:
            final_shape = shape
            break
        layer: dict[str, np.ndarray] = {}
        if spec.kind == "conv1d":
            fan_in = shape[0] * spec.kernel
            layer["w"] = he_uniform_init(
                fan_in, (spec.out_channels, shape[0], spec.kernel),
                seed=[seed, idx]).astype(dtype)
            layer["b"] = np.zeros(spec.out_channels, dtype=dtype)
        elif spec.kind == "batchnorm":
            ch = shape[0]
            layer["gamma"] = np.ones(ch, dtype=dtype)
            layer["beta"] = np.zeros(ch, dtype=dtype)
            layer["running_mean"] = np.zeros(ch, dtype=dtype)
            layer["running_var"] = np.ones(ch, dtype=dtype)
        elif spec.kind == "dense":
            fan_in = shape[0]
            layer["w"] = he_uniform_init(
                fan_in, (spec.units, fan_in), seed=[seed, idx]).astype(dtype)
            layer["b"] = np.zeros(spec.units, dtype=dtype)
        params.append(layer)
    return Model(specs=specs, params=params, input_len=input_len,
                 in_channels=in_channels, n_classes=final_shape[0],
                 dtype=np.dtype(dtype), seed=seed)


def count_params(model: Model) -> int:
    """Trainable parameter count; batchnorm running statistics are state,
    not parameters, and are excluded."""
    total = 0
    for spec, layer in zip(model.specs, model.params):
        for name in TRAINABLE.get(spec.kind, ()):
            total += layer[name].size
    return total


def count_spec_params(specs: Sequence[LayerSpec],
                      in_channels: int = 1) -> int:
    """Closed-form trainable count from the layer table alone. Only the
    channel (or feature) width matters, so no input length is needed."""
    width = in_channels
    total = 0
    for spec in specs:
        if spec.kind == "conv1d":
            total += spec.out_channels * width * spec.kernel \
                + spec.out_channels
            width = spec.out_channels
        elif spec.kind == "batchnorm":
            total += 2 * width
        elif spec.kind == "dense":
            total += spec.units * width + spec.units
            width = spec.units
    return total


def _conv1d_forward(x, w, b):
    n, cin, length = x.shape
    cout, _, k = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(xp, k, axis=2)  # (n, cin, L, k)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(
        n * length, cin * k)
    out = cols @ w.reshape(cout, cin * k).T
    y = out.reshape(n, length, cout).transpose(0, 2, 1) + b[None, :, None]
    return y, (cols, (n, cin, length))


def _conv1d_backward(g, w, cache):
    cols, (n, cin, length) = cache
    cout, _, k = w.shape
    pad = k // 2
    g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(n * length, cout)
    dw = (g2.T @ cols).reshape(cout, cin, k)
    db = g.sum(axis=(0, 2))
    dcols = g2 @ w.reshape(cout, cin * k)
    dwin = dcols.reshape(n, length, cin, k).transpose(0, 2, 1, 3)
    dxp = np.zeros((n, cin, length + 2 * pad), dtype=g.dtype)
    for j in range(k):
        dxp[:, :, j:j + length] += dwin[:, :, :, j]
    dx = dxp[:, :, pad:pad + length]
    return dx, {"w": dw, "b": db}


def forward(model: Model, x: np.ndarray, mode: str = "infer",
            rng: np.random.Generator | None = None) -> ForwardTrace:
    """Run the network on a batch shaped (batch, channels, length).

    mode "train" uses batch statistics, applies dropout (which needs rng),
    and updates batchnorm running statistics in place; mode "infer" is
    deterministic and uses the stored running statistics.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode {mode!r}")
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 3 or x.shape[1:] != (model.in_channels, model.input_len):
        raise ShapeMismatch(
            f"expected (batch, {model.in_channels}, {model.input_len}), "
            f"got {x.shape}")

    caches: list = []
    shapes: list[tuple] = []
    logits = None
    for spec, layer in zip(model.specs, model.params):
        if spec.kind == "conv1d":
            x, cache = _conv1d_forward(x, layer["w"], layer["b"])
            caches.append(cache)
        elif spec.kind == "batchnorm":
            if mode == "train":
                mean = x.mean(axis=(0, 2))
                var = x.var(axis=(0, 2))
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
                layer["running_mean"][...] = (
                    BN_MOMENTUM * layer["running_mean"]
                    + (1.0 - BN_MOMENTUM) * mean.astype(model.dtype))
                layer["running_var"][...] = (
                    BN_MOMENTUM * layer["running_var"]
                    + (1.0 - BN_MOMENTUM) * var.astype(model.dtype))
            else:
                inv_std = 1.0 / np.sqrt(layer["running_var"] + BN_EPS)
                xhat = (x - layer["running_mean"][None, :, None]) \
                    * inv_std[None, :, None]
            x = layer["gamma"][None, :, None] * xhat \
                + layer["beta"][None, :, None]
            caches.append((xhat, inv_std))
        elif spec.kind == "relu":
            mask = x > 0
            x = x * mask
            caches.append(mask)
        elif spec.kind == "maxpool":
            n, c, length = x.shape
            grouped = x.reshape(n, c, length // spec.pool, spec.pool)
            idx = grouped.argmax(axis=3)
            x = np.take_along_axis(grouped, idx[..., None], axis=3)[..., 0]
            caches.append((idx, (n, c, length)))
        elif spec.kind == "global_avg_pool":
            caches.append(x.shape[2])
            x = x.mean(axis=2)
        elif spec.kind == "dropout":
            if mode == "train" and spec.rate > 0.0:
                if rng is None:
                    raise ConfigError("train-mode dropout needs an rng")
                mask = (rng.random(x.shape) >= spec.rate)
                keep = np.asarray(1.0 - spec.rate, dtype=model.dtype)
                x = x * mask / keep
                caches.append((mask, keep))
            else:
                caches.append(None)
        elif spec.kind == "dense":
            caches.append(x)
            x = x @ layer["w"].T + layer["b"]
        elif spec.kind == "softmax":
            logits = x
            # float64 so the rows normalize to 1 within 1e-9 even when
            # the rest of the network runs in float32
            shifted = x.astype(np.float64)
            shifted -= shifted.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            x = e / e.sum(axis=1, keepdims=True)
            caches.append(None)
        shapes.append(x.shape)
    return ForwardTrace(probs=x, logits=logits, caches=caches,
                        shapes=shapes, mode=mode)


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log likelihood of integer class targets."""
    targets = np.asarray(targets)
    if probs.shape[0] != targets.shape[0]:
        raise ShapeMismatch(f"{probs.shape[0]} rows vs {targets.shape[0]} "
                            f"targets")
    picked = probs[np.arange(probs.shape[0]), targets]
    return float(-np.mean(np.log(np.clip(picked, 1e-12, None))))


def backward(model: Model, trace: ForwardTrace,
             targets: np.ndarray) -> list[dict[str, np.ndarray]]:
    """Gradients of mean cross-entropy w.r.t. every trainable array.

    The returned list mirrors model.params (empty dicts for parameterless
    layers). Softmax and the loss are differentiated together, so the
    gradient entering the final dense layer is (probs - onehot) / batch.
    """
    if trace.mode != "train":
        raise ConfigError("backward needs a train-mode trace")
    targets = np.asarray(targets)
    n = trace.probs.shape[0]
    onehot = np.zeros_like(trace.probs)
    onehot[np.arange(n), targets] = 1.0
    g = ((trace.probs - onehot) / n).astype(model.dtype)

    grads: list[dict[str, np.ndarray]] = [{} for _ in model.specs]
    for i in range(len(model.specs) - 1, -1, -1):
        spec = model.specs[i]
        layer = model.params[i]
        cache = trace.caches[i]
        if spec.kind == "softmax":
            continue  # fused with the loss above
        if spec.kind == "dense":
            grads[i] = {"w": g.T @ cache, "b": g.sum(axis=0)}
            g = g @ layer["w"]
        elif spec.kind == "dropout":
            if cache is not None:
                mask, keep = cache
                g = g * mask / keep
        elif spec.kind == "global_avg_pool":
            length = cache
            g = np.repeat(g[:, :, None], length, axis=2) / np.asarray(
                length, dtype=model.dtype)
        elif spec.kind == "maxpool":
            idx, (n_, c, length) = cache
            spread = np.zeros((n_, c, length // spec.pool, spec.pool),
                              dtype=g.dtype)
            np.put_along_axis(spread, idx[..., None], g[..., None], axis=3)
            g = spread.reshape(n_, c, length)
        elif spec.kind == "relu":
            g = g * cache
        elif spec.kind == "batchnorm":
            xhat, inv_std = cache
            m = xhat.shape[0] * xhat.shape[2]
            dgamma = (g * xhat).sum(axis=(0, 2))
            dbeta = g.sum(axis=(0, 2))
            grads[i] = {"gamma": dgamma, "beta": dbeta}
            dxhat = g * layer["gamma"][None, :, None]
            term = (dxhat.sum(axis=(0, 2))[None, :, None]
                    + xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None])
            g = (dxhat - term / np.asarray(m, dtype=g.dtype)) \
                * inv_std[None, :, None]
        elif spec.kind == "conv1d":
            g, layer_grads = _conv1d_backward(g, layer["w"], cache)
            grads[i] = layer_grads
    return grads


def forward_epoch(model: Model, epoch, mode: str = "infer",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities for one working-rate epoch."""
    if not epoch.valid:
        raise InvalidEpoch(
            f"epoch {epoch.epoch_index} of {epoch.channel} was rejected")
    x = epoch.samples[None, None, :]
    return forward(model, x, mode=mode, rng=rng).probs[0]


# checkpoints ---------------------------------------------------------------

def _blob_entries(model: Model):
    for i, (spec, layer) in enumerate(zip(model.specs, model.params)):
        for name in TRAINABLE.get(spec.kind, ()) + STATE.get(spec.kind, ()):
            yield i, name, layer[name]


def save_checkpoint(model: Model, manifest_path: str | Path,
                    metadata: dict | None = None) -> Path:
    """Write a JSON manifest beside a raw little-endian float32 blob."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    parts = []
    arrays = []
    for i, name, arr in _blob_entries(model):
        data = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(data.tobytes())
        arrays.append({"layer": i, "name": name, "shape": list(arr.shape)})
    blob = b"".join(parts)
    manifest = {
        "format": "sleeptrend-checkpoint-v1",
        "specs": [{k: v for k, v in asdict(s).items() if v is not None}
                  for s in model.specs],
        "input_len": model.input_len,
        "in_channels": model.in_channels,
        "n_classes": model.n_classes,
        "seed": model.seed,
        "trainable_params": count_params(model),
        "arrays": arrays,
        "blob": blob_path.name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "metadata": metadata or {},
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True)
                             + "\n")
    return manifest_path


def load_checkpoint(manifest_path: str | Path) -> tuple[Model, dict]:
    """Load and verify a checkpoint; raises ChecksumMismatch when the blob
    does not match its manifest digest."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    blob_path = manifest_path.parent / manifest["blob"]
    blob = blob_path.read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["sha256"]:
        raise ChecksumMismatch(
            f"{blob_path} digest {digest[:12]} != manifest "
            f"{manifest['sha256'][:12]}")
    specs = [LayerSpec(**entry) for entry in manifest["specs"]]
    model = build_model(specs, input_len=manifest["input_len"],
                        in_channels=manifest["in_channels"],
                        seed=manifest.get("seed", 0))
    offset = 0
    for (i, name, arr), described in zip(_blob_entries(model),
                                         manifest["arrays"]):
        if [i, name] != [described["layer"], described["name"]] \
                or list(arr.shape) != described["shape"]:
            raise ChecksumMismatch(
                f"array table mismatch at layer {i} {name}")
        size = arr.size * 4
        data = np.frombuffer(blob[offset:offset + size], dtype="<f4")
        model.params[i][name][...] = data.reshape(arr.shape)
        offset += size
    if offset != len(blob):
        raise ChecksumMismatch(
            f"blob has {len(blob)} bytes, arrays use {offset}")
    return model, manifest.get("metadata", {})
