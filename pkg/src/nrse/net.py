"""A small numpy network engine for frame classification.

Supports fully connected sigmoid stacks (DNN), a frequency-convolution head
(CNN) and the two-branch time/frequency convolution head (TFCNN).  Inputs are
context-stacked frames: a row of width ``context * num_bands`` is viewed as a
(context, num_bands) patch.  Convolutions span the whole patch along the
other axis, so a frequency filter sees every context frame over
``kernel_width`` adjacent bands, and a time filter sees every band over
``kernel_width`` adjacent frames.

Gradients are sums over the minibatch (not means), so learning rates are per
frame; the classic newbob constants (0.008 with 256-frame minibatches) are
meant for this convention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .atomic import write_csv
from .errors import ConfigError, InputError, TrainingDiverged
from .features import context_halfwidths, context_index, normalize_utterance, stack_context

LAYER_KINDS = (
    "dense",
    "conv-frequency",
    "conv-time",
    "maxpool",
    "nonlinearity",
    "softmax-output",
    "concat",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    num_filters: int = 0
    kernel_width: int = 0
    pool_width: int = 0

    def validate(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and self.units < 1:
            raise ConfigError("dense units must be >= 1")
        if self.kind.startswith("conv") and (self.num_filters < 1 or self.kernel_width < 1):
            raise ConfigError("conv layers need num_filters >= 1 and kernel_width >= 1")
        if self.kind == "maxpool" and self.pool_width < 1:
            raise ConfigError("pool_width must be >= 1")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


SIGMOID = LayerSpec("nonlinearity")
SOFTMAX = LayerSpec("softmax-output")
CONCAT = LayerSpec("concat")


@dataclass(frozen=True)
class NetworkSpec:
    """Layer graph.  ``branches`` is the optional convolutional head; each
    branch starts with one conv layer and its flattened outputs are joined
    by a leading ``concat`` entry in ``layers``.

    ``input_norm`` is an optional fixed (mean, std) pair per band, applied
    to every context frame before the first layer.  ``utterance_norm``
    standardizes each band over the whole utterance before context stacking
    (see :func:`prepare_frames`); it lives outside the layer graph because
    it needs the full utterance.
    """

    input_dim: int
    num_classes: int
    layers: tuple[LayerSpec, ...]
    context: int = 1
    branches: tuple[tuple[LayerSpec, ...], ...] = ()
    input_norm: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    utterance_norm: bool = False

    @property
    def num_bands(self) -> int:
        return self.input_dim // self.context

    @property
    def context_halfwidths(self) -> tuple[int, int]:
        return context_halfwidths(self.context)

    def dense_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "dense"]

    @property
    def num_hidden(self) -> int:
        """Number of tappable hidden layers (dense layers before the output)."""
        return len(self.dense_layers()) - 1

    def hidden_sizes(self) -> list[int]:
        return [l.units for l in self.dense_layers()[:-1]]

    def branch_output_shapes(self) -> list[tuple[int, int]]:
        """(maps, extent) of each branch after its last layer."""
        shapes = []
        for branch in self.branches:
            maps, extent = 0, 0
            for layer in branch:
                if layer.kind == "conv-frequency":
                    maps, extent = layer.num_filters, self.num_bands - layer.kernel_width + 1
                elif layer.kind == "conv-time":
                    maps, extent = layer.num_filters, self.context - layer.kernel_width + 1
                elif layer.kind == "maxpool":
                    extent = extent // layer.pool_width
            shapes.append((maps, extent))
        return shapes

    def head_width(self) -> int:
        if not self.branches:
            return self.input_dim
        return sum(m * e for m, e in self.branch_output_shapes())

    def validate(self) -> None:
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigError("input_dim must be >= 1 and num_classes >= 2")
        if self.context < 1 or self.input_dim % self.context:
            raise ConfigError(f"input_dim {self.input_dim} is not a multiple of context {self.context}")
        for layer in self.layers:
            layer.validate()
        if self.input_norm is not None:
            mean, std = self.input_norm
            if len(mean) != self.num_bands or len(std) != self.num_bands:
                raise ConfigError(f"input_norm needs {self.num_bands} means and stds")
            if not all(v > 0 for v in std):
                raise ConfigError("input_norm stds must be > 0")
        for branch in self.branches:
            if not branch or not branch[0].kind.startswith("conv"):
                raise ConfigError("each branch must start with a conv layer")
            for layer in branch:
                layer.validate()
                if layer.kind in ("dense", "softmax-output", "concat"):
                    raise ConfigError(f"{layer.kind} is not allowed inside a conv branch")
            if sum(l.kind.startswith("conv") for l in branch) != 1:
                raise ConfigError("each branch holds exactly one conv layer")
        for (maps, extent), branch in zip(self.branch_output_shapes(), self.branches):
            if extent < 1:
                raise ConfigError(f"branch {branch[0].kind} collapses to zero width")
        layers = list(self.layers)
        if self.branches:
            if not layers or layers[0].kind != "concat":
                raise ConfigError("a network with conv branches must start its layers with concat")
            layers = layers[1:]
        if any(l.kind in ("concat", "conv-frequency", "conv-time", "maxpool") for l in layers):
            raise ConfigError("only dense/nonlinearity layers may follow the head")
        if not layers or layers[-1].kind != "softmax-output":
            raise ConfigError("the last layer must be softmax-output")
        dense_layers = [l for l in layers if l.kind == "dense"]
        if not dense_layers or dense_layers[-1].units != self.num_classes:
            raise ConfigError(
                f"final dense layer must have num_classes={self.num_classes} units"
            )
        # dense layers alternate with nonlinearities except the output one
        body = layers[:-1]
        for i, layer in enumerate(body):
            expect = "dense" if i % 2 == 0 else "nonlinearity"
            if layer.kind != expect:
                raise ConfigError(
                    f"layer {i} after the head: expected {expect}, got {layer.kind}"
                )
        if body[-1].kind != "dense":
            raise ConfigError("the output dense layer must directly precede softmax-output")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "context": self.context,
            "layers": [asdict(l) for l in self.layers],
            "branches": [[asdict(l) for l in b] for b in self.branches],
            "input_norm": [list(v) for v in self.input_norm] if self.input_norm else None,
            "utterance_norm": self.utterance_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            num_classes=int(d["num_classes"]),
            context=int(d.get("context", 1)),
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            branches=tuple(tuple(LayerSpec(**l) for l in b) for b in d.get("branches", ())),
            input_norm=(tuple(tuple(float(x) for x in v) for v in d["input_norm"])
                        if d.get("input_norm") else None),
            utterance_norm=bool(d.get("utterance_norm", False)),
        )

    def with_input_norm(self, features: Sequence[np.ndarray]) -> "NetworkSpec":
        """Copy of this spec normalizing inputs by the per-band mean/std of ``features``."""
        frames = np.concatenate([prepare_frames(self, f).astype(np.float64) for f in features])
        if frames.shape[1] != self.num_bands:
            raise InputError(f"features have {frames.shape[1]} bands, spec expects {self.num_bands}")
        std = np.maximum(frames.std(axis=0), 1e-6)
        return replace(self, input_norm=(tuple(frames.mean(axis=0).tolist()), tuple(std.tolist())))


def _dense_stack(sizes: Sequence[int], num_classes: int) -> list[LayerSpec]:
    layers = []
    for n in sizes:
        layers += [dense(n), SIGMOID]
    return layers + [dense(num_classes), SOFTMAX]


def dnn_spec(num_bands=40, context=15, hidden=(2048,) * 5, num_classes=3125) -> NetworkSpec:
    """Fully connected net; the defaults are the paper-scale 5 x 2048 DNN."""
    return NetworkSpec(num_bands * context, num_classes, tuple(_dense_stack(hidden, num_classes)), context)


def cnn_spec(num_bands=40, context=15, filters=200, kernel=8, pool=3,
             hidden=(2048,) * 4, num_classes=3125) -> NetworkSpec:
    branch = (LayerSpec("conv-frequency", num_filters=filters, kernel_width=kernel),
              LayerSpec("maxpool", pool_width=pool), SIGMOID)
    return NetworkSpec(num_bands * context, num_classes,
                       tuple([CONCAT] + _dense_stack(hidden, num_classes)), context, (branch,))


def tfcnn_spec(num_bands=40, context=17, time_filters=75, freq_filters=200, kernel=8,
               time_pool=5, freq_pool=3, hidden=(2048,) * 4, num_classes=3125) -> NetworkSpec:
    """Two-branch time/frequency convolution head; defaults are paper scale."""
    time_branch = (LayerSpec("conv-time", num_filters=time_filters, kernel_width=kernel),
                   LayerSpec("maxpool", pool_width=time_pool), SIGMOID)
    freq_branch = (LayerSpec("conv-frequency", num_filters=freq_filters, kernel_width=kernel),
                   LayerSpec("maxpool", pool_width=freq_pool), SIGMOID)
    return NetworkSpec(num_bands * context, num_classes,
                       tuple([CONCAT] + _dense_stack(hidden, num_classes)), context,
                       (time_branch, freq_branch))


def tfcnn_lite_spec(num_classes=8, num_bands=40, context=17, hidden=(128,) * 5,
                    utterance_norm=True) -> NetworkSpec:
    """Desk-scale default: 16 time + 32 frequency filters, five 128-unit dense
    layers, per-utterance band normalization."""
    spec = tfcnn_spec(num_bands, context, time_filters=16, freq_filters=32, hidden=hidden,
                      num_classes=num_classes)
    return replace(spec, utterance_norm=utterance_norm)


def prepare_frames(spec: NetworkSpec, frames) -> np.ndarray:
    """Raw T x bands frames as the network expects them before stacking."""
    x = np.asarray(getattr(frames, "frames", frames))
    if x.ndim != 2 or x.shape[1] != spec.num_bands:
        raise InputError(f"expected T x {spec.num_bands} frames, got shape {x.shape}")
    return normalize_utterance(x) if spec.utterance_norm else x


def network_input(spec: NetworkSpec, features) -> np.ndarray:
    """Context-stacked input rows for one utterance.

    Raw frames (``num_bands`` wide) are prepared and stacked; anything else
    is taken to be stacked already.
    """
    x = np.asarray(getattr(features, "frames", features))
    if x.ndim == 2 and x.shape[1] == spec.num_bands:
        return stack_context(prepare_frames(spec, x), *spec.context_halfwidths)
    return x


SIGMOID_INIT_GAIN = 4.0

SPEC_BUILDERS = {"dnn": dnn_spec, "cnn": cnn_spec, "tfcnn": tfcnn_spec, "tfcnn-lite": tfcnn_lite_spec}


@dataclass
class Parameters:
    """Weights and biases in a fixed order: each branch's conv layer, then
    each dense layer; within a layer the weight precedes the bias."""

    arrays: list[np.ndarray]

    def copy(self) -> "Parameters":
        return Parameters([a.copy() for a in self.arrays])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a.astype(np.float64) ** 2) for a in self.arrays)))

    def astype(self, dtype) -> "Parameters":
        return Parameters([a.astype(dtype) for a in self.arrays])

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays)

    def identical_to(self, other: "Parameters") -> bool:
        return len(self.arrays) == len(other.arrays) and all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays, other.arrays)
        )


def parameter_shapes(spec: NetworkSpec) -> list[tuple[tuple[int, ...], int, int]]:
    """(weight shape, fan_in, fan_out) for each parametric layer, in storage order."""
    out = []
    for branch in spec.branches:
        conv = branch[0]
        if conv.kind == "conv-frequency":
            shape = (conv.num_filters, spec.context, conv.kernel_width)
            fan_in = spec.context * conv.kernel_width
        else:
            shape = (conv.num_filters, spec.num_bands, conv.kernel_width)
            fan_in = spec.num_bands * conv.kernel_width
        out.append((shape, fan_in, conv.num_filters))
    width = spec.head_width()
    for layer in spec.dense_layers():
        out.append(((width, layer.units), width, layer.units))
        width = layer.units
    return out


def init_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> Parameters:
    """Glorot-uniform weights, zero biases.

    Layers feeding a sigmoid use four times the Glorot bound (the logistic
    variant); without it a five-layer sigmoid stack barely trains.  The
    output layer uses the plain bound sqrt(6 / (fan_in + fan_out)).
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    arrays = []
    shapes = parameter_shapes(spec)
    for i, (shape, fan_in, fan_out) in enumerate(shapes):
        gain = 1.0 if i == len(shapes) - 1 else SIGMOID_INIT_GAIN
        bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
        arrays.append(np.zeros(shape[0] if len(shape) == 3 else shape[1], dtype=dtype))
    return Parameters(arrays)


def check_parameters(spec: NetworkSpec, params: Parameters) -> None:
    shapes = parameter_shapes(spec)
    if len(params.arrays) != 2 * len(shapes):
        raise InputError(f"expected {2 * len(shapes)} parameter arrays, got {len(params.arrays)}")
    for i, (shape, _, _) in enumerate(shapes):
        w, b = params.arrays[2 * i], params.arrays[2 * i + 1]
        nb = shape[0] if len(shape) == 3 else shape[1]
        if w.shape != shape or b.shape != (nb,):
            raise InputError(f"parameter block {i}: shape {w.shape}/{b.shape} does not match {shape}")


def sigmoid(z):
    return expit(z)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# forward / backward


def _conv_patches(x3, layer):
    """Unfold the (B, context, bands) input into (B*L, fan_in) rows."""
    b = x3.shape[0]
    if layer.kind == "conv-frequency":
        p = sliding_window_view(x3, layer.kernel_width, axis=2)  # (B, C, L, k)
        p = p.transpose(0, 2, 1, 3)
    else:
        p = sliding_window_view(x3, layer.kernel_width, axis=1)  # (B, L, D, k)
    length = p.shape[1]
    return np.ascontiguousarray(p).reshape(b * length, -1), length


def _forward(spec: NetworkSpec, params: Parameters, x: np.ndarray, keep: bool):
    """Returns (logits, hidden activations, cache)."""
    arrays = params.arrays
    dtype = arrays[0].dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise InputError(f"input width {x.shape[-1] if x.ndim else '?'} != input_dim {spec.input_dim}")
    b = x.shape[0]
    if spec.input_norm is not None:
        mean = np.tile(np.asarray(spec.input_norm[0], dtype=dtype), spec.context)
        std = np.tile(np.asarray(spec.input_norm[1], dtype=dtype), spec.context)
        x = (x - mean) / std
    cache = {"branches": [], "dense": []}
    pi = 0
    if spec.branches:
        x3 = x.reshape(b, spec.context, spec.num_bands)
        parts = []
        for branch in spec.branches:
            conv = branch[0]
            w, bias = arrays[pi], arrays[pi + 1]
            pi += 2
            patches, length = _conv_patches(x3, conv)
            h = patches @ w.reshape(w.shape[0], -1).T + bias  # (B*L, F)
            h = h.reshape(b, length, -1).transpose(0, 2, 1)  # (B, F, L)
            bc = {"conv": conv, "patches": patches if keep else None, "ops": []}
            for layer in branch[1:]:
                if layer.kind == "maxpool":
                    p = layer.pool_width
                    lp = h.shape[2] // p
                    blocks = h[:, :, : lp * p].reshape(b, h.shape[1], lp, p)
                    arg = blocks.argmax(axis=3)
                    bc["ops"].append(("maxpool", p, arg, h.shape[2]))
                    h = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]
                else:
                    h = sigmoid(h)
                    bc["ops"].append(("sigmoid", h))
            cache["branches"].append(bc)
            parts.append(h.reshape(b, -1))
        a = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
    else:
        a = x
    hidden = []
    dense_layers = spec.dense_layers()
    for li, _ in enumerate(dense_layers):
        w, bias = arrays[pi], arrays[pi + 1]
        pi += 2
        cache["dense"].append(a)
        z = a @ w + bias
        if li < len(dense_layers) - 1:
            a = sigmoid(z)
            hidden.append(a)
        else:
            a = z
    return a, hidden, cache


def forward(spec: NetworkSpec, params: Parameters, x: np.ndarray) -> np.ndarray:
    """Posterior matrix (T x C) for context-stacked input ``x``."""
    logits, _, _ = _forward(spec, params, x, keep=False)
    return softmax(logits)


def forward_with_taps(spec: NetworkSpec, params: Parameters, x: np.ndarray, layer_index: int):
    """Posteriors plus the post-sigmoid activations of dense hidden layer
    ``layer_index`` (1-based, counted after any conv head)."""
    if not 1 <= layer_index <= spec.num_hidden:
        raise InputError(f"layer_index {layer_index} outside 1..{spec.num_hidden}")
    logits, hidden, _ = _forward(spec, params, x, keep=False)
    return softmax(logits), hidden[layer_index - 1]


def loss_and_grad(spec: NetworkSpec, params: Parameters, x: np.ndarray, y: np.ndarray,
                  l2: float = 0.0):
    """Summed cross-entropy (plus ``l2/2 * ||W||^2`` over weights) and its gradient."""
    arrays = params.arrays
    logits, _, cache = _forward(spec, params, x, keep=True)
    y = np.asarray(y)
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    loss = float(np.sum(logz - z[np.arange(b), y]))
    delta = np.exp(z - logz[:, None])
    delta[np.arange(b), y] -= 1.0

    grads = [None] * len(arrays)
    n_conv = len(spec.branches)
    n_dense = len(cache["dense"])
    for li in reversed(range(n_dense)):
        pi = 2 * (n_conv + li)
        a_in = cache["dense"][li]
        grads[pi] = a_in.T @ delta
        grads[pi + 1] = delta.sum(axis=0)
        if li > 0 or spec.branches:
            delta = delta @ arrays[pi].T
            if li > 0:
                # a_in is the sigmoid output of the previous dense layer
                delta = delta * a_in * (1.0 - a_in)

    if spec.branches:
        offset = 0
        for bi, bc in enumerate(cache["branches"]):
            maps, extent = spec.branch_output_shapes()[bi]
            d = delta[:, offset: offset + maps * extent].reshape(b, maps, extent)
            offset += maps * extent
            for op in reversed(bc["ops"]):
                if op[0] == "sigmoid":
                    s = op[1]
                    d = d * s * (1.0 - s)
                else:
                    _, p, arg, full = op
                    lp = arg.shape[2]
                    up = np.zeros((b, maps, lp, p), dtype=d.dtype)
                    np.put_along_axis(up, arg[..., None], d[..., None], axis=3)
                    dd = np.zeros((b, maps, full), dtype=d.dtype)
                    dd[:, :, : lp * p] = up.reshape(b, maps, lp * p)
                    d = dd
            # d: (B, F, L) -> rows (B*L, F)
            drows = d.transpose(0, 2, 1).reshape(-1, maps)
            w = arrays[2 * bi]
            grads[2 * bi] = (drows.T @ bc["patches"]).reshape(w.shape)
            grads[2 * bi + 1] = drows.sum(axis=0)

    if l2:
        for i in range(0, len(arrays), 2):
            loss += 0.5 * l2 * float(np.sum(arrays[i].astype(np.float64) ** 2))
            grads[i] = grads[i] + l2 * arrays[i]
    return loss, [g.astype(arrays[i].dtype, copy=False) for i, g in enumerate(grads)]


# ----------------------------------------------------------------------------
# data


@dataclass
class FrameSet:
    """Frames from many utterances with per-frame labels, context-stacked lazily.

    ``features`` is a list of T_u x D matrices; rows are stacked only for the
    frames requested by :meth:`inputs`.
    """

    features: list[np.ndarray]
    labels: list[np.ndarray]
    left: int
    right: int
    _frames: np.ndarray = field(init=False, repr=False)
    _index: np.ndarray = field(init=False, repr=False)
    _labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise InputError("features and labels differ in utterance count")
        if not self.features:
            raise InputError("empty dataset")
        rows, idx, offset = [], [], 0
        for f, lab in zip(self.features, self.labels):
            f = np.asarray(f)
            if len(lab) != f.shape[0]:
                raise InputError(f"label count {len(lab)} != frame count {f.shape[0]}")
            rows.append(f)
            idx.append(context_index(f.shape[0], self.left, self.right) + offset)
            offset += f.shape[0]
        self._frames = np.concatenate(rows).astype(np.float32, copy=False)
        self._index = np.concatenate(idx)
        self._labels = np.concatenate([np.asarray(l, dtype=np.int64) for l in self.labels])
        if self._labels.size == 0:
            raise InputError("empty dataset")

    @classmethod
    def for_spec(cls, spec: NetworkSpec, features, labels) -> "FrameSet":
        left, right = spec.context_halfwidths
        return cls([prepare_frames(spec, f) for f in features], list(labels), left, right)

    def __len__(self) -> int:
        return self._labels.size

    @property
    def targets(self) -> np.ndarray:
        return self._labels

    def inputs(self, rows: np.ndarray) -> np.ndarray:
        return self._frames[self._index[rows]].reshape(len(rows), -1)


def predict_batched(spec, params, data: FrameSet, chunk: int = 4096) -> np.ndarray:
    out = []
    for s in range(0, len(data), chunk):
        rows = np.arange(s, min(s + chunk, len(data)))
        out.append(forward(spec, params, data.inputs(rows)))
    return np.concatenate(out)


def frame_error(posteriors: np.ndarray, labels: np.ndarray) -> float:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(posteriors.argmax(axis=1) != np.asarray(labels)))


def evaluate(spec: NetworkSpec, params: Parameters, data: FrameSet) -> dict:
    if len(data) == 0:
        raise InputError("empty evaluation set")
    post = predict_batched(spec, params, data)
    y = data.targets
    p_true = np.clip(post[np.arange(len(y)), y].astype(np.float64), 1e-300, None)
    return {
        "frame_error_rate": frame_error(post, y),
        "mean_cross_entropy": float(-np.mean(np.log(p_true))),
    }


# ----------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.008
    constant_epochs: int = 4
    minibatch: int = 256
    min_improvement: float = 0.005
    max_stalls: int = 2
    l2: float = 0.0
    seed: int = 0
    max_epochs: int = 20

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.minibatch < 1:
            raise ConfigError(f"minibatch must be >= 1, got {self.minibatch}")
        if self.max_epochs < 0 or self.constant_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")


@dataclass(frozen=True)
class AdaptConfig:
    lr0: float = 0.004
    l2: float = 0.001
    minibatch: int = 256
    seed: int = 0
    max_epochs: int = 4

    def validate(self) -> None:
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}")
        if self.minibatch < 1:
            raise ConfigError(f"minibatch must be >= 1, got {self.minibatch}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_ce: float
    cv_frame_error: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    best_epoch: int = 0
    best_cv_frame_error: float = float("nan")
    stop_reason: str = ""

    def write_csv(self, path) -> None:
        write_csv(path, ["epoch", "lr", "train_ce", "cv_frame_error"],
                  [[r.epoch, repr(r.lr), f"{r.train_ce:.6f}", f"{r.cv_frame_error:.6f}"]
                   for r in self.records])

    def summary(self) -> dict:
        return {
            "epochs": len(self.records),
            "best_epoch": self.best_epoch,
            "best_cv_frame_error": self.best_cv_frame_error,
            "stop_reason": self.stop_reason,
            "config": self.config,
        }


def _run_epoch(spec, params, data: FrameSet, lr, minibatch, l2, rng, epoch) -> float:
    order = rng.permutation(len(data))
    total = 0.0
    arrays = params.arrays
    # overflow shows up as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(0, len(order), minibatch):
            rows = order[s: s + minibatch]
            loss, grads = loss_and_grad(spec, params, data.inputs(rows), data.targets[rows], l2)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, f"cross-entropy became {loss}")
            total += loss
            for a, g in zip(arrays, grads):
                a -= np.asarray(lr, dtype=a.dtype) * g
    train_ce = total / len(order)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise TrainingDiverged(epoch, "non-finite parameters")
    return train_ce


def _check_sets(train_set: FrameSet, cv_set: FrameSet):
    if train_set is None or len(train_set) == 0:
        raise InputError("empty training set")
    if cv_set is None or len(cv_set) == 0:
        raise InputError("empty cross-validation set")


def train(spec: NetworkSpec, params: Parameters, train_set: FrameSet, cv_set: FrameSet,
          cfg: TrainConfig = TrainConfig()):
    """Newbob-style SGD.

    The learning rate stays at ``lr0`` for ``constant_epochs`` epochs.  After
    that, an epoch whose CV frame error improves on the best so far by less
    than ``min_improvement`` (relative) halves the rate for the next epoch,
    and ``max_stalls`` such epochs in a row stop training.  The parameters
    with the lowest CV error are returned.
    """
    cfg.validate()
    spec.validate()
    _check_sets(train_set, cv_set)
    check_parameters(spec, params)
    log = TrainingLog(config=asdict(cfg))
    params = params.copy()
    if cfg.max_epochs == 0:
        log.stop_reason = "max_epochs"
        return params, log
    best = params.copy()
    best_err = evaluate(spec, params, cv_set)["frame_error_rate"]
    log.best_cv_frame_error = best_err
    lr = cfg.lr0
    stalls = 0
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.max_epochs + 1):
        ce = _run_epoch(spec, params, train_set, lr, cfg.minibatch, cfg.l2, rng, epoch)
        err = evaluate(spec, params, cv_set)["frame_error_rate"]
        log.records.append(EpochRecord(epoch, lr, ce, err))
        improved = err < best_err * (1.0 - cfg.min_improvement)
        if err < best_err:
            best, best_err = params.copy(), err
            log.best_epoch, log.best_cv_frame_error = epoch, err
        if epoch < cfg.constant_epochs:
            continue
        if improved:
            stalls = 0
            continue
        stalls += 1
        if stalls >= cfg.max_stalls:
            log.stop_reason = "cv_stalled"
            break
        lr *= 0.5
    else:
        log.stop_reason = "max_epochs"
    return best, log


def adapt_finetune(spec: NetworkSpec, params: Parameters, adapt_set: FrameSet, cv_set: FrameSet,
                   cfg: AdaptConfig = AdaptConfig()):
    """Fine-tune every parameter with weight decay; the rate starts at ``lr0``
    and halves after each epoch.  Training stops as soon as the (original
    domain) CV frame error rises above the best adapted epoch; the adapted
    parameters with the lowest CV error are returned."""
    cfg.validate()
    spec.validate()
    _check_sets(adapt_set, cv_set)
    check_parameters(spec, params)
    log = TrainingLog(config=asdict(cfg))
    params = params.copy()
    if cfg.max_epochs == 0 or cfg.lr0 == 0:
        log.stop_reason = "no-op"
        return params, log
    rng = np.random.default_rng(cfg.seed)
    best, best_err = None, float("inf")
    lr = cfg.lr0
    for epoch in range(1, cfg.max_epochs + 1):
        ce = _run_epoch(spec, params, adapt_set, lr, cfg.minibatch, cfg.l2, rng, epoch)
        err = evaluate(spec, params, cv_set)["frame_error_rate"]
        log.records.append(EpochRecord(epoch, lr, ce, err))
        if err <= best_err:
            best, best_err = params.copy(), err
            log.best_epoch, log.best_cv_frame_error = epoch, err
        else:
            log.stop_reason = "cv_increase"
            break
        lr *= 0.5
    else:
        log.stop_reason = "max_epochs"
    return best, log
