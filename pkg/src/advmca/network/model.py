"""Network definition, forward evaluation and exact gradients."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..spectral import SpectralSequence
from . import layers

STD_FLOOR = 1e-8
PROB_FLOOR = 1e-38


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Conv:
    filters: int
    height: int
    width: int


@dataclass(frozen=True)
class Pool:
    height: int
    width: int
    stride_h: int
    stride_w: int


@dataclass(frozen=True)
class ArchitectureSpec:
    """Hidden layers between the standardiser and the softmax head.

    Each ``Conv`` is followed by a rectifier; ``Pool`` follows the rectified
    convolution it names.  The first ``Dense`` flattens its input.
    """

    kind: str
    input_shape: tuple[int, int]
    hidden: tuple = ()

    def __post_init__(self):
        if self.kind not in ("dnn", "cdnn"):
            raise NetworkError(f"unknown architecture kind {self.kind!r}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        seen_dense = False
        for layer in self.hidden:
            if isinstance(layer, Dense):
                seen_dense = True
            elif seen_dense:
                raise NetworkError("convolution or pooling after a dense layer")
        self.activation_shapes()  # validates sizes

    @property
    def frames_per_element(self) -> int:
        return self.input_shape[1]

    def activation_shapes(self):
        """Shape of every hidden layer's output, excluding the batch axis."""
        shape = (*self.input_shape, 1)
        shapes = []
        for layer in self.hidden:
            if isinstance(layer, Conv):
                ho, wo = layers.conv_output_shape(shape, layer.height, layer.width)
                shape = (ho, wo, layer.filters)
            elif isinstance(layer, Pool):
                ho, wo = layers.pool_output_shape(
                    shape, layer.height, layer.width, layer.stride_h, layer.stride_w)
                shape = (ho, wo, shape[2])
            elif isinstance(layer, Dense):
                shape = (layer.units,)
            else:
                raise NetworkError(f"unsupported layer {layer!r}")
            if min(shape) < 1:
                raise NetworkError(f"layer {layer} yields empty output {shape}")
            shapes.append(shape)
        return shapes

    def to_dict(self):
        out = []
        for layer in self.hidden:
            d = dict(vars(layer))
            d["type"] = type(layer).__name__.lower()
            out.append(d)
        return {"kind": self.kind, "input_shape": list(self.input_shape), "hidden": out}

    @classmethod
    def from_dict(cls, d):
        types = {"dense": Dense, "conv": Conv, "pool": Pool}
        hidden = []
        for item in d["hidden"]:
            item = dict(item)
            hidden.append(types[item.pop("type")](**item))
        return cls(d["kind"], tuple(d["input_shape"]), tuple(hidden))


def dnn_spec(width=50, depth=3, n_bins=513) -> ArchitectureSpec:
    return ArchitectureSpec("dnn", (n_bins, 1), tuple(Dense(width) for _ in range(depth)))


def cdnn_spec(n_bins=513, frames=100) -> ArchitectureSpec:
    """Two conv/pool stages with tall first-layer filters, then 50 dense units."""
    return ArchitectureSpec("cdnn", (n_bins, frames), (
        Conv(32, 400, 4), Pool(4, 4, 2, 2),
        Conv(32, 8, 8), Pool(4, 4, 2, 2),
        Dense(50),
    ))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (x - self.mean) / self.std


def standardizer_fit(elements) -> Standardizer:
    """Per-dimension mean and population std over training elements.

    ``elements`` is an array ``(M, D, T)`` or an iterable of sequences.
    """
    if isinstance(elements, np.ndarray):
        data = elements
    else:
        blocks = [s.magnitudes if isinstance(s, SpectralSequence) else np.asarray(s)
                  for s in elements]
        if not blocks:
            raise NetworkError("empty training set")
        data = np.concatenate(blocks, axis=0)
    if data.shape[0] < 2:
        raise NetworkError("need at least two training elements")
    mean = data.mean(axis=0)
    std = np.maximum(data.std(axis=0), STD_FLOOR)
    return Standardizer(mean, std)


@dataclass
class NetworkParams:
    spec: ArchitectureSpec
    standardizer: Standardizer
    weights: list
    biases: list
    label_names: list

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)

    def arrays(self):
        """Trainable arrays in declared order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def param_shapes(spec: ArchitectureSpec, n_classes: int):
    shapes = []
    prev = (*spec.input_shape, 1)
    for layer, out in zip(spec.hidden, spec.activation_shapes()):
        if isinstance(layer, Conv):
            shapes.append(((layer.height, layer.width, prev[2], layer.filters), (layer.filters,)))
        elif isinstance(layer, Dense):
            shapes.append(((int(np.prod(prev)), layer.units), (layer.units,)))
        prev = out
    shapes.append(((int(np.prod(prev)), n_classes), (n_classes,)))
    return shapes


def _fans(wshape):
    if len(wshape) == 4:
        kh, kw, c, f = wshape
        return kh * kw * c, kh * kw * f
    return wshape


def init_params(spec, label_names, standardizer=None, rng=None, zero=False) -> NetworkParams:
    """Glorot-uniform weights and zero biases (all zeros when ``zero``)."""
    label_names = list(label_names)
    if standardizer is None:
        standardizer = Standardizer(np.zeros(spec.input_shape), np.ones(spec.input_shape))
    rng = rng if rng is not None else np.random.default_rng(0)
    weights, biases = [], []
    for wshape, bshape in param_shapes(spec, len(label_names)):
        if zero:
            weights.append(np.zeros(wshape))
        else:
            fan_in, fan_out = _fans(wshape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=wshape))
        biases.append(np.zeros(bshape))
    return NetworkParams(spec, standardizer, weights, biases, label_names)


# -- forward / backward ------------------------------------------------------

def _as_elements(params, X):
    data = X.magnitudes if isinstance(X, SpectralSequence) else np.asarray(X, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.shape[1:] != params.spec.input_shape:
        raise NetworkError(
            f"element shape {data.shape[1:]} does not match network input {params.spec.input_shape}")
    return data


def _dropout_for(dropout, n_hidden):
    if dropout is None:
        return [0.0] * n_hidden
    if np.isscalar(dropout):
        return [float(dropout)] * n_hidden
    dropout = list(dropout)
    if len(dropout) != n_hidden:
        raise NetworkError(f"need {n_hidden} dropout probabilities, got {len(dropout)}")
    return dropout


def _run(params, x, dropout=None, rng=None):
    """Forward pass over standardised-input elements; returns logits and a cache.

    Dropout is applied to the output of each hidden block (dense or pool,
    plus any conv not followed by a pool) only when ``rng`` is given.
    """
    spec = params.spec
    h = params.standardizer.apply(x)[..., None]
    cache = []
    blocks = _hidden_blocks(spec)
    probs = _dropout_for(dropout, len(blocks))
    block_of = {end: i for i, end in enumerate(blocks)}
    pi = 0
    for li, layer in enumerate(spec.hidden):
        if isinstance(layer, Conv):
            w, b = params.weights[pi], params.biases[pi]
            z = layers.conv_forward(h, w, b)
            cache.append(("conv", h, pi, z > 0))
            h = layers.relu(z)
            pi += 1
        elif isinstance(layer, Pool):
            out, index = layers.maxpool_forward(
                h, layer.height, layer.width, layer.stride_h, layer.stride_w)
            cache.append(("pool", h.shape, index))
            h = out
        else:
            if h.ndim > 2:
                cache.append(("flatten", h.shape))
                h = h.reshape(h.shape[0], -1)
            w, b = params.weights[pi], params.biases[pi]
            z = layers.dense_forward(h, w, b)
            cache.append(("dense", h, pi, z > 0))
            h = layers.relu(z)
            pi += 1
        if li in block_of and rng is not None and probs[block_of[li]] > 0:
            p = probs[block_of[li]]
            mask = (rng.random(h.shape) >= p) / (1.0 - p)
            cache.append(("dropout", mask))
            h = h * mask
        cache.append(("hidden", li, h))
    if h.ndim > 2:
        cache.append(("flatten", h.shape))
        h = h.reshape(h.shape[0], -1)
    w, b = params.weights[pi], params.biases[pi]
    cache.append(("head", h, pi))
    return layers.dense_forward(h, w, b), cache


def _hidden_blocks(spec):
    """Indices of hidden layers whose output is a dropout site."""
    ends = []
    for i, layer in enumerate(spec.hidden):
        nxt = spec.hidden[i + 1] if i + 1 < len(spec.hidden) else None
        if isinstance(layer, (Dense, Pool)) or (isinstance(layer, Conv) and not isinstance(nxt, Pool)):
            ends.append(i)
    return ends


def _backprop(params, cache, dlogits, need_input=False, need_params=True):
    n = len(params.weights)
    dws, dbs = [None] * n, [None] * n
    g = dlogits
    need_below = [False] * len(cache)
    # gradient below a parameterised layer is only needed if something
    # trainable (or the input) lies further down
    first_param = next(i for i, c in enumerate(cache) if c[0] in ("conv", "dense", "head"))
    for i in range(len(cache)):
        need_below[i] = need_input or i > first_param
    for i in range(len(cache) - 1, -1, -1):
        entry = cache[i]
        kind = entry[0]
        if kind == "head":
            _, h, pi = entry
            g, dws[pi], dbs[pi] = layers.dense_backward(h, params.weights[pi], g, need_below[i], need_params)
        elif kind == "dense":
            _, h, pi, active = entry
            g = g * active
            g, dws[pi], dbs[pi] = layers.dense_backward(h, params.weights[pi], g, need_below[i], need_params)
        elif kind == "conv":
            _, h, pi, active = entry
            g = g * active
            g, dws[pi], dbs[pi] = layers.conv_backward(h, params.weights[pi], g, need_below[i], need_params)
        elif kind == "pool":
            _, shape, index = entry
            g = layers.maxpool_backward(shape, index, g)
        elif kind == "flatten":
            g = g.reshape(entry[1])
        elif kind == "dropout":
            g = g * entry[1]
        if g is None:
            break
    dx = None
    if need_input:
        dx = g[..., 0] / params.standardizer.std
    return dx, dws, dbs


def logits(params: NetworkParams, X) -> np.ndarray:
    z, _ = _run(params, _as_elements(params, X))
    return z


def forward(params: NetworkParams, X) -> np.ndarray:
    """Posterior rows ``(N, K)`` for every element of ``X``."""
    return layers.softmax(logits(params, X))


def _check_labels(params, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= params.n_classes):
        raise NetworkError(f"labels must lie in [0, {params.n_classes})")
    return labels


def _xent(z, labels):
    logp = layers.log_softmax(z)
    picked = logp[np.arange(len(labels)), labels]
    losses = -np.maximum(picked, np.log(PROB_FLOOR))
    dz = np.exp(logp)
    dz[np.arange(len(labels)), labels] -= 1.0
    return losses, dz


def loss(params: NetworkParams, element, y: int) -> float:
    """Cross-entropy ``-log P(y | element)``."""
    labels = _check_labels(params, [y])
    z = logits(params, element)
    if z.shape[0] != 1:
        raise NetworkError("loss takes a single element")
    return float(_xent(z, labels)[0][0])


@dataclass
class Gradients:
    weights: list
    biases: list
    loss: float = field(default=0.0)

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def grad_params(params: NetworkParams, elements, labels, dropout=None, rng=None) -> Gradients:
    """Exact gradient of the batch-mean cross-entropy w.r.t. every weight and bias."""
    x = _as_elements(params, elements)
    labels = _check_labels(params, labels)
    if x.shape[0] == 0 or x.shape[0] != labels.shape[0]:
        raise NetworkError("batch must be non-empty with one label per element")
    z, cache = _run(params, x, dropout, rng)
    losses, dz = _xent(z, labels)
    _, dws, dbs = _backprop(params, cache, dz / x.shape[0])
    return Gradients(dws, dbs, float(losses.mean()))


def grad_input(params: NetworkParams, X, y) -> np.ndarray:
    """Per-element input gradients of ``-log P_n(y)``, shaped like ``X``.

    ``y`` is one label for the whole sequence or one label per element.
    Elements do not interact, so element ``n`` only sees ``X_n``.
    """
    x = _as_elements(params, X)
    labels = np.broadcast_to(np.asarray(y, dtype=np.int64), (x.shape[0],))
    labels = _check_labels(params, labels)
    z, cache = _run(params, x)
    _, dz = _xent(z, labels)
    dx, _, _ = _backprop(params, cache, dz, need_input=True, need_params=False)
    return dx


def posteriors_with_input_grad(params: NetworkParams, X, y):
    """Posteriors of ``X`` and a callable giving ``grad_input(params, X, y)``.

    The gradient reuses the forward pass, so checking the posteriors first
    costs nothing when the gradient turns out not to be needed.
    """
    x = _as_elements(params, X)
    labels = _check_labels(params, np.broadcast_to(np.asarray(y, dtype=np.int64), (x.shape[0],)))
    z, cache = _run(params, x)
    P = layers.softmax(z)

    def gradient():
        _, dz = _xent(z, labels)
        return _backprop(params, cache, dz, need_input=True, need_params=False)[0]

    return P, gradient


def hidden_activations(params: NetworkParams, X):
    """Output of every hidden layer, each flattened to ``(N, -1)``."""
    x = _as_elements(params, X)
    _, cache = _run(params, x)
    return [h.reshape(h.shape[0], -1) for kind, *rest in cache if kind == "hidden"
            for _, h in [rest]]


def confidence(P: np.ndarray) -> np.ndarray:
    """Mean posterior per class over the elements of a sequence."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise NetworkError("confidence needs a non-empty (N, K) posterior array")
    return P.mean(axis=0)


def classify(params: NetworkParams, X) -> int:
    """Label index maximising the confidence; ties go to the lowest index."""
    return int(np.argmax(confidence(forward(params, X))))
