"""Sequential network: forward, backward, per-sample gradients, persistence."""

import copy
import json
from pathlib import Path

import numpy as np

from ..errors import ShapeError
from ..rng import Xoshiro256
from .layers import BatchNorm, BatchNormState, Dense, ReLU, SoftmaxCrossEntropyHead, check_finite

TRAIN = "train"
EVAL = "eval"


class Network:
    """An ordered layer list ending in a softmax cross-entropy head."""

    def __init__(self, layers, mode=TRAIN):
        layers = list(layers)
        heads = [i for i, l in enumerate(layers) if isinstance(l, SoftmaxCrossEntropyHead)]
        if heads != [len(layers) - 1]:
            raise ValueError("network needs exactly one SoftmaxCrossEntropyHead, placed last")
        prev = None
        for layer in layers:
            if isinstance(layer, Dense):
                if prev is not None and layer.in_features != prev:
                    raise ShapeError(f"dense layer expects {layer.in_features} inputs, previous width is {prev}")
                prev = layer.out_features
            elif isinstance(layer, BatchNorm) and prev is not None and layer.state.num_channels != prev:
                raise ShapeError(f"batch norm has {layer.state.num_channels} channels, previous width is {prev}")
        self.layers = layers
        self.mode = mode

    # construction ----------------------------------------------------------

    @classmethod
    def mlp(cls, sizes, batch_norm=True, seed=0, eps=1e-5, momentum=0.1):
        """Dense stack ``sizes[0] -> ... -> sizes[-1]``.

        Hidden layers are Dense [-> BatchNorm] -> ReLU. The weights are drawn
        before any BN layer is inserted, so the BN and no-BN variants built
        from the same seed share every Dense parameter.
        """
        rng = Xoshiro256(seed)
        dense = [Dense.init(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        layers = []
        for i, d in enumerate(dense):
            layers.append(d)
            if i < len(dense) - 1:
                if batch_norm:
                    layers.append(BatchNorm.init(d.out_features, eps, momentum))
                layers.append(ReLU())
        layers.append(SoftmaxCrossEntropyHead())
        return cls(layers)

    def without_bn(self):
        """Same layer list with BatchNorm layers removed (deep copy)."""
        return Network([copy.deepcopy(l) for l in self.layers if not isinstance(l, BatchNorm)], self.mode)

    def copy(self):
        return copy.deepcopy(self)

    @property
    def head(self):
        return self.layers[-1]

    @property
    def has_bn(self):
        return any(isinstance(l, BatchNorm) for l in self.layers)

    def bn_layers(self):
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    @property
    def num_classes(self):
        return [l for l in self.layers if isinstance(l, Dense)][-1].out_features

    def param_items(self):
        """Yield ``(layer_index, name, array)`` for every trainable array."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                yield i, name, arr

    def num_params(self):
        return sum(a.size for _, _, a in self.param_items())

    def flat_params(self):
        return np.concatenate([a.ravel() for _, _, a in self.param_items()])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise ShapeError(f"expected {self.num_params()} values, got {flat.size}")
        pos = 0
        for _, _, arr in self.param_items():
            arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size

    # passes ----------------------------------------------------------------

    def _run(self, x, mode, track):
        x = np.asarray(x, dtype=np.float64)
        check_finite(x, "network input")
        caches = []
        for layer in self.layers[:-1]:
            x, cache = layer.forward(x, mode, track)
            caches.append(cache)
        return x, caches

    def logits(self, x, mode=None):
        return self._run(x, mode or self.mode, track=False)[0]

    def forward(self, x, labels, mode=None, track=True):
        """Mean (or summed) cross-entropy, logits and layer caches.

        Train mode folds the batch statistics into the BN running averages
        unless ``track`` is False. Eval mode never mutates the network.
        """
        mode = mode or self.mode
        logits, caches = self._run(x, mode, track and mode == TRAIN)
        per_sample, probs = self.head.loss(logits, labels)
        loss = per_sample.sum() if self.head.reduction == "sum" else per_sample.mean()
        caches.append((probs, np.asarray(labels)))
        return float(loss), logits, caches

    def backward(self, caches, frozen_stats=False, grad_scale=None):
        """Parameter gradients of the loss computed by the matching forward.

        Returns a list aligned with ``self.layers`` of ``{name: grad}`` dicts.
        ``frozen_stats`` treats BN batch statistics as constants.
        """
        probs, labels = caches[-1]
        g = self.head.grad_per_sample(probs, labels)
        if grad_scale is None:
            grad_scale = 1.0 if self.head.reduction == "sum" else 1.0 / len(labels)
        g = g * grad_scale
        grads = [None] * len(self.layers)
        grads[-1] = {}
        for i in range(len(self.layers) - 2, -1, -1):
            g, pg = self.layers[i].backward(caches[i], g, frozen=frozen_stats)
            grads[i] = pg
        return grads

    def flat_grad(self, grads):
        return np.concatenate([grads[i][name].ravel() for i, name, _ in self.param_items()])

    # per-sample ------------------------------------------------------------

    def _per_sample_factors(self, x, labels, mode):
        """Row-wise backward with BN statistics frozen at the batch values.

        With frozen statistics every layer acts on rows independently, so a
        single batched backward pass carries each sample's own gradient.
        Returns per-layer ``(kind, upstream_grad, layer_input_or_xhat)``.
        """
        _, _, caches = self.forward(x, labels, mode=mode, track=False)
        probs, labels = caches[-1]
        g = self.head.grad_per_sample(probs, labels)
        factors = [None] * (len(self.layers) - 1)
        for i in range(len(self.layers) - 2, -1, -1):
            layer = self.layers[i]
            if isinstance(layer, Dense):
                factors[i] = ("dense", g, caches[i])
            elif isinstance(layer, BatchNorm):
                factors[i] = ("batchnorm", g, caches[i].x_hat)
            g, _ = layer.backward(caches[i], g, frozen=True)
        return factors

    def per_sample_grads(self, x, labels, mode=None):
        """``(B, P)`` matrix; row i is the gradient of sample i's loss alone."""
        mode = mode or self.mode
        factors = self._per_sample_factors(x, labels, mode)
        cols = []
        for f in factors:
            if f is None:
                continue
            kind, g, a = f
            if kind == "dense":
                b = g.shape[0]
                cols.append(np.einsum("bo,bi->boi", g, a).reshape(b, -1))
                cols.append(g)
            else:
                cols.append(g * a)
                cols.append(g)
        return np.concatenate(cols, axis=1)

    def per_sample_grad_norms(self, x, labels, mode=None, first_layer_only=False):
        """l2 norms of per-sample gradients without materializing them.

        For a dense layer ``||g a^T||_F^2 = ||g||^2 ||a||^2`` per row.
        ``first_layer_only`` restricts to the first dense layer's weights.
        """
        mode = mode or self.mode
        factors = self._per_sample_factors(x, labels, mode)
        total = np.zeros(len(labels))
        for f in factors:
            if f is None:
                continue
            kind, g, a = f
            g2 = (g * g).sum(axis=1)
            if kind == "dense":
                total += g2 * (a * a).sum(axis=1)
                if first_layer_only:
                    break
                total += g2
            elif not first_layer_only:
                total += ((g * a) ** 2).sum(axis=1) + g2
        # factors are visited front to back, so the first dense layer comes first
        return np.sqrt(total)

    # persistence -----------------------------------------------------------

    def describe(self):
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                out.append({"type": "dense", "in": layer.in_features, "out": layer.out_features})
            elif isinstance(layer, BatchNorm):
                s = layer.state
                out.append({"type": "batchnorm", "channels": s.num_channels, "eps": s.eps, "momentum": s.momentum})
            elif isinstance(layer, ReLU):
                out.append({"type": "relu"})
            else:
                out.append({"type": "softmax_cross_entropy", "reduction": layer.reduction})
        return out

    def _state_arrays(self):
        for layer in self.layers:
            if isinstance(layer, Dense):
                yield layer.weight
                yield layer.bias
            elif isinstance(layer, BatchNorm):
                s = layer.state
                yield s.gamma
                yield s.beta
                yield s.running_mean
                yield s.running_var

    def save(self, path):
        """Write ``<path>.bin`` (little-endian float64) and ``<path>.json``."""
        path = Path(path)
        blob = np.concatenate([a.ravel() for a in self._state_arrays()]).astype("<f8")
        path.with_suffix(".bin").write_bytes(blob.tobytes())
        meta = {"format": "bnmem-network-v1", "layers": self.describe(), "num_values": int(blob.size)}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return [path.with_suffix(".bin"), path.with_suffix(".json")]

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
        if flat.size != meta["num_values"]:
            raise ShapeError(f"blob holds {flat.size} values, sidecar says {meta['num_values']}")
        pos = 0

        def take(*shape):
            nonlocal pos
            n = int(np.prod(shape))
            arr = flat[pos:pos + n].reshape(shape).copy()
            pos += n
            return arr

        layers = []
        for d in meta["layers"]:
            t = d["type"]
            if t == "dense":
                layers.append(Dense(take(d["out"], d["in"]), take(d["out"])))
            elif t == "batchnorm":
                c = d["channels"]
                layers.append(BatchNorm(BatchNormState(take(c), take(c), take(c), take(c), d["eps"], d["momentum"])))
            elif t == "relu":
                layers.append(ReLU())
            elif t == "softmax_cross_entropy":
                layers.append(SoftmaxCrossEntropyHead(d.get("reduction", "mean")))
            else:
                raise ValueError(f"unknown layer type {t!r}")
        return cls(layers)


def forward(net, batch, labels):
    return net.forward(batch, labels)


def backward_per_sample(net, batch, labels):
    """Per-sample flattened gradients as a list of 1-D arrays."""
    return list(net.per_sample_grads(batch, labels))
