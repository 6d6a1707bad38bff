"""gamma/sigma regularization and the alpha sweep.

Objective per batch::

    J = alpha * sum_i CE_i + (1 - alpha) * sum_j log((gamma_j / sigma_j)^2)

``gamma_j`` and ``sigma_j`` are per-layer scalars: the channel means of
gamma and of sqrt(batch_var + eps) (``variant="layer_mean"``). The
``"per_channel"`` variant sums the log ratio over every channel instead.
sigma enters as a constant, so the regularizer only pushes on gamma.
"""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .nn import Architecture, TrainConfig, evaluate, train
from .nn.layers import BatchNorm, BNCache
from .nn.network import EVAL, TRAIN

LAYER_MEAN = "layer_mean"
PER_CHANNEL = "per_channel"


def _bn_sigmas(net, caches):
    out = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, BatchNorm):
            c = caches[i]
            if not isinstance(c, BNCache):
                raise TypeError("caches do not match the network")
            out[i] = 1.0 / c.inv_std
    return out


def regularizer_terms(net, caches, variant=LAYER_MEAN, sigmas=None):
    """``(reg_sum, {layer_index: d reg_sum / d gamma})`` for one forward pass.

    ``sigmas`` overrides the per-layer sqrt(var + eps) vectors taken from
    the caches (used to hold sigma fixed in finite-difference checks).
    """
    sigmas = sigmas or _bn_sigmas(net, caches)
    if not sigmas:
        raise ValueError("gamma/sigma regularization needs at least one BatchNorm layer")
    reg = 0.0
    grads = {}
    for i, sig in sigmas.items():
        gamma = net.layers[i].state.gamma
        if variant == LAYER_MEAN:
            g_bar = gamma.mean()
            if g_bar == 0:
                raise ValueError(f"mean gamma of layer {i} is zero; log((gamma/sigma)^2) undefined")
            reg += np.log((g_bar / sig.mean()) ** 2)
            grads[i] = np.full_like(gamma, 2.0 / g_bar / len(gamma))
        elif variant == PER_CHANNEL:
            if np.any(gamma == 0):
                raise ValueError(f"zero gamma in layer {i}; log((gamma/sigma)^2) undefined")
            reg += np.log((gamma / sig) ** 2).sum()
            grads[i] = 2.0 / gamma
        else:
            raise ValueError(f"unknown regularizer variant {variant!r}")
    return float(reg), grads


def regularized_loss(net, batch, labels, alpha, variant=LAYER_MEAN, sigmas=None):
    """``J`` and its components ``(ce_sum, reg_sum)``; BN runs on batch statistics."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    _, _, caches = net.forward(batch, labels, mode=TRAIN, track=False)
    probs, lab = caches[-1]
    ce_sum = float(-np.log(probs[np.arange(len(lab)), lab]).sum())
    reg_sum, _ = regularizer_terms(net, caches, variant, sigmas)
    return alpha * ce_sum + (1 - alpha) * reg_sum, (ce_sum, reg_sum)


def regularizer_gradient(net, alpha, variant=LAYER_MEAN):
    """Per BN layer: ``(layer_index, dJ/dgamma_bar, per-channel dJ/dgamma)``.

    With sigma held constant the layer-mean term differentiates to
    ``(1 - alpha) * 2 / gamma_bar``, spread evenly over the channels.
    """
    out = []
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, BatchNorm):
            continue
        gamma = layer.state.gamma
        if variant == LAYER_MEAN:
            g_bar = gamma.mean()
            if g_bar == 0:
                raise ValueError(f"mean gamma of layer {i} is zero")
            d_bar = (1 - alpha) * 2.0 / g_bar
            out.append((i, d_bar, np.full_like(gamma, d_bar / len(gamma))))
        else:
            if np.any(gamma == 0):
                raise ValueError(f"zero gamma in layer {i}")
            per = (1 - alpha) * 2.0 / gamma
            out.append((i, float(per.mean()), per))
    return out


def gamma_sigma_ratios(net):
    """All channel ratios gamma / sqrt(running_var + eps), pooled over BN layers."""
    parts = [l.state.gamma / np.sqrt(l.state.running_var + l.state.eps) for l in net.bn_layers()]
    return np.concatenate(parts) if parts else np.array([])


@dataclass
class SweepRow:
    alpha: float
    corrupted_acc: float
    clean_acc: float
    median_gamma_sigma: float


def _sweep_one(args):
    dataset, arch, alpha, seed, cfg_kwargs = args
    net = arch.build(seed)
    cfg = TrainConfig(seed=seed, mitigation_alpha=alpha, **cfg_kwargs)
    train(net, dataset, cfg)
    net.mode = EVAL
    _, clean_acc = evaluate(net, dataset, ~dataset.corrupted)
    _, corr_acc = evaluate(net, dataset, dataset.corrupted) if dataset.corrupted.any() else (0, float("nan"))
    return SweepRow(alpha, corr_acc, clean_acc, float(np.median(gamma_sigma_ratios(net))))


def alpha_sweep(dataset, architecture=None, alphas=(1.0, 0.9, 0.7, 0.5), seed=0, jobs=1, **train_kwargs):
    """Train one BN model per alpha (same seed, same batch order) and report metrics.

    ``train_kwargs`` are forwarded to :class:`TrainConfig`.
    """
    architecture = architecture or Architecture()
    if not architecture.batch_norm:
        raise ValueError("the alpha sweep needs a batch-norm architecture")
    if not alphas or any(not 0 < a <= 1 for a in alphas):
        raise ValueError("alphas must be nonempty and lie in (0, 1]")
    work = [(dataset, architecture, float(a), seed, train_kwargs) for a in alphas]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_sweep_one, work))
    return [_sweep_one(w) for w in work]


def write_sweep_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["alpha", "corrupted_acc", "clean_acc", "median_gamma_sigma"])
        for r in rows:
            w.writerow([repr(r.alpha), repr(r.corrupted_acc), repr(r.clean_acc), repr(r.median_gamma_sigma)])
