"""Per-sample gradient-norm influence and layerwise gamma/sigma profiles.

Per-sample gradients in a BN network depend on which batch a sample sits
in. Norms here use Train-mode statistics of a fixed batch assignment
(drawn from ``(seed, "influence-batches")``), frozen during the per-sample
backward pass. That convention is recorded as ``STATS_CONVENTION``.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .data import PROVENANCE_NAMES
from .rng import Xoshiro256
from .nn.network import TRAIN

STATS_CONVENTION = "train-mode batch statistics, frozen per batch, seed-derived batch assignment"
HIST_BINS = 64
HIST_LOW = 1e-8


@dataclass
class InfluenceRecord:
    example_index: int
    grad_norm: float
    provenance: int
    finite: bool = True


def influence_batches(n, batch_size, seed):
    """Seed-derived partition of ``range(n)`` into batches.

    A trailing singleton is merged into the previous batch, since Train-mode
    statistics need at least two rows.
    """
    order = Xoshiro256.derived(seed, "influence-batches").permutation(n)
    batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def batch_grad_norms(net, features, labels, first_layer_only=False):
    mode = TRAIN if net.has_bn else net.mode
    return net.per_sample_grad_norms(features, labels, mode=mode, first_layer_only=first_layer_only)


def compute_influence(net, dataset, batch_size=256, seed=0, first_layer_only=False, batches=None):
    """One :class:`InfluenceRecord` per example, ordered by index.

    Running statistics are left untouched. Non-finite norms are kept with
    ``finite=False`` rather than aborting.
    """
    n = len(dataset)
    if n < 2 and net.has_bn:
        raise ValueError("need at least two examples for batch statistics")
    batches = batches if batches is not None else influence_batches(n, batch_size, seed)
    norms = np.full(n, np.nan)
    with np.errstate(all="ignore"):
        for b in batches:
            b = np.sort(b)
            norms[b] = batch_grad_norms(net, dataset.features[b], dataset.labels[b], first_layer_only)
    return [
        InfluenceRecord(i, float(norms[i]), int(dataset.provenance[i]), bool(np.isfinite(norms[i])))
        for i in range(n)
    ]


def write_influence_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["example_index", "provenance", "grad_norm"])
        for r in records:
            w.writerow([r.example_index, PROVENANCE_NAMES[r.provenance], repr(r.grad_norm)])


@dataclass
class GroupSummary:
    count: int
    mean: float
    median: float
    p90: float
    histogram: np.ndarray


def histogram_edges(max_value):
    hi = max(float(max_value), HIST_LOW * 10)
    return np.geomspace(HIST_LOW, hi, HIST_BINS + 1)


def summarize_distribution(records, group_by_provenance=True):
    """Count, mean, median, p90 and a shared-edge histogram per group.

    Returns ``(edges, {group: GroupSummary})``. Groups are provenance names,
    or ``"all"``. Norms below the first edge land in the first bin.
    Non-finite records are excluded.
    """
    good = [r for r in records if r.finite]
    if not good:
        raise ValueError("no finite records to summarize")
    vals = np.array([r.grad_norm for r in good])
    edges = histogram_edges(vals.max())
    groups = {}
    if group_by_provenance:
        prov = np.array([r.provenance for r in good])
        for p in sorted(set(prov.tolist())):
            groups[PROVENANCE_NAMES[p]] = vals[prov == p]
    else:
        groups["all"] = vals
    out = {}
    for name, v in groups.items():
        hist, _ = np.histogram(np.clip(v, edges[0], edges[-1]), bins=edges)
        out[name] = GroupSummary(len(v), float(v.mean()), float(np.median(v)), float(np.percentile(v, 90)), hist)
    return edges, out


@dataclass
class RatioProfile:
    layer_index: int
    gamma: np.ndarray
    sigma: np.ndarray
    ratios: np.ndarray
    median: float
    quartiles: tuple


def extract_gamma_sigma(net):
    """Channel ratios gamma / sqrt(running_var + eps), one profile per BN layer."""
    profiles = []
    for i, layer in enumerate(net.layers):
        st = getattr(layer, "state", None)
        if st is None:
            continue
        sigma = np.sqrt(st.running_var + st.eps)
        r = st.gamma / sigma
        if not np.all(np.isfinite(r)):
            raise ValueError(f"non-finite gamma/sigma ratio in layer {i}")
        q1, q3 = np.percentile(r, [25, 75])
        profiles.append(RatioProfile(i, st.gamma.copy(), sigma, r, float(np.median(r)), (float(q1), float(q3))))
    return profiles


def write_ratio_csv(profiles, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer_index", "channel", "gamma", "sigma", "ratio"])
        for p in profiles:
            for c in range(len(p.ratios)):
                w.writerow([p.layer_index, c, repr(float(p.gamma[c])), repr(float(p.sigma[c])), repr(float(p.ratios[c]))])
