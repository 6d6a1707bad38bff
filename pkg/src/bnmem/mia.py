"""Likelihood-ratio membership inference with shadow models.

Offline-style scoring: per example, Gaussians for the "in" and "out"
shadow confidence signals share one variance pooled across all examples
and shadows, and the score is the log-density difference at the target's
signal.
"""

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import CLEAN, PROVENANCE_NAMES, corrupt
from .errors import TrainingDiverged
from .nn import Architecture, TrainConfig, train
from .nn.network import EVAL
from .rng import Xoshiro256, derive_seed

P_CLAMP = 1e-7
FPR_LEVELS = (0.001, 0.01, 0.1)
MIN_VAR = 1e-12


def signal_from_probs(p):
    """``ln(p / (1 - p))`` with ``p`` clamped to ``[1e-7, 1 - 1e-7]``."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    return np.log(p) - np.log1p(-p)


def confidence_signals(model, features, labels, batch_size=2048):
    """Vectorized :func:`confidence_signal` over a set of examples."""
    out = np.empty(len(labels))
    for s in range(0, len(labels), batch_size):
        z = model.logits(features[s:s + batch_size], mode=EVAL)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        out[s:s + batch_size] = signal_from_probs(p[np.arange(len(z)), labels[s:s + batch_size]])
    return out


def confidence_signal(model, x, y):
    return float(confidence_signals(model, np.atleast_2d(x), np.array([y]))[0])


@dataclass
class ShadowEnsemble:
    models: list
    in_masks: np.ndarray  # (num_models, n) bool
    master_seed: int
    architecture: Architecture

    def __post_init__(self):
        self.in_masks = np.asarray(self.in_masks, dtype=bool)
        if len(self.models) < 2:
            raise ValueError("need at least two shadow models")
        if self.in_masks.shape[0] != len(self.models):
            raise ValueError("one membership mask per shadow model")
        for m in self.models:
            if m.has_bn != self.architecture.batch_norm:
                raise ValueError("shadow models must share the target architecture")

    @property
    def num_models(self):
        return len(self.models)

    def signals(self, dataset):
        return np.stack([confidence_signals(m, dataset.features, dataset.labels) for m in self.models])


@dataclass
class MembershipScore:
    example_index: int
    lam: float
    n_in: int
    n_out: int
    fallback: bool = False


def pooled_variance(signals, in_masks):
    """Within-group variance pooled over every (example, in/out) group."""
    sq = 0.0
    dof = 0
    for mask in (in_masks, ~in_masks):
        cnt = mask.sum(axis=0)
        s = np.where(mask, signals, 0.0).sum(axis=0)
        mu = np.divide(s, cnt, out=np.zeros_like(s), where=cnt > 0)
        dev = np.where(mask, signals - mu, 0.0)
        sq += float((dev * dev).sum())
        dof += int(cnt.sum() - (cnt > 0).sum())
    if dof <= 0:
        raise ValueError("too few shadow observations to pool a variance")
    return max(sq / dof, MIN_VAR)


def lira_scores(signals, in_masks, target_signals, variance=None):
    """Log-likelihood ratios from a ``(models, n)`` signal matrix.

    An example seen by no shadow (or by all of them) takes the global mean
    of that group instead; such scores are marked ``fallback``.
    """
    signals = np.asarray(signals, dtype=np.float64)
    in_masks = np.asarray(in_masks, dtype=bool)
    if signals.shape != in_masks.shape or signals.shape[1] != len(target_signals):
        raise ValueError("shadow signals, masks and target signals disagree in shape")
    var = pooled_variance(signals, in_masks) if variance is None else float(variance)
    n_in = in_masks.sum(axis=0)
    n_out = in_masks.shape[0] - n_in
    glob_in = signals[in_masks].mean() if in_masks.any() else 0.0
    glob_out = signals[~in_masks].mean() if (~in_masks).any() else 0.0
    mu_in = np.where(n_in > 0, np.where(in_masks, signals, 0).sum(axis=0) / np.maximum(n_in, 1), glob_in)
    mu_out = np.where(n_out > 0, np.where(~in_masks, signals, 0).sum(axis=0) / np.maximum(n_out, 1), glob_out)
    s = np.asarray(target_signals, dtype=np.float64)
    # log N(s|mu_in, v) - log N(s|mu_out, v); normalizers cancel
    lam = ((s - mu_out) ** 2 - (s - mu_in) ** 2) / (2.0 * var)
    fb = (n_in < 2) | (n_out < 2)
    return [MembershipScore(i, float(lam[i]), int(n_in[i]), int(n_out[i]), bool(fb[i])) for i in range(len(s))]


def fit_and_score(ensemble, target_model, dataset):
    if ensemble.in_masks.shape[1] != len(dataset):
        raise ValueError("ensemble masks do not match the dataset size")
    if target_model.has_bn != ensemble.architecture.batch_norm:
        raise ValueError("target and shadows differ in architecture")
    target = confidence_signals(target_model, dataset.features, dataset.labels)
    return lira_scores(ensemble.signals(dataset), ensemble.in_masks, target)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    tpr_at_fpr: dict = field(default_factory=dict)


def roc_from_scores(member_scores, nonmember_scores, levels=FPR_LEVELS):
    """ROC by sweeping a threshold down through every distinct score.

    Rule: predict "member" when score >= threshold. Tied scores move as one
    step, so ties contribute a diagonal segment.
    """
    pos = np.asarray(member_scores, dtype=np.float64)
    neg = np.asarray(nonmember_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need both member and nonmember scores")
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), len(scores) - 1]
    tp = np.cumsum(is_pos)[last]
    fp = np.cumsum(~is_pos)[last]
    tpr = np.r_[0.0, tp / len(pos)]
    fpr = np.r_[0.0, fp / len(neg)]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    at = {lv: float(tpr[fpr <= lv].max()) for lv in levels}
    return RocCurve(fpr, tpr, auc, at)


def auc_from_scores(member_scores, nonmember_scores):
    return roc_from_scores(member_scores, nonmember_scores).auc


def exchangeability_null(scores, is_member, permutations=100, seed=0):
    """AUCs after shuffling the membership labels uniformly at random."""
    scores = np.asarray(scores, dtype=np.float64)
    is_member = np.asarray(is_member, dtype=bool)
    out = np.empty(permutations)
    for k in range(permutations):
        perm = is_member[Xoshiro256.derived(seed, "null", k).permutation(len(is_member))]
        out[k] = auc_from_scores(scores[perm], scores[~perm])
    return out


# -- end-to-end attack --------------------------------------------------------------

def membership_mask(n, seed, tag, index=0):
    return Xoshiro256.derived(seed, tag, index).coins(n)


def _train_member(args):
    dataset, arch, mask, model_seed, cfg_kwargs, model_id = args
    net = arch.build(model_seed)
    sub = dataset.subset(np.flatnonzero(mask))
    cfg = TrainConfig(seed=model_seed, trace=False, **cfg_kwargs)
    cfg.batch_size = min(cfg.batch_size, len(sub))
    try:
        train(net, sub, cfg)
    except TrainingDiverged as e:
        raise TrainingDiverged(f"model {model_id}: {e}", e.epoch, e.step, model_id) from None
    return net


def _train_all(work, jobs):
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_train_member, work))
    return [_train_member(w) for w in work]


@dataclass
class AttackResult:
    report: dict
    scores: list
    is_member: np.ndarray
    provenance: np.ndarray
    roc: RocCurve

    def write_report(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.report, f, indent=2, sort_keys=True)
            f.write("\n")

    def write_scores_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["example_index", "provenance", "member", "lambda", "n_in", "n_out"])
            for s in self.scores:
                i = s.example_index
                w.writerow([i, PROVENANCE_NAMES[int(self.provenance[i])], int(self.is_member[i]), repr(s.lam), s.n_in, s.n_out])


def run_attack(dataset, architecture=None, corruption=None, num_shadows=16, seed=0, jobs=1,
               train_untrained=False, **train_kwargs):
    """Train a target plus ``num_shadows`` shadows and score every example.

    ``corruption`` (a CorruptionSpec) is applied to ``dataset`` first. The
    target and each shadow train on independent seed-derived half splits;
    members are the target's training examples. Splits and init seeds depend
    only on ``seed``, so BN and no-BN runs share them. ``train_untrained``
    skips training (random-weight baseline).
    """
    architecture = architecture or Architecture()
    if num_shadows < 4:
        raise ValueError("num_shadows must be at least 4")
    if corruption is not None:
        dataset = corrupt(dataset, corruption)
    n = len(dataset)
    target_mask = membership_mask(n, seed, "target-split")
    shadow_masks = np.stack([membership_mask(n, seed, "shadow-split", m) for m in range(num_shadows)])
    seeds = [derive_seed(seed, "target")] + [derive_seed(seed, "shadow", m) for m in range(num_shadows)]
    masks = [target_mask] + list(shadow_masks)
    ids = ["target"] + [f"shadow-{m}" for m in range(num_shadows)]
    if train_untrained:
        nets = [architecture.build(s) for s in seeds]
        for net in nets:
            net.mode = EVAL
    else:
        work = [(dataset, architecture, mk, s, train_kwargs, i) for mk, s, i in zip(masks, seeds, ids)]
        nets = _train_all(work, jobs)
    ens = ShadowEnsemble(nets[1:], shadow_masks, seed, architecture)
    scores = fit_and_score(ens, nets[0], dataset)
    lam = np.array([s.lam for s in scores])
    roc = roc_from_scores(lam[target_mask], lam[~target_mask])
    corrupted = dataset.provenance != CLEAN
    by_prov = {}
    for p, name in PROVENANCE_NAMES.items():
        sel = dataset.provenance == p
        if (sel & target_mask).any() and (sel & ~target_mask).any():
            by_prov[name] = auc_from_scores(lam[sel & target_mask], lam[sel & ~target_mask])
    auc_corr = None
    if (corrupted & target_mask).any() and (corrupted & ~target_mask).any():
        auc_corr = auc_from_scores(lam[corrupted & target_mask], lam[corrupted & ~target_mask])
    report = {
        "architecture": architecture.describe(),
        "auc": roc.auc,
        "auc_by_provenance": by_prov,
        "auc_corrupted_only": auc_corr,
        "dataset_hash": dataset.content_hash(),
        "fallback_examples": int(sum(s.fallback for s in scores)),
        "num_members": int(target_mask.sum()),
        "num_nonmembers": int((~target_mask).sum()),
        "num_shadows": num_shadows,
        "seed": seed,
        "tpr_at": {repr(k): v for k, v in roc.tpr_at_fpr.items()},
    }
    return AttackResult(report, scores, target_mask, dataset.provenance.copy(), roc)
