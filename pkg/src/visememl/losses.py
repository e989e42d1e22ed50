"""Cross-entropy and KL-based metric learning losses over viseme distributions.

Predicted distributions ``Q`` are Nodes of shape (L, C) or (B, L, C) whose
rows lie on the simplex; labels ``Y`` have the matching leading shape. All
sequence-level quantities are means over the retained positions.

Representative distributions, the aligned targets and the count-weighted
target are computed from ``Q.value`` and therefore carry no gradient.
Special tokens (space, SoS, EoS, pad) take part in cross-entropy only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_EPS, Node
from .viseme_map import SPECIAL_IDS

TERMS = ("NCE", "SCE", "KL", "WKL", "NKL", "SKL")


class EmptyTargetWarning(UserWarning):
    """A KL term had no position whose target class was present."""


@dataclass(frozen=True)
class RepresentativeSet:
    reps: np.ndarray
    present: np.ndarray
    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.reps.shape[0]


def _values(q) -> np.ndarray:
    return q.value if isinstance(q, Node) else np.asarray(q, dtype=np.float64)


def _flat(q, labels):
    """Flatten to (N, C) rows and (N,) labels."""
    qv = _values(q)
    labels = np.asarray(labels, dtype=np.int64)
    if qv.shape[:-1] != labels.shape:
        raise ValueError(f"labels shape {labels.shape} does not match predictions {qv.shape}")
    n_classes = qv.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("label outside [0, C)")
    node = ad.as_node(q)
    if node.ndim != 2:
        node = ad.reshape(node, (-1, n_classes))
    return node, labels.reshape(-1)


def representative_distributions(Q, Y, exclude: Iterable[int] = SPECIAL_IDS) -> RepresentativeSet:
    """Per-class mean of the predicted rows, summed in ascending position order.

    Classes listed in ``exclude`` (the special tokens by default) and classes
    that never occur in ``Y`` are marked absent; their rows are zero.
    """
    node, labels = _flat(Q, Y)
    q = node.value
    n_classes = q.shape[1]
    skip = np.zeros(n_classes, dtype=bool)
    for c in exclude:
        if 0 <= c < n_classes:
            skip[c] = True
    keep = ~skip[labels]
    counts = np.bincount(labels[keep], minlength=n_classes)
    sums = np.zeros((n_classes, n_classes))
    # np.add.at is unbuffered and applies rows in index order
    np.add.at(sums, labels[keep], q[keep])
    present = counts > 0
    reps = np.zeros_like(sums)
    reps[present] = sums[present] / counts[present, None]
    return RepresentativeSet(reps, present, counts)


def build_target(S: RepresentativeSet, Y) -> np.ndarray:
    labels = np.asarray(Y, dtype=np.int64)
    if labels.size and not S.present[labels].all():
        missing = sorted(set(labels[~S.present[labels]].tolist()))
        raise ValueError(f"target classes {missing} have no representative")
    return S.reps[labels]


def kl_seq(P, Q) -> Node:
    """Mean over positions of sum_c P log(P / max(Q, eps)); 0 log 0 = 0."""
    P = np.asarray(P, dtype=np.float64)
    Q = ad.as_node(Q)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: P {P.shape} vs Q {Q.shape}")
    n_rows = int(np.prod(P.shape[:-1]))
    if n_rows == 0:
        return ad.constant(0.0)
    # elementwise P (log P - log Q) keeps the terms small when P ~ Q
    log_p = np.log(np.where(P > 0, P, 1.0))
    gap = ad.sub(log_p, ad.log(Q, LOG_EPS))
    return ad.mul(ad.sum_(ad.mul(gap, P)), 1.0 / n_rows)


@dataclass(frozen=True)
class AlignedKL:
    value: Node
    retained: int
    skipped: int


def aligned_kl(S: RepresentativeSet, Q, Y, exclude: Iterable[int] = SPECIAL_IDS) -> AlignedKL:
    """KL(S[Y] || Q) over positions whose label is a present, non-excluded class."""
    node, labels = _flat(Q, Y)
    excluded = np.zeros(S.n_classes, dtype=bool)
    for c in exclude:
        if 0 <= c < S.n_classes:
            excluded[c] = True
    content = ~excluded[labels]
    keep = content & S.present[labels]
    idx = np.flatnonzero(keep)
    skipped = int(content.sum() - idx.size)
    if idx.size == 0:
        return AlignedKL(ad.constant(0.0), 0, skipped)
    rows = node[idx] if idx.size != labels.size else node
    return AlignedKL(kl_seq(build_target(S, labels[idx]), rows), int(idx.size), skipped)


def _warn_if_empty(term: AlignedKL, name: str) -> Node:
    if term.retained == 0:
        warnings.warn(f"{name}: no position with a present target class; returning 0",
                      EmptyTargetWarning, stacklevel=3)
    return term.value


def loss_kl(Q_S, Y_S, S_N: RepresentativeSet) -> Node:
    """Pull silent predictions toward the normal-speech representatives."""
    return _warn_if_empty(aligned_kl(S_N, Q_S, Y_S), "loss_kl")


def weighted_target(S_N: RepresentativeSet, S_S: RepresentativeSet, n_normal: float, n_silent: float) -> RepresentativeSet:
    """Count-weighted combination of the normal and silent representatives.

    Where only one speech type has a representative for a class, that one is
    used unchanged.
    """
    if n_normal < 0 or n_silent < 0 or n_normal + n_silent == 0:
        raise ValueError("counts must be non-negative and not both zero")
    w_n = n_normal / (n_normal + n_silent)
    w_s = n_silent / (n_normal + n_silent)
    both = S_N.present & S_S.present
    reps = np.zeros_like(S_N.reps)
    reps[both] = w_n * S_N.reps[both] + w_s * S_S.reps[both]
    only_n = S_N.present & ~S_S.present
    only_s = S_S.present & ~S_N.present
    reps[only_n] = S_N.reps[only_n]
    reps[only_s] = S_S.reps[only_s]
    return RepresentativeSet(reps, S_N.present | S_S.present, S_N.counts + S_S.counts)


def loss_wkl(Q_N, Y_N, Q_S, Y_S, M: RepresentativeSet) -> Node:
    kl_n = aligned_kl(M, Q_N, Y_N)
    kl_s = aligned_kl(M, Q_S, Y_S)
    if kl_n.retained + kl_s.retained == 0:
        warnings.warn("loss_wkl: no position with a present target class; returning 0",
                      EmptyTargetWarning, stacklevel=2)
    return ad.add(kl_n.value, kl_s.value)


def loss_within(Q, Y, S: RepresentativeSet | None = None) -> Node:
    """KL of each prediction from its own class mean within one speech type.

    ``S`` defaults to the representatives of ``Q`` itself; pass a frozen set
    to evaluate the loss against fixed targets.
    """
    if S is None:
        S = representative_distributions(Q, Y)
    return aligned_kl(S, Q, Y).value


def cross_entropy(Q, Y) -> Node:
    node, labels = _flat(Q, Y)
    if labels.size == 0:
        raise ValueError("cross_entropy on an empty sequence")
    picked = node[np.arange(labels.size), labels]
    return ad.mul(ad.sum_(ad.log(picked, LOG_EPS)), -1.0 / labels.size)


# configuration and the combined objective ----------------------------------

@dataclass(frozen=True)
class LossConfig:
    terms: frozenset = frozenset({"NCE", "SCE"})
    weights: Mapping[str, float] = field(default_factory=dict)
    n_normal: int = 1
    n_silent: int = 1

    def __post_init__(self):
        terms = frozenset(t.upper() for t in self.terms)
        object.__setattr__(self, "terms", terms)
        unknown = terms - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        if not terms & {"NCE", "SCE"}:
            raise ValueError("at least one of NCE/SCE must be active")
        if {"KL", "WKL"} <= terms:
            raise ValueError("KL and WKL are mutually exclusive")
        weights = {k.upper(): float(v) for k, v in self.weights.items()}
        if any(w <= 0 for w in weights.values()):
            raise ValueError("term weights must be positive")
        object.__setattr__(self, "weights", weights)
        if self.n_normal < 1 or self.n_silent < 1:
            raise ValueError("n_normal and n_silent must be positive")

    def weight(self, term: str) -> float:
        return self.weights.get(term, 1.0)

    @property
    def ordered_terms(self) -> list[str]:
        return [t for t in TERMS if t in self.terms]

    @property
    def needs_silent(self) -> bool:
        return bool(self.terms - {"NCE"})

    @property
    def needs_normal(self) -> bool:
        return bool(self.terms - {"SCE", "SKL"})

    @property
    def label(self) -> str:
        return "+".join(self.ordered_terms)

    @classmethod
    def parse(cls, text: str, **kw) -> "LossConfig":
        """``"NCE+SCE+WKL"`` (also accepts commas or spaces)."""
        parts = [p for p in text.replace(",", "+").replace(" ", "+").split("+") if p]
        return cls(frozenset(parts), **kw)


@dataclass(frozen=True)
class TermValue:
    weight: float
    value: float
    skipped: int = 0


def total_loss(batch_n, batch_s, config: LossConfig, frozen: Mapping[str, RepresentativeSet] | None = None):
    """Weighted sum of the active terms.

    ``batch_n``/``batch_s`` are ``(Q, Y)`` pairs or ``None``. ``frozen`` may
    supply precomputed representative sets under the keys ``"N"`` and ``"S"``
    (used for finite-difference checks with fixed targets).

    Returns the total Node and a ``{term: TermValue}`` breakdown.
    """
    frozen = dict(frozen or {})
    needs = {
        "NCE": ("n",), "SCE": ("s",), "KL": ("n", "s"), "WKL": ("n", "s"),
        "NKL": ("n",), "SKL": ("s",),
    }
    for term in config.terms:
        for side in needs[term]:
            batch = batch_n if side == "n" else batch_s
            if batch is None or np.asarray(batch[1]).size == 0:
                raise ValueError(f"term {term} needs a non-empty {'normal' if side == 'n' else 'silent'} batch")

    def reps(key, batch):
        if key not in frozen:
            frozen[key] = representative_distributions(*batch)
        return frozen[key]

    parts: dict[str, tuple[Node, int]] = {}
    if "NCE" in config.terms:
        parts["NCE"] = (cross_entropy(*batch_n), 0)
    if "SCE" in config.terms:
        parts["SCE"] = (cross_entropy(*batch_s), 0)
    if "KL" in config.terms:
        r = aligned_kl(reps("N", batch_n), *batch_s)
        parts["KL"] = (r.value, r.skipped)
    if "WKL" in config.terms:
        M = weighted_target(reps("N", batch_n), reps("S", batch_s), config.n_normal, config.n_silent)
        rn, rs = aligned_kl(M, *batch_n), aligned_kl(M, *batch_s)
        parts["WKL"] = (ad.add(rn.value, rs.value), rn.skipped + rs.skipped)
    if "NKL" in config.terms:
        r = aligned_kl(reps("N", batch_n), *batch_n)
        parts["NKL"] = (r.value, r.skipped)
    if "SKL" in config.terms:
        r = aligned_kl(reps("S", batch_s), *batch_s)
        parts["SKL"] = (r.value, r.skipped)

    total = None
    breakdown = {}
    for term in config.ordered_terms:
        node, skipped = parts[term]
        w = config.weight(term)
        weighted = ad.mul(node, w) if w != 1.0 else node
        total = weighted if total is None else ad.add(total, weighted)
        breakdown[term] = TermValue(w, node.item(), skipped)
    return total, breakdown
