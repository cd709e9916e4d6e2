"""Contrastive objectives over relation embeddings and the in-batch sampler.

Batch losses sum, for each relation r in the batch, over ordered pairs (a, p)
of distinct positives of r. Negatives of r are the explicit negatives of r in
the batch plus the positives of every other relation in the batch (minus any
pair that is itself a positive of r).

Each batch loss has a ``*_with_grad`` twin returning the gradient with
respect to the embedding matrix, which is what training backpropagates.
"""
from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .data import RelationDataset, WordPair


class LossKind(str, enum.Enum):
    TRIPLET = "triplet"
    INFONCE = "infonce"
    INFOLOOB = "infoloob"


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.INFONCE
    margin: float | None = None
    temperature: float | None = None
    mean_reduction: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind is LossKind.TRIPLET:
            if self.margin is None or not self.margin > 0:
                raise ValueError("triplet loss needs a margin > 0")
        elif self.temperature is None or not self.temperature > 0:
            raise ValueError(f"{self.kind.value} needs a temperature > 0")


POSITIVE, NEGATIVE = "positive", "negative"


@dataclass(frozen=True, order=True)
class BatchEntry:
    relation: str
    polarity: str
    pair: WordPair


@dataclass
class ContrastiveBatch:
    """Entries of one training batch plus the positive/negative index groups.

    ``known_positives`` lists, per relation, pairs that must never serve as its
    negatives; it defaults to the positives present in the batch.
    """

    entries: list[BatchEntry]
    known_positives: dict[str, frozenset[WordPair]] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.polarity not in (POSITIVE, NEGATIVE):
                raise ValueError(f"bad polarity {e.polarity!r}")
            if e in seen:
                raise ValueError(f"duplicate batch entry {e}")
            seen.add(e)

    def __len__(self) -> int:
        return len(self.entries)

    @cached_property
    def groups(self) -> dict[str, tuple[list[int], list[int]]]:
        """relation -> (positive indices, negative indices), relations in sorted order."""
        pos: dict[str, list[int]] = {}
        neg_explicit: dict[str, list[int]] = {}
        for i, e in enumerate(self.entries):
            (pos if e.polarity == POSITIVE else neg_explicit).setdefault(e.relation, []).append(i)
        groups = {}
        for rel in sorted(pos):
            exclude = set(self.known_positives.get(rel, ())) | {self.entries[i].pair for i in pos[rel]}
            negs = list(neg_explicit.get(rel, ()))
            negs += [i for other in sorted(pos) if other != rel for i in pos[other]]
            negs = [i for i in negs if self.entries[i].pair not in exclude]
            groups[rel] = (pos[rel], sorted(set(negs)))
        return groups

    def is_valid(self) -> bool:
        return any(len(p) >= 2 for p, _ in self.groups.values())


def _check_embeddings(batch: ContrastiveBatch, embeddings) -> np.ndarray:
    x = np.asarray(embeddings)
    # float32 is promoted to float64; longdouble stays wide for gradient checks
    x = x.astype(np.promote_types(x.dtype, np.float64))
    if x.ndim != 2 or x.shape[0] != len(batch):
        raise ValueError(f"need one embedding row per batch entry ({len(batch)}), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite embedding")
    return x


def _unit_rows(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    return x / norms[:, None], norms


def _row_logsumexp(s: np.ndarray) -> np.ndarray:
    if s.shape[1] == 0:
        return np.full(s.shape[0], -np.inf, dtype=s.dtype)
    m = s.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(s - m).sum(axis=1, keepdims=True)))[:, 0]


def _nce_like(batch, embeddings, temperature, leave_one_out, mean_reduction):
    x = _check_embeddings(batch, embeddings)
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    u, norms = _unit_rows(x)
    sim = (u @ u.T) / x.dtype.type(temperature)
    d_sim = np.zeros_like(sim)
    total, n_terms = x.dtype.type(0), 0
    for rel, (pos, neg) in batch.groups.items():
        m = len(pos)
        if m < 2:
            continue
        if leave_one_out and not neg:
            raise ValueError(f"relation {rel!r} has no negatives in the batch; InfoLOOB undefined")
        pos, neg = np.asarray(pos), np.asarray(neg, dtype=int)
        s_ap = sim[np.ix_(pos, pos)]
        s_an = sim[np.ix_(pos, neg)]
        off_diag = ~np.eye(m, dtype=bool)
        lse_neg = _row_logsumexp(s_an)[:, None]
        # per (a, p): log of the denominator
        lse = np.broadcast_to(lse_neg, s_ap.shape) if leave_one_out else np.logaddexp(s_ap, lse_neg)
        total += ((lse - s_ap)[off_diag]).sum()
        n_terms += m * (m - 1)
        d_ap = -np.ones_like(s_ap) if leave_one_out else np.exp(s_ap - lse) - 1.0
        d_ap[~off_diag] = 0.0
        if len(neg):
            factor = np.where(off_diag, np.exp(lse_neg - lse), 0.0).sum(axis=1, keepdims=True)
            d_an = np.exp(s_an - lse_neg) * factor
            d_sim[np.ix_(pos, neg)] += d_an
        d_sim[np.ix_(pos, pos)] += d_ap
    if n_terms == 0:
        raise ValueError("batch has no relation with two positives")
    if mean_reduction:
        total /= n_terms
        d_sim /= n_terms
    d_u = (d_sim + d_sim.T) @ u / x.dtype.type(temperature)
    d_x = (d_u - u * (d_u * u).sum(axis=1, keepdims=True)) / norms[:, None]
    return total, d_x


def infonce_loss_with_grad(batch, embeddings, temperature, mean_reduction=False):
    return _nce_like(batch, embeddings, temperature, False, mean_reduction)


def infoloob_loss_with_grad(batch, embeddings, temperature, mean_reduction=False):
    return _nce_like(batch, embeddings, temperature, True, mean_reduction)


def infonce_loss(batch: ContrastiveBatch, embeddings, temperature: float, mean_reduction: bool = False):
    return infonce_loss_with_grad(batch, embeddings, temperature, mean_reduction)[0]


def infoloob_loss(batch: ContrastiveBatch, embeddings, temperature: float, mean_reduction: bool = False):
    return infoloob_loss_with_grad(batch, embeddings, temperature, mean_reduction)[0]


def triplet_loss(anchor, positive, negative, margin: float) -> float:
    """max(0, ||a - p|| - ||a - n|| + margin)."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    if not a.shape == p.shape == n.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape}, {p.shape}, {n.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(p)) and np.all(np.isfinite(n))):
        raise ValueError("non-finite input")
    if not margin > 0:
        raise ValueError("margin must be > 0")
    return max(0.0, float(np.linalg.norm(a - p) - np.linalg.norm(a - n) + margin))


def _unit_diffs(x: np.ndarray, rows, cols):
    diff = x[rows][:, None, :] - x[cols][None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    safe = np.where(dist > 0, dist, 1.0)
    return np.where(dist[..., None] > 0, diff / safe[..., None], 0.0), dist


def batch_triplet_loss_with_grad(batch, embeddings, margin, mean_reduction=False):
    """Triplet hinge summed over (a, p, n) with a != p positives and n a negative.

    At the kink (argument exactly 0) the inactive branch is used, so the
    subgradient there is 0; a zero distance also contributes no gradient.
    """
    x = _check_embeddings(batch, embeddings)
    if not margin > 0:
        raise ValueError("margin must be > 0")
    grad = np.zeros_like(x)
    total, n_terms = x.dtype.type(0), 0
    for pos, neg in batch.groups.values():
        m = len(pos)
        if m < 2 or not neg:
            continue
        pos, neg = np.asarray(pos), np.asarray(neg)
        u_ap, d_ap = _unit_diffs(x, pos, pos)
        u_an, d_an = _unit_diffs(x, pos, neg)
        hinge = d_ap[:, :, None] - d_an[:, None, :] + x.dtype.type(margin)
        active = (hinge > 0) & ~np.eye(m, dtype=bool)[:, :, None]
        n_terms += m * (m - 1) * len(neg)
        total += hinge[active].sum()
        c_ap = active.sum(axis=2)[..., None]
        c_an = active.sum(axis=1)[..., None]
        np.add.at(grad, pos, (c_ap * u_ap).sum(axis=1) - (c_an * u_an).sum(axis=1))
        np.add.at(grad, pos, -(c_ap * u_ap).sum(axis=0))
        np.add.at(grad, neg, (c_an * u_an).sum(axis=0))
    if n_terms == 0:
        raise ValueError("batch has no (anchor, positive, negative) triple")
    if mean_reduction:
        total /= n_terms
        grad /= n_terms
    return total, grad


def batch_triplet_loss(batch, embeddings, margin, mean_reduction=False):
    return batch_triplet_loss_with_grad(batch, embeddings, margin, mean_reduction)[0]


def loss_with_grad(config: LossConfig, batch: ContrastiveBatch, embeddings):
    if config.kind is LossKind.TRIPLET:
        return batch_triplet_loss_with_grad(batch, embeddings, config.margin, config.mean_reduction)
    if config.kind is LossKind.INFONCE:
        return infonce_loss_with_grad(batch, embeddings, config.temperature, config.mean_reduction)
    return infoloob_loss_with_grad(batch, embeddings, config.temperature, config.mean_reduction)


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


def dataset_entries(dataset: RelationDataset) -> list[BatchEntry]:
    entries = []
    for rid, rel in dataset.relations.items():
        entries += [BatchEntry(rid, POSITIVE, p) for p in rel.positives]
        entries += [BatchEntry(rid, NEGATIVE, p) for p in rel.negatives]
    return entries


def _window_ok(window: Sequence[BatchEntry]) -> bool:
    counts: dict[str, int] = {}
    for e in window:
        if e.polarity == POSITIVE:
            counts[e.relation] = counts.get(e.relation, 0) + 1
            if counts[e.relation] >= 2:
                return True
    return False


def _windows(total: int, batch_size: int) -> list[tuple[int, int]]:
    bounds = [(s, min(s + batch_size, total)) for s in range(0, total, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        # a single leftover entry can never hold two positives; fold it into the previous batch
        (a, _), (_, b) = bounds[-2], bounds[-1]
        bounds[-2:] = [(a, b)]
    return bounds


def n_batches(dataset: RelationDataset, batch_size: int) -> int:
    return len(_windows(len(dataset_entries(dataset)), batch_size))


def _repair_window(order, windows, w, rng: random.Random):
    """Swap positives into window ``w`` until it holds two of one relation.

    Entries are only taken from earlier windows when those stay valid, so
    repaired windows are never broken again. Returns the new order or None.
    """
    lo, hi = windows[w]
    here: dict[str, int] = {}
    for e in order[lo:hi]:
        if e.polarity == POSITIVE:
            here[e.relation] = here.get(e.relation, 0) + 1
    owner = [k for k, (a, b) in enumerate(windows) for _ in range(a, b)]
    relations = sorted({e.relation for e in order if e.polarity == POSITIVE}, key=lambda r: (-here.get(r, 0), r))
    for rel in relations:
        later = [i for i in range(hi, len(order)) if order[i].polarity == POSITIVE and order[i].relation == rel]
        earlier = [i for i in range(lo) if order[i].polarity == POSITIVE and order[i].relation == rel]
        rng.shuffle(later)
        rng.shuffle(earlier)
        slots = [i for i in range(lo, hi) if not (order[i].polarity == POSITIVE and order[i].relation == rel)]
        slots.sort(key=lambda i: (order[i].polarity == POSITIVE, i))
        trial = list(order)
        need = 2 - here.get(rel, 0)
        for src in later + earlier:
            if need == 0 or not slots:
                break
            dst = slots.pop(0)
            trial[src], trial[dst] = trial[dst], trial[src]
            a, b = windows[owner[src]]
            if owner[src] < w and not _window_ok(trial[a:b]):
                trial[src], trial[dst] = trial[dst], trial[src]
                slots.insert(0, dst)
                continue
            need -= 1
        if need == 0:
            return trial
    return None


_order_cache: dict = {}


def _epoch_order(dataset: RelationDataset, batch_size: int, epoch: int, seed: int):
    """Seeded permutation of all entries, repaired so every window is a valid batch.

    Repairs are swaps within the permutation, so each entry still occurs exactly
    once per epoch.
    """
    key = (id(dataset), batch_size, epoch, seed)
    cached = _order_cache.get(key)
    if cached is not None and cached[0] is dataset:
        return cached[1], cached[2]
    order = dataset_entries(dataset)
    rng = random.Random(f"{seed}:{epoch}")
    rng.shuffle(order)
    windows = _windows(len(order), batch_size)
    for w, (lo, hi) in enumerate(windows):
        if _window_ok(order[lo:hi]):
            continue
        repaired = _repair_window(order, windows, w, rng)
        if repaired is None:
            raise ValueError(
                f"cannot form a valid batch of size {batch_size}: every batch needs two positives of one relation"
            )
        order = repaired
    if len(_order_cache) > 64:
        _order_cache.clear()
    _order_cache[key] = (dataset, order, windows)
    return order, windows


def sample_batch(dataset: RelationDataset, batch_size: int, step: int, seed: int = 0) -> ContrastiveBatch:
    """The ``step``-th batch of a seeded, epoch-wise shuffled pass over the dataset.

    Steps are global: step ``s`` belongs to epoch ``s // n_batches``. A batch
    that would hold no relation with two positives is repaired by seeded swaps
    with other batches of the same epoch. Entries of an emitted batch are in
    canonical (sorted) order, so its loss does not depend on the shuffle.
    """
    if batch_size < 4:
        raise ValueError("batch_size must be at least 4")
    if len(dataset_entries(dataset)) < 2:
        raise ValueError("dataset too small for any valid batch")
    order, windows = _epoch_order(dataset, batch_size, step // n_batches(dataset, batch_size), seed)
    lo, hi = windows[step % len(windows)]
    known = {rid: frozenset(rel.positives) for rid, rel in dataset.relations.items()}
    return ContrastiveBatch(sorted(order[lo:hi]), known)
