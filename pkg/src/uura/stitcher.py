"""Stitching of per-sub-slot codewords into per-UE messages.

Detected codewords of slot 1 seed one class per codeword; codewords of later
slots are classified by the posterior of their estimated channel vector under
a per-class circularly-symmetric complex Gaussian with variance given by the
class label (running-mean gain statistic).  A K-means baseline on the scalar
gain estimates shares the same machinery.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .codebook import demap_index
from .decision import ActiveCodewordList


@dataclass
class StitchOptions:
    max_rounds: int = 30
    tol: float = 1e-15
    mode: str = "argmax"  # "argmax" or "matching"
    # rounds of free re-classification before membership is pinned; near-tie
    # data otherwise flip classes forever and the labels never settle
    freeze_after: int = 2


@dataclass
class ClassAssignment:
    labels: np.ndarray            # xi per class
    members: list                 # per class: {slot: codeword index}
    member_gains: list            # per class: {slot: g_hat}
    rounds_used: int = 0
    converged: bool = False
    audit: list = field(default_factory=list)   # (slot, index, class, margin)
    round_trace: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.labels)


@dataclass
class RecoveredMessages:
    bits: list          # per class: length-b bit vector, or None on erasure
    classes: ClassAssignment


def init_classes(slot1: ActiveCodewordList) -> ClassAssignment:
    """One singleton class per slot-1 codeword, labeled by its gain estimate."""
    k = len(slot1)
    return ClassAssignment(
        labels=np.asarray(slot1.g_hat, dtype=float).copy(),
        members=[{1: int(i)} for i in slot1.indices],
        member_gains=[{1: float(g)} for g in slot1.g_hat])


def _gaussian_scores(h_hat: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Log-posterior of each datum over the classes: complex Gaussian per
    antenna, -M log(xi) - ||h||^2 / xi, normalized per datum (uniform class
    prior).  The normalization leaves each datum's ranking untouched but
    makes scores comparable across data, so a contested class goes to the
    datum most confident about it rather than to the one with the smallest
    energy (raw log-densities always favor small-energy data)."""
    M = h_hat.shape[1]
    energy = np.sum(np.abs(h_hat) ** 2, axis=1)
    log_cond = (-M * np.log(labels)[None, :]
                - energy[:, None] / labels[None, :])
    return log_cond - logsumexp(log_cond, axis=1, keepdims=True)


def _assign(score: np.ndarray, mode: str):
    """Pair data with classes, at most one datum per class.

    "argmax" resolves greedily by descending score (equal to the per-datum
    argmax whenever no two data contend for a class); "matching" maximizes the
    summed log-score with the Hungarian algorithm.
    """
    n, k = score.shape
    if mode == "matching":
        rows, cols = linear_sum_assignment(-score)
        return list(zip(rows.tolist(), cols.tolist()))
    if mode != "argmax":
        raise ValueError(f"unknown stitch mode: {mode}")
    # per-datum argmax with contested classes resolved by deferred
    # acceptance: the class keeps its best-scoring proposer, displaced data
    # move on to their next choice (equals the plain argmax when no two data
    # contend for a class)
    prefs = np.argsort(-score, axis=1)
    pointer = np.zeros(n, dtype=int)
    hold = {}
    free = list(range(n - 1, -1, -1))
    while free:
        i = free.pop()
        while pointer[i] < k:
            c = int(prefs[i, pointer[i]])
            pointer[i] += 1
            j = hold.get(c)
            if j is None:
                hold[c] = i
                break
            if score[i, c] > score[j, c]:
                hold[c] = i
                free.append(j)
                break
    return sorted((i, c) for c, i in hold.items())


def classify_slot(assignment: ClassAssignment, acl: ActiveCodewordList,
                  mode: str = "argmax", scores: np.ndarray | None = None,
                  pairs=None):
    """Assign one slot's detected codewords to classes and refresh labels
    with the running mean xi <- ((l-1) xi + g_hat) / l.

    An explicit pairs list bypasses the scoring step (frozen membership)."""
    l = acl.slot
    if l < 2:
        raise ValueError("classify_slot applies to slots >= 2")
    if len(acl) == 0:
        return assignment
    if scores is None:
        scores = _gaussian_scores(acl.h_hat, assignment.labels)
    if pairs is None:
        pairs = _assign(scores, mode)
    for i, c in pairs:
        assignment.members[c][l] = int(acl.indices[i])
        assignment.member_gains[c][l] = float(acl.g_hat[i])
        assignment.labels[c] = ((l - 1) * assignment.labels[c]
                                + acl.g_hat[i]) / l
        row = scores[i]
        if len(row) > 1:
            margin = float(np.sort(row)[-1] - np.sort(row)[-2])
        else:
            margin = float("inf")
        assignment.audit.append((l, int(acl.indices[i]), c, margin))
    return assignment


def _run_rounds(slot_lists, options: StitchOptions, score_fn):
    slot1 = slot_lists[0]
    assignment = init_classes(slot1)
    if assignment.n_classes == 0:
        return assignment
    L = len(slot_lists)
    # near-tie data can flip between classes forever (period-2 membership
    # cycles), which keeps the labels a hair away from the tolerance; once a
    # membership signature repeats, freeze it and let the running-mean
    # update contract the labels the rest of the way
    seen = set()
    frozen = None  # per slot: list of (datum, class) pairs
    for t in range(1, options.max_rounds + 1):
        start = assignment.labels.copy()
        # membership is rebuilt every round; only labels carry over
        assignment.members = [{1: int(i)} for i in slot1.indices]
        assignment.member_gains = [{1: float(g)} for g in slot1.g_hat]
        assignment.audit = []
        round_pairs = {}
        for l in range(2, L + 1):
            acl = slot_lists[l - 1]
            if len(acl) == 0:
                continue
            scores = score_fn(acl, assignment.labels)
            pairs = frozen[l] if frozen is not None else None
            if pairs is None:
                pairs = _assign(scores, options.mode)
            round_pairs[l] = pairs
            classify_slot(assignment, acl, options.mode, scores=scores,
                          pairs=pairs)
        assignment.rounds_used = t
        assignment.round_trace.append(
            {"start": start, "final": assignment.labels.copy(),
             "assigned": [dict(g) for g in assignment.member_gains]})
        if np.max(np.abs(assignment.labels - start)) < options.tol:
            assignment.converged = True
            break
        if frozen is None:
            sig = tuple(sorted((l, tuple(sorted(p))) for l, p in
                               round_pairs.items()))
            if sig in seen or t >= options.freeze_after:
                frozen = dict(round_pairs)
                # the frozen round map is affine per class, so start the
                # next round from its exact fixed point
                assignment.labels = _frozen_fixed_point(
                    assignment.labels, slot_lists, frozen)
            seen.add(sig)
    return assignment


def _frozen_fixed_point(labels, slot_lists, frozen):
    """Fixed point of one classification round with pinned membership.

    With membership fixed, a round maps each label affinely
    (xi -> c xi + d via the sequential running means); probing the map at
    0 and 1 recovers (c, d) and the fixed point d / (1 - c)."""

    def round_map(xi):
        xi = xi.copy()
        for l, pairs in sorted(frozen.items()):
            g_hat = slot_lists[l - 1].g_hat
            for i, c in pairs:
                xi[c] = ((l - 1) * xi[c] + g_hat[i]) / l
        return xi

    d = round_map(np.zeros_like(labels))
    c = round_map(np.ones_like(labels)) - d
    fixed = np.where(c < 1.0, d / (1.0 - np.minimum(c, 1.0 - 1e-9)), labels)
    return fixed


def _recover(assignment: ClassAssignment, J: int, L: int) -> RecoveredMessages:
    bits = []
    for members in assignment.members:
        if all(l in members for l in range(1, L + 1)):
            bits.append(np.concatenate(
                [demap_index(members[l], J) for l in range(1, L + 1)]))
        else:
            bits.append(None)
    return RecoveredMessages(bits=bits, classes=assignment)


def stitch_all(slot_lists, J: int, options: StitchOptions | None = None):
    """Iterate classification rounds over slots 2..L until the class labels
    converge, then demap each complete class into a b-bit message."""
    options = options or StitchOptions()
    L = len(slot_lists)
    if L == 0 or len(slot_lists[0]) == 0:
        empty = ClassAssignment(labels=np.empty(0), members=[], member_gains=[])
        return empty, RecoveredMessages(bits=[], classes=empty)
    if L == 1:
        assignment = init_classes(slot_lists[0])
        assignment.converged = True
        return assignment, _recover(assignment, J, 1)
    assignment = _run_rounds(
        slot_lists, options,
        lambda acl, labels: _gaussian_scores(acl.h_hat, labels))
    return assignment, _recover(assignment, J, L)


def kmeans_baseline(slot_lists, J: int, options: StitchOptions | None = None):
    """Lloyd-style baseline: nearest center on the scalar gain estimates,
    centers seeded from slot 1 and refreshed by the same running mean."""
    options = options or StitchOptions()
    L = len(slot_lists)
    if L == 0 or len(slot_lists[0]) == 0:
        empty = ClassAssignment(labels=np.empty(0), members=[], member_gains=[])
        return empty, RecoveredMessages(bits=[], classes=empty)
    if L == 1:
        assignment = init_classes(slot_lists[0])
        assignment.converged = True
        return assignment, _recover(assignment, J, 1)

    def km_scores(acl, labels):
        g = np.asarray(acl.g_hat, dtype=float)
        return -((g[:, None] - labels[None, :]) ** 2)

    assignment = _run_rounds(slot_lists, options, km_scores)
    return assignment, _recover(assignment, J, L)


def cer_min(log_cond: np.ndarray, priors=None, n_per_class=None) -> float:
    """Minimum classification error rate of the Bayes rule.

    log_cond[i, k] is the unnormalized class-conditional log-density of datum
    i under class k; densities are normalized across classes per datum before
    combining with the class priors (uniform by default).
    """
    log_cond = np.asarray(log_cond, dtype=float)
    n, k = log_cond.shape
    if priors is None:
        priors = np.full(k, 1.0 / k)
    priors = np.asarray(priors, dtype=float)
    if n_per_class is None:
        n_per_class = n / k
    cond = np.exp(log_cond - logsumexp(log_cond, axis=1, keepdims=True))
    best = np.max(priors[None, :] * cond, axis=1)
    return float(1.0 - np.sum(best) / n_per_class)


def dump_assignment_csv(assignment: ClassAssignment, path) -> None:
    """Final-round assignment audit: slot, codeword index, class, margin."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slot", "codeword_index", "class", "score_margin"])
        for slot, idx, c, margin in assignment.audit:
            w.writerow([slot, idx, c, repr(margin)])
