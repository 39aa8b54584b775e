"""Voting-based target classification and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VoteRecord:
    """Per-sample audit record: every classifier's vote and the decision."""

    votes: tuple
    decision: int


def majority_vote(votes):
    """Modal class per sample; ties break to the lowest class index.

    `votes` is (n_classifiers, batch) integer class predictions. argmax over
    bincounts returns the first maximum, which is the lowest class index.
    """
    votes = np.asarray(votes, dtype=np.int64)
    if votes.ndim != 2 or votes.shape[0] < 1:
        raise ValueError(f"votes must be (classifiers >= 1, batch), got shape {votes.shape}")
    if votes.size and votes.min() < 0:
        raise ValueError("votes must be non-negative class indices")
    width = int(votes.max()) + 1 if votes.size else 1
    out = np.empty(votes.shape[1], dtype=np.int64)
    for j in range(votes.shape[1]):
        out[j] = np.bincount(votes[:, j], minlength=width).argmax()
    return out


def vote_records(votes):
    """The per-sample VoteRecord list for `votes` (n_classifiers, batch)."""
    decisions = majority_vote(votes)
    votes = np.asarray(votes, dtype=np.int64)
    return [VoteRecord(tuple(votes[:, j].tolist()), int(decisions[j]))
            for j in range(votes.shape[1])]


def evaluate(decisions, labels, num_classes=None):
    """Accuracy plus a (true class x predicted class) confusion matrix."""
    decisions = np.asarray(decisions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if decisions.shape != labels.shape or decisions.ndim != 1:
        raise ValueError(f"decisions {decisions.shape} and labels {labels.shape} must be equal-length vectors")
    if decisions.size == 0:
        raise ValueError("empty evaluation input")
    if num_classes is None:
        num_classes = int(max(decisions.max(), labels.max())) + 1
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, decisions), 1)
    accuracy = float(np.trace(confusion)) / float(confusion.sum())
    return accuracy, confusion
