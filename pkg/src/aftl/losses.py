"""Training losses with exact gradients.

Three losses drive the federation: per-client classification cross-entropy,
client-discrimination cross-entropy summed over per-client means, and the
ensemble consistency penalty (mean Euclidean distance of each classifier's
prediction from the ensemble mean). Gradients are returned alongside every
loss so callers never re-derive them.
"""

from __future__ import annotations

import numpy as np

from .nncore import as_tensor


def softmax(logits):
    """Row-wise stabilized softmax: rows sum to 1 within 1e-12."""
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(probs, prob_grads):
    """Pull a gradient w.r.t. probabilities back to the logits.

    dL/dz_m = p_m * (g_m - sum_k p_k g_k) for each row.
    """
    p = as_tensor(probs)
    g = as_tensor(prob_grads)
    inner = (p * g).sum(axis=-1, keepdims=True)
    return p * (g - inner)


def _check_class_batch(logits, labels):
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got shape {logits.shape}")
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels out of range [0, {logits.shape[1]})")
    return logits, labels


def classification_loss(logits, labels):
    """Mean cross-entropy over a batch.

    Returns (loss, logit_grads) with logit_grads = (softmax - onehot) / n,
    the exact gradient of the mean cross-entropy.
    """
    logits, labels = _check_class_batch(logits, labels)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grads = softmax(logits)
    grads[np.arange(n), labels] -= 1.0
    grads /= n
    return float(loss), grads


def domain_loss(batches):
    """Client-discrimination loss over per-client (logits, domain_labels).

    Each client contributes the mean cross-entropy over its own batch; the
    total is the plain sum of the per-client terms. Returns
    (total, per_client, grads_per_batch) with each gradient taken w.r.t.
    that client's logits: (softmax - onehot) / n_client.
    """
    if not batches:
        raise ValueError("domain_loss needs at least one client batch")
    widths = {as_tensor(logits).shape[-1] for logits, _ in batches}
    if len(widths) != 1:
        raise ValueError(f"all discriminator batches must share one width, got {sorted(widths)}")
    per_client = []
    grads = []
    for logits, labels in batches:
        loss, g = classification_loss(logits, labels)
        per_client.append(loss)
        grads.append(g)
    return float(sum(per_client)), per_client, grads


def mean_prediction(predictions):
    """Elementwise mean of N probability tensors over the same batch."""
    preds = [as_tensor(p) for p in predictions]
    if not preds:
        raise ValueError("mean_prediction needs at least one prediction")
    shapes = {p.shape for p in preds}
    if len(shapes) != 1:
        raise ValueError(f"predictions disagree on shape: {sorted(shapes)}")
    return sum(preds) / len(preds)


def consistency_loss(predictions):
    """Disagreement of N classifiers on a shared target batch.

    loss = (1 / (n * N)) * sum_j sum_i ||p_ij - pbar_j||_2 with pbar the
    ensemble mean. Returns (loss, grads) where grads[i] is the exact
    gradient w.r.t. classifier i's probability rows, with the mean's
    dependence on every classifier chain-ruled through. Rows at exactly zero
    distance contribute zero gradient (subgradient choice).
    """
    preds = [as_tensor(p) for p in predictions]
    if not preds:
        raise ValueError("consistency_loss needs at least one prediction")
    shapes = {p.shape for p in preds}
    if len(shapes) != 1:
        raise ValueError(f"predictions disagree on shape: {sorted(shapes)}")
    n_classifiers = len(preds)
    n_rows = preds[0].shape[0]
    if n_rows == 0:
        raise ValueError("empty prediction batch")
    stack = np.stack(preds)                      # (N, n, K)
    # residual from the ensemble mean, computed as the mean of pairwise
    # differences so agreeing classifiers give an exact zero
    resid = (stack[:, None] - stack[None, :]).mean(axis=1)
    norms = np.linalg.norm(resid, axis=-1)       # (N, n)
    scale = 1.0 / (n_rows * n_classifiers)
    loss = float(norms.sum() * scale)
    # unit residual directions; zero rows stay zero
    safe = np.where(norms > 0.0, norms, 1.0)[..., None]
    units = np.where(norms[..., None] > 0.0, resid / safe, 0.0)
    mean_unit = units.mean(axis=0, keepdims=True)
    grads = (units - mean_unit) * scale
    return loss, [grads[i] for i in range(n_classifiers)]
