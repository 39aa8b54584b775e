"""The federation protocol: participant state machines and the round loop.

One round: every source client takes a local step (classification gradient
on a fresh batch, plus cached server feedback applied through last round's
upload tape) and uploads fresh features; the target client applies only the
reversed discriminator gradient and uploads; the server updates its client
discriminator and returns per-client feature gradients; finally the source
classifiers score the target feature broadcast and the server returns
consistency gradients. Server feedback always lands one round after the
upload it scores, applied to the exact cached batch it was computed on.

Cross-participant influence flows only through Message values, so a channel
hook can record or replay every exchange.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from . import inference
from .errors import ConfigurationError, NumericError, ProtocolError, StragglerError
from .losses import classification_loss, consistency_loss, domain_loss, softmax, softmax_backward
from .messages import (Channel, ConsistencyFeedback, DiscFeedback, FeatureUpload,
                       ParamBroadcast, PredictionUpload, TargetFeatureBroadcast)
from .nncore import Network, backward, forward, grl_backward, sgd_step

TARGET_CLIENT_ID = 0


@dataclass
class RoundSchedule:
    """Counts and knobs of one training run."""

    rounds: int
    init_epochs: int
    batch_size: int
    eta: float
    discriminator_enabled: bool = True
    consistency_enabled: bool = True

    def __post_init__(self):
        if self.rounds < 0 or self.init_epochs < 0:
            raise ConfigurationError("round and epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be positive")
        if self.eta <= 0:
            raise ConfigurationError("learning rate must be positive")


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray | None = None


@dataclass
class SourceClientState:
    """A labeled participant: feature extractor + its own classifier."""

    client_id: int
    extractor: Network
    classifier: Network
    shard: object  # exposes .images and .labels
    rng: np.random.Generator
    # batch cursor
    _order: np.ndarray | None = None
    _cursor: int = 0
    # caches tying server feedback to the upload it scored
    upload_tape: object = None
    upload_shape: tuple = None
    consistency_tape: object = None
    consistency_probs: np.ndarray | None = None
    pending_disc: DiscFeedback | None = None
    pending_consistency: ConsistencyFeedback | None = None


@dataclass
class TargetClientState:
    """The unlabeled participant: a feature extractor only.

    The training shard carries no labels by construction; `test_set` is
    evaluation-only and never enters any training path.
    """

    extractor: Network
    train_shard: object  # exposes .images only
    test_set: object = None
    rng: np.random.Generator = None
    _order: np.ndarray | None = None
    _cursor: int = 0
    upload_tape: object = None
    upload_shape: tuple = None
    pending_disc: DiscFeedback | None = None


@dataclass
class ServerState:
    """Central server: the client discriminator and upload cache."""

    discriminator: Network
    round_counter: int = 0
    cached_uploads: dict = field(default_factory=dict)


@dataclass
class FederationState:
    """All participants plus the schedule; advanced in place by run_round."""

    sources: list
    target: TargetClientState
    server: ServerState
    schedule: RoundSchedule
    round_index: int = 0

    def __post_init__(self):
        ids = [c.client_id for c in self.sources]
        if ids != sorted(ids) or len(set(ids)) != len(ids):
            raise ConfigurationError("source client ids must be unique and ascending")
        if any(i < 1 for i in ids):
            raise ConfigurationError("source client ids start at 1 (0 is the target)")
        for client in self.sources:
            if len(client.shard.images) == 0:
                raise ConfigurationError(f"client {client.client_id} has an empty shard")
        width = self.server.discriminator.output_width
        if width != len(self.sources) + 1:
            raise ConfigurationError(
                f"discriminator width {width} != {len(self.sources)} sources + target")


@dataclass
class MetricsRow:
    """One row per round: losses, target accuracy, wall time."""

    round_index: int
    source_loss: float
    domain_loss: float
    consistency_loss: float
    target_accuracy: float
    wall_ms: float


def _draw(state, n, batch_size):
    size = min(batch_size, n)
    if state._order is None or state._cursor + size > n:
        state._order = state.rng.permutation(n)
        state._cursor = 0
    idx = state._order[state._cursor:state._cursor + size]
    state._cursor += size
    return np.asarray(idx)


def draw_source_batch(client, batch_size):
    idx = _draw(client, len(client.shard.images), batch_size)
    return Batch(idx, client.shard.images[idx], client.shard.labels[idx])


def draw_target_batch(target, batch_size):
    idx = _draw(target, len(target.train_shard.images), batch_size)
    return Batch(idx, target.train_shard.images[idx])


def _epoch_batches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def run_initialization(fed, representative=1, channel=None):
    """Supervised pre-training at one representative client, then broadcast.

    The representative minimizes its classification loss for
    schedule.init_epochs full epochs; its extractor+classifier weights are
    then fanned out to every other source client, and the extractor weights
    to the target client.
    """
    channel = channel or Channel()
    by_id = {c.client_id: c for c in fed.sources}
    if representative not in by_id:
        raise ConfigurationError(
            f"representative {representative} is not a labeled source client")
    rep = by_id[representative]
    schedule = fed.schedule
    for _ in range(schedule.init_epochs):
        for idx in _epoch_batches(rep.rng, len(rep.shard.images), schedule.batch_size):
            images, labels = rep.shard.images[idx], rep.shard.labels[idx]
            feats, tape_e = forward(rep.extractor, images, record=True)
            logits, tape_c = forward(rep.classifier, feats, record=True)
            _, dlogits = classification_loss(logits, labels)
            dfeats, g_clf = backward(rep.classifier, tape_c, dlogits)
            _, g_ext = backward(rep.extractor, tape_e, dfeats)
            sgd_step(rep.extractor, g_ext, schedule.eta)
            sgd_step(rep.classifier, g_clf, schedule.eta)
    payload = ParamBroadcast(tuple(rep.extractor.flat_weights()),
                             tuple(rep.classifier.flat_weights()))
    for client in fed.sources:
        if client.client_id == representative:
            continue
        msg = channel.transmit(payload)
        client.extractor.load_weights(msg.extractor)
        client.classifier.load_weights(msg.classifier)
    msg = channel.transmit(payload)
    fed.target.extractor.load_weights(msg.extractor)
    return fed


def _check_disc_feedback(state, feedback, client_id):
    if feedback.client_id != client_id:
        raise ProtocolError(
            f"feedback addressed to client {feedback.client_id}, got client {client_id}")
    if state.upload_tape is None:
        raise ProtocolError("discriminator feedback without a cached upload")
    if feedback.feature_grads.shape != state.upload_shape:
        raise ProtocolError(
            f"feedback shape {feedback.feature_grads.shape} != uploaded "
            f"features {state.upload_shape}")


def source_local_step(client, batch, feedback, cfeedback, eta):
    """One local step at a source client; returns (FeatureUpload, loss).

    Classification gradients come from the fresh batch; discriminator
    feedback (if any) is reversed and backpropagated through the cached
    tape of the upload it was computed on, joining the same SGD step;
    consistency feedback joins the classifier's gradient the same way.
    """
    ext, clf = client.extractor, client.classifier
    feats, tape_e = forward(ext, batch.images, record=True)
    logits, tape_c = forward(clf, feats, record=True)
    loss_c, dlogits = classification_loss(logits, batch.labels)
    dfeats, g_clf = backward(clf, tape_c, dlogits)
    _, g_ext = backward(ext, tape_e, dfeats)

    if feedback is not None:
        _check_disc_feedback(client, feedback, client.client_id)
        _, g_adv = backward(ext, client.upload_tape, grl_backward(feedback.feature_grads))
        g_ext.add(g_adv)

    if cfeedback is not None:
        if cfeedback.client_id != client.client_id:
            raise ProtocolError(
                f"consistency feedback addressed to client {cfeedback.client_id}")
        if client.consistency_tape is None or client.consistency_probs is None:
            raise ProtocolError("consistency feedback without a cached prediction")
        if cfeedback.probability_grads.shape != client.consistency_probs.shape:
            raise ProtocolError("consistency feedback shape mismatch")
        glogits = softmax_backward(client.consistency_probs, cfeedback.probability_grads)
        _, g_cons = backward(clf, client.consistency_tape, glogits)
        g_clf.add(g_cons)

    sgd_step(ext, g_ext, eta)
    sgd_step(clf, g_clf, eta)

    up_feats, up_tape = forward(ext, batch.images, record=True)
    client.upload_tape = up_tape
    client.upload_shape = up_feats.shape
    client.consistency_tape = None
    client.consistency_probs = None
    return FeatureUpload(client.client_id, up_feats, batch.indices), loss_c


def target_local_step(target, batch, feedback, eta):
    """One local step at the target: reversed discriminator gradient only."""
    ext = target.extractor
    if feedback is not None:
        _check_disc_feedback(target, feedback, TARGET_CLIENT_ID)
        _, g_adv = backward(ext, target.upload_tape, grl_backward(feedback.feature_grads))
        sgd_step(ext, g_adv, eta)
    up_feats, up_tape = forward(ext, batch.images, record=True)
    target.upload_tape = up_tape
    target.upload_shape = up_feats.shape
    return FeatureUpload(TARGET_CLIENT_ID, up_feats, batch.indices)


def server_step(server, uploads, eta, enabled=True):
    """Discriminator update plus per-client feature gradients.

    Expects exactly one upload per client (ids 0..N). Feature gradients are
    taken at the pre-update discriminator, so the clients' adversarial step
    and the server's own step describe the same loss surface. With the
    discriminator disabled nothing happens and no feedback is returned.
    """
    if not enabled:
        return [], 0.0, []
    n_total = server.discriminator.output_width
    ids = [u.client_id for u in uploads]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate uploads: {sorted(ids)}")
    unknown = set(ids) - set(range(n_total))
    if unknown:
        raise ProtocolError(f"uploads from unknown clients {sorted(unknown)}")
    missing = set(range(n_total)) - set(ids)
    if missing:
        raise StragglerError(missing)

    ordered = sorted(uploads, key=lambda u: u.client_id)
    batches, tapes = [], []
    for upload in ordered:
        logits, tape = forward(server.discriminator, upload.features, record=True)
        labels = np.full(upload.features.shape[0], upload.client_id, dtype=np.int64)
        batches.append((logits, labels))
        tapes.append(tape)
    total, per_client, dlogits = domain_loss(batches)

    g_disc = None
    feedbacks = []
    for upload, tape, grad, term in zip(ordered, tapes, dlogits, per_client):
        dfeat, g = backward(server.discriminator, tape, grad)
        g_disc = g if g_disc is None else g_disc.add(g)
        feedbacks.append(DiscFeedback(upload.client_id, dfeat, term))
    sgd_step(server.discriminator, g_disc, eta)
    server.round_counter += 1
    server.cached_uploads = {u.client_id: u for u in ordered}
    return feedbacks, total, per_client


def source_prediction(client, features):
    """Score broadcast target features with this client's classifier.

    Records the classifier tape and the probabilities so next round's
    consistency feedback can be backpropagated through exactly this pass.
    """
    logits, tape = forward(client.classifier, features, record=True)
    probs = softmax(logits)
    client.consistency_tape = tape
    client.consistency_probs = probs
    return PredictionUpload(client.client_id, probs)


def consistency_round(server, sources, target_features, channel=None):
    """Server-mediated consistency exchange over one target feature batch.

    Broadcasts the features to every source client, collects their
    probability predictions, and returns each classifier its own exact
    consistency gradient slice.
    """
    channel = channel or Channel()
    predictions = []
    for client in sources:
        msg = channel.transmit(TargetFeatureBroadcast(target_features))
        upload = channel.transmit(source_prediction(client, msg.features))
        if np.any(upload.probabilities < 0.0) or \
                np.abs(upload.probabilities.sum(axis=-1) - 1.0).max() > 1e-9:
            raise ProtocolError(
                f"client {upload.client_id} prediction rows are not probability vectors")
        predictions.append(upload)
    shapes = {p.probabilities.shape for p in predictions}
    if len(shapes) != 1:
        raise ProtocolError(f"prediction batches disagree: {sorted(shapes)}")
    loss, grads = consistency_loss([p.probabilities for p in predictions])
    feedbacks = [ConsistencyFeedback(p.client_id, g, loss)
                 for p, g in zip(predictions, grads)]
    return feedbacks, loss


def evaluate_target(fed):
    """Majority-vote accuracy of the source classifiers on the target test
    set, featurized by the target extractor."""
    test = fed.target.test_set
    if test is None:
        return float("nan")
    feats, _ = forward(fed.target.extractor, test.images)
    votes = []
    for client in fed.sources:
        logits, _ = forward(client.classifier, feats)
        votes.append(logits.argmax(axis=1))
    decisions = inference.majority_vote(np.stack(votes))
    accuracy, _ = inference.evaluate(decisions, test.labels)
    return accuracy


def _snapshot(fed):
    """Pre-round state copy for atomic abort; shards are immutable after
    partition, so they are shared rather than copied."""
    memo = {}
    for client in fed.sources:
        memo[id(client.shard)] = client.shard
    memo[id(fed.target.train_shard)] = fed.target.train_shard
    if fed.target.test_set is not None:
        memo[id(fed.target.test_set)] = fed.target.test_set
    return copy.deepcopy((fed.sources, fed.target, fed.server, fed.round_index), memo)


def run_round(fed, channel=None):
    """One synchronized round; returns the MetricsRow.

    Deterministic given seeds and the fixed ascending client order. Any
    error restores every participant to its pre-round state before
    propagating.
    """
    channel = channel or Channel()
    start = time.perf_counter()
    snapshot = _snapshot(fed)
    try:
        schedule = fed.schedule
        uploads, source_losses = [], []
        for client in fed.sources:
            batch = draw_source_batch(client, schedule.batch_size)
            feedback = client.pending_disc if schedule.discriminator_enabled else None
            cfeedback = client.pending_consistency if schedule.consistency_enabled else None
            upload, loss_c = source_local_step(client, batch, feedback, cfeedback, schedule.eta)
            client.pending_disc = None
            client.pending_consistency = None
            uploads.append(channel.transmit(upload))
            source_losses.append(loss_c)

        tbatch = draw_target_batch(fed.target, schedule.batch_size)
        feedback = fed.target.pending_disc if schedule.discriminator_enabled else None
        target_upload = target_local_step(fed.target, tbatch, feedback, schedule.eta)
        fed.target.pending_disc = None
        target_upload = channel.transmit(target_upload)

        domain_total = 0.0
        if schedule.discriminator_enabled:
            feedbacks, domain_total, _ = server_step(
                fed.server, [target_upload] + uploads, schedule.eta)
            routed = {fb.client_id: channel.transmit(fb) for fb in feedbacks}
            for client in fed.sources:
                client.pending_disc = routed[client.client_id]
            fed.target.pending_disc = routed[TARGET_CLIENT_ID]

        cons_total = 0.0
        if schedule.consistency_enabled and fed.sources:
            cfeedbacks, cons_total = consistency_round(
                fed.server, fed.sources, target_upload.features, channel)
            routed = {fb.client_id: fb for fb in cfeedbacks}
            for client in fed.sources:
                client.pending_consistency = channel.transmit(routed[client.client_id])

        fed.round_index += 1
        row = MetricsRow(
            round_index=fed.round_index,
            source_loss=float(np.mean(source_losses)) if source_losses else 0.0,
            domain_loss=float(domain_total),
            consistency_loss=float(cons_total),
            target_accuracy=evaluate_target(fed),
            wall_ms=(time.perf_counter() - start) * 1000.0,
        )
        for name, value in (("source", row.source_loss), ("domain", row.domain_loss),
                            ("consistency", row.consistency_loss)):
            if not np.isfinite(value):
                raise NumericError(f"non-finite {name} loss")
        return row
    except BaseException as exc:
        fed.sources, fed.target, fed.server, fed.round_index = snapshot
        if isinstance(exc, NumericError):
            raise NumericError(f"round {fed.round_index + 1}: {exc}") from exc
        raise
