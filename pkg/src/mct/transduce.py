"""Transductive inference: soft k-means refinement and the view ensemble.

Queries are classified by softmax over negative distances to class
prototypes. Transduction feeds the resulting confidences back: each
unlabeled item contributes its confidence in class c as a fractional
weight to that class's prototype, while every support item keeps weight
exactly 1, and the process repeats for T steps. The multi-view variant
runs one prototype set per encoder view, averages the per-view
confidences into a single ensemble at every step, and updates all views
with that shared ensemble, each in its own embedding space.

Confidence matrices are plain (n, ways) float64 arrays whose rows sum
to one; prototype matrices are (ways, embed_dim), row c-1 for class c.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .encoder import VIEWS, ViewSpec, encode_batch
from .episodes import Episode
from .errors import ContractError
from .metric import MetricSpec, pairwise

__all__ = [
    "Prototypes",
    "one_hot",
    "class_counts",
    "init_from_embeddings",
    "init_prototypes",
    "confidence",
    "update_prototypes",
    "soft_kmeans",
    "mct_infer",
    "semi_infer",
    "predict_labels",
    "check_confidence",
]


@dataclass(frozen=True)
class Prototypes:
    """Per-view prototype matrices at transduction step ``step``."""

    by_view: dict[str, np.ndarray]
    step: int

    def __post_init__(self):
        if not self.by_view:
            raise ContractError("need at least one view")
        shapes = {v.shape for v in self.by_view.values()}
        if len(shapes) != 1:
            raise ContractError("views must share one prototype shape")


def one_hot(labels, ways: int) -> np.ndarray:
    """(n, ways) indicator rows for labels in {1..ways}."""
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 1 or y.max() > ways):
        raise ContractError(f"labels must lie in 1..{ways}")
    out = np.zeros((y.size, ways))
    out[np.arange(y.size), y - 1] = 1.0
    return out


def class_counts(labels, ways: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=ways + 1)[1:]
    if np.any(counts == 0):
        raise ContractError("every class needs at least one support item")
    return counts.astype(np.float64)


def init_from_embeddings(support_emb, support_y, ways: int):
    """Initial prototypes: the plain per-class mean of support embeddings."""
    y_t = one_hot(support_y, ways).T
    counts = class_counts(support_y, ways)
    return nk.div(nk.matmul(y_t, support_emb), counts[:, None])


def init_prototypes(
    episode: Episode,
    encoder,
    views: tuple[ViewSpec, ...] = VIEWS,
) -> Prototypes:
    """Per-view initial prototypes from the episode's support set."""
    by_view = {}
    for v in views:
        emb = encode_batch(encoder, episode.support_x, v)
        by_view[v.name] = init_from_embeddings(emb, episode.support_y, episode.ways)
    return Prototypes(by_view=by_view, step=0)


def confidence(query_emb, protos, metric: MetricSpec, tape: nk.Tape | None = None):
    """Rows of class confidences: softmax over negative distances."""
    return nk.softmax_neg(pairwise(metric, query_emb, protos, tape))


def update_prototypes(
    support_emb,
    support_y,
    ways: int,
    query_emb,
    conf,
    tape: nk.Tape | None = None,
):
    """Confidence-weighted prototype update.

    Support items contribute weight exactly 1 each; item x̃ contributes
    weight conf[x̃, c] to class c. Each prototype is the weighted mean
    of both pools.
    """
    cv = nk.value_of(conf)
    qv = nk.value_of(query_emb)
    if cv.shape != (qv.shape[0], ways):
        raise ContractError(
            f"confidence shape {cv.shape} does not match {qv.shape[0]} items x {ways} classes"
        )
    y_t = one_hot(support_y, ways).T
    counts = class_counts(support_y, ways)[:, None]
    num = nk.add(nk.matmul(y_t, support_emb), nk.matmul(nk.transpose(conf), query_emb))
    mass = nk.reshape(nk.asum(conf, axis=0), (ways, 1))
    return nk.div(num, nk.add(counts, mass))


def soft_kmeans(
    episode: Episode,
    encoder,
    view: ViewSpec,
    metric: MetricSpec,
    T: int,
) -> np.ndarray:
    """Single-view transduction; T = 0 is plain inductive inference."""
    if T < 0:
        raise ContractError("T must be non-negative")
    emb_s = encode_batch(encoder, episode.support_x, view)
    emb_q = encode_batch(encoder, episode.query_x, view)
    protos = init_from_embeddings(emb_s, episode.support_y, episode.ways)
    conf = confidence(emb_q, protos, metric)
    for _ in range(T):
        protos = update_prototypes(
            emb_s, episode.support_y, episode.ways, emb_q, conf
        )
        conf = confidence(emb_q, protos, metric)
    return conf


def mct_infer(
    episode: Episode,
    encoder,
    views: tuple[ViewSpec, ...],
    metric: MetricSpec,
    T: int,
) -> np.ndarray:
    """Multi-view ensemble transduction.

    At every step each view scores the queries against its own
    prototypes; the ensemble confidence is the exact arithmetic mean of
    those local confidences, and every view's prototypes are then
    updated with the shared ensemble weights in the view's own
    embedding space. Returns the ensemble at step T.
    """
    if T < 0:
        raise ContractError("T must be non-negative")
    if len(views) < 1:
        raise ContractError("need at least one view")
    emb_s = {v.name: encode_batch(encoder, episode.support_x, v) for v in views}
    emb_q = {v.name: encode_batch(encoder, episode.query_x, v) for v in views}
    protos = {
        v.name: init_from_embeddings(emb_s[v.name], episode.support_y, episode.ways)
        for v in views
    }
    for t in range(T + 1):
        locals_ = [confidence(emb_q[v.name], protos[v.name], metric) for v in views]
        ensemble = sum(locals_) / len(views)
        if t == T:
            return ensemble
        protos = {
            v.name: update_prototypes(
                emb_s[v.name], episode.support_y, episode.ways,
                emb_q[v.name], ensemble,
            )
            for v in views
        }
    raise AssertionError("unreachable")


def semi_infer(
    episode: Episode,
    encoder,
    metric: MetricSpec,
    conf_floor: float | None = None,
) -> tuple[Prototypes, np.ndarray, np.ndarray]:
    """Semi-supervised refinement: one update step driven by unlabeled items.

    Confidences are computed over the unlabeled set against the initial
    full-view prototypes, the prototypes take one confidence-weighted
    update, and queries are then classified inductively against the
    refined prototypes. ``conf_floor`` optionally drops unlabeled items
    whose best confidence falls below the threshold (their rows
    contribute no mass); by default every item contributes.

    Returns (refined prototypes, unlabeled confidences, query confidences).
    """
    if episode.unlabeled_x is None or episode.unlabeled_x.shape[0] == 0:
        raise ContractError("semi_infer needs a nonempty unlabeled set")
    full = VIEWS[0]
    emb_s = encode_batch(encoder, episode.support_x, full)
    emb_u = encode_batch(encoder, episode.unlabeled_x, full)
    emb_q = encode_batch(encoder, episode.query_x, full)
    protos = init_from_embeddings(emb_s, episode.support_y, episode.ways)
    u_conf = confidence(emb_u, protos, metric)
    mass = u_conf
    if conf_floor is not None:
        keep = u_conf.max(axis=1) >= conf_floor
        mass = u_conf * keep[:, None]
    refined = update_prototypes(
        emb_s, episode.support_y, episode.ways, emb_u, mass
    )
    q_conf = confidence(emb_q, refined, metric)
    return Prototypes(by_view={full.name: refined}, step=1), u_conf, q_conf


def predict_labels(conf) -> np.ndarray:
    """Most confident class per row, in {1..ways}; ties go to the lowest."""
    return np.argmax(nk.value_of(conf), axis=1) + 1


def check_confidence(conf, ways: int, tol: float = 1e-9) -> np.ndarray:
    """Validate a confidence matrix; returns it unchanged."""
    cv = np.asarray(conf, dtype=np.float64)
    if cv.ndim != 2 or cv.shape[1] != ways:
        raise ContractError(f"expected (n, {ways}) confidences, got {cv.shape}")
    if np.any(cv < 0.0) or np.any(cv > 1.0):
        raise ContractError("confidences must lie in [0, 1]")
    if np.any(np.abs(cv.sum(axis=1) - 1.0) > tol):
        raise ContractError("confidence rows must sum to 1")
    return cv
