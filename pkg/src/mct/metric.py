"""Distance metrics over embeddings, including meta-learned scaling.

Four kinds are supported. ``euclid`` is the squared Euclidean distance
and ``scaled`` multiplies it by a learnable temperature s. The two
learned kinds first project both embeddings onto the unit sphere and
then divide by the output of a small calibrated network g: ``instance``
evaluates g once per embedding (each side scaled by its own g), while
``pair`` evaluates one shared g on the concatenated (query, prototype)
pair. g ends in a sigmoid that is scaled by exp(alpha) and shifted by
exp(beta), so it is positive for every parameter setting and starts in
(1, 2) at the fresh alpha = beta = 0 point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import ContractError, DomainError

__all__ = [
    "ScalerParams",
    "MetricSpec",
    "scaler_eval",
    "distance",
    "pairwise",
    "METRIC_KINDS",
]

METRIC_KINDS = ("euclid", "scaled", "instance", "pair")

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ScalerParams:
    """Weights of the scaling network g.

    Two affine maps with a rectifier between them, a final sigmoid, and
    the positivity calibration exp(alpha)*sigmoid(h) + exp(beta). Both
    alpha and beta start at zero.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if self.w1.ndim != 2 or self.b1.shape != (self.w1.shape[1],):
            raise ContractError("scaler first layer shapes are inconsistent")
        if self.w2.shape != (self.w1.shape[1], 1) or self.b2.shape != (1,):
            raise ContractError("scaler second layer shapes are inconsistent")
        if np.ndim(self.alpha) != 0 or np.ndim(self.beta) != 0:
            raise ContractError("alpha and beta must be scalars")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @staticmethod
    def init(in_dim: int, rng: np.random.Generator, *, hidden: int = 32) -> "ScalerParams":
        return ScalerParams(
            w1=rng.standard_normal((in_dim, hidden)) * np.sqrt(2.0 / in_dim),
            b1=np.zeros(hidden),
            w2=rng.standard_normal((hidden, 1)) * np.sqrt(2.0 / hidden),
            b2=np.zeros(1),
            alpha=np.asarray(0.0),
            beta=np.asarray(0.0),
        )

    def to_named(self, prefix: str = "metric.scaler") -> dict[str, np.ndarray]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
            f"{prefix}.alpha": np.asarray(self.alpha, dtype=np.float64),
            f"{prefix}.beta": np.asarray(self.beta, dtype=np.float64),
        }

    @staticmethod
    def from_named(named: dict[str, np.ndarray], prefix: str = "metric.scaler") -> "ScalerParams":
        return ScalerParams(
            w1=named[f"{prefix}.w1"],
            b1=named[f"{prefix}.b1"],
            w2=named[f"{prefix}.w2"],
            b2=named[f"{prefix}.b2"],
            alpha=np.asarray(named[f"{prefix}.alpha"]).reshape(()),
            beta=np.asarray(named[f"{prefix}.beta"]).reshape(()),
        )


def scaler_eval(scaler: ScalerParams, features, tape: nk.Tape | None = None):
    """g(features): strictly positive, in (exp(beta), exp(alpha)+exp(beta)).

    Accepts one feature vector (returns a scalar) or a batch of rows
    (returns an (n, 1) column).
    """
    fv = nk.value_of(features)
    single = fv.ndim == 1
    if single:
        features = nk.reshape(features, (1, fv.shape[0]))
        fv = nk.value_of(features)
    if fv.ndim != 2 or fv.shape[1] != scaler.in_dim:
        raise ContractError(
            f"scaler expects rows of width {scaler.in_dim}, got {fv.shape}"
        )
    plain = scaler.to_named()
    if tape is None:
        named = plain.__getitem__
    else:
        named = lambda k: tape.param(plain[k], name=k)
    h = nk.relu(nk.add(nk.matmul(features, named("metric.scaler.w1")),
                       named("metric.scaler.b1")))
    h = nk.add(nk.matmul(h, named("metric.scaler.w2")), named("metric.scaler.b2"))
    g = nk.add(
        nk.mul(nk.exp(named("metric.scaler.alpha")), nk.sigmoid(h)),
        nk.exp(named("metric.scaler.beta")),
    )
    if single:
        return nk.reshape(g, ())
    return g


@dataclass(frozen=True)
class MetricSpec:
    """A distance kind with exactly the parameters that kind needs."""

    kind: str
    s: float | None = None
    scaler: ScalerParams | None = None

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ContractError(f"unknown metric kind {self.kind!r}")
        if self.kind == "scaled":
            if self.s is None or self.scaler is not None:
                raise ContractError("scaled kind takes s and nothing else")
            if not np.isfinite(self.s):
                raise DomainError("s must be finite")
        elif self.kind in ("instance", "pair"):
            if self.scaler is None or self.s is not None:
                raise ContractError(f"{self.kind} kind takes a scaler and nothing else")
        elif self.s is not None or self.scaler is not None:
            raise ContractError("euclid kind takes no parameters")

    @staticmethod
    def euclid() -> "MetricSpec":
        return MetricSpec(kind="euclid")

    @staticmethod
    def scaled(s: float = 7.5) -> "MetricSpec":
        return MetricSpec(kind="scaled", s=float(s))

    @staticmethod
    def instance(dim: int, rng: np.random.Generator) -> "MetricSpec":
        return MetricSpec(kind="instance", scaler=ScalerParams.init(dim, rng))

    @staticmethod
    def pair(dim: int, rng: np.random.Generator) -> "MetricSpec":
        return MetricSpec(kind="pair", scaler=ScalerParams.init(2 * dim, rng))

    def to_named(self) -> dict[str, np.ndarray]:
        if self.kind == "scaled":
            return {"metric.s": np.asarray(float(self.s))}
        if self.scaler is not None:
            return self.scaler.to_named()
        return {}

    @staticmethod
    def from_named(kind: str, named: dict[str, np.ndarray]) -> "MetricSpec":
        if kind == "euclid":
            return MetricSpec.euclid()
        if kind == "scaled":
            return MetricSpec.scaled(float(np.asarray(named["metric.s"]).reshape(())))
        return MetricSpec(kind=kind, scaler=ScalerParams.from_named(named))


def _normalize(x, tape: nk.Tape | None):
    """Project rows onto the unit sphere; tiny norms are a domain error."""
    xv = nk.value_of(x)
    norms_v = np.sqrt((xv * xv).sum(axis=1))
    if np.any(norms_v < _NORM_FLOOR):
        raise DomainError(
            f"cannot normalize embeddings with norm below {_NORM_FLOOR}"
        )
    norms = nk.sqrt(nk.asum(nk.mul(x, x), axis=1, keepdims=True))
    return nk.div(x, norms)


def _sq_diff(a, b):
    """All-pairs squared distances via an explicit (n, m, l) difference."""
    av, bv = nk.value_of(a), nk.value_of(b)
    n, l = av.shape
    m = bv.shape[0]
    diff = nk.sub(nk.reshape(a, (n, 1, l)), nk.reshape(b, (1, m, l)))
    return nk.asum(nk.mul(diff, diff), axis=2)


def pairwise(spec: MetricSpec, a, b, tape: nk.Tape | None = None):
    """Distance matrix between row sets: entry (i, j) = d(a_i, b_j).

    ``a`` is the query side and ``b`` the prototype side; the pair kind
    consumes concatenations in exactly that order. Identical rows map
    to exactly zero under every kind.
    """
    av, bv = nk.value_of(a), nk.value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ContractError("pairwise expects row sets of one embedding width")
    if spec.kind == "euclid":
        return _sq_diff(a, b)
    if spec.kind == "scaled":
        s = float(spec.s) if tape is None else tape.param(np.asarray(float(spec.s)), name="metric.s")
        return nk.mul(s, _sq_diff(a, b))
    n, l = av.shape
    m = bv.shape[0]
    a_hat = _normalize(a, tape)
    b_hat = _normalize(b, tape)
    if spec.kind == "instance":
        g_a = scaler_eval(spec.scaler, a, tape)  # raw embeddings feed g
        g_b = scaler_eval(spec.scaler, b, tape)
        return _sq_diff(nk.div(a_hat, g_a), nk.div(b_hat, g_b))
    # pair kind: one g per (query, prototype) combination
    pairs = nk.concat([nk.repeat_rows(a, m), nk.tile_rows(b, n)], axis=1)
    g = nk.reshape(scaler_eval(spec.scaler, pairs, tape), (n, m))
    return nk.div(_sq_diff(a_hat, b_hat), nk.mul(g, g))


def distance(spec: MetricSpec, a1, a2, tape: nk.Tape | None = None):
    """d(a1, a2) for two single embeddings (flat vectors)."""
    v1, v2 = nk.value_of(a1), nk.value_of(a2)
    if v1.shape != v2.shape:
        raise ContractError("distance expects embeddings of one shape")
    if v1.ndim != 1:
        a1 = nk.reshape(a1, (v1.size,))
        a2 = nk.reshape(a2, (v2.size,))
        v1 = nk.value_of(a1)
    d = pairwise(spec, nk.reshape(a1, (1, v1.size)), nk.reshape(a2, (1, v1.size)), tape)
    return nk.reshape(d, ())
