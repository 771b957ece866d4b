"""Cost matrices and scheme-level matchers.

One-to-one matching assigns each ground-truth object a single query.
One-to-many matching repeats the ground truth ``K`` times and runs the same
Hungarian solver, so every object ends up with ``K`` distinct queries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from . import geometry
from .assignment import Assignment, hungarian
from .errors import CapacityError, ConfigError, InvalidGeometryError

PROB_EPS = 1e-8

SCHEMES = ("baseline", "hybrid_branch", "hybrid_epoch", "hybrid_layer")
SHARING = ("all", "heads_unshared", "decoder_unshared")


@dataclass(frozen=True)
class GroundTruthSet:
    boxes: np.ndarray
    labels: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self):
        boxes = geometry.as_box_array(self.boxes)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(boxes) != len(labels):
            raise InvalidGeometryError(f"{len(boxes)} boxes but {len(labels)} labels")
        if len(boxes):
            if np.any(boxes[:, 2:] <= 0):
                raise InvalidGeometryError("ground-truth boxes must have positive width and height")
            if np.any(boxes[:, :2] < 0) or np.any(boxes[:, :2] > 1):
                raise InvalidGeometryError("ground-truth centers must lie in [0, 1]")
            if np.any(labels < 0) or (self.num_classes is not None and np.any(labels >= self.num_classes)):
                raise InvalidGeometryError("label out of range")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return self.m


@dataclass(frozen=True)
class RepeatedTargets:
    """``K`` stacked copies of ``base``; flat item ``k*m + j`` is base item ``j``."""

    base: GroundTruthSet
    K: int

    @property
    def boxes(self) -> np.ndarray:
        return np.tile(self.base.boxes, (self.K, 1))

    @property
    def labels(self) -> np.ndarray:
        return np.tile(self.base.labels, self.K)

    @property
    def source_index(self) -> np.ndarray:
        """Base object index of every flattened item."""
        return np.tile(np.arange(self.base.m), self.K)

    def __len__(self) -> int:
        return self.K * self.base.m


Targets = Union[GroundTruthSet, RepeatedTargets]


@dataclass
class LayerPredictions:
    """Per-query class probabilities ``(Q, C)`` and center-size boxes ``(Q, 4)``."""

    class_scores: np.ndarray
    boxes: np.ndarray
    layer_index: int = 0

    def __post_init__(self):
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.class_scores.ndim != 2 or self.boxes.shape != (len(self.class_scores), 4):
            raise ConfigError(
                f"scores {self.class_scores.shape} and boxes {self.boxes.shape} do not describe the same queries"
            )

    @property
    def num_queries(self) -> int:
        return len(self.class_scores)

    @property
    def num_classes(self) -> int:
        return self.class_scores.shape[1]

    def select(self, idx) -> "LayerPredictions":
        return LayerPredictions(self.class_scores[idx], self.boxes[idx], self.layer_index)


@dataclass(frozen=True)
class MatchWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        ws = (self.w_cls, self.w_l1, self.w_giou)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ConfigError(f"weights must be nonnegative with at least one positive: {ws}")


def as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(x).limit_denominator(10**6)


@dataclass
class HybridConfig:
    """Scheme selector and hyper-parameters.

    ``n``/``T`` are the one-to-one and one-to-many query groups of the branch
    scheme. ``M`` and ``N`` are the single-group query counts of the epoch and
    layer schemes. ``K_epoch`` and ``K_layer`` are their repeat counts.
    """

    scheme: str = "baseline"
    n: int = 300
    T: int = 1500
    K: int = 6
    lam: float = 1.0
    rho: float = 2 / 3
    K_epoch: int = 10
    K_layer: int = 10
    L: int = 6
    L1: int = 4
    L2: int = 2
    M: int = 1800
    N: int = 1800
    sharing: str = "all"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.sharing not in SHARING:
            raise ConfigError(f"unknown sharing {self.sharing!r}; expected one of {SHARING}")
        for name in ("n", "T", "K", "K_epoch", "K_layer", "L", "L1", "L2", "M", "N"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.L < 1:
            raise ConfigError("L must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if not 0 <= as_fraction(self.rho) <= 1:
            raise ConfigError("rho must lie in [0, 1]")
        if self.scheme == "hybrid_layer" and self.L1 + self.L2 != self.L:
            raise ConfigError(f"hybrid_layer needs L1 + L2 == L, got {self.L1} + {self.L2} != {self.L}")
        if self.scheme in ("baseline", "hybrid_branch") and self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.scheme == "hybrid_epoch" and self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.scheme == "hybrid_layer" and self.N < 1:
            raise ConfigError("N must be >= 1")

    @property
    def one2one_queries(self) -> int:
        """Size of the group that is evaluated at inference time."""
        return {"baseline": self.n, "hybrid_branch": self.n, "hybrid_epoch": self.M, "hybrid_layer": self.N}[
            self.scheme
        ]

    @property
    def one2many_queries(self) -> int:
        """Size of the auxiliary group (only the branch scheme has one)."""
        return self.T if self.scheme == "hybrid_branch" else 0


def repeat_targets(g: GroundTruthSet, K: int) -> RepeatedTargets:
    """Stack ``K`` copies of ``g``. ``K == 0`` gives an empty view: no one-to-many supervision."""
    if K < 0:
        raise ConfigError("K must be >= 0")
    return RepeatedTargets(g, K)


def clamp_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def focal_class_cost(prob: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Matching cost per (query, class): positive focal term minus negative one."""
    p = clamp_prob(prob)
    neg = (1 - alpha) * (p**gamma) * (-np.log(1 - p))
    pos = alpha * ((1 - p) ** gamma) * (-np.log(p))
    return pos - neg


def build_cost_matrix(p: LayerPredictions, targets: Targets, w: MatchWeights = MatchWeights()) -> np.ndarray:
    """Weighted classification + L1 + (1 - GIoU) cost, shape ``(num_queries, len(targets))``.

    Empty targets give a ``(num_queries, 0)`` matrix.
    """
    if p.num_queries < 1:
        raise ConfigError("need at least one query")
    labels = targets.labels
    if len(labels) == 0:
        return np.zeros((p.num_queries, 0))
    l1, gi = geometry.pairwise_geometry(p.boxes, targets.boxes)
    cls = focal_class_cost(p.class_scores, w.focal_alpha, w.focal_gamma)[:, labels]
    return w.w_cls * cls + w.w_l1 * l1 + w.w_giou * (1 - gi)


def _solve(cost: np.ndarray) -> Assignment:
    if cost.shape[1] == 0:
        return Assignment.empty()
    return hungarian(cost)


def match_one2one(p: LayerPredictions, g: GroundTruthSet, w: MatchWeights = MatchWeights()) -> Assignment:
    """Hungarian matching of ``g`` against the queries; exactly ``g.m`` pairs."""
    if p.num_queries < g.m:
        raise CapacityError(f"{p.num_queries} queries cannot cover {g.m} targets")
    return _solve(build_cost_matrix(p, g, w))


def match_one2many(p: LayerPredictions, g_rep: RepeatedTargets, w: MatchWeights = MatchWeights()) -> Assignment:
    """Hungarian matching against ``K`` copies of the ground truth.

    Columns of the returned assignment index the flattened repeated view;
    ``g_rep.source_index[cols]`` gives the underlying objects.
    """
    if p.num_queries < len(g_rep):
        raise CapacityError(f"{p.num_queries} queries cannot cover {len(g_rep)} repeated targets")
    return _solve(build_cost_matrix(p, g_rep, w))


def one2many_epochs(rho, total_epochs: int) -> int:
    """Number of leading epochs whose index satisfies ``e < rho * total_epochs``."""
    return math.ceil(as_fraction(rho) * total_epochs)


def uses_one2many_epoch(cfg: HybridConfig, epoch_index: int, total_epochs: int) -> bool:
    return epoch_index < one2many_epochs(cfg.rho, total_epochs)


def positive_supervision_count(cfg: HybridConfig, epochs: int) -> Union[int, Fraction]:
    """Positive queries per ground-truth object, summed over epochs and decoder layers.

    Computed in exact rational arithmetic; integral results come back as ``int``.
    """
    L = cfg.L
    if cfg.scheme == "baseline":
        total = Fraction(epochs * L)
    elif cfg.scheme == "hybrid_branch":
        total = Fraction((1 + cfg.K) * epochs * L)
    elif cfg.scheme == "hybrid_epoch":
        rho = as_fraction(cfg.rho)
        total = cfg.K_epoch * rho * epochs * L + (1 - rho) * epochs * L
    else:
        total = Fraction(cfg.K_layer * epochs * cfg.L1 + epochs * cfg.L2)
    return int(total) if total.denominator == 1 else total
