"""Set losses over matched pairs and their per-scheme aggregation.

Every loss returns a :class:`LossBreakdown` that also carries analytic
gradients with respect to the class probabilities and center-size boxes of
each input layer. The assignment is a constant of the step; no gradient flows
through the argmin.

Box terms and the classification term are divided by the number of matched
pairs in that layer and branch (or by 1 with no pairs), so the one-to-many
weight ``lam`` acts as a pure branch weight.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import geometry
from .assignment import Assignment, hungarian
from .errors import CapacityError, ConfigError
from .matching import (
    PROB_EPS,
    GroundTruthSet,
    HybridConfig,
    LayerPredictions,
    MatchWeights,
    RepeatedTargets,
    Targets,
    focal_class_cost,
    match_one2many,
    match_one2one,
    repeat_targets,
    uses_one2many_epoch,
)


@dataclass
class LossGradients:
    d_scores: np.ndarray
    d_boxes: np.ndarray

    @classmethod
    def zeros(cls, num_queries: int, num_classes: int) -> "LossGradients":
        return cls(np.zeros((num_queries, num_classes)), np.zeros((num_queries, 4)))

    def scaled(self, s: float) -> "LossGradients":
        return LossGradients(s * self.d_scores, s * self.d_boxes)


@dataclass
class LossBreakdown:
    """Weighted loss components.

    ``grads`` maps a query group (``"main"``, and ``"aux"`` for the
    one-to-many branch) to one :class:`LossGradients` per input layer.
    ``assignments`` mirrors it with the per-layer matching results.
    """

    cls: float = 0.0
    l1: float = 0.0
    giou: float = 0.0
    total: float = 0.0
    num_pairs: int = 0
    layers: list = field(default_factory=list, repr=False)
    grads: dict = field(default_factory=dict, repr=False)
    assignments: dict = field(default_factory=dict, repr=False)
    one2one: Optional["LossBreakdown"] = field(default=None, repr=False)
    one2many: Optional["LossBreakdown"] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# elementwise terms


def focal_elementwise(prob: np.ndarray, onehot: np.ndarray, alpha: float, gamma: float):
    """Sigmoid focal loss per entry and its derivative with respect to ``prob``.

    The derivative is zero where ``prob`` was clamped.
    """
    p = np.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    active = (prob >= PROB_EPS) & (prob <= 1.0 - PROB_EPS)
    q = 1 - p
    log_p = np.log(p)
    log_q = np.log(q)
    pos = alpha * q**gamma * (-log_p)
    neg = (1 - alpha) * p**gamma * (-log_q)
    dpos = alpha * gamma * q ** (gamma - 1) * log_p - alpha * q**gamma / p
    dneg = -(1 - alpha) * gamma * p ** (gamma - 1) * log_q + (1 - alpha) * p**gamma / q
    value = np.where(onehot, pos, neg)
    grad = np.where(onehot, dpos, dneg) * active
    return value, grad


def _onehot(num_queries: int, num_classes: int, rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
    t = np.zeros((num_queries, num_classes), dtype=bool)
    t[rows, labels] = True
    return t


def _pair_terms(pred_boxes: np.ndarray, tgt_boxes: np.ndarray):
    """Per-pair L1 and (1 - GIoU) values with their box gradients."""
    diff = pred_boxes - tgt_boxes
    l1 = np.abs(diff).sum(axis=1)
    dl1 = np.sign(diff)
    g, dg = geometry.paired_giou_and_grad(pred_boxes, tgt_boxes)
    return l1, dl1, 1 - g, -dg


def _check_assignment(p: LayerPredictions, targets: Targets, a: Assignment):
    if len(a) and (
        a.rows.min() < 0 or a.rows.max() >= p.num_queries or a.cols.min() < 0 or a.cols.max() >= len(targets)
    ):
        raise IndexError("assignment references out-of-range indices")


def _weights(w: MatchWeights, loss_w: Optional[MatchWeights]) -> MatchWeights:
    return w if loss_w is None else loss_w


def _reduce(cls_elem, cls_grad, l1, dl1, gl, dgl, rows, num_queries, num_classes, lw: MatchWeights):
    norm = float(max(len(rows), 1))
    cls = cls_elem.sum() / norm
    l1_v = l1.sum() / norm
    gl_v = gl.sum() / norm
    d_scores = lw.w_cls * cls_grad / norm
    d_boxes = np.zeros((num_queries, 4))
    if len(rows):
        d_boxes[rows] = (lw.w_l1 * dl1 + lw.w_giou * dgl) / norm
    total = lw.w_cls * cls + lw.w_l1 * l1_v + lw.w_giou * gl_v
    br = LossBreakdown(float(cls), float(l1_v), float(gl_v), float(total), len(rows))
    return br, LossGradients(d_scores, d_boxes)


def set_loss(
    p: LayerPredictions,
    targets: Targets,
    a: Assignment,
    w: MatchWeights = MatchWeights(),
    loss_w: Optional[MatchWeights] = None,
) -> tuple[LossBreakdown, LossGradients]:
    """Focal classification over every query plus L1 and GIoU over matched pairs."""
    _check_assignment(p, targets, a)
    lw = _weights(w, loss_w)
    labels = targets.labels
    onehot = _onehot(p.num_queries, p.num_classes, a.rows, labels[a.cols])
    cls_elem, cls_grad = focal_elementwise(p.class_scores, onehot, lw.focal_alpha, lw.focal_gamma)
    if len(a):
        l1, dl1, gl, dgl = _pair_terms(p.boxes[a.rows], targets.boxes[a.cols])
    else:
        l1 = dl1 = gl = dgl = np.zeros((0,))
    return _reduce(cls_elem, cls_grad, l1, dl1, gl, dgl, a.rows, p.num_queries, p.num_classes, lw)


# ---------------------------------------------------------------------------
# aggregation over layers


def _combine(parts: Sequence[tuple[LossBreakdown, float]]) -> LossBreakdown:
    out = LossBreakdown()
    for br, s in parts:
        out.cls += s * br.cls
        out.l1 += s * br.l1
        out.giou += s * br.giou
        out.total += s * br.total
        out.num_pairs += br.num_pairs
    return out


def _layer_loss(p, targets, matcher, w, loss_w):
    if len(targets) == 0:
        a = Assignment.empty()
    else:
        a = matcher(p, targets, w)
    br, gr = set_loss(p, targets, a, w, loss_w)
    return br, gr, a


def _unsupervised(p: LayerPredictions):
    return LossBreakdown(), LossGradients.zeros(p.num_queries, p.num_classes), Assignment.empty()


def _over_layers(P, per_layer, group="main") -> LossBreakdown:
    """``per_layer[l]`` is ``(targets, matcher)`` or ``None`` for no supervision."""
    if len(P) < 1:
        raise ConfigError("need at least one decoder layer")
    layers, grads, assigns = [], [], []
    for p, spec in zip(P, per_layer):
        if spec is None:
            br, gr, a = _unsupervised(p)
        else:
            targets, matcher, w, loss_w = spec
            br, gr, a = _layer_loss(p, targets, matcher, w, loss_w)
        layers.append(br)
        grads.append(gr)
        assigns.append(a)
    out = _combine([(br, 1.0) for br in layers])
    out.layers = layers
    out.grads = {group: grads}
    out.assignments = {group: assigns}
    return out


def one2one_loss(P, g: GroundTruthSet, w: MatchWeights = MatchWeights(), loss_w=None) -> LossBreakdown:
    """Sum over layers of independently matched one-to-one set losses."""
    return _over_layers(P, [(g, match_one2one, w, loss_w)] * len(P))


def one2many_loss(P, g_rep: RepeatedTargets, w: MatchWeights = MatchWeights(), loss_w=None) -> LossBreakdown:
    """Sum over layers of set losses against the repeated ground truth."""
    if len(g_rep) == 0 and g_rep.K == 0:
        return _over_layers(P, [None] * len(P))
    return _over_layers(P, [(g_rep, match_one2many, w, loss_w)] * len(P))


def _relabel(br: LossBreakdown, group: str) -> LossBreakdown:
    br.grads = {group: br.grads["main"]}
    br.assignments = {group: br.assignments["main"]}
    return br


def hybrid_branch_loss(P, P_aux, g: GroundTruthSet, cfg: HybridConfig, w=MatchWeights(), loss_w=None) -> LossBreakdown:
    """``one2one(P) + lam * one2many(P_aux)``; the auxiliary branch drops out when K, T or lam is 0."""
    if cfg.scheme != "hybrid_branch":
        raise ConfigError(f"hybrid_branch_loss called with scheme {cfg.scheme!r}")
    main = one2one_loss(P, g, w, loss_w)
    if cfg.K == 0 or cfg.T == 0 or len(P_aux) == 0 or P_aux[0].num_queries == 0:
        out = _combine([(main, 1.0)])
        out.layers = main.layers
        out.grads = dict(main.grads)
        out.assignments = dict(main.assignments)
        out.one2one, out.one2many = main, None
        return out
    aux = _relabel(one2many_loss(P_aux, repeat_targets(g, cfg.K), w, loss_w), "aux")
    return _merge_branches(main, aux, cfg.lam)


def _merge_branches(main: LossBreakdown, aux: LossBreakdown, lam: float) -> LossBreakdown:
    out = _combine([(main, 1.0), (aux, lam)])
    out.layers = main.layers + aux.layers
    out.grads = {"main": main.grads["main"], "aux": [gr.scaled(lam) for gr in aux.grads["aux"]]}
    out.assignments = {"main": main.assignments["main"], "aux": aux.assignments["aux"]}
    out.one2one, out.one2many = main, aux
    return out


def hybrid_epoch_loss(P, g: GroundTruthSet, cfg: HybridConfig, epoch_index: int, total_epochs: int,
                      w=MatchWeights(), loss_w=None) -> LossBreakdown:
    """One-to-many (``K_epoch`` repeats) during the leading ``rho`` share of epochs, one-to-one after."""
    if cfg.scheme != "hybrid_epoch":
        raise ConfigError(f"hybrid_epoch_loss called with scheme {cfg.scheme!r}")
    if uses_one2many_epoch(cfg, epoch_index, total_epochs):
        return one2many_loss(P, repeat_targets(g, cfg.K_epoch), w, loss_w)
    return one2one_loss(P, g, w, loss_w)


def hybrid_layer_loss(P, g: GroundTruthSet, cfg: HybridConfig, w=MatchWeights(), loss_w=None) -> LossBreakdown:
    """First ``L1`` layers against ``K_layer`` repeats, last ``L2`` layers one-to-one."""
    if cfg.scheme != "hybrid_layer":
        raise ConfigError(f"hybrid_layer_loss called with scheme {cfg.scheme!r}")
    if len(P) != cfg.L1 + cfg.L2:
        raise ConfigError(f"expected {cfg.L1 + cfg.L2} layers, got {len(P)}")
    g_rep = repeat_targets(g, cfg.K_layer)
    many = None if cfg.K_layer == 0 else (g_rep, match_one2many, w, loss_w)
    return _over_layers(P, [many] * cfg.L1 + [(g, match_one2one, w, loss_w)] * cfg.L2)


def baseline_loss(P, g, w=MatchWeights(), loss_w=None) -> LossBreakdown:
    return one2one_loss(P, g, w, loss_w)


# ---------------------------------------------------------------------------
# naive vs merged hybrid-branch evaluation


def naive_hybrid_loss(P, P_aux, g: GroundTruthSet, cfg: HybridConfig, w=MatchWeights(), loss_w=None) -> LossBreakdown:
    """Two independent criterion passes, one per branch."""
    return hybrid_branch_loss(P, P_aux, g, cfg, w, loss_w)


def optimized_hybrid_loss(P, P_aux, g: GroundTruthSet, cfg: HybridConfig, w=MatchWeights(),
                          loss_w=None) -> LossBreakdown:
    """Single cost and loss evaluation over the concatenated query groups.

    The cost is computed once for ``main ++ aux`` queries against the base
    ground truth; the one-to-many block is the column-tiled lower slice. The
    loss terms are likewise evaluated once over the concatenation and reduced
    per branch, so value, gradients and pairs match :func:`naive_hybrid_loss`.
    """
    if cfg.scheme != "hybrid_branch":
        raise ConfigError(f"optimized_hybrid_loss called with scheme {cfg.scheme!r}")
    if cfg.K == 0 or cfg.T == 0 or len(P_aux) == 0 or P_aux[0].num_queries == 0:
        return hybrid_branch_loss(P, P_aux, g, cfg, w, loss_w)
    lw = _weights(w, loss_w)
    K, m = cfg.K, g.m
    main_layers, aux_layers = [], []
    main_grads, aux_grads, main_as, aux_as = [], [], [], []
    for p, q in zip(P, P_aux):
        n = p.num_queries
        nq = n + q.num_queries
        scores = np.concatenate([p.class_scores, q.class_scores])
        boxes = np.concatenate([p.boxes, q.boxes])
        C = scores.shape[1]

        if m:
            if n < m:
                raise CapacityError(f"{n} queries cannot cover {m} targets")
            if q.num_queries < K * m:
                raise CapacityError(f"{q.num_queries} queries cannot cover {K * m} repeated targets")
            l1m, gim = geometry.pairwise_geometry(boxes, g.boxes)
            clsm = focal_class_cost(scores, w.focal_alpha, w.focal_gamma)[:, g.labels]
            cost = w.w_cls * clsm + w.w_l1 * l1m + w.w_giou * (1 - gim)
            a1 = hungarian(cost[:n])
            a2 = hungarian(np.tile(cost[n:], (1, K)))
        else:
            a1 = a2 = Assignment.empty()

        # one loss evaluation over the concatenated outputs and targets
        all_labels = np.concatenate([g.labels, np.tile(g.labels, K)])
        all_boxes = np.concatenate([g.boxes, np.tile(g.boxes, (K, 1))])
        rows = np.concatenate([a1.rows, a2.rows + n])
        cols = np.concatenate([a1.cols, a2.cols + m])
        onehot = _onehot(nq, C, rows, all_labels[cols])
        cls_elem, cls_grad = focal_elementwise(scores, onehot, lw.focal_alpha, lw.focal_gamma)
        if len(rows):
            l1, dl1, gl, dgl = _pair_terms(boxes[rows], all_boxes[cols])
        else:
            l1 = dl1 = gl = dgl = np.zeros((0, 4))
        k = len(a1)
        b1, g1 = _reduce(cls_elem[:n], cls_grad[:n], l1[:k], dl1[:k], gl[:k], dgl[:k], a1.rows, n, C, lw)
        b2, g2 = _reduce(cls_elem[n:], cls_grad[n:], l1[k:], dl1[k:], gl[k:], dgl[k:], a2.rows, nq - n, C, lw)
        main_layers.append(b1)
        aux_layers.append(b2)
        main_grads.append(g1)
        aux_grads.append(g2)
        main_as.append(a1)
        aux_as.append(a2)

    main = _combine([(b, 1.0) for b in main_layers])
    main.layers, main.grads, main.assignments = main_layers, {"main": main_grads}, {"main": main_as}
    aux = _combine([(b, 1.0) for b in aux_layers])
    aux.layers, aux.grads, aux.assignments = aux_layers, {"aux": aux_grads}, {"aux": aux_as}
    return _merge_branches(main, aux, cfg.lam)
