"""Property and oracle checks runnable outside pytest (``hybridmatch verify``).

Suites:

``assignment``   solver vs. exhaustive oracle, output validity, NaN rejection
``losses``       finite-difference gradients (set losses and full toy model),
                 one-to-many multiplicity, positive-count arithmetic, degeneration
``isolation``    main-group outputs bitwise unchanged under auxiliary-query edits
``equivalence``  naive vs. merged hybrid-branch loss
``all``          everything above

Every check returns a :class:`CheckResult` with pass/total counts.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .assignment import brute_force, hungarian
from .errors import ConfigError, HybridMatchError, InvalidCostError
from .losses import hybrid_branch_loss, naive_hybrid_loss, one2one_loss, optimized_hybrid_loss, set_loss
from .matching import (
    GroundTruthSet,
    HybridConfig,
    LayerPredictions,
    MatchWeights,
    match_one2many,
    match_one2one,
    positive_supervision_count,
    repeat_targets,
)
from .toymodel.decoder import ToyDecoder, backward, collate, to_layer_predictions
from .toymodel.scenes import generate_scene

FD_STEP = 1e-6
FD_RTOL = 1e-4
FAULTS = ("nan-cost",)


@dataclass
class CheckResult:
    name: str
    passed: int = 0
    total: int = 0
    failures: list = field(default_factory=list)
    seconds: float = 0.0
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.total > 0 and self.passed == self.total

    def record(self, ok: bool, message: str = "") -> None:
        self.total += 1
        if ok:
            self.passed += 1
        elif len(self.failures) < 10:
            self.failures.append(message)

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.passed}/{self.total} in {self.seconds:.2f}s{extra}"


def _timed(fn: Callable[..., CheckResult]):
    def wrapper(*args, **kwargs) -> CheckResult:
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the Euclidean norm (0 when both vanish)."""
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


# ---------------------------------------------------------------------------
# random instances


def random_truth(rng: np.random.Generator, m: int, C: int) -> GroundTruthSet:
    wh = rng.uniform(0.05, 0.4, (m, 2))
    c = rng.uniform(wh / 2, 1 - wh / 2)
    return GroundTruthSet(np.c_[c, wh], rng.integers(0, C, m), C)


def random_predictions(rng: np.random.Generator, q: int, C: int, layer: int = 0) -> LayerPredictions:
    wh = rng.uniform(0.05, 0.5, (q, 2))
    c = rng.uniform(0.1, 0.9, (q, 2))
    return LayerPredictions(rng.uniform(0.02, 0.98, (q, C)), np.c_[c, wh], layer_index=layer)


# ---------------------------------------------------------------------------
# assignment


@_timed
def check_assignment_oracle(count: int = 500, seed: int = 0, inject: Optional[str] = None) -> CheckResult:
    """Solver total cost equals the exhaustive optimum exactly (min dimension <= 7)."""
    res = CheckResult("assignment oracle")
    rng = np.random.default_rng(seed)
    for i in range(count):
        short = int(rng.integers(1, 8))
        long = int(rng.integers(short, 9))
        shape = (short, long) if rng.random() < 0.5 else (long, short)
        c = rng.random(shape)
        if inject == "nan-cost":
            c[rng.integers(shape[0]), rng.integers(shape[1])] = np.nan
        try:
            got, want = hungarian(c).total_cost, brute_force(c).total_cost
        except InvalidCostError as exc:
            res.record(False, f"instance {i} {shape}: {exc}")
            continue
        res.record(got == want, f"instance {i} {shape}: {got!r} != {want!r}")
    return res


@_timed
def check_assignment_validity(count: int = 200, seed: int = 1) -> CheckResult:
    """Matchings are injective, of size min(rows, cols), and report the summed cost."""
    res = CheckResult("assignment validity")
    rng = np.random.default_rng(seed)
    for i in range(count):
        shape = tuple(int(x) for x in rng.integers(1, 60, 2))
        c = rng.random(shape)
        a = hungarian(c)
        ok = (len(a) == min(shape) and len(set(a.rows.tolist())) == len(a) == len(set(a.cols.tolist()))
              and abs(a.total_cost - c[a.rows, a.cols].sum()) <= 1e-12 * max(1, len(a)))
        res.record(ok, f"instance {i} {shape}")
    return res


@_timed
def check_nan_rejected() -> CheckResult:
    res = CheckResult("non-finite cost rejected")
    for bad in (np.nan, np.inf, -np.inf):
        c = np.zeros((3, 4))
        c[1, 2] = bad
        try:
            hungarian(c)
            res.record(False, f"{bad} accepted")
        except InvalidCostError:
            res.record(True)
    return res


# ---------------------------------------------------------------------------
# losses


def _central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f(x)
        flat[k] = old - h
        down = f(x)
        flat[k] = old
        gf[k] = (up - down) / (2 * h)
    return g


@_timed
def check_set_loss_gradients(count: int = 50, seed: int = 2) -> CheckResult:
    """Analytic focal / L1 / GIoU set-loss gradients against central differences."""
    res = CheckResult("set-loss gradients")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(count):
        C, q, m = int(rng.integers(2, 5)), int(rng.integers(3, 7)), int(rng.integers(1, 4))
        w = MatchWeights(float(rng.uniform(0.5, 3)), float(rng.uniform(0.5, 6)), float(rng.uniform(0.5, 3)))
        g = random_truth(rng, m, C)
        p = random_predictions(rng, q, C)
        many = rng.random() < 0.5
        targets = repeat_targets(g, 2) if many and q >= 2 * m else g
        a = match_one2many(p, targets, w) if targets is not g else match_one2one(p, g, w)
        _, grads = set_loss(p, targets, a, w)

        def f_scores(s):
            return set_loss(LayerPredictions(s, p.boxes), targets, a, w)[0].total

        def f_boxes(b):
            return set_loss(LayerPredictions(p.class_scores, b), targets, a, w)[0].total

        e1 = rel_err(grads.d_scores, _central_difference(f_scores, p.class_scores.copy()))
        e2 = rel_err(grads.d_boxes, _central_difference(f_boxes, p.boxes.copy()))
        worst = max(worst, e1, e2)
        res.record(e1 < FD_RTOL and e2 < FD_RTOL, f"instance {i}: rel err scores {e1:.2e}, boxes {e2:.2e}")
    res.detail = f"max rel err {worst:.2e}"
    return res


MINI = dict(d=8, C=3, n=4, T=8, L=2, heads=2, ffn=16)


def _fixed_match_objective(model: ToyDecoder, scene, cfg: HybridConfig, br, w: MatchWeights) -> float:
    """Hybrid-branch loss with the assignments of ``br`` held fixed."""
    tokens, valid = collate([scene])
    with torch.no_grad():
        preds = to_layer_predictions(model.run(tokens, valid))
    rep = repeat_targets(scene.truth, cfg.K)
    total = 0.0
    for p, a in zip(preds["main"], br.assignments["main"]):
        total += set_loss(p, scene.truth, a, w)[0].total
    for p, a in zip(preds["aux"], br.assignments.get("aux", [])):
        total += cfg.lam * set_loss(p, rep, a, w)[0].total
    return total


@_timed
def check_model_gradients(count: int = 50, seed: int = 3, coords: int = 48, directions: int = 2) -> CheckResult:
    """Toy-decoder parameter gradients of the hybrid-branch loss against central differences.

    Miniature configuration (d=8, n+T=12). Per instance the gradient is
    checked on ``coords`` random parameter coordinates and along
    ``directions`` random unit directions in parameter space.
    """
    res = CheckResult("toy-model gradients")
    rng = np.random.default_rng(seed)
    worst = 0.0
    w = MatchWeights()
    for i in range(count):
        sharing = ("all", "heads_unshared", "decoder_unshared")[i % 3]
        model = ToyDecoder(**MINI, sharing=sharing, seed=int(rng.integers(2**32)))
        scene = generate_scene(int(rng.integers(2**32)), m_range=(1, 2), C=MINI["C"], d=MINI["d"],
                               distractor_count=2)
        cfg = HybridConfig(scheme="hybrid_branch", n=MINI["n"], T=MINI["T"], K=int(rng.integers(1, 5)) if
                           scene.truth.m == 1 else int(rng.integers(1, 3)), lam=float(rng.uniform(0.5, 2)),
                           L=MINI["L"])
        tokens, valid = collate([scene])
        with torch.no_grad():
            preds = to_layer_predictions(model.run(tokens, valid))
        br = hybrid_branch_loss(preds["main"], preds["aux"], scene.truth, cfg, w)
        grads = backward(model, scene, br.grads)
        names = [nm for nm, _ in model.named_parameters()]
        params = dict(model.named_parameters())
        flat_grad = np.concatenate([grads[nm].ravel() for nm in names])
        sizes = [params[nm].numel() for nm in names]
        offsets = np.cumsum([0] + sizes)

        def objective() -> float:
            return _fixed_match_objective(model, scene, cfg, br, w)

        def shift(vec: np.ndarray, scale: float) -> None:
            with torch.no_grad():
                for k, nm in enumerate(names):
                    part = vec[offsets[k]:offsets[k + 1]]
                    if np.any(part):
                        params[nm].add_(torch.from_numpy(scale * part.reshape(params[nm].shape)))

        def derivative(vec: np.ndarray) -> float:
            shift(vec, FD_STEP)
            up = objective()
            shift(vec, -2 * FD_STEP)
            down = objective()
            shift(vec, FD_STEP)
            return (up - down) / (2 * FD_STEP)

        picks = rng.choice(len(flat_grad), size=min(coords, len(flat_grad)), replace=False)
        num = np.empty(len(picks))
        for j, k in enumerate(picks):
            e = np.zeros(len(flat_grad))
            e[k] = 1.0
            num[j] = derivative(e)
        e_coord = rel_err(flat_grad[picks], num)
        e_dir = 0.0
        for _ in range(directions):
            v = rng.standard_normal(len(flat_grad))
            v /= np.linalg.norm(v)
            e_dir = max(e_dir, rel_err(np.array([flat_grad @ v]), np.array([derivative(v)])))
        worst = max(worst, e_coord, e_dir)
        res.record(e_coord < FD_RTOL and e_dir < FD_RTOL,
                   f"instance {i} ({sharing}): coords {e_coord:.2e}, directions {e_dir:.2e}")
    res.detail = f"max rel err {worst:.2e}"
    return res


@_timed
def check_one2many_multiplicity(count: int = 100, seed: int = 4) -> CheckResult:
    """With T >= K*m every ground-truth object is matched exactly K times."""
    res = CheckResult("one-to-many multiplicity")
    rng = np.random.default_rng(seed)
    for i in range(count):
        K, m, C = int(rng.integers(1, 9)), int(rng.integers(1, 9)), 5
        T = K * m + int(rng.integers(0, 20))
        g = random_truth(rng, m, C)
        rep = repeat_targets(g, K)
        a = match_one2many(random_predictions(rng, T, C), rep)
        counts = np.bincount(rep.source_index[a.cols], minlength=m)
        res.record(bool(np.all(counts == K)) and len(set(a.rows.tolist())) == len(a),
                   f"instance {i}: K={K} m={m} T={T} counts={counts.tolist()}")
    return res


REFERENCE_SETTINGS = {
    "hybrid_branch": dict(scheme="hybrid_branch", K=6, L=6),
    "hybrid_epoch": dict(scheme="hybrid_epoch", K_epoch=10, rho="2/3", L=6),
    "hybrid_layer": dict(scheme="hybrid_layer", K_layer=10, L=6, L1=4, L2=2),
}


@_timed
def check_positive_counts() -> CheckResult:
    """All three schemes give 504 positives per object at 12 epochs with 6 layers."""
    res = CheckResult("positive-supervision counts")
    for name, kw in REFERENCE_SETTINGS.items():
        got = positive_supervision_count(HybridConfig(**kw), 12)
        res.record(got == 504 and isinstance(got, int), f"{name}: {got!r}")
    base = positive_supervision_count(HybridConfig(scheme="baseline", L=6), 12)
    res.record(base == 72, f"baseline: {base!r}")
    return res


@_timed
def check_degeneration(count: int = 20, seed: int = 5) -> CheckResult:
    """hybrid_branch with K=0, lam=0 or no auxiliary queries reduces to the baseline loss."""
    res = CheckResult("hybrid-branch degeneration")
    rng = np.random.default_rng(seed)
    for i in range(count):
        C, m = 4, int(rng.integers(1, 6))
        g = random_truth(rng, m, C)
        P = [random_predictions(rng, 12, C, l) for l in range(2)]
        A = [random_predictions(rng, 40, C, l) for l in range(2)]
        base = one2one_loss(P, g)
        for kw, aux in ((dict(K=0), A), (dict(lam=0.0), A), (dict(T=0), [])):
            cfg = HybridConfig(scheme="hybrid_branch", n=12, L=2, **{"T": 40, **kw})
            for fn in (naive_hybrid_loss, optimized_hybrid_loss):
                br = fn(P, aux, g, cfg)
                same = br.total == base.total and all(
                    np.array_equal(x.d_scores, y.d_scores) and np.array_equal(x.d_boxes, y.d_boxes)
                    for x, y in zip(br.grads["main"], base.grads["main"]))
                aux_zero = all(not np.any(x.d_scores) and not np.any(x.d_boxes) for x in br.grads.get("aux", []))
                res.record(same and aux_zero, f"instance {i} {kw} {fn.__name__}")
    return res


# ---------------------------------------------------------------------------
# isolation


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x[0], y[0]) and torch.equal(x[1], y[1]) for x, y in zip(a, b))


@_timed
def check_group_isolation(count: int = 20, seed: int = 6) -> CheckResult:
    """Main-group per-layer outputs are bitwise identical under any change of the auxiliary queries."""
    res = CheckResult("group isolation")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    for sharing in ("all", "heads_unshared", "decoder_unshared"):
        model = ToyDecoder(d=32, C=5, n=30, T=150, L=2, heads=2, sharing=sharing, seed=seed)
        solo = ToyDecoder(d=32, C=5, n=30, T=0, L=2, heads=2, sharing=sharing, seed=seed)
        scenes = [generate_scene(int(s)) for s in rng.integers(2**32, size=4)]
        tokens, valid = collate(scenes)
        with torch.no_grad():
            ref = model.run(tokens, valid)["main"]
            res.record(_same(ref, solo.run(tokens, valid)["main"]), f"{sharing}: differs from T=0 model")
            for i in range(count):
                T = 150 if i % 2 == 0 else int(rng.integers(1, 400))
                scale = float(rng.uniform(0.1, 10))
                aux = torch.randn(T, 32, generator=gen, dtype=torch.float64) * scale
                out = model.run(tokens, valid, aux_queries=aux)
                res.record(_same(ref, out["main"]), f"{sharing} perturbation {i}: T={T}")
    return res


# ---------------------------------------------------------------------------
# equivalence


@_timed
def check_merged_equivalence(count: int = 100, seed: int = 7, tol: float = 1e-12) -> CheckResult:
    """Merged hybrid loss equals the two-pass form in value, gradients and pairs."""
    res = CheckResult("merged-loss equivalence")
    rng = np.random.default_rng(seed)
    worst = 0.0
    cfg = HybridConfig(scheme="hybrid_branch", n=30, T=150, K=6, lam=1.0, L=2)
    for i in range(count):
        C, m = 5, int(rng.integers(1, 9))
        g = random_truth(rng, m, C)
        P = [random_predictions(rng, cfg.n, C, l) for l in range(cfg.L)]
        A = [random_predictions(rng, cfg.T, C, l) for l in range(cfg.L)]
        a, b = naive_hybrid_loss(P, A, g, cfg), optimized_hybrid_loss(P, A, g, cfg)
        diff = abs(a.total - b.total)
        for grp in ("main", "aux"):
            for x, y in zip(a.grads[grp], b.grads[grp]):
                diff = max(diff, float(np.abs(x.d_scores - y.d_scores).max()),
                           float(np.abs(x.d_boxes - y.d_boxes).max()))
        pairs = all(x.pairs == y.pairs for grp in ("main", "aux")
                    for x, y in zip(a.assignments[grp], b.assignments[grp]))
        worst = max(worst, diff)
        res.record(diff <= tol and pairs, f"instance {i}: max diff {diff:.2e}, pairs equal {pairs}")
    res.detail = f"max abs diff {worst:.2e}"
    return res


# ---------------------------------------------------------------------------

SUITES = {
    "assignment": (check_assignment_oracle, check_assignment_validity, check_nan_rejected),
    "losses": (check_set_loss_gradients, check_model_gradients, check_one2many_multiplicity,
               check_positive_counts, check_degeneration),
    "isolation": (check_group_isolation,),
    "equivalence": (check_merged_equivalence,),
}
SUITE_NAMES = tuple(SUITES) + ("all",)


def run_suite(name: str, inject: Optional[str] = None, report: Callable[[str], None] = print) -> bool:
    """Run a named suite, printing one line per check. ``inject`` plants a known fault for self-tests."""
    if name not in SUITE_NAMES:
        raise ConfigError(f"unknown suite {name!r}; expected one of {SUITE_NAMES}")
    if inject is not None and inject not in FAULTS:
        raise ConfigError(f"unknown fault {inject!r}; expected one of {FAULTS}")
    names = list(SUITES) if name == "all" else [name]
    ok = True
    passed = total = 0
    for suite in names:
        for check in SUITES[suite]:
            kwargs = {"inject": inject} if check is check_assignment_oracle else {}
            try:
                res = check(**kwargs)
            except HybridMatchError as exc:
                res = CheckResult(check.__name__)
                res.record(False, f"raised {type(exc).__name__}: {exc}")
            report(f"[{suite}] {res.line()}")
            for msg in res.failures:
                report(f"    {msg}")
            ok &= res.ok
            passed += res.passed
            total += res.total
    report(f"{'OK' if ok else 'FAILED'}: {passed}/{total} checks passed")
    return ok


__all__ = ["CheckResult", "SUITES", "SUITE_NAMES", "run_suite", "rel_err"] + [
    nm for nm in dir() if nm.startswith("check_")
]
