import numpy as np
import pytest
import torch

from hybridmatch.errors import ConfigError, DivergenceError
from hybridmatch.losses import LossGradients
from hybridmatch.matching import HybridConfig
from hybridmatch.toymodel import (
    OptimizerParams,
    ToyDecoder,
    backward,
    build_group_mask,
    collate,
    forward,
    generate_dataset,
    generate_scene,
    train,
)
from hybridmatch.toymodel.serialize import HEADER, dumps, load_params, loads, save_params
from hybridmatch.toymodel.training import ModelParams, read_log_csv, write_log_csv
from hybridmatch.verify import check_group_isolation, check_model_gradients

SMALL = dict(d=16, C=3, n=6, T=12, L=2, heads=2, ffn=16)


def small_scenes(seed, count):
    return generate_dataset(seed, count, m_range=(1, 2), C=3, d=16, distractor_count=3)


def small_cfg(scheme="baseline", **kw):
    base = dict(n=6, T=12, K=3, K_epoch=3, K_layer=3, L=2, L1=1, L2=1, M=18, N=18)
    return HybridConfig(scheme=scheme, **{**base, **kw})


SMALL_MODEL = ModelParams(d=16, heads=2, ffn=16)


# ---------------------------------------------------------------------------
# scenes


def test_scene_determinism():
    a, b = generate_scene(5), generate_scene(5)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.truth.boxes, b.truth.boxes) and np.array_equal(a.truth.labels, b.truth.labels)
    assert not np.array_equal(generate_scene(6).tokens[:1], a.tokens[:1])


def test_scene_boxes_inside_frame():
    for s in generate_dataset(0, 50):
        b = s.truth.boxes
        assert 1 <= s.truth.m <= 8
        assert np.all(b[:, 2:] > 0)
        assert np.all(b[:, :2] - b[:, 2:] / 2 >= 0) and np.all(b[:, :2] + b[:, 2:] / 2 <= 1)
        assert s.tokens.shape == (s.truth.m + 8, 32)


def test_scene_argument_validation():
    with pytest.raises(ConfigError):
        generate_scene(0, d=8, C=5)
    with pytest.raises(ConfigError):
        generate_scene(0, m_range=(3, 1))


def test_dataset_seeds_are_distinct():
    ds = generate_dataset(0, 10)
    assert len({s.seed for s in ds}) == 10
    assert [s.seed for s in ds] == [s.seed for s in generate_dataset(0, 10)]


def test_collate_pads_and_masks():
    scenes = [generate_scene(i, m_range=(1, 8)) for i in range(4)]
    tokens, valid = collate(scenes)
    assert tokens.shape[1] == max(len(s.tokens) for s in scenes)
    assert valid.sum().item() == sum(len(s.tokens) for s in scenes)


# ---------------------------------------------------------------------------
# decoder


def test_group_mask_block_diagonal():
    m = build_group_mask(3, 2)
    assert m.shape == (5, 5)
    assert m[:3, :3].all() and m[3:, 3:].all()
    assert not m[:3, 3:].any() and not m[3:, :3].any()


def test_forward_shapes_and_ranges():
    model = ToyDecoder(**SMALL)
    scene = small_scenes(0, 1)[0]
    main, aux = forward(model, scene)
    assert len(main) == len(aux) == 2
    for p in main:
        assert p.class_scores.shape == (6, 3) and p.boxes.shape == (6, 4)
    for p in aux:
        assert p.class_scores.shape == (12, 3)
    all_vals = np.concatenate([np.r_[p.class_scores.ravel(), p.boxes.ravel()] for p in main + aux])
    assert np.all((all_vals > 0) & (all_vals < 1))


def test_forward_rejects_wrong_dimension():
    with pytest.raises(ConfigError):
        forward(ToyDecoder(**SMALL), generate_scene(0))


def test_main_parameters_do_not_depend_on_aux_group():
    a = dict(ToyDecoder(**{**SMALL, "T": 0}, seed=4).named_parameters())
    b = dict(ToyDecoder(**SMALL, sharing="decoder_unshared", seed=4).named_parameters())
    for name, p in a.items():
        assert torch.equal(p, b[name]), name


def test_group_isolation_bitwise():
    res = check_group_isolation(count=6)
    assert res.ok, res.failures


def test_joint_masked_pass_agrees():
    model = ToyDecoder(**SMALL, seed=1)
    tokens, valid = collate(small_scenes(1, 3))
    with torch.no_grad():
        a, b = model.run(tokens, valid), model.run(tokens, valid, joint=True)
    for g in ("main", "aux"):
        for (s1, b1), (s2, b2) in zip(a[g], b[g]):
            assert torch.allclose(s1, s2, rtol=0, atol=1e-12) and torch.allclose(b1, b2, rtol=0, atol=1e-12)


def test_model_gradients_finite_differences():
    res = check_model_gradients(count=6, coords=24, directions=1)
    assert res.ok, res.failures


def test_model_gradients_full_vector_one_instance():
    torch.manual_seed(0)
    model = ToyDecoder(d=8, C=3, n=3, T=4, L=1, heads=2, ffn=8, seed=2)
    scene = generate_scene(3, m_range=(1, 2), C=3, d=8, distractor_count=1)
    rng = np.random.default_rng(0)
    up = {"main": [LossGradients(rng.standard_normal((3, 3)), rng.standard_normal((3, 4)))],
          "aux": [LossGradients(rng.standard_normal((4, 3)), rng.standard_normal((4, 4)))]}
    grads = backward(model, scene, up)

    def objective():
        main, aux = forward(model, scene)
        return sum(float((p.class_scores * u.d_scores).sum() + (p.boxes * u.d_boxes).sum())
                   for p, u in zip(main + aux, up["main"] + up["aux"]))

    h = 1e-6
    for name, p in model.named_parameters():
        num = np.zeros(p.shape)
        flat = num.reshape(-1)
        with torch.no_grad():
            view = p.view(-1)
            for k in range(view.numel()):
                old = view[k].item()
                view[k] = old + h
                up_v = objective()
                view[k] = old - h
                down_v = objective()
                view[k] = old
                flat[k] = (up_v - down_v) / (2 * h)
        den = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-300)
        assert np.linalg.norm(num - grads[name]) / den < 1e-4 or den < 1e-9, name


def zero_upstream(model, group_sizes):
    return {g: [LossGradients.zeros(q, model.C) for _ in range(model.L)] for g, q in group_sizes.items()}


@pytest.mark.parametrize("sharing", ["heads_unshared", "decoder_unshared"])
def test_unshared_parameters_get_no_cross_gradients(sharing):
    model = ToyDecoder(**SMALL, sharing=sharing, seed=3)
    scene = small_scenes(3, 1)[0]
    rng = np.random.default_rng(1)
    up = zero_upstream(model, {"main": 6, "aux": 12})
    up["main"] = [LossGradients(rng.standard_normal((6, 3)), rng.standard_normal((6, 4))) for _ in range(2)]
    grads = backward(model, scene, up)
    for name, g in grads.items():
        if name.startswith("aux_"):
            assert not np.any(g), name
    up = zero_upstream(model, {"main": 6, "aux": 12})
    up["aux"] = [LossGradients(rng.standard_normal((12, 3)), rng.standard_normal((12, 4))) for _ in range(2)]
    grads = backward(model, scene, up)
    for name, g in grads.items():
        if name.startswith("head.") or name == "queries" or (sharing == "decoder_unshared" and name.startswith("blocks.")):
            assert not np.any(g), name


def test_bad_model_config():
    with pytest.raises(ConfigError):
        ToyDecoder(d=10, heads=4)
    with pytest.raises(ConfigError):
        ToyDecoder(sharing="encoder")


# ---------------------------------------------------------------------------
# serialization


def test_serialization_round_trip(tmp_path):
    model = ToyDecoder(**SMALL, sharing="heads_unshared", seed=7)
    text = dumps(model)
    assert text.startswith(HEADER)
    other = ToyDecoder(**SMALL, sharing="heads_unshared", seed=8)
    loads(other, text)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), other.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    save_params(model, tmp_path / "p.txt")
    third = ToyDecoder(**SMALL, sharing="heads_unshared", seed=9)
    load_params(third, tmp_path / "p.txt")
    assert dumps(third) == text


def test_serialization_rejects_mismatch():
    text = dumps(ToyDecoder(**SMALL))
    with pytest.raises(ConfigError):
        loads(ToyDecoder(**{**SMALL, "d": 8, "C": 3}), text)
    with pytest.raises(ConfigError):
        loads(ToyDecoder(**SMALL), "not a parameter file\n")


# ---------------------------------------------------------------------------
# training


def small_train(scheme="baseline", epochs=2, seed=0, **kw):
    tr, va = small_scenes(10, 12), small_scenes(11, 4)
    return train(small_cfg(scheme, **kw), tr, va, epochs, OptimizerParams(batch_size=4), seed=seed,
                 model_params=SMALL_MODEL, num_classes=3)


def test_training_is_deterministic():
    a, b = small_train("hybrid_branch"), small_train("hybrid_branch")
    assert a.step_totals == b.step_totals
    assert [vars(x) for x in a.logs] == [vars(x) for x in b.logs]
    assert dumps(a.model) == dumps(b.model)


def test_training_logs_fields():
    res = small_train("hybrid_branch")
    assert [e.epoch for e in res.logs] == [0, 1]
    assert all(e.scheme == "hybrid_branch" and e.positive_count > 0 for e in res.logs)
    assert all(np.isfinite(e.val_one2one_total) for e in res.logs)


@pytest.mark.parametrize("scheme", ["hybrid_epoch", "hybrid_layer"])
def test_training_other_schemes_run(scheme):
    res = small_train(scheme, epochs=3)
    assert len(res.logs) == 3
    if scheme == "hybrid_epoch":
        assert res.switch_epoch == 2


def test_degenerate_branch_matches_baseline_steps():
    base = small_train("baseline", epochs=2)
    for kw in (dict(K=0), dict(lam=0.0), dict(T=0)):
        h = small_train("hybrid_branch", epochs=2, **kw)
        assert np.max(np.abs(np.subtract(h.step_totals, base.step_totals))) <= 1e-12
        assert [e.val_one2one_total for e in h.logs] == [e.val_one2one_total for e in base.logs]


def test_divergence_raises():
    tr, va = small_scenes(10, 8), small_scenes(11, 2)
    with pytest.raises(DivergenceError):
        train(small_cfg(), tr, va, 5, OptimizerParams(lr=1e8, batch_size=4), model_params=SMALL_MODEL,
              num_classes=3)


def test_log_csv_round_trip(tmp_path):
    res = small_train()
    write_log_csv(res.logs, tmp_path / "log.csv")
    back = read_log_csv(tmp_path / "log.csv")
    assert [vars(x) for x in back] == [vars(x) for x in res.logs]
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,scheme,train_total,val_one2one_total,val_AP50,positive_count"
