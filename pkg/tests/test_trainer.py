import math

import numpy as np
import pytest
import torch

from resswitch.data import AugmentationConfig, MultiResolutionBatch, iterate_batches
from resswitch.losses import distillation_pairs
from resswitch.model import build_model
from resswitch.synthetic import make_blobs, make_shapes
from resswitch.trainer import (
    MODES, TrainConfig, TrainingDiverged, cosine_lr, learning_rate, make_optimizer, metric_columns,
    model_plans, step_lr, train, train_plans, train_step,
)

AUG = AugmentationConfig()


def random_batch(branches, n=4, classes=10, seed=0):
    g = torch.Generator().manual_seed(seed)
    return MultiResolutionBatch([torch.randn(n, 3, r, r, generator=g) for r in branches],
                                torch.randint(0, classes, (n,), generator=g))


def snapshot(model):
    return {n: t.detach().clone() for n, t in model.state_dict().items()}


# -- schedules --------------------------------------------------------------


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 0.1) == pytest.approx(0.1)
    assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05)
    assert cosine_lr(100, 100, 0.1) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.1)


def test_step_schedule():
    assert step_lr(0, 0.1, (30, 60)) == pytest.approx(0.1)
    assert step_lr(30, 0.1, (30, 60)) == pytest.approx(0.01)
    assert step_lr(61, 0.1, (30, 60)) == pytest.approx(0.001)
    cfg = TrainConfig(schedule="step", milestones=(1,), base_lr=1.0)
    assert learning_rate(cfg, 0, 10, 1) == pytest.approx(0.1)


# -- config -----------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(mode="mutual"), dict(epochs=-1), dict(batch_size=0),
                                dict(base_lr=0), dict(schedule="poly"), dict(distill_variant="x"),
                                dict(weight_decay=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_weight_decay_groups(tiny):
    opt = make_optimizer(tiny, TrainConfig(weight_decay=5e-4))
    wd = {id(p): g["weight_decay"] for g in opt.param_groups for p in g["params"]}
    assert wd[id(tiny.raw_scores)] == 0.0
    assert wd[id(tiny.fc.weight)] == 5e-4
    assert len(wd) == sum(1 for _ in tiny.parameters())


def test_model_plans():
    cfg = TrainConfig(mode="individual")
    assert [t for t, _ in model_plans("tiny", [16, 32], 10, cfg)] == ["r32", "r16"]
    plans = model_plans("tiny", [32, 16], 10, TrainConfig(mode="single-resolution"))
    assert plans[1][1]["profile"] == [16] and plans[1][1]["branches"] == [16, 16]
    (tag, kw), = model_plans("tiny", [32, 16], 10, TrainConfig(mode="shared-bn"))
    assert kw["shared_bn"] and kw["profile"] == [32, 16]


# -- steps ------------------------------------------------------------------


def test_ensemble_only_step_isolation(tiny):
    cfg = TrainConfig(base_lr=0.5, weight_decay=1e-2)
    opt = make_optimizer(tiny, cfg)
    before = snapshot(tiny)
    for k in range(10):
        train_step(tiny, random_batch([32, 24, 16], seed=k), opt, cfg, terms={"ens"})
    after = snapshot(tiny)
    for n in before:
        if n == "raw_scores":
            assert not torch.equal(before[n], after[n])
        else:
            assert torch.equal(before[n], after[n]), n


@pytest.mark.parametrize("mode", ["parallel+mred", "parallel-only", "shared-bn", "multi-crop"])
def test_modes_report_expected_terms(mode):
    cfg = TrainConfig(mode=mode)
    model = build_model("tiny", [32, 24, 16], 10, shared_bn=mode == "shared-bn", seed=0)
    out = train_step(model, random_batch([32, 24, 16]), make_optimizer(model, cfg), cfg)
    assert out.l_cls > 0
    # the ensemble score keeps training in every multi-branch mode so alpha stays reportable
    assert out.l_ens > 0
    assert (out.l_dis > 0) == (mode in ("parallel+mred", "multi-crop"))
    assert out.total == pytest.approx(out.l_cls + out.l_ens + out.l_dis)


def test_full_variant_has_six_pairs_for_three_branches():
    pairs, scale = distillation_pairs("full", 3)
    assert len(pairs) == 6 and scale == 0.5


def test_step_rejects_wrong_branches(tiny):
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        train_step(tiny, random_batch([32, 24]), make_optimizer(tiny, cfg), cfg)
    with pytest.raises(ValueError):
        train_step(tiny, random_batch([32, 16, 24]), make_optimizer(tiny, cfg), cfg)


def test_step_updates_every_bank(tiny):
    cfg = TrainConfig()
    before = snapshot(tiny)
    train_step(tiny, random_batch([32, 24, 16]), make_optimizer(tiny, cfg), cfg)
    after = snapshot(tiny)
    for s in range(3):
        assert any(not torch.equal(before[n], after[n]) for n in before if f".banks.{s}.running_mean" in n)


def test_divergence_raises():
    ds = make_shapes(16, seed=0)
    model = build_model("tiny", [16, 8], 10, seed=0)
    with torch.no_grad():
        model.fc.weight.fill_(math.inf)
    with pytest.raises(TrainingDiverged):
        train(model, ds, TrainConfig(epochs=1, batch_size=8), AUG)


# -- training runs ----------------------------------------------------------


def test_one_epoch_logging(tmp_path):
    ds = make_shapes(24, size=20, seed=0)
    model = build_model("tiny", [16, 12, 8], 10, seed=0)
    path = tmp_path / "m.csv"
    _, rows = train(model, ds, TrainConfig(epochs=1, batch_size=8), AUG, metrics_path=path)
    lines = path.read_text().splitlines()
    assert len(rows) == 1 and len(lines) == 2
    assert lines[0].split(",") == metric_columns(model)
    assert rows[0]["step"] == 3
    alpha = [rows[0][f"alpha_{k}"] for k in (1, 2, 3)]
    assert sum(alpha) == pytest.approx(1, abs=1e-6)


def test_separable_toy_data_fits():
    ds = make_blobs(64, size=16, seed=0)
    model = build_model("tiny", [16, 8], 2, seed=0)
    cfg = TrainConfig(epochs=20, batch_size=16, base_lr=0.05)
    _, rows = train(model, ds, cfg, AugmentationConfig(area_range=(0.5, 1.0)))
    assert rows[-1]["acc@16"] == 100.0 and rows[-1]["acc@8"] == 100.0


def test_reproducible_csv(tmp_path):
    ds = make_shapes(24, size=20, seed=0)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
    paths = []
    for k in range(2):
        model = build_model("tiny", [16, 8], 10, seed=3)
        paths.append(tmp_path / f"run{k}.csv")
        train(model, ds, cfg, AUG, metrics_path=paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_plans_individual(tmp_path):
    ds = make_shapes(16, size=20, seed=0)
    cfg = TrainConfig(epochs=1, batch_size=8, mode="individual")
    res = train_plans("tiny", [16, 8], 10, ds, cfg, AUG, out_dir=tmp_path)
    assert set(res) == {"r16", "r8"}
    for tag in res:
        assert (tmp_path / "checkpoints" / tag / "final" / "manifest.txt").exists()
        assert (tmp_path / "metrics" / f"{tag}.csv").exists()


def test_single_resolution_mode_runs():
    ds = make_shapes(8, size=20, seed=0)
    cfg = TrainConfig(epochs=1, batch_size=8, mode="single-resolution")
    res = train_plans("tiny", [16, 8], 10, ds, cfg, AUG)
    model, rows = res["r8"]
    assert list(model.branches) == [8, 8] and "acc@8" in rows[0]


def test_all_modes_known():
    assert set(MODES) == {"parallel+mred", "parallel-only", "individual", "shared-bn", "multi-crop",
                          "single-resolution"}


def test_multi_crop_batches_differ_from_single_crop():
    ds = make_shapes(4, seed=0)
    a = next(iterate_batches(ds, [32, 32], AUG, 4, seed=0, epoch=0, multi_crop=False))
    b = next(iterate_batches(ds, [32, 32], AUG, 4, seed=0, epoch=0, multi_crop=True))
    assert torch.equal(a.images[0], a.images[1])
    assert not torch.equal(b.images[0], b.images[1])
    assert np.array_equal(a.labels.numpy(), b.labels.numpy())


def test_distillation_never_reaches_raw_scores(tiny):
    cfg = TrainConfig(weight_decay=0.0)
    before = tiny.raw_scores.detach().clone()
    opt = make_optimizer(tiny, cfg)
    train_step(tiny, random_batch([32, 24, 16]), opt, cfg, terms={"dis"})
    assert tiny.raw_scores.grad is None
    assert torch.equal(tiny.raw_scores.detach(), before)


def test_breakdown_matches_recomputed_terms(tiny):
    import copy

    from resswitch.losses import (classification_loss, distillation_loss_full, ensemble_logit, ensemble_loss,
                                  softmax_probs)

    batch = random_batch([32, 24, 16], seed=9)
    twin = copy.deepcopy(tiny)
    cfg = TrainConfig()
    out = train_step(tiny, batch, make_optimizer(tiny, cfg), cfg)
    with torch.no_grad():
        logits = [twin(x, s, train=True) for s, x in enumerate(batch.images)]
        l_cls = classification_loss(logits, batch.labels).item()
        l_ens = ensemble_loss(twin.raw_scores, logits, batch.labels).item()
        p0 = softmax_probs(ensemble_logit(twin.alpha, logits))
        l_dis = distillation_loss_full(p0, [softmax_probs(z) for z in logits]).item()
    for got, ref in ((out.l_cls, l_cls), (out.l_ens, l_ens), (out.l_dis, l_dis)):
        assert got == pytest.approx(ref, rel=1e-6)
    assert out.total == pytest.approx(l_cls + l_ens + l_dis, rel=1e-6)


def test_single_resolution_multi_crop_configuration():
    cfg = TrainConfig(mode="single-resolution", multi_crop=True)
    assert cfg.crops_per_branch
    # S comes from the profile length: three copies of each side
    _, kw = model_plans("tiny", [32, 24, 16], 10, cfg)[1]
    model = build_model(**kw)
    assert list(model.branches) == [24, 24, 24]
    ds = make_shapes(4, seed=1)
    batch = next(iterate_batches(ds, model.branches, AUG, 4, seed=0, epoch=0, multi_crop=cfg.crops_per_branch))
    assert all(x.shape == batch.images[0].shape for x in batch.images)
    assert not torch.equal(batch.images[0], batch.images[1])
