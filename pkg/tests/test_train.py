import numpy as np
import pytest

from affinemask.data import DomainDataset
from affinemask.masks import MaskTransformConfig
from affinemask.net import DomainNet, add_domain
from affinemask.tensor import Tensor, softmax_cross_entropy
from affinemask.train import (
    SCHEDULES,
    SGD,
    Adam,
    Schedule,
    get_schedule,
    make_groups,
    train_domain,
)


def toy_dataset(n=128, seed=0) -> DomainDataset:
    """Two linearly separable classes: bright left half vs bright right half."""
    r = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = 0.1 * r.random((n, 1, 16, 16))
    x[y == 0, :, :, :8] += 0.8
    x[y == 1, :, :, 8:] += 0.8
    x = x.astype(np.float32)
    return DomainDataset("toy", 2, x, y.astype(np.int64), x[:32], y[:32].astype(np.int64))


def _param(value):
    return Tensor(np.array([value], dtype=np.float64), requires_grad=True)


def test_sgd_examples():
    p = _param(0.0)
    opt = SGD([("p", p)], lr=0.1, momentum=0.0)
    p.grad = np.ones(1)
    opt.step()
    assert p.data[0] == pytest.approx(-0.1)
    p = _param(0.0)
    opt = SGD([("p", p)], lr=0.1, momentum=0.9)
    p.grad = np.ones(1)
    opt.step()
    assert p.data[0] == pytest.approx(-0.1)
    opt.step()
    assert p.data[0] == pytest.approx(-0.29)


@pytest.mark.parametrize("scale", [1e-2, 1.0, 1e4])
def test_adam_first_step_is_lr(scale):
    p = _param(0.0)
    opt = Adam([("p", p)], lr=1e-3)
    p.grad = np.array([scale])
    opt.step()
    assert abs(abs(p.data[0]) - 1e-3) <= 1e-6


def test_optimizers_abort_on_nan():
    for opt_cls in (Adam, SGD):
        p = _param(0.0)
        p.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="'p'"):
            opt_cls([("p", p)]).step()
    with pytest.raises(ValueError):
        Adam([], lr=0)


def test_groups_partition(frozen_bb):
    dom = add_domain(frozen_bb, 3, MaskTransformConfig("full"), seed=0)
    groups = make_groups(dom)
    names = [n for g in groups for n, _ in g.params]
    assert sorted(names) == sorted(n for n, _ in dom.named_parameters())
    assert len(names) == len(set(names))
    adam, sgd = groups
    assert (adam.kind, adam.lr, sgd.kind, sgd.lr) == ("adam", 1e-4, "sgd", 1e-3)
    assert {n for n, _ in sgd.params} == {"head.weight", "head.bias"}
    backbone_ids = {id(a) for a in frozen_bb.params.values()}
    assert not any(id(t.data) in backbone_ids for g in groups for _, t in g.params)


def test_piggyback_group_has_masks_and_bn_only(frozen_bb):
    dom = add_domain(frozen_bb, 3, MaskTransformConfig("piggyback"), seed=0)
    adam = make_groups(dom)[0]
    kinds = {n.split(".")[1] for n, _ in adam.params}
    assert kinds == {"mask", "gamma", "beta"}


def test_classifier_variant_has_only_sgd_group(frozen_bb):
    dom = add_domain(frozen_bb, 3, MaskTransformConfig("classifier"), seed=0)
    assert [g.kind for g in make_groups(dom)] == ["sgd"]


def test_schedule_decay_exact():
    s = Schedule(30, 20)
    assert s.lr_at(1e-4, 19) == 1e-4
    assert s.lr_at(1e-4, 20) == 1e-4 / 10
    assert get_schedule("decathlon") == Schedule(60, 45)
    assert SCHEDULES["bench1"].decay_epoch == 15
    with pytest.raises(ValueError):
        Schedule(10, 11)
    with pytest.raises(ValueError):
        Schedule(10, 5, decay_factor=1.0)
    with pytest.raises(ValueError):
        get_schedule("weekly")


def test_zero_epochs_changes_nothing(frozen_bb):
    data = toy_dataset()
    dom = add_domain(frozen_bb, 2, MaskTransformConfig(), seed=0)
    before = {k: v.copy() for k, v in dom.state().items()}
    rep = train_domain(DomainNet(frozen_bb, dom), data, Schedule(0, 0))
    assert rep.epoch_loss == [] and rep.epoch_accuracy == []
    assert all(np.array_equal(before[k], v) for k, v in dom.state().items())


def test_class_count_mismatch(frozen_bb):
    dom = add_domain(frozen_bb, 3, MaskTransformConfig(), seed=0)
    with pytest.raises(ValueError):
        train_domain(DomainNet(frozen_bb, dom), toy_dataset(), Schedule(1, 1))


def test_separable_toy_learned(frozen_bb):
    data = toy_dataset()
    dom = add_domain(frozen_bb, 2, MaskTransformConfig(), seed=0)
    rep = train_domain(DomainNet(frozen_bb, dom), data, Schedule(10, 10), seed=0)
    assert rep.epoch_accuracy[-1] >= 0.99
    assert rep.final_accuracy >= 0.99


def test_training_deterministic(frozen_bb):
    data = toy_dataset(64)
    states, reports = [], []
    for _ in range(2):
        dom = add_domain(frozen_bb, 2, MaskTransformConfig("full", "sigmoid"), seed=4)
        reports.append(train_domain(DomainNet(frozen_bb, dom), data, Schedule(2, 1), seed=9, augment=True))
        states.append(dom.state())
    assert all(states[0][k].tobytes() == states[1][k].tobytes() for k in states[0])
    assert reports[0].epoch_loss == reports[1].epoch_loss


def test_full_batch_loss_nonincreasing(frozen_bb):
    data = toy_dataset(64)
    dom = add_domain(frozen_bb, 2, MaskTransformConfig(), seed=0)
    net = DomainNet(frozen_bb, dom).train()
    opts = [g.make_optimizer() for g in make_groups(dom, 1e-4, 1e-4)]
    losses = []
    for _ in range(6):
        loss = softmax_cross_entropy(net(data.train_x), data.train_y)
        losses.append(float(loss.data))
        dom.zero_grad()
        loss.backward()
        for o in opts:
            o.step()
    rises = [b - a for a, b in zip(losses, losses[1:]) if b > a]
    assert len(rises) <= 1 and all(r <= 1e-3 for r in rises)


def test_every_grouped_parameter_gets_gradient(frozen_bb):
    r = np.random.default_rng(0)
    dom = add_domain(frozen_bb, 4, MaskTransformConfig("full", granularity="channel"), seed=0)
    # k3 multiplies W*M, nonzero here; move off the init point so no coefficient is degenerate
    for ks in dom.scalars.values():
        for _, t in ks.learned():
            t.data = r.uniform(0.1, 0.3, t.shape).astype(t.dtype)
    net = DomainNet(frozen_bb, dom).train()
    x = r.random((8, 1, 16, 16)).astype(np.float32)
    softmax_cross_entropy(net(x), r.integers(0, 4, 8)).backward()
    for g in make_groups(dom):
        for name, t in g.params:
            assert t.grad is not None and np.abs(t.grad).max() > 0, name


def test_masks_get_no_gradient_at_identity_init(frozen_bb):
    # k2 = k3 = 0 at init: the mask has no path to the loss until they move
    dom = add_domain(frozen_bb, 4, MaskTransformConfig("full"), seed=0)
    net = DomainNet(frozen_bb, dom).train()
    x = np.random.default_rng(0).random((8, 1, 16, 16)).astype(np.float32)
    softmax_cross_entropy(net(x), np.arange(8) % 4).backward()
    assert all(not r.grad.any() for r in dom.masks.values())
    assert all(np.abs(t.grad).max() > 0 for ks in dom.scalars.values() for _, t in ks.learned())
