import numpy as np
import pytest

from reptransfer.datagen import LabeledImages, PairedImages, TransformSpec, build_dataset, generate_split, load_pairs
from reptransfer.exceptions import InputError
from reptransfer.network import TAP_NAMES, forward_with_taps, init_checkpoint, param_depth
from reptransfer.optim import SGDConfig
from reptransfer.tensor import Tape, Tensor, backward
from reptransfer.transfer import (W_DEC, W_INC, FeatureSelection, feature_regression_loss, iteration_batches,
                                  run_baselines, train_supervised, train_transfer)


def _bytes(ck):
    return {k: v.data.tobytes() for k, v in ck.params.items()}


@pytest.fixture(scope="module")
def small_split():
    return generate_split(12, "train", TransformSpec("ripple", seed=4), seed=2, size=16, n_classes=3)


def test_loss_examples():
    sel = FeatureSelection.single("pool_1")
    loss = feature_regression_loss({"pool_1": np.array([1.0, 2.0])}, {"pool_1": Tensor(np.zeros(2))}, sel)
    assert loss.item() == 5.0
    sel2 = FeatureSelection.parse(["pool_1", "pool_5"], [0.2, 0.9])
    t = {"pool_1": np.array([1.0, 2.0]), "pool_5": np.array([1.0, 1.0])}
    s = {"pool_1": Tensor(np.zeros(2)), "pool_5": Tensor(np.zeros(2))}
    assert feature_regression_loss(t, s, sel2).item() == pytest.approx(2.8)
    assert feature_regression_loss(t, {k: Tensor(v) for k, v in t.items()}, sel2).item() == 0.0


def test_loss_errors():
    sel = FeatureSelection.single("pool_2")
    with pytest.raises(InputError):
        feature_regression_loss({"pool_1": np.zeros(2)}, {"pool_1": Tensor(np.zeros(2))}, sel)
    with pytest.raises(InputError):
        feature_regression_loss({"pool_2": np.zeros(2)}, {"pool_2": Tensor(np.zeros(3))}, sel)


def test_teacher_side_gets_no_gradient():
    teacher = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    student = Tensor(np.zeros(2), requires_grad=True)
    tape = Tape()
    with tape:
        loss = feature_regression_loss({"pool_1": teacher}, {"pool_1": student}, FeatureSelection.single("pool_1"))
    backward(loss, tape)
    assert teacher.grad is None
    np.testing.assert_array_equal(student.grad, [-2.0, -4.0])


def test_selection_strategies():
    assert FeatureSelection.named("W_inc").entries == tuple(zip(TAP_NAMES, (0.2, 0.4, 0.6, 0.8, 0.9)))
    assert FeatureSelection.named("W_dec").entries == tuple(zip(TAP_NAMES, (0.9, 0.8, 0.6, 0.4, 0.2)))
    assert W_DEC == tuple(reversed(W_INC))
    assert FeatureSelection.parse(["pool_1", "pool_4"]).deepest == "pool_4"
    for bad in (dict(taps=[]), dict(taps=["pool_1", "pool_1"]), dict(taps=["conv"]),
                dict(taps=["pool_1"], weights=[0.0]), dict(taps=["pool_1"], weights=[1, 2])):
        with pytest.raises(InputError):
            FeatureSelection.parse(bad["taps"], bad.get("weights"))


def test_iteration_batches_cover_epochs():
    batches = list(iteration_batches(10, 4, 6, seed=0))
    assert all(len(b) == 4 for b in batches)
    first_epoch = np.concatenate(batches[:2])
    assert len(set(first_epoch.tolist())) == 8
    assert [b.tolist() for b in batches] == [b.tolist() for b in iteration_batches(10, 4, 6, seed=0)]


@pytest.mark.parametrize("tap", TAP_NAMES)
def test_tap_gradient_reaches_only_shallower_layers(tiny_net, tap):
    net = tiny_net.copy()
    for p in net.params.values():
        p.requires_grad = True
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 16)))
    target = {tap: np.zeros(1)}
    tape = Tape()
    with tape:
        _, taps = forward_with_taps(net, x)
        target = {tap: np.zeros(taps[tap].shape)}
        loss = feature_regression_loss(target, taps, FeatureSelection.single(tap))
    backward(loss, tape)
    limit = TAP_NAMES.index(tap) + 1
    for name, p in net.params.items():
        if param_depth(name) > limit:
            assert not p.grad.any(), name
    assert net.params["block1.conv1.weight"].grad.any()


def test_fixed_point_is_exact(tiny_net):
    split = generate_split(6, "train", TransformSpec("none"), size=16, n_classes=3)
    assert split.x1.tobytes() == split.x2.tobytes()
    res = train_transfer(tiny_net, split.pairs(), FeatureSelection.named("W_inc"),
                         SGDConfig(base_lr=1e-2, weight_decay=0.0, max_iter=10, batch_size=3))
    assert [h[2] for h in res.history] == [0.0] * 10
    assert _bytes(res.checkpoint) == _bytes(tiny_net)


def test_pool2_scoping_and_teacher_immutable(tiny_net, small_split):
    before = tiny_net.fingerprint()
    res = train_transfer(tiny_net, small_split.pairs(), FeatureSelection.single("pool_2"),
                         SGDConfig(base_lr=1e-4, weight_decay=0.0, max_iter=5, batch_size=4))
    assert tiny_net.fingerprint() == before
    changed = {k for k, v in res.checkpoint.params.items() if v.data.tobytes() != tiny_net.params[k].data.tobytes()}
    assert changed and all(param_depth(k) <= 2 for k in changed)
    for k, v in res.checkpoint.params.items():
        if param_depth(k) > 2:
            assert v.data.tobytes() == tiny_net.params[k].data.tobytes()


def test_transfer_rejects_labelled_input(tiny_net, small_split):
    with pytest.raises(InputError):
        train_transfer(tiny_net, small_split.target(), FeatureSelection.single("pool_5"), SGDConfig(max_iter=1))
    with pytest.raises(InputError):
        train_transfer(tiny_net, small_split, FeatureSelection.single("pool_5"), SGDConfig(max_iter=1))


def test_cached_teacher_matches_per_batch(tiny_net, small_split):
    cfg = SGDConfig(base_lr=1e-4, weight_decay=0.0, max_iter=4, batch_size=4)
    sel = FeatureSelection.single("pool_3")
    a = train_transfer(tiny_net, small_split.pairs(), sel, cfg, seed=1)
    b = train_transfer(tiny_net, small_split.pairs(), sel, cfg, seed=1, cache_teacher=True)
    assert [h[2] for h in a.history] == [h[2] for h in b.history]
    assert _bytes(a.checkpoint) == _bytes(b.checkpoint)


def test_annotation_blindness_on_disk(tmp_path, tiny_net):
    root = build_dataset(tmp_path / "d", 6, 1, 1, TransformSpec("ripple", seed=1), size=16, n_classes=3)
    cfg = SGDConfig(base_lr=1e-4, weight_decay=0.0, max_iter=3, batch_size=3)
    sel = FeatureSelection.single("pool_5")
    train_transfer(tiny_net, load_pairs(root), sel, cfg).checkpoint.save(tmp_path / "a.ck")
    for f in root.rglob("*_y2.pgm"):
        f.write_bytes(b"garbage")
    train_transfer(tiny_net, load_pairs(root), sel, cfg).checkpoint.save(tmp_path / "b.ck")
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_supervised_determinism_and_zero_lr(tiny_net, small_split):
    cfg = SGDConfig(base_lr=0.01, max_iter=3, batch_size=4)
    a = train_supervised(tiny_net, small_split.x1, small_split.y1, cfg, seed=0)
    b = train_supervised(tiny_net, small_split.x1, small_split.y1, cfg, seed=0)
    assert _bytes(a.checkpoint) == _bytes(b.checkpoint)
    assert _bytes(a.checkpoint) != _bytes(tiny_net)
    assert len(a.history) == 3


def test_supervised_rejects_mismatch(tiny_net, small_split):
    with pytest.raises(InputError):
        train_supervised(tiny_net, small_split.x1, small_split.y1[:3], SGDConfig(max_iter=1))


def test_baselines_with_identity_transform(tiny_net):
    split = generate_split(4, "test", TransformSpec("none"), size=16, n_classes=3)
    report = run_baselines(tiny_net, split.source(), None, split.target())
    assert report.b0.miou == report.teacher_d1.miou
    assert report.b0.mean_class_acc == report.teacher_d1.mean_class_acc
    with pytest.raises(InputError):
        run_baselines(tiny_net, split.source(), None, split.target(), cfg_b1=SGDConfig(max_iter=1))
    with pytest.raises(InputError):
        run_baselines(tiny_net, split.source(), None, LabeledImages(split.x2, None))


def test_baselines_b1_b2(tiny_net):
    tr = generate_split(8, "train", TransformSpec("ripple"), size=16, n_classes=3)
    te = generate_split(4, "test", TransformSpec("ripple"), size=16, n_classes=3)
    cfg = SGDConfig(base_lr=0.01, max_iter=2, batch_size=4)
    report = run_baselines(tiny_net, te.source(), tr.target(), te.target(), cfg_b1=cfg, cfg_b2=cfg)
    assert set(report.rows()) == {"H1 on D1", "B0", "B1", "B2"}
    assert set(report.checkpoints) == {"B1", "B2"}
