import numpy as np
import pytest

from weightaug import tensor as T
from weightaug.checkpoint import Checkpoint
from weightaug.errors import ConfigError, NonFiniteLossError
from weightaug.models import forward, init_params, smallcnn
from weightaug.shadow import (
    OptimizerState, ShadowModel, TrainConfig, epoch_order, gradient_path_check, steps_per_epoch,
    train, train_step,
)
from weightaug.transforms import IDENTITY, TransformSpec, make_instance, parse_spec, zero_mask


class Split:
    def __init__(self, images, labels):
        self.images, self.labels = images, labels


def toy(n=40, hw=8, c=1, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    protos = rng.normal(size=(classes, c, hw, hw))
    x = (protos[y] + 0.5 * rng.normal(size=(n, c, hw, hw))).astype(np.float32)
    return Split(x, y)


def test_momentum_hand_example():
    w = np.array([1.0], dtype=np.float32)
    opt = OptimizerState(0.01, 0.9)
    history = []
    for _ in range(2):
        g = 2.0 * w  # d/dw of T(w)^2 with T = identity
        opt.step({"w": w}, {"w": g.copy()})
        history.append((float(opt.velocity["w"][0]), float(w[0])))
    assert history[0] == pytest.approx((2.0, 0.98), abs=1e-7)
    assert history[1] == pytest.approx((3.76, 0.9424), abs=1e-6)


def test_epochs_times_batches_steps():
    assert steps_per_epoch(10, 5) == 2 and steps_per_epoch(11, 5) == 3
    arch = smallcnn(1, 8, 4)
    ckpt = train(TrainConfig(batch_size=5, epochs=1), arch, toy(10))
    assert ckpt.step == 2


def _baseline_loop(arch, data, seed, batch, epochs, lr=0.01, mu=0.9, max_steps=None):
    """Plain SGD + momentum on the raw weights, with no transform machinery."""
    params = init_params(arch, seed)
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(data.labels)
    spe = -(-n // batch)
    steps = 0
    for e in range(epochs):
        order = epoch_order(seed, e, n)
        for b in range(spe):
            if max_steps is not None and steps == max_steps:
                return params
            idx = order[b * batch:(b + 1) * batch]
            leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = T.softmax_cross_entropy(forward(arch, leaves, T.Tensor(data.images[idx])), data.labels[idx])
            T.backward(loss)
            for k in params:
                vel[k] = np.float32(mu) * vel[k] + leaves[k].grad
                params[k] = params[k] - np.float32(lr) * vel[k]
            steps += 1
    return params


@pytest.mark.parametrize("specs", [{}, {"conv": TransformSpec.crop(0.2, 0.4, p_apply=0.0),
                                        "linear": TransformSpec.rotate(0, 90, p_apply=0.0)}])
def test_no_op_transforms_match_baseline_over_100_steps(specs):
    arch = smallcnn(1, 8, 4)
    data = toy(200)
    ckpt = train(TrainConfig(batch_size=20, epochs=10, master_seed=3, specs=specs), arch, data)
    assert ckpt.step == 100
    ref = _baseline_loop(arch, data, 3, 20, 10)
    for k, v in ref.items():
        assert np.abs(ckpt.params[k] - v).max() <= 1e-6, k


def test_masked_entries_get_no_update():
    arch = smallcnn(1, 8, 4)
    spec = TransformSpec.crop(0.3, 0.3, p_apply=1.0)
    model = ShadowModel.create(arch, {"conv": spec}, 0)
    before = {k: v.copy() for k, v in model.params().items()}
    data = toy(16)
    train_step(model, data.images, data.labels, 0, OptimizerState())
    for layer in model.layers:
        if layer.current_instance.is_identity:
            continue
        mask = zero_mask(layer.current_instance, layer.plain_weight.shape)
        assert mask.any()
        delta = model.params()[f"{layer.name}.weight"] - before[f"{layer.name}.weight"]
        assert np.all(delta[mask] == 0)
        assert np.any(delta[~mask] != 0)


def test_straight_through_differs_from_adjoint():
    arch = smallcnn(1, 8, 4)
    spec = TransformSpec.rotate(37, 37, p_apply=1.0)
    data = toy(16)
    out = []
    for mode in ("adjoint", "straight_through"):
        model = ShadowModel.create(arch, {"conv": spec}, 0)
        train_step(model, data.images, data.labels, 0, OptimizerState(), mode)
        out.append(model.params()["conv1.weight"].copy())
    assert not np.array_equal(out[0], out[1])


def test_loss_decreases_on_toy_set():
    arch = smallcnn(1, 8, 4)
    losses = []
    train(TrainConfig(batch_size=20, epochs=8, specs={"conv": parse_spec("-C")}), arch, toy(200),
          on_epoch=lambda rec: losses.append(rec.train_loss))
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    arch = smallcnn(1, 8, 4)
    cfg = TrainConfig(batch_size=16, epochs=2, master_seed=11, specs={"conv": parse_spec("-CT")})
    a = train(cfg, arch, toy(64)).to_bytes()
    b = train(cfg, arch, toy(64)).to_bytes()
    assert a == b


def test_resume_is_bit_identical(tmp_path):
    arch = smallcnn(1, 8, 4)
    data = toy(64)
    cfg = TrainConfig(batch_size=16, epochs=3, master_seed=5, specs={"conv": parse_spec("-CT"),
                                                                     "linear": parse_spec("-R")})
    full = train(cfg, arch, data)
    partial = train(cfg, arch, data, max_steps=5)  # stops mid-epoch
    partial.save(tmp_path / "p.wasw")
    resumed = train(cfg, arch, data, resume=Checkpoint.load(tmp_path / "p.wasw"))
    assert resumed.step == full.step == 12
    assert resumed.to_bytes() == full.to_bytes()


def test_resume_rejects_other_architecture():
    ckpt = train(TrainConfig(batch_size=8, epochs=1), smallcnn(1, 8, 4), toy(8))
    with pytest.raises(ConfigError):
        train(TrainConfig(batch_size=8, epochs=1), smallcnn(1, 8, 3), toy(8, classes=3), resume=ckpt)


def test_non_finite_loss_names_layer():
    arch = smallcnn(1, 8, 4)
    model = ShadowModel.create(arch, {}, 0)
    model.layers[1].plain_weight[0, 0, 0, 0] = np.nan
    data = toy(8)
    with pytest.raises(NonFiniteLossError) as info:
        train_step(model, data.images, data.labels, 0, OptimizerState())
    assert info.value.layer == "conv2"


@pytest.mark.parametrize("kind,op", [
    ("identity", None),
    ("crop", ("crop", 0, 1, 2, 2)),
    ("translate", ("translate", 1, -1)),
    ("rotate", ("rotate", 37.0)),
    ("scale", ("scale", 0.8)),
    ("compose", None),
])
def test_gradient_path_matches_finite_differences(kind, op):
    arch = smallcnn(2, 8, 5)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 2, 8, 8)).astype(np.float32)
    y = rng.integers(0, 5, size=3)
    model = ShadowModel.create(arch, {}, 1)
    if kind == "identity":
        inst = IDENTITY
    elif kind == "compose":
        inst = parse_spec("-CT@p=1")
        from weightaug.transforms import sample_keyed
        inst = sample_keyed(inst, (32, 2, 3, 3), 1, 0, 0)
    else:
        inst = make_instance(*op)
    instances = {pl.name: inst for pl in arch.param_layers() if pl.kind == "conv"}
    report = gradient_path_check(model, x, y, instances, n_coords=200, seed=2)
    assert report.n_coords >= 200
    assert report.max_rel_err <= 1e-3, report
    assert report.masked_fd_all_zero


def test_gradient_path_with_matrix_domain_on_linear():
    arch = smallcnn(1, 8, 4)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 4, size=4)
    model = ShadowModel.create(arch, {}, 2)
    instances = {"fc": make_instance("rotate", 20.0, domain="matrix")}
    assert gradient_path_check(model, x, y, instances, n_coords=100, seed=0).max_rel_err <= 1e-3
