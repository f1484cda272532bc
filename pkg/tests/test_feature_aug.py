import numpy as np
import pytest

from faug import tensor as T
from faug.errors import InvalidNoiseParams, UnknownArchitecture
from faug.feature_aug import HookConfig, apply_hook, default_hook_for, hook_registry
from faug.rng import Stream


@pytest.fixture
def activation():
    return T.tensor(np.random.default_rng(0).normal(size=(4, 16, 14, 14)))


@pytest.mark.parametrize(
    "cfg",
    [HookConfig("conv1", "normal", sigma=0.0), HookConfig("conv1", "uniform", low=0.0, high=0.0),
     HookConfig("conv1", "dropout", p=0.0)],
    ids=["normal", "uniform", "dropout"],
)
def test_zero_strength_is_bitwise_identity(activation, cfg):
    out = apply_hook(activation, cfg, Stream(1))
    assert out.data.tobytes() == activation.data.tobytes()


def test_normal_noise_std(activation):
    out = apply_hook(activation, HookConfig("conv1", sigma=0.3), Stream(2))
    diff = out.data.astype(np.float64) - activation.data
    assert diff.size >= 10_000
    assert abs(diff.std() - 0.3) < 0.02
    assert abs(diff.mean()) < 0.01


def test_normal_mu_shifts_mean(activation):
    out = apply_hook(activation, HookConfig("conv1", mu=0.5, sigma=0.1), Stream(2))
    assert abs((out.data.astype(np.float64) - activation.data).mean() - 0.5) < 0.01


def test_uniform_noise_bounds(activation):
    out = apply_hook(activation, HookConfig("conv1", "uniform", low=-0.3, high=0.3), Stream(3))
    diff = out.data.astype(np.float64) - activation.data
    assert diff.min() >= -0.3 - 1e-6 and diff.max() <= 0.3 + 1e-6
    assert abs(diff.std() - 0.6 / np.sqrt(12)) < 0.01


def test_dropout_fraction_and_scale():
    ones = T.tensor(np.ones((100, 100)))
    out = apply_hook(ones, HookConfig("fc1", "dropout", p=0.3), Stream(4)).data
    zeroed = np.mean(out == 0)
    assert abs(zeroed - 0.3) < 0.03
    np.testing.assert_allclose(out[out != 0], 1 / 0.7, rtol=1e-6)


@pytest.mark.parametrize("kind,params", [("normal", {"sigma": 0.2}), ("uniform", {"low": -1, "high": 2}),
                                         ("dropout", {"p": 0.5})])
def test_shape_preserved(activation, kind, params):
    out = apply_hook(activation, HookConfig("x", kind, **params), Stream(0))
    assert out.shape == activation.shape


def test_same_stream_same_noise(activation):
    cfg = HookConfig("conv1", sigma=0.3)
    a = apply_hook(activation, cfg, Stream(5)).data
    b = apply_hook(activation, cfg, Stream(5)).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("cfg", [
    HookConfig("conv1", "normal", sigma=0.4),
    HookConfig("conv1", "uniform", low=-0.2, high=0.3),
    HookConfig("conv1", "dropout", p=0.3),
])
def test_backward_treats_noise_as_constant(cfg):
    x0 = np.random.default_rng(1).normal(size=(3, 5))
    w = T.tensor(np.random.default_rng(2).normal(size=(5, 4)))
    labels = [0, 3, 1]

    with T.Tape():
        x = T.tensor(x0, requires_grad=True)
        g_hook = T.backward(T.cross_entropy_logits(T.matmul(T.relu(apply_hook(x, cfg, Stream(8))), w), labels))[x]

    kind = "dropout-mask" if cfg.kind == "dropout" else cfg.kind
    frozen = T.tensor(T.sample_noise(kind, cfg.noise_params(), x0.shape, Stream(8)).data)
    combine = T.mul if cfg.kind == "dropout" else T.add
    with T.Tape():
        x = T.tensor(x0, requires_grad=True)
        g_frozen = T.backward(T.cross_entropy_logits(T.matmul(T.relu(combine(x, frozen)), w), labels))[x]
    assert g_hook.data.tobytes() == g_frozen.data.tobytes()


@pytest.mark.parametrize("kwargs", [dict(sigma=-0.1), dict(kind="uniform", low=1.0, high=0.0),
                                    dict(kind="dropout", p=1.0), dict(kind="dropout", p=-0.1),
                                    dict(kind="laplace")])
def test_invalid_params(activation, kwargs):
    with pytest.raises(InvalidNoiseParams):
        apply_hook(activation, HookConfig("conv1", **kwargs), Stream(0))


def test_missing_rng(activation):
    with pytest.raises(InvalidNoiseParams):
        apply_hook(activation, HookConfig("conv1", sigma=0.1), None)


@pytest.mark.parametrize("arch,layer,sigma", [("mlp", "fc1", 0.3), ("cnn_a", "conv1", 0.3),
                                              ("cnn_b", "conv1", 0.3), ("tiny_attn", "attn_block", 0.6)])
def test_registry(arch, layer, sigma):
    h = default_hook_for(arch)
    assert (h.layer, h.kind, h.mu, h.sigma) == (layer, "normal", 0.0, sigma)


def test_registry_unknown():
    with pytest.raises(UnknownArchitecture):
        default_hook_for("vit_b16")


def test_registry_listing():
    assert set(hook_registry()) == {"mlp", "cnn_a", "cnn_b", "tiny_attn"}


def test_round_trip_dict():
    h = HookConfig("conv2", "uniform", low=-0.2, high=0.2)
    assert HookConfig.from_dict(h.to_dict()) == h
    assert h.to_dict() == {"layer": "conv2", "kind": "uniform", "low": -0.2, "high": 0.2}


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(InvalidNoiseParams):
        HookConfig.from_dict({"layer": "fc1", "strength": 1})
