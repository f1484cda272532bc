from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faug import tensor as T
from faug.attacks import (
    VARIANTS,
    AttackConfig,
    LoopState,
    ModelView,
    clamp01,
    ensemble_logits,
    input_diversity,
    l1_normalize,
    load_adv_batch,
    momentum_loop,
    project,
    run_attack,
    save_adv_batch,
    translation_kernel,
    variance_tuned,
)
from faug.data import DataSpec, gen_dataset
from faug.errors import ConfigInvalid, InvalidKernel, InvalidSizes, ShapeMismatch
from faug.feature_aug import HookConfig, default_hook_for
from faug.models import Model, ModelConfig, TrainHyper, build_model, forward, train
from faug.rng import Stream


@pytest.fixture(scope="module")
def data():
    return gen_dataset(DataSpec(train=1000, test=200), seed=2)


@pytest.fixture(scope="module")
def mlp(data):
    model, _ = train(build_model(ModelConfig("mlp")), data.train, TrainHyper(epochs=3))
    return model


@pytest.fixture(scope="module")
def cnn(data):
    model, _ = train(build_model(ModelConfig("cnn_a")), data.train.subset(np.arange(300)), TrainHyper(epochs=1))
    return model


def _run(view, data, cfg, seed=0, n=24):
    return run_attack(view, data.test.images[:n], data.test.labels[:n], cfg, Stream(seed))


# -- momentum loop and projection ----------------------------------------------------


def test_one_dimensional_hand_trace():
    x = np.array([[0.5]], dtype=np.float32)
    out, dead = momentum_loop(x, lambda p, s: np.ones_like(p), epsilon=0.2, alpha=0.1, iterations=3, xi=1.0)
    assert out[0, 0] == pytest.approx(0.7, abs=1e-6)
    assert dead.tolist() == [0]


def test_loop_state_exposes_iteration_and_momentum():
    seen = []

    def grad(point, state: LoopState):
        seen.append((state.t, float(state.momentum.sum())))
        return np.ones_like(point)

    momentum_loop(np.zeros((1, 3), np.float32), grad, 1.0, 0.1, 3, xi=1.0)
    assert [t for t, _ in seen] == [0, 1, 2]
    assert seen[0][1] == 0.0 and seen[1][1] == pytest.approx(1.0)


def test_project_example():
    out = clamp01(project(np.array([0.9], np.float32), np.array([0.5], np.float32), 0.2))
    assert out[0] == pytest.approx(0.7)


def test_project_idempotent_inside_ball():
    x = np.array([0.3, 0.6], np.float32)
    inside = np.array([0.35, 0.55], np.float32)
    assert clamp01(project(inside, x, 0.1)).tobytes() == inside.tobytes()


def test_project_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        project(np.zeros(3, np.float32), np.zeros(2, np.float32), 0.1)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(0, 1), target=st.floats(-0.5, 1.5), eps=st.floats(0, 0.5))
def test_projection_is_nearest_feasible_point(x, target, eps):
    """Exhaustive grid oracle: the feasible point closest to the target."""
    x32, t32 = np.float32(x), np.float32(target)
    got = float(clamp01(project(np.array([t32]), np.array([x32]), eps))[0])
    grid = np.append(np.linspace(0.0, 1.0, 20001), float(x32))
    feasible = grid[np.abs(grid - x32) <= np.float32(eps) + 1e-7]
    best = feasible[np.argmin(np.abs(feasible - t32))]
    assert abs(got - best) <= 5e-5 + 1e-6


def test_l1_normalize_per_sample():
    g = np.array([[[1.0, -3.0]], [[0.0, 0.0]], [[2.0, 2.0]]], np.float32)
    out, dead = l1_normalize(g)
    np.testing.assert_allclose(np.abs(out).sum(axis=(1, 2)), [1, 0, 1])
    assert dead.tolist() == [False, True, False]


def test_dead_gradient_is_flagged_and_keeps_point(data):
    base = build_model(ModelConfig("mlp"))
    flat = Model(base.config, {k: np.zeros_like(v) for k, v in base.params.items()})
    adv = _run(ModelView.single(flat), data, AttackConfig(), n=4)
    assert adv.dead.tolist() == [10] * 4
    assert adv.adversarials.tobytes() == adv.originals.tobytes()


# -- reductions (bitwise) ---------------------------------------------------------------


@pytest.mark.parametrize("hooked", [False, True])
def test_xi_zero_mifgsm_is_ifgsm(mlp, data, hooked):
    view = ModelView.single(mlp, default_hook_for("mlp") if hooked else None)
    a = _run(view, data, AttackConfig("mifgsm", xi=0.0))
    b = _run(view, data, AttackConfig("ifgsm"))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


def test_xi_zero_nifgsm_is_ifgsm(mlp, data):
    view = ModelView.single(mlp)
    a = _run(view, data, AttackConfig("nifgsm", xi=0.0))
    b = _run(view, data, AttackConfig("ifgsm"))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


@pytest.mark.parametrize("hooked", [False, True])
def test_identity_kernel_tifgsm_is_mifgsm(cnn, data, hooked):
    view = ModelView.single(cnn, default_hook_for("cnn_a") if hooked else None)
    a = _run(view, data, AttackConfig("tifgsm", ti_kernel_size=1))
    b = _run(view, data, AttackConfig("mifgsm"))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


@pytest.mark.parametrize("hooked", [False, True])
def test_zero_probability_difgsm_is_mifgsm(cnn, data, hooked):
    view = ModelView.single(cnn, default_hook_for("cnn_a") if hooked else None)
    a = _run(view, data, AttackConfig("difgsm", di_prob=0.0))
    b = _run(view, data, AttackConfig("mifgsm"))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


@pytest.mark.parametrize("hooked", [False, True])
def test_single_scale_sinifgsm_is_nifgsm(mlp, data, hooked):
    view = ModelView.single(mlp, default_hook_for("mlp") if hooked else None)
    a = _run(view, data, AttackConfig("sinifgsm", si_scales=1))
    b = _run(view, data, AttackConfig("nifgsm"))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


@pytest.mark.parametrize("base,variant", [("mi", "mifgsm"), ("ni", "nifgsm")])
@pytest.mark.parametrize("n", [1, 3])
def test_zero_radius_variance_tuning_is_base(mlp, data, base, variant, n):
    view = ModelView.single(mlp)
    cfg = AttackConfig(vt_samples=n, vt_beta=0.0)
    a = variance_tuned(view, data.test.images[:24], data.test.labels[:24], cfg, Stream(0), base=base)
    b = _run(view, data, replace(cfg, variant=variant))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_sigma_hook_is_no_hook(cnn, data, variant):
    zero = HookConfig("conv1", sigma=0.0)
    a = _run(ModelView.single(cnn, zero), data, AttackConfig(variant))
    b = _run(ModelView.single(cnn), data, AttackConfig(variant))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


def test_nifgsm_first_step_equals_mifgsm(mlp, data):
    a = _run(ModelView.single(mlp), data, AttackConfig("nifgsm", iterations=1))
    b = _run(ModelView.single(mlp), data, AttackConfig("mifgsm", iterations=1))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


def test_hook_changes_the_attack(cnn, data):
    a = _run(ModelView.single(cnn, default_hook_for("cnn_a")), data, AttackConfig())
    b = _run(ModelView.single(cnn), data, AttackConfig())
    assert a.adversarials.tobytes() != b.adversarials.tobytes()


# -- budget, zero budget, determinism -------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_epsilon_returns_originals(mlp, data, variant):
    adv = _run(ModelView.single(mlp, default_hook_for("mlp")), data, AttackConfig(variant, epsilon=0.0))
    assert adv.adversarials.tobytes() == adv.originals.tobytes()


@pytest.mark.parametrize("variant", VARIANTS)
def test_same_seed_same_batch(cnn, data, variant):
    view = ModelView.single(cnn, default_hook_for("cnn_a"))
    a, b = _run(view, data, AttackConfig(variant), seed=3), _run(view, data, AttackConfig(variant), seed=3)
    assert a.adversarials.tobytes() == b.adversarials.tobytes()
    assert a.success.tolist() == b.success.tolist()


_TINY = {}


def _tiny_models():
    if not _TINY:
        for arch in ("mlp", "cnn_a", "tiny_attn"):
            _TINY[arch] = build_model(ModelConfig(arch, init_seed=3))
    return _TINY


budget_cases = st.fixed_dictionaries({
    "variant": st.sampled_from(VARIANTS),
    "arch": st.sampled_from(["mlp", "cnn_a", "tiny_attn"]),
    "hooked": st.booleans(),
    "epsilon": st.floats(0, 0.5),
    "alpha": st.floats(1e-4, 0.3),
    "iterations": st.integers(1, 3),
    "xi": st.floats(0, 2),
    "di_prob": st.floats(0, 1),
    "di_low": st.integers(8, 16),
    "ti_kernel_size": st.sampled_from([1, 3, 5]),
    "si_scales": st.integers(1, 3),
    "vt_samples": st.integers(1, 2),
    "vt_beta": st.floats(0, 2),
    "seed": st.integers(0, 2**32 - 1),
})


def check_budget(case) -> None:
    model = _tiny_models()[case["arch"]]
    cfg = AttackConfig(
        variant=case["variant"], epsilon=case["epsilon"], alpha=case["alpha"], iterations=case["iterations"],
        xi=case["xi"], di_prob=case["di_prob"], di_low=case["di_low"], di_high=16,
        ti_kernel_size=case["ti_kernel_size"], si_scales=case["si_scales"], vt_samples=case["vt_samples"],
        vt_beta=case["vt_beta"],
    )
    rng = np.random.default_rng(case["seed"])
    x = rng.random((2, 1, 16, 16)).astype(np.float32)
    x[0, 0, :2] = 0.0  # exercise both box edges
    x[1, 0, :2] = 1.0
    hook = default_hook_for(case["arch"]) if case["hooked"] else None
    adv = run_attack(ModelView.single(model, hook), x, rng.integers(0, 10, 2), cfg, Stream(case["seed"]))
    assert adv.max_perturbation() <= case["epsilon"] + 1e-6
    assert adv.adversarials.min() >= 0.0 and adv.adversarials.max() <= 1.0


@settings(max_examples=1000, deadline=None)
@given(budget_cases)
def test_budget_invariant(case):
    check_budget(case)


# -- input diversity / kernels ------------------------------------------------------------


def test_diversity_zero_probability_is_identity():
    x = T.tensor(np.random.default_rng(0).random((3, 1, 16, 16)))
    for s in range(20):
        assert input_diversity(x, 0.0, 13, 16, Stream(s)) is x


def test_diversity_full_size_is_identity_placement():
    x = T.tensor(np.random.default_rng(0).random((3, 1, 16, 16)))
    out = input_diversity(x, 1.0, 16, 16, Stream(0))
    assert out.data.tobytes() == x.data.tobytes()


@pytest.mark.parametrize("seed", range(100))
def test_diversity_shape_and_range(seed):
    x = T.tensor(np.random.default_rng(seed).random((2, 1, 16, 16)))
    out = input_diversity(x, 1.0, 13, 16, Stream(seed)).data
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= x.data.max()
    assert set(np.unique(out)) <= set(np.unique(x.data)) | {0.0}


def test_diversity_invalid_sizes():
    x = T.tensor(np.zeros((1, 1, 16, 16)))
    with pytest.raises(InvalidSizes):
        input_diversity(x, 0.5, 14, 13, Stream(0))
    with pytest.raises(InvalidSizes):
        input_diversity(x, 0.5, 13, 17, Stream(0))


def test_identity_kernel():
    assert translation_kernel(1, 1.5).tolist() == [[1.0]]


def test_wide_kernel_is_uniform():
    np.testing.assert_allclose(translation_kernel(3, 1e6), np.full((3, 3), 1 / 9), atol=1e-3)


@pytest.mark.parametrize("size", [3, 5, 7, 15])
@pytest.mark.parametrize("sigma", [0.3, 1.0, 1.5, 4.0])
def test_kernel_sums_to_one(size, sigma):
    k = translation_kernel(size, sigma)
    assert k.shape == (size, size)
    assert abs(k.sum() - 1) < 1e-6
    np.testing.assert_allclose(k, k.T)


@pytest.mark.parametrize("size,sigma", [(4, 1.0), (0, 1.0), (3, 0.0), (5, -1.0)])
def test_invalid_kernel(size, sigma):
    with pytest.raises(InvalidKernel):
        translation_kernel(size, sigma)


# -- ensembles ------------------------------------------------------------------------------


def test_single_member_ensemble_is_member():
    m = build_model(ModelConfig("cnn_a"))
    x = T.tensor(np.random.default_rng(0).random((3, 1, 16, 16)))
    view = ModelView.ensemble([m])
    assert ensemble_logits(view.members, x, None).data.tobytes() == forward(m, x).data.tobytes()


def test_opposite_members_cancel():
    m = build_model(ModelConfig("mlp"))
    neg = dict(m.params)
    neg["fc3.w"], neg["fc3.b"] = -m.params["fc3.w"], -m.params["fc3.b"]
    view = ModelView.ensemble([m, Model(m.config, neg)])
    x = T.tensor(np.random.default_rng(0).random((3, 1, 16, 16)))
    np.testing.assert_array_equal(ensemble_logits(view.members, x, None).data, 0.0)


def test_ensemble_mean_matches_external():
    models = [build_model(ModelConfig(a, init_seed=5)) for a in ("mlp", "cnn_a", "cnn_b", "tiny_attn")]
    x = T.tensor(np.random.default_rng(1).random((4, 1, 16, 16)))
    got = ensemble_logits(ModelView.ensemble(models).members, x, None).data
    expected = np.mean([forward(m, x).data.astype(np.float64) for m in models], axis=0)
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_ensemble_members_draw_independent_noise():
    m = build_model(ModelConfig("mlp"))
    hook = HookConfig("fc1", sigma=0.5)
    view = ModelView.ensemble([m, m], [hook, hook])
    x = T.tensor(np.random.default_rng(1).random((2, 1, 16, 16)))
    a = forward(m, x, hooks=[hook], rng=Stream(0).child("member", 0)).data
    b = forward(m, x, hooks=[hook], rng=Stream(0).child("member", 1)).data
    got = ensemble_logits(view.members, x, Stream(0)).data
    assert not np.array_equal(a, b)
    np.testing.assert_allclose(got, (a + b) / 2, atol=1e-6)


def test_ensemble_shape_mismatch():
    a = build_model(ModelConfig("mlp"))
    b = build_model(ModelConfig("mlp", num_classes=5))
    with pytest.raises(ShapeMismatch):
        run_attack(ModelView.ensemble([a, b]), np.zeros((1, 1, 16, 16), np.float32), [0], AttackConfig(), Stream(0))


# -- config, success flags, persistence -------------------------------------------------------


@pytest.mark.parametrize("kwargs", [dict(variant="pgd"), dict(epsilon=-0.1), dict(alpha=0.0), dict(iterations=0),
                                    dict(xi=-1.0), dict(si_scales=0), dict(vt_samples=0), dict(vt_beta=-1.0)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigInvalid):
        AttackConfig(**kwargs).validate()


def test_config_accepts_t_alias():
    assert AttackConfig.from_dict({"T": 7}).iterations == 7


def test_defaults():
    cfg = AttackConfig()
    assert (cfg.epsilon, cfg.alpha, cfg.iterations, cfg.xi) == (16 / 255, 2 / 255, 10, 1.0)


def test_success_flags_use_clean_surrogate(cnn, data):
    adv = _run(ModelView.single(cnn, default_hook_for("cnn_a")), data, AttackConfig())
    clean = forward(cnn, adv.adversarials).data.argmax(axis=1)
    np.testing.assert_array_equal(adv.success, clean != adv.labels)


def test_plain_chunking_does_not_change_samples(mlp, data):
    a = _run(ModelView.single(mlp), data, AttackConfig(chunk=5))
    b = _run(ModelView.single(mlp), data, AttackConfig(chunk=250))
    np.testing.assert_allclose(a.adversarials, b.adversarials, atol=1e-6)


def test_monotone_budget(mlp, data):
    rates = []
    for k in (2, 4, 8, 16):
        adv = run_attack(ModelView.single(mlp), data.test.images, data.test.labels, AttackConfig(epsilon=k / 255),
                         Stream(0))
        rates.append(adv.white_box_rate)
    assert rates == sorted(rates)


def test_adv_batch_round_trip(mlp, data, tmp_path):
    adv = _run(ModelView.single(mlp), data, AttackConfig(), n=8)
    save_adv_batch(adv, tmp_path / "adv", extra={"master_seed": 0})
    back = load_adv_batch(tmp_path / "adv")
    assert back.adversarials.tobytes() == adv.adversarials.tobytes()
    assert back.originals.tobytes() == adv.originals.tobytes()
    assert back.success.tolist() == adv.success.tolist()
    assert back.config == adv.config


def test_adv_batch_detects_tampering(mlp, data, tmp_path):
    adv = _run(ModelView.single(mlp), data, AttackConfig(), n=8)
    d = tmp_path / "adv"
    save_adv_batch(adv, d)
    raw = bytearray((d / "adversarials.f32").read_bytes())
    raw[0] ^= 1
    (d / "adversarials.f32").write_bytes(bytes(raw))
    with pytest.raises(ShapeMismatch):
        load_adv_batch(d)
