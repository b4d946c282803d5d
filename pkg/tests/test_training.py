import numpy as np
import pytest

from bodyformer.body import synthesize_toy_model, project_weak_perspective, regress_joints, smpl_forward
from bodyformer.network import ModelConfig, build_model, forward
from bodyformer.numerics import GradTape, Tensor
from bodyformer.numerics import tensor as T
from bodyformer.training import (
    Adam,
    DivergenceError,
    Sample,
    evaluate_metrics,
    make_synthetic_samples,
    render_joint_map,
    sample_loss,
    train_overfit,
)

SEED = 664501


def test_adam_first_step_is_signed_lr():
    # with bias correction the very first update is lr * g / (|g| + eps)
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([0.5, -4.0, 0.0])
    opt.step()
    expected = np.array([1.0, -2.0, 3.0]) - 0.1 * np.array([1.0, -1.0, 0.0]) * (
        np.abs([0.5, -4.0, 0.0]) / (np.abs([0.5, -4.0, 0.0]) + 1e-8)
    )
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-12)


def test_adam_matches_reference_updates():
    # independent re-implementation, checked over several noisy steps
    rng = np.random.default_rng(SEED)
    x0 = rng.normal(size=7)
    p = Tensor(x0.copy(), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    ref = x0.copy()
    m = np.zeros(7)
    v = np.zeros(7)
    for t in range(1, 12):
        g = rng.normal(size=7)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-14)


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([4.0, -3.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(400):
        opt.zero_grad()
        with GradTape() as tape:
            loss = T.mean(T.square(p))
            tape.backward(loss)
        opt.step()
    assert np.abs(p.data).max() < 1e-3


def test_adam_rejects_bad_lr_and_skips_missing_grads():
    with pytest.raises(ValueError):
        Adam({}, lr=0.0)
    p = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    opt.step()  # no grad, no movement
    np.testing.assert_array_equal(p.data, np.ones(2))


def test_render_joint_map_peaks_at_joint():
    img = render_joint_map(np.array([[0.5, -0.25]]), size=64)
    r, c = np.unravel_index(np.argmax(img), img.shape)
    # x=0.5 -> right of center, y=-0.25 -> above center
    assert abs(c / 63 * 2 - 1 - 0.5) < 0.05
    assert abs(r / 63 * 2 - 1 + 0.25) < 0.05
    assert np.array_equal(img, render_joint_map(np.array([[0.5, -0.25]]), size=64))


def test_synthetic_samples_are_consistent():
    body = synthesize_toy_model(SEED, 90)
    samples = make_synthetic_samples(body, 32, 3, seed=5)
    assert len(samples) == 3
    eye = np.eye(3)
    for s in samples:
        assert s.image.shape == (32, 32)
        assert s.mesh.shape == (90, 3)
        # targets really are the body model outputs for the stored params
        np.testing.assert_array_equal(s.mesh, smpl_forward(body, s.params))
        np.testing.assert_array_equal(s.joints3d, regress_joints(body, s.mesh))
        np.testing.assert_array_equal(
            s.joints2d, project_weak_perspective(s.joints3d, s.params.camera))
        assert s.params.camera[0] > 0
        for r in s.params.rotations:
            np.testing.assert_allclose(r.matrix @ r.matrix.T, eye, rtol=0, atol=1e-12)
            assert not np.array_equal(r.matrix, eye)
    again = make_synthetic_samples(body, 32, 3, seed=5)
    for a, b in zip(samples, again):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mesh, b.mesh)
    with pytest.raises(ValueError):
        make_synthetic_samples(body, 32, 0, seed=5)


def test_sample_loss_zero_on_perfect_prediction():
    body = synthesize_toy_model(SEED + 1, 60)
    cfg = ModelConfig.tiny()
    model = build_model(cfg, body, seed=2)
    image = np.zeros((cfg.image_size, cfg.image_size))
    res = forward(model, image)
    fake = Sample(
        image=image,
        params=res.final.to_params(),
        mesh=res.mesh.data.copy(),
        joints3d=res.joints3d.data.copy(),
        joints2d=res.joints2d.data.copy(),
    )
    assert sample_loss(res, fake).data.item() == 0.0


@pytest.fixture(scope="module")
def short_run():
    cfg = ModelConfig.tiny()
    body = synthesize_toy_model(SEED + 2, 60)
    samples = make_synthetic_samples(body, cfg.image_size, 1, seed=8)

    def run():
        model = build_model(cfg, body, seed=6)
        return train_overfit(model, samples, steps=12, lr=1e-3)

    return run


def test_short_training_descends(short_run):
    res = short_run()
    assert len(res.losses) == 13
    assert res.losses[-1] < res.losses[0]
    assert np.isfinite(res.losses).all()
    for key in ("mpjpe", "mpre"):
        assert np.isfinite(res.metrics_initial[key])
        assert np.isfinite(res.metrics_final[key])


def test_training_is_deterministic(short_run):
    a = short_run()
    b = short_run()
    assert np.array_equal(a.losses, b.losses)
    assert a.metrics_final == b.metrics_final


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_divergence_guard():
    cfg = ModelConfig.tiny()
    body = synthesize_toy_model(SEED + 3, 60)
    model = build_model(cfg, body, seed=1)
    samples = make_synthetic_samples(body, cfg.image_size, 1, seed=9)
    samples[0].mesh[:] = 1e308  # squared-error term overflows
    with pytest.raises(DivergenceError):
        train_overfit(model, samples, steps=3)
    with pytest.raises(ValueError):
        train_overfit(model, [], steps=3)


def test_evaluate_metrics_reflects_truth():
    cfg = ModelConfig.tiny()
    body = synthesize_toy_model(SEED + 4, 60)
    model = build_model(cfg, body, seed=3)
    # sample whose pose IS the untrained prediction: errors vanish
    image = np.zeros((cfg.image_size, cfg.image_size))
    res = forward(model, image)
    perfect = Sample(image, res.final.to_params(), res.mesh.data.copy(),
                     res.joints3d.data.copy(), res.joints2d.data.copy())
    m = evaluate_metrics(model, [perfect])
    assert m["mpjpe"] < 1e-12
    assert m["mpre"] < 1e-5  # angle recovery is fuzzy right at zero
