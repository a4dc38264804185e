import numpy as np
import pytest
import torch

from voxeldose.predictor import (
    ArchConfig,
    DosePredictor,
    ScoutNet,
    TrainConfig,
    augment,
    build_predictor,
    denormalize_dose,
    dose_bounds,
    dose_loss,
    finite_difference_check,
    normalize_dose,
    train,
    write_training_log,
)

from .oracles import dose_loss_loops

SMALL = dict(widths=(4, 8, 8, 16), stem_pool=1)


def toy_data(n=6, seed=0, rows=48, cols=40):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3, rows, cols)).astype(np.float32)
    x[:, 2] = (rng.random((n, rows, 1)) < 0.5)
    # doses depend on the mean scout intensity so there is something to learn
    level = x[:, :2].mean(axis=(1, 2, 3))
    y = 5.0 + 20.0 * level[:, None] * np.linspace(0.8, 1.2, 7)[None, :]
    return x, y


def test_outputs_in_unit_interval():
    net = ScoutNet(ArchConfig(**SMALL))
    out = net(torch.randn(5, 3, 48, 40) * 100)
    assert out.shape == (5, 7)
    assert torch.all(out > 0) and torch.all(out < 1)


def test_zero_weights_give_half():
    net = ScoutNet(ArchConfig(**SMALL))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    np.testing.assert_allclose(net(torch.rand(2, 3, 48, 40)).detach().numpy(), 0.5)


def test_head_isolation():
    torch.manual_seed(0)
    net = ScoutNet(ArchConfig(**SMALL))
    x = torch.rand(2, 3, 48, 40)
    before = net(x).detach()
    with torch.no_grad():
        net.heads[3][0].bias.add_(1.0)
    after = net(x).detach()
    changed = (after != before).any(dim=0).numpy()
    np.testing.assert_array_equal(changed, [j == 3 for j in range(7)])


def test_head_gradient_independence():
    torch.manual_seed(1)
    net = ScoutNet(ArchConfig(**SMALL))
    out = net(torch.rand(2, 3, 48, 40))
    out[:, 2].sum().backward()
    for j, h in enumerate(net.heads):
        g = sum(float(p.grad.abs().sum()) for p in h.parameters() if p.grad is not None)
        assert (g > 0) == (j == 2)


def test_loss_values():
    assert float(dose_loss(torch.tensor([[0.5]]), torch.tensor([[0.3]]))) == pytest.approx(0.2)
    d = torch.rand(4, 7, dtype=torch.float64)
    assert float(dose_loss(d, d)) == 0.0
    rng = np.random.default_rng(2)
    a, b = rng.random((9, 7)), rng.random((9, 7))
    assert float(dose_loss(torch.tensor(a), torch.tensor(b))) == pytest.approx(dose_loss_loops(a, b), rel=1e-12)
    perm = rng.permutation(9)
    assert float(dose_loss(torch.tensor(a[perm]), torch.tensor(b[perm]))) == \
        pytest.approx(float(dose_loss(torch.tensor(a), torch.tensor(b))), rel=1e-14)
    sq = float(dose_loss(torch.tensor(a), torch.tensor(b), squared=True))
    assert sq == pytest.approx(((a - b) ** 2).sum() / 9, rel=1e-12)


def test_normalization():
    b = np.array([[2.0, 10.0]] * 7)
    assert normalize_dose(np.full(7, 6.0), b)[0] == 0.5
    v = np.random.default_rng(3).uniform(2, 10, (5, 7))
    np.testing.assert_allclose(denormalize_dose(normalize_dose(v, b), b), v, rtol=1e-12)
    with pytest.raises(ValueError):
        normalize_dose(v, np.array([[1.0, 1.0]] * 7))
    bounds = dose_bounds(np.array([[1.0] * 7, [3.0] * 7]))
    np.testing.assert_allclose(bounds[0], [0.9, 3.1])


def test_augment():
    rng = np.random.default_rng(4)
    x = rng.random((3, 20, 10)).astype(np.float32)
    x[2] = 0
    x[2, 5:9] = 1
    y = np.arange(7.0)
    once, y1 = augment(x, y, rng, sigma=0.0, flip=True)
    twice, _ = augment(once, y, rng, sigma=0.0, flip=True)
    np.testing.assert_array_equal(twice, x)
    assert y1 is y
    np.testing.assert_array_equal(once[2], x[2, ::-1])
    same, _ = augment(x, y, rng, sigma=0.0, flip=False)
    np.testing.assert_array_equal(same, x)
    big = np.zeros((3, 400, 250), np.float32)
    noisy, _ = augment(big, y, np.random.default_rng(5), sigma=0.01, flip=False)
    assert noisy[:2].std() == pytest.approx(0.01, rel=0.05)
    assert np.all(noisy[2] == 0)


def test_gradient_check_small_models():
    for s in range(3):
        torch.manual_seed(s)
        net = ScoutNet(ArchConfig(widths=(3, 4, 4, 5), stem_pool=1)).double()
        g = torch.Generator().manual_seed(100 + s)
        x = torch.rand(3, 3, 24, 20, dtype=torch.float64, generator=g)
        d = torch.rand(3, 7, dtype=torch.float64, generator=g)
        assert finite_difference_check(net, x, d, seed=s) <= 1e-5


def test_training_descends_and_is_deterministic():
    x, y = toy_data()
    cfg = TrainConfig(epochs=50, batch_size=3, seed=3, **SMALL)
    a = train(x, y, cfg, val=(x[:2], y[:2]))
    b = train(x, y, cfg)
    losses = [r["train_loss"] for r in a.history]
    assert len(losses) == 50
    assert np.mean(losses[45:]) < losses[0]
    assert np.isfinite(a.history[0]["val_loss"])
    for p, q in zip(a.net.parameters(), b.net.parameters()):
        assert torch.equal(p, q)


def test_predict_and_checkpoint(tmp_path):
    x, y = toy_data(4)
    m = train(x, y, TrainConfig(epochs=2, batch_size=2, **SMALL))
    m.input_bounds = {"frontal": (0.0, 3.0), "lateral": (0.0, 4.0)}
    pred = m.predict(x)
    assert pred.shape == (4, 7)
    lo, hi = m.bounds[:, 0], m.bounds[:, 1]
    assert np.all(pred > lo) and np.all(pred < hi)
    assert len(m.timings_ms) == 4
    m.save(tmp_path / "m.npz")
    n = DosePredictor.load(tmp_path / "m.npz")
    np.testing.assert_array_equal(n.predict(x), pred)
    assert n.input_bounds == m.input_bounds and n.labels == m.labels
    write_training_log(tmp_path / "log.csv", m.history)
    assert (tmp_path / "log.csv").read_text().startswith("epoch,train_loss,val_loss\n")


def test_predict_order_preserving():
    x, y = toy_data(5)
    m = train(x, y, TrainConfig(epochs=1, **SMALL))
    full = m.predict(x, batch_size=2)
    for i in range(5):
        np.testing.assert_allclose(m.predict(x[i])[0], full[i], rtol=1e-6)


def test_channel_selection():
    x, y = toy_data(4)
    m = train(x, y, TrainConfig(epochs=1, channels=("frontal", "range"), **SMALL))
    assert m.arch.in_channels == 2
    assert m.predict(x).shape == (4, 7)


def test_training_errors():
    x, y = toy_data(2)
    with pytest.raises(ValueError):
        train(x[:0], y[:0], TrainConfig(epochs=1, **SMALL))
    with pytest.raises(FloatingPointError):
        train(x, np.full_like(y, np.nan), TrainConfig(epochs=1, **SMALL),
              bounds=np.array([[0.0, 1.0]] * 7))
    with pytest.raises(ValueError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ValueError):
        build_predictor(TrainConfig(**SMALL), None).predict(x)
