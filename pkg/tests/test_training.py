import math

import numpy as np
import pytest

from weakseg.dataset import PartialAnnotation, Sample
from weakseg.errors import ConfigurationError, DimensionError
from weakseg.losses import IGNORE, WEAK_OFFSET, ClassId, LossConfig
from weakseg.training import AdamHyper, History, TrainState, adam_step, train, validation_loss
from weakseg.unet import ModelConfig, build_model

TOY = ModelConfig(context_slices=1, image_size=8, base_channels=2, depth=1)


def toy_samples(n, seed):
    """Bright squares are CON, the dark rest is NOR; each slice annotates one of the two."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        bright = np.zeros((8, 8), bool)
        y, x = rng.integers(0, 5, 2)
        bright[y : y + 3, x : x + 3] = True
        img = np.where(bright, 0.9, 0.1) + 0.02 * rng.standard_normal((8, 8))
        chosen = ClassId.CON if i % 2 == 0 else ClassId.NOR
        mine = bright if chosen == ClassId.CON else ~bright
        labels = np.where(mine, int(chosen), WEAK_OFFSET + int(chosen)).astype(np.int8)
        lung = np.ones((8, 8), bool)
        out.append(Sample(PartialAnnotation(0, chosen, labels, lung, f"toy{i}"), img[None, :, :, None]))
    return out


def test_adam_first_step_is_minus_step_size():
    theta, state = adam_step({"w": np.zeros(3)}, {"w": np.ones(3)}, TrainState(), AdamHyper())
    assert state.t == 1
    assert np.all(np.abs(theta["w"] + 1e-3) < 1e-9)


def test_adam_zero_gradient_keeps_parameters():
    params = {"a": np.array([0.5, -2.0]), "b": np.array([1.0])}
    out, _ = adam_step(params, {"a": np.zeros(2), "b": np.array([3.0])}, TrainState(), AdamHyper())
    np.testing.assert_array_equal(out["a"], params["a"])
    assert out["b"][0] != params["b"][0]


def test_adam_matches_scalar_reference_over_steps():
    hyper = AdamHyper(step_size=0.01)
    rng = np.random.default_rng(0)
    grads = rng.standard_normal(6)
    params, state = {"w": np.array([0.3])}, TrainState()
    theta, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        params, state = adam_step(params, {"w": np.array([g])}, state, hyper)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert params["w"][0] == pytest.approx(theta, rel=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, TrainState(), AdamHyper())


def test_hyper_validation():
    with pytest.raises(ConfigurationError):
        AdamHyper(beta1=1.0).validate()
    with pytest.raises(ConfigurationError):
        AdamHyper(step_size=0).validate()


def test_empty_sets_are_rejected():
    model = build_model(TOY, 0)
    with pytest.raises(ConfigurationError):
        train(model, [], toy_samples(2, 0), LossConfig())
    with pytest.raises(ConfigurationError):
        train(model, toy_samples(2, 0), [], LossConfig())


def test_single_epoch_gives_history_of_one():
    _, hist = train(build_model(TOY, 0), toy_samples(4, 0), toy_samples(2, 1), LossConfig(), AdamHyper(max_epochs=1))
    assert len(hist) == 1 and len(hist.val_loss) == 1


@pytest.fixture(scope="module")
def toy_run():
    hyper = AdamHyper(step_size=0.01, max_epochs=12, patience=12, batch_size=2)
    args = (build_model(TOY, 0), toy_samples(8, 0), toy_samples(4, 1), LossConfig(0.1), hyper)
    return args, train(*args, seed=0)


def test_separable_toy_learns(toy_run):
    _, (best, hist) = toy_run
    assert min(hist.val_loss) < hist.initial_val_loss
    assert validation_loss(best, toy_samples(4, 1)) == min(hist.val_loss)


def test_returned_model_is_best_epoch(toy_run):
    _, (best, hist) = toy_run
    assert hist.val_loss[hist.best_epoch - 1] == min(hist.val_loss)


def test_training_is_deterministic(toy_run):
    args, (best, hist) = toy_run
    best2, hist2 = train(*args, seed=0)
    assert hist2.train_loss == hist.train_loss and hist2.val_loss == hist.val_loss
    assert all(best.params[k].tobytes() == best2.params[k].tobytes() for k in best.params)


def test_supervised_only_and_lambda_zero_share_trajectory():
    hyper = AdamHyper(step_size=0.01, max_epochs=3, batch_size=2)
    data = toy_samples(4, 2), toy_samples(2, 3)
    a, ha = train(build_model(TOY, 1), *data, LossConfig(0.0, "supervised_only"), hyper, seed=5)
    b, hb = train(build_model(TOY, 1), *data, LossConfig(0.0, "proposed"), hyper, seed=5)
    assert ha.train_loss == hb.train_loss and ha.val_loss == hb.val_loss
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_lambda_zero_matches_training_with_weak_pixels_deleted():
    hyper = AdamHyper(step_size=0.01, max_epochs=2, batch_size=2)
    train_set, val_set = toy_samples(4, 4), toy_samples(2, 5)
    stripped = []
    for s in train_set:
        ann = s.annotation
        labels = np.where(ann.labels >= WEAK_OFFSET, IGNORE, ann.labels).astype(np.int8)
        stripped.append(Sample(PartialAnnotation(0, ann.chosen_class, labels, ann.lung_mask, ann.case_id), s.volume))
    a, _ = train(build_model(TOY, 2), train_set, val_set, LossConfig(0.0), hyper)
    b, _ = train(build_model(TOY, 2), stripped, val_set, LossConfig(0.7), hyper)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_early_stopping_honours_patience(monkeypatch):
    import weakseg.training as tr

    losses = iter([5.0, 3.0, 4.0, 4.0, 4.0, 1.0, 0.5])
    monkeypatch.setattr(tr, "validation_loss", lambda *a, **k: next(losses))
    _, hist = train(build_model(TOY, 0), toy_samples(2, 0), toy_samples(1, 1), LossConfig(), AdamHyper(max_epochs=10, patience=3))
    assert hist.initial_val_loss == 5.0
    assert hist.val_loss == [3.0, 4.0, 4.0, 4.0] and hist.best_epoch == 1


def test_history_csv(tmp_path):
    h = History(train_loss=[1.5, 0.25], val_loss=[2.0, 1.0], best_epoch=2)
    h.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "epoch,train_loss,val_loss\n1,1.5,2.0\n2,0.25,1.0\n"
