import numpy as np
import pytest

from med2n import autodiff as ad
from med2n.autodiff import Tensor
from med2n.errors import EpisodeError, LabelError
from med2n.gradcheck import check_params
from med2n.heads import GlobalClassifier, PrototypeHead, averaging_matrix, fsl_loss, fsl_predict, global_loss


def test_nearest_prototype_wins():
    s = Tensor(np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]))
    q = Tensor(np.array([[10.0, 0.0], [0.0, 10.0]]))
    lp = fsl_predict(s, np.array([0, 1, 2]), q)
    np.testing.assert_array_equal(lp.data.argmax(1), [1, 2])


def test_identical_prototypes_give_uniform_and_ln_n():
    s = Tensor(np.ones((5, 3)))
    q = Tensor(np.random.default_rng(0).standard_normal((10, 3)))
    lp = fsl_predict(s, np.arange(5), q)
    np.testing.assert_allclose(lp.data, np.log(1 / 5))
    assert fsl_loss(lp, np.repeat(np.arange(5), 2)).item() == pytest.approx(np.log(5))


def test_two_way_one_shot_hand_calculation():
    s = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]))
    q = Tensor(np.array([[1.0, 1.0]]))
    lp = fsl_predict(s, np.array([0, 1]), q).data
    # squared distances 2 and 13, temperature 10
    z = np.array([-2.0, -13.0]) / 10
    np.testing.assert_allclose(lp[0], z - np.log(np.exp(z).sum()))


def test_prototype_is_support_mean_and_order_free():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((6, 4))
    labels = np.array([0, 0, 0, 1, 1, 1])
    q = Tensor(rng.standard_normal((3, 4)))
    a = fsl_predict(Tensor(feats), labels, q).data
    perm = np.array([2, 0, 1, 5, 3, 4])
    b = fsl_predict(Tensor(feats[perm]), labels, q).data
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_allclose(averaging_matrix(labels, np.float64) @ feats,
                               [feats[:3].mean(0), feats[3:].mean(0)])


def test_relabeling_permutes_columns():
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((6, 3))
    q = Tensor(rng.standard_normal((4, 3)))
    labels = np.array([0, 0, 1, 1, 2, 2])
    relabel = np.array([2, 0, 1])
    a = fsl_predict(Tensor(feats), labels, q).data
    b = fsl_predict(Tensor(feats), relabel[labels], q).data
    np.testing.assert_allclose(b[:, relabel], a, rtol=1e-12)
    np.testing.assert_allclose(np.exp(a).sum(1), 1)


def test_missing_or_unbalanced_support():
    q = Tensor(np.zeros((1, 2)))
    with pytest.raises(EpisodeError, match=r"\[1\]"):
        fsl_predict(Tensor(np.zeros((2, 2))), np.array([0, 2]), q)
    with pytest.raises(EpisodeError):
        fsl_predict(Tensor(np.zeros((3, 2))), np.array([0, 0, 1]), q)


def test_fsl_loss_perfect_and_identity_with_cross_entropy():
    lp = Tensor(np.log(np.eye(3) * (1 - 2e-300) + 1e-300))
    assert fsl_loss(lp, np.arange(3)).item() == pytest.approx(0.0, abs=1e-12)
    x = ad.log_softmax(Tensor(np.random.default_rng(3).standard_normal((4, 3))))
    y = np.array([0, 2, 1, 1])
    assert fsl_loss(x, y).item() == ad.cross_entropy(x, y).item()


def test_temperature_parameter_is_positive_and_learnable():
    head = PrototypeHead(10.0, dtype=np.float64)
    assert head.temperature == pytest.approx(10.0)
    rng = np.random.default_rng(4)
    s, q = Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal((4, 3)))
    labels = np.array([0, 0, 1, 1])
    errs = check_params(lambda: fsl_loss(head(s, labels, q), labels), head.parameters())
    assert errs[0] < 1e-6


def test_global_classifier_zero_weights_and_label_errors():
    f = GlobalClassifier(4, [7, 3, 11], dtype=np.float64, zero=True)
    assert f.class_count == 3
    feats = Tensor(np.random.default_rng(5).standard_normal((5, 4)))
    assert f(feats).shape == (5, 3)
    assert global_loss(f, feats, [3, 7, 11, 3, 7]).item() == pytest.approx(np.log(3))
    np.testing.assert_array_equal(f.local_labels([3, 7, 11]), [0, 1, 2])
    with pytest.raises(LabelError, match="index 1"):
        global_loss(f, feats, [3, 4, 7, 3, 7])


def test_global_loss_weight_gradient():
    f = GlobalClassifier(4, range(5), np.random.default_rng(6), dtype=np.float64)
    feats = Tensor(np.random.default_rng(7).standard_normal((6, 4)))
    labels = np.array([0, 1, 4, 3, 2, 0])
    errs = check_params(lambda: global_loss(f, feats, labels), f.parameters())
    assert max(errs.values()) < 1e-6
