import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from active_teaching.errors import ColdBankError, NoProposalsError, UndefinedSimilarityError, ValidationError
from active_teaching.prototypes import (
    GtRoiFeature,
    PrototypeBank,
    cosine_similarity,
    diversity_score,
    ema_update,
    local_prototypes,
    score_and_update_divergent,
    update_from_divergent,
)

from conftest import make_roi, onehot
from oracles import diversity_double_loop, local_means


def bank_with(protos, alpha=0.9, s=0.7):
    protos = np.asarray(protos, float)
    return PrototypeBank(protos, np.any(protos != 0, axis=1), alpha, s)


def test_local_two_point_mean_and_zero_branch():
    v = local_prototypes([GtRoiFeature([1, 0], 0), GtRoiFeature([0, 1], 0)], 3, 2)
    np.testing.assert_array_equal(v[0], [0.5, 0.5])
    np.testing.assert_array_equal(v[2], [0.0, 0.0])


def test_local_empty():
    np.testing.assert_array_equal(local_prototypes([], 2, 3), np.zeros((2, 3)))


def test_local_matches_resummation(rng):
    feats = rng.normal(size=(50, 4))
    labels = rng.integers(0, 3, size=50)
    got = local_prototypes([GtRoiFeature(f, y) for f, y in zip(feats, labels)], 3, 4)
    np.testing.assert_allclose(got, local_means(feats, labels, 3, 4), atol=1e-12, rtol=0)


def test_local_permutation_invariant(rng):
    items = [GtRoiFeature(rng.normal(size=3), int(rng.integers(0, 4))) for _ in range(30)]
    a = local_prototypes(items, 4, 3)
    b = local_prototypes([items[i] for i in rng.permutation(30)], 4, 3)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_local_validation():
    with pytest.raises(ValidationError):
        local_prototypes([GtRoiFeature([1, 2, 3], 0)], 2, 2)
    with pytest.raises(ValidationError):
        local_prototypes([GtRoiFeature([1, 2], 5)], 2, 2)


def test_ema_one_step():
    bank = bank_with([[1.0, 0.0]], alpha=0.9)
    out = ema_update(bank, np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(out.prototypes[0], [0.9, 0.1], atol=1e-15)


def test_ema_zero_local_leaves_class():
    bank = bank_with([[1.0, 2.0], [3.0, 4.0]])
    out = ema_update(bank, np.array([[0.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_array_equal(out.prototypes[0], [1.0, 2.0])


def test_ema_initializes_absent_class():
    bank = bank_with([[1.0, 0.0], [0.0, 0.0]])
    assert not bank.present[1]
    out = ema_update(bank, np.array([[0.0, 0.0], [2.0, 2.0]]))
    assert out.present[1]
    np.testing.assert_array_equal(out.prototypes[1], [2.0, 2.0])


def test_ema_dimension_mismatch():
    with pytest.raises(ValidationError):
        ema_update(bank_with([[1.0, 0.0]]), np.zeros((1, 3)))


def test_ema_contraction_identity(rng):
    for _ in range(100):
        g = rng.normal(size=(3, 5))
        v = rng.normal(size=(3, 5))
        bank = bank_with(g, alpha=0.8)
        out = ema_update(bank, v)
        np.testing.assert_allclose(np.abs(out.prototypes - v), 0.8 * np.abs(g - v), rtol=1e-12, atol=1e-12)


def test_bank_invariant_enforced():
    with pytest.raises(ValidationError):
        PrototypeBank(np.array([[1.0, 0.0]]), [False])
    with pytest.raises(ValidationError):
        PrototypeBank(np.array([[0.0, 0.0]]), [True])
    with pytest.raises(ValidationError):
        PrototypeBank(np.array([[1.0, 0.0]]), [True], alpha=1.0)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_bank_invariant_over_random_op_sequences(seed):
    rng = np.random.default_rng(seed)
    bank = PrototypeBank.empty(4, 3, alpha=0.9, sim_threshold=0.5)
    for _ in range(10):
        if rng.uniform() < 0.5:
            local = rng.normal(size=(4, 3)) * (rng.uniform(size=(4, 1)) < 0.5)
            bank = ema_update(bank, local)
        else:
            rois = [make_roi(probs=onehot(int(rng.integers(0, 4)), 4), feature=np.abs(rng.normal(size=3)) + 0.01)
                    for _ in range(3)]
            bank = update_from_divergent(bank, [("a", float(rng.uniform()), rois)])
        norms = np.linalg.norm(bank.prototypes, axis=1)
        assert np.all(norms[bank.present] > 0)
        assert np.all(bank.prototypes[~bank.present] == 0)


def test_cosine_values():
    assert cosine_similarity([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([1.0, 2.0], [2.0, 1.0]) == pytest.approx(0.8, abs=1e-15)


def test_cosine_zero_vector():
    with pytest.raises(UndefinedSimilarityError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(f, c):
    f = np.array(f)
    assert cosine_similarity(f, c * f) == pytest.approx(1.0, abs=1e-12)


def test_diversity_one_box():
    bank = bank_with([[1.0, 2.0]])
    s, flags = diversity_score([make_roi(feature=[2.0, 1.0])], bank)
    assert s == pytest.approx(0.2, abs=1e-12)
    assert flags == [False]


def test_diversity_prototype_member():
    bank = bank_with([[1.0, 0.0], [0.0, 1.0]])
    s, flags = diversity_score([make_roi(feature=[0.0, 5.0])], bank)
    assert s == pytest.approx(0.0, abs=1e-15) and flags == [False]


def test_diversity_matches_double_loop(rng):
    for _ in range(20):
        protos = np.abs(rng.normal(size=(3, 5)))
        present = [True, bool(rng.uniform() < 0.5), True]
        protos[~np.array(present)] = 0.0
        bank = PrototypeBank(protos, present, 0.9, 0.7)
        feats = np.abs(rng.normal(size=(4, 5)))
        s, flags = diversity_score([make_roi(feature=f) for f in feats], bank)
        assert s == pytest.approx(diversity_double_loop(feats, protos, present), abs=1e-12)
        assert 0.0 <= s <= 1.0


def test_diversity_novel_flags():
    bank = bank_with([[1.0, 0.0]], s=0.7)
    _, flags = diversity_score([make_roi(feature=[1.0, 0.1]), make_roi(feature=[0.1, 1.0])], bank)
    assert flags == [False, True]


def test_diversity_errors():
    with pytest.raises(ColdBankError):
        diversity_score([make_roi()], PrototypeBank.empty(2, 2))
    with pytest.raises(NoProposalsError):
        diversity_score([], bank_with([[1.0, 0.0]]))


def test_update_no_novel_is_noop():
    bank = bank_with([[1.0, 0.0], [0.0, 1.0]])
    rois = [make_roi(probs=[1, 0], feature=[1.0, 0.05])]
    out = update_from_divergent(bank, [("a", 0.3, rois)])
    assert out.same_as(bank)


def test_update_novel_roi_initializes_absent_class():
    bank = bank_with([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], s=0.7)
    rois = [make_roi(probs=[0.2, 0.8], feature=[0.0, 0.0, 1.0])]
    out = update_from_divergent(bank, [("a", 0.3, rois)])
    assert out.present[1]
    np.testing.assert_array_equal(out.prototypes[1], [0.0, 0.0, 1.0])


def test_walk_order_changes_scores():
    bank = bank_with([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], alpha=0.5, s=0.9)
    low = ("low", 0.1, [make_roi(probs=[0.1, 0.9], feature=[0.0, 1.0, 0.0])])
    high = ("high", 0.9, [make_roi(probs=[0.1, 0.9], feature=[0.0, 0.6, 0.8])])
    _, s_asc = score_and_update_divergent(bank, [high, low])
    _, s_desc = score_and_update_divergent(bank, [high, low], descending=True)
    # ascending: "high" is scored after class 1 was seeded with [0, 1, 0]
    assert s_asc["high"][0] == pytest.approx(0.4, abs=1e-12)
    assert s_desc["high"][0] == pytest.approx(1.0, abs=1e-12)


def test_update_order_changes_bank():
    bank = bank_with([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], alpha=0.5, s=0.9)
    a = ("a", 0.1, [make_roi(probs=[0.1, 0.9], feature=[0.0, 1.0, 0.0])])
    b = ("b", 0.2, [make_roi(probs=[0.1, 0.9], feature=[0.0, 0.0, 1.0]),
                    make_roi(probs=[0.1, 0.9], feature=[0.0, 0.0, 1.0])])
    asc = update_from_divergent(bank, [b, a])
    desc = update_from_divergent(bank, [b, a], descending=True)
    # asc: init [0,1,0]; b's two RoIs both novel vs it -> [0,.5,.5] -> [0,.25,.75]
    np.testing.assert_allclose(asc.prototypes[1], [0.0, 0.25, 0.75], atol=1e-15)
    # desc: init [0,0,1], second b RoI is not novel; then a novel -> [0,.5,.5]
    np.testing.assert_allclose(desc.prototypes[1], [0.0, 0.5, 0.5], atol=1e-15)


def test_score_and_update_requires_warm_bank():
    with pytest.raises(ColdBankError):
        score_and_update_divergent(PrototypeBank.empty(2, 2), [("a", 0.1, [make_roi()])])
