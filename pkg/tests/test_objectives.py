"""Hand-computed oracles for the three loss terms and their weighted sum."""

import math

import numpy as np
import pytest

import hotelsearch.autodiff as ad
from hotelsearch.errors import ConfigError, ContractError, InputError
from hotelsearch.objectives import (FacilityHead, LossWeights, cosine,
                                    final_loss, mlm_loss, retrieval_loss,
                                    retrieval_loss_batch, visf_loss,
                                    visf_loss_batch, visf_loss_gallery)


def t(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64))


# ---------------------------------------------------------------------------
# cosine


def test_cosine_known_values():
    assert cosine(t([[1.0, 0.0]]), t([[0.0, 1.0]])).item() == pytest.approx(0.0)
    assert cosine(t([[2.0, 0.0]]), t([[5.0, 0.0]])).item() == pytest.approx(1.0)
    assert cosine(t([[1.0, 1.0]]), t([[1.0, 0.0]])).item() == pytest.approx(
        1.0 / math.sqrt(2.0))


def test_cosine_scale_invariance():
    rng = np.random.default_rng(0)
    q, d = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    a = cosine(t(q), t(d)).item()
    b = cosine(t(3.7 * q), t(0.2 * d)).item()
    assert a == pytest.approx(b, abs=1e-12)


# ---------------------------------------------------------------------------
# retrieval loss


def test_retrieval_loss_uniform_scores_is_log_n_plus_one():
    """All candidates at the same cosine: loss = ln(n_neg + 1)."""
    q = t([[1.0, 0.0]])
    pos = t([[1.0, 1.0]])
    negs = [t([[1.0, 1.0]]) for _ in range(3)]
    assert retrieval_loss(q, pos, negs).item() == pytest.approx(math.log(4.0))


def test_retrieval_loss_separated_scores():
    """Positive at cosine 1, three negatives at 0: loss = -ln(e / (e + 3))."""
    q = t([[1.0, 0.0]])
    pos = t([[2.0, 0.0]])
    negs = [t([[0.0, 1.0]]) for _ in range(3)]
    expected = -math.log(math.e / (math.e + 3.0))
    assert retrieval_loss(q, pos, negs).item() == pytest.approx(expected)


def test_retrieval_loss_monotone_in_positive_score():
    """Raising the positive's alignment can only lower the loss."""
    q = t([[1.0, 0.0]])
    negs = [t([[0.0, 1.0]])]
    losses = [retrieval_loss(q, t([[math.cos(a), math.sin(a)]]), negs).item()
              for a in (1.2, 0.8, 0.4, 0.0)]
    assert losses == sorted(losses, reverse=True)


def test_retrieval_loss_batch_matches_single_query_form():
    rng = np.random.default_rng(1)
    qs, ds = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    batch = retrieval_loss_batch(t(qs), t(ds)).item()
    singles = []
    for i in range(4):
        negs = [t(ds[j:j + 1]) for j in range(4) if j != i]
        singles.append(retrieval_loss(t(qs[i:i + 1]), t(ds[i:i + 1]), negs).item())
    assert batch == pytest.approx(np.mean(singles), abs=1e-12)


def test_retrieval_loss_batch_extra_negatives_increase_loss():
    rng = np.random.default_rng(2)
    qs, ds = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    base = retrieval_loss_batch(t(qs), t(ds)).item()
    extra = retrieval_loss_batch(t(qs), t(ds), t(qs.copy())).item()
    assert extra > base


def test_retrieval_loss_needs_negatives():
    with pytest.raises(InputError):
        retrieval_loss(t([[1.0, 0.0]]), t([[1.0, 0.0]]), [])
    with pytest.raises(InputError):
        retrieval_loss_batch(t(np.ones((1, 4))), t(np.ones((1, 4))))


# ---------------------------------------------------------------------------
# masked-token loss


def test_mlm_loss_uniform_logits_is_log_vocab_size():
    v = 10
    logits = t(np.zeros((3, v)))
    assert mlm_loss(logits, [2, 5], [0, 2]).item() == pytest.approx(math.log(v))


def test_mlm_loss_confident_correct_prediction_is_small():
    logits = np.zeros((2, 6))
    logits[0, 3] = 30.0
    logits[1, 1] = 30.0
    assert mlm_loss(t(logits), [3, 1], [0, 1]).item() == pytest.approx(0.0, abs=1e-9)


def test_mlm_loss_hand_case():
    """Two classes, logit gap g: loss = ln(1 + e^-g)."""
    g = 1.5
    logits = t([[g, 0.0]])
    expected = math.log(1.0 + math.exp(-g))
    assert mlm_loss(logits, [0], [0]).item() == pytest.approx(expected)


def test_mlm_loss_empty_mask_rejected():
    with pytest.raises(ContractError):
        mlm_loss(t(np.zeros((2, 4))), [], [])
    with pytest.raises(InputError):
        mlm_loss(t(np.zeros((2, 4))), [1], [0, 1])


# ---------------------------------------------------------------------------
# visual facility loss


def zero_head(dim, f):
    head = FacilityHead(dim, f, seed=0)
    head.weight.tensor.data[:] = 0.0
    head.bias.tensor.data[:] = 0.0
    return head


def test_visf_loss_zero_logits_is_log_two():
    """p = 0.5 for every bit regardless of labels: BCE = ln 2."""
    head = zero_head(4, 6)
    d = t(np.ones((1, 4)))
    labels = np.array([1, 0, 1, 0, 0, 1])
    assert visf_loss(d, head, labels).item() == pytest.approx(math.log(2.0))


def test_visf_loss_hand_case():
    """Single bit, logit z, label 1: loss = softplus(z) - z = ln(1 + e^-z)."""
    head = zero_head(1, 1)
    head.weight.tensor.data[0, 0] = 2.0
    d = t([[1.0]])  # logit = 2
    assert visf_loss(d, head, np.array([1.0])).item() == pytest.approx(
        math.log(1.0 + math.exp(-2.0)))
    assert visf_loss(d, head, np.array([0.0])).item() == pytest.approx(
        math.log(1.0 + math.exp(2.0)))


def test_visf_loss_batch_is_mean_of_singles():
    rng = np.random.default_rng(3)
    head = FacilityHead(8, 5, seed=1)
    docs = rng.normal(size=(3, 8))
    labels = (rng.uniform(size=(3, 5)) > 0.5).astype(np.float64)
    batch = visf_loss_batch(t(docs), head, labels).item()
    singles = [visf_loss(t(docs[i:i + 1]), head, labels[i]).item()
               for i in range(3)]
    assert batch == pytest.approx(np.mean(singles), abs=1e-12)


def test_visf_loss_rejects_bad_labels():
    head = FacilityHead(4, 3, seed=0)
    d = t(np.ones((1, 4)))
    with pytest.raises(InputError):
        visf_loss(d, head, np.array([0.5, 0.0, 1.0]))
    with pytest.raises(InputError):
        visf_loss(d, head, np.array([1.0, 0.0]))


def test_visf_loss_matches_clamped_probability_form():
    """The softplus form equals BCE on clamped sigmoid probabilities."""
    rng = np.random.default_rng(4)
    head = FacilityHead(6, 8, seed=2)
    d = rng.normal(size=(1, 6))
    labels = (rng.uniform(size=8) > 0.5).astype(np.float64)
    ours = visf_loss(t(d), head, labels).item()
    z = d @ head.weight.data + head.bias.data
    p = np.clip(1.0 / (1.0 + np.exp(-z)), 1e-12, 1.0 - 1e-12)
    ref = -np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    assert ours == pytest.approx(ref, abs=1e-9)


def test_gallery_logits_equal_flattened_affine():
    """Position-specific weights: row r uses weight slab r."""
    rng = np.random.default_rng(5)
    head = FacilityHead(4, 3, seed=6, max_rows=5)
    block = rng.normal(size=(5, 4))
    out = head.gallery_logits(t(block)).data
    ref = block.reshape(1, -1) @ head.weight.data + head.bias.data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_gallery_logits_short_block_uses_leading_slabs():
    rng = np.random.default_rng(6)
    head = FacilityHead(4, 3, seed=7, max_rows=5)
    block = rng.normal(size=(2, 4))
    out = head.gallery_logits(t(block)).data
    ref = block.reshape(1, -1) @ head.weight.data[:8] + head.bias.data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_gallery_logits_rejects_oversized_block():
    head = FacilityHead(4, 3, seed=0, max_rows=2)
    with pytest.raises(ContractError):
        head.gallery_logits(t(np.zeros((3, 4))))


def test_visf_loss_gallery_is_mean_over_documents():
    rng = np.random.default_rng(7)
    head = FacilityHead(4, 5, seed=8, max_rows=3)
    blocks = [rng.normal(size=(3, 4)) for _ in range(2)]
    labels = (rng.uniform(size=(2, 5)) > 0.5).astype(np.float64)
    batch = visf_loss_gallery([t(b) for b in blocks], head, labels).item()
    singles = [visf_loss_gallery([t(b)], head, l.reshape(1, -1)).item()
               for b, l in zip(blocks, labels)]
    assert batch == pytest.approx(np.mean(singles), abs=1e-12)


def test_visf_loss_gallery_rejects_misaligned_labels():
    head = FacilityHead(4, 5, seed=0, max_rows=3)
    with pytest.raises(InputError):
        visf_loss_gallery([t(np.zeros((3, 4)))], head, np.zeros((2, 5)))


# ---------------------------------------------------------------------------
# aggregation


def test_final_loss_weighted_sum():
    w = LossWeights(0.7, 0.2, 0.1)
    out = final_loss(t([[1.0]]), t([[2.0]]), t([[3.0]]), w).item()
    assert out == pytest.approx(0.7 * 1.0 + 0.2 * 2.0 + 0.1 * 3.0)


def test_final_loss_pure_retrieval_identity():
    """Weights (1, 0, 0) return the retrieval term itself, bit for bit."""
    l_ret = t([[0.37]])
    out = final_loss(l_ret, t([[5.0]]), t([[9.0]]), LossWeights(1.0, 0.0, 0.0))
    assert out is l_ret


def test_final_loss_zero_weight_skips_term():
    """A zero-weighted term contributes nothing even if it is huge."""
    w = LossWeights(0.5, 0.0, 0.5)
    out = final_loss(t([[1.0]]), t([[1e9]]), t([[2.0]]), w).item()
    assert out == pytest.approx(0.5 * 1.0 + 0.5 * 2.0)


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(1.2, 0.0, 0.0)
    with pytest.raises(ConfigError):
        LossWeights(0.5, -0.1, 0.6)


def test_losses_are_differentiable_end_to_end():
    rng = np.random.default_rng(5)
    head = FacilityHead(6, 4, seed=3)
    q = ad.Parameter("q", rng.normal(size=(2, 6)), group="SLM")
    d = ad.Parameter("d", rng.normal(size=(2, 6)), group="LLM")
    labels = np.array([[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0]])

    def loss_fn():
        l_ret = retrieval_loss_batch(q.tensor, d.tensor)
        l_visf = visf_loss_batch(d.tensor, head, labels)
        return final_loss(l_ret, t([[0.0]]), l_visf, LossWeights(0.7, 0.0, 0.1))

    err = ad.grad_check(loss_fn, [q, d] + head.parameters(), epsilon=1e-5,
                        max_coords_per_param=6, seed=0)
    assert err < 1e-4, err
