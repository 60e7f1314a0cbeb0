"""Tests for the similarity matrix, CLIP loss and the FairCLIP objective."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fairsinkhorn.contrastive import (EmbeddingBatch, FairClipConfig, SimilarityMatrix, clip_loss,
                                      diagonal_distribution, fairclip_loss, similarity)
from fairsinkhorn.ot import SinkhornConfig, sinkhorn_distance


def random_batch(rng, n, d=5):
    return EmbeddingBatch(rng.normal(size=(n, d)), rng.normal(size=(n, d)))


def logits_matrix(x):
    """SimilarityMatrix whose entries are exactly ``x`` (temperature 1)."""
    return SimilarityMatrix(np.asarray(x, dtype=float), 1.0)


def reference_clip_loss(logits):
    n = logits.shape[0]
    total = 0.0
    for i in range(n):
        row = logits[i]
        col = logits[:, i]
        total += -(row[i] - math.log(sum(math.exp(x) for x in row)))
        total += -(col[i] - math.log(sum(math.exp(x) for x in col)))
    return total / (2 * n)


class TestEmbeddingBatch:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(np.ones((3, 2)), np.ones((3, 4)))

    def test_normalized_flag_checked(self):
        with pytest.raises(ValueError, match="unit norm"):
            EmbeddingBatch(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]), already_normalized=True)
        EmbeddingBatch(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), already_normalized=True)


class TestSimilarity:
    def test_self_similarity(self):
        M = similarity(EmbeddingBatch([[1.0, 0.0]], [[1.0, 0.0]]), 1.0)
        assert M.entries.tolist() == [[1.0]]

    def test_orthogonal(self):
        M = similarity(EmbeddingBatch([[1.0, 0.0]], [[0.0, 1.0]]), 1.0)
        assert M.entries.tolist() == [[0.0]]

    def test_matches_loop(self):
        rng = np.random.default_rng(0)
        b = random_batch(rng, 6, 4)
        M = similarity(b, 0.07)
        for i in range(6):
            for j in range(6):
                x, y = b.image_embeddings[i], b.text_embeddings[j]
                expected = sum(p * q for p, q in zip(x, y)) / (math.sqrt(sum(p * p for p in x))
                                                                * math.sqrt(sum(q * q for q in y)))
                assert M.entries[i, j] == pytest.approx(expected / 0.07, abs=1e-12)

    def test_bounded(self):
        M = similarity(random_batch(np.random.default_rng(1), 20), 0.5)
        assert np.all(np.abs(M.entries) <= 1 / 0.5 + 1e-12)

    def test_zero_row_named(self):
        z = np.ones((3, 2))
        z[1] = 0.0
        with pytest.raises(ValueError, match="row 1"):
            similarity(EmbeddingBatch(np.ones((3, 2)), z))


class TestClipLoss:
    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_uniform_logits(self, n):
        loss, _ = clip_loss(logits_matrix(np.full((n, n), 0.3)))
        assert abs(loss - math.log(n)) <= 1e-9

    def test_saturated(self):
        x = np.full((3, 3), -50.0)
        np.fill_diagonal(x, 50.0)
        assert clip_loss(logits_matrix(x))[0] < 1e-8

    def test_single_sample(self):
        assert clip_loss(logits_matrix([[0.4]]))[0] == 0.0

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(2)
        for n in (2, 3, 7):
            x = rng.normal(scale=3, size=(n, n))
            assert clip_loss(logits_matrix(x))[0] == pytest.approx(reference_clip_loss(x), rel=1e-12)

    def test_gradient_finite_differences(self):
        """Random 4x4 logits, 50 instances, relative error <= 1e-6."""
        rng = np.random.default_rng(3)
        h = 1e-5
        for _ in range(50):
            x = rng.normal(scale=2, size=(4, 4))
            _, grad = clip_loss(logits_matrix(x))
            fd = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                xp, xm = x.copy(), x.copy()
                xp[idx] += h
                xm[idx] -= h
                fd[idx] = (clip_loss(logits_matrix(xp))[0] - clip_loss(logits_matrix(xm))[0]) / (2 * h)
            assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) <= 1e-6

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (5, 5), elements=st.floats(-20, 20)), st.permutations(range(5)))
    def test_nonnegative_and_permutation_invariant(self, x, perm):
        loss, _ = clip_loss(logits_matrix(x))
        assert loss >= 0
        p = np.asarray(perm)
        assert clip_loss(logits_matrix(x[np.ix_(p, p)]))[0] == pytest.approx(loss, rel=1e-12, abs=1e-12)

    def test_permuting_embedding_rows(self):
        rng = np.random.default_rng(4)
        b = random_batch(rng, 6)
        p = rng.permutation(6)
        permuted = EmbeddingBatch(b.image_embeddings[p], b.text_embeddings[p])
        assert clip_loss(similarity(permuted))[0] == pytest.approx(clip_loss(similarity(b))[0],
                                                                   rel=1e-12)

    def test_margin_limit(self):
        x = np.zeros((6, 6))
        np.fill_diagonal(x, 100.0)
        assert clip_loss(logits_matrix(x))[0] < 1e-8


class TestDiagonalDistribution:
    def test_single(self):
        d = diagonal_distribution(logits_matrix([[0.7]]))
        assert d.support.tolist() == [0.7] and d.weights.tolist() == [1.0]

    def test_two(self):
        d = diagonal_distribution(logits_matrix([[0.2, 0.0], [0.0, 0.8]]))
        assert d.support.tolist() == [0.2, 0.8]
        assert d.weights.tolist() == [0.5, 0.5]

    def test_uses_cosines_not_logits(self):
        rng = np.random.default_rng(5)
        M = similarity(random_batch(rng, 5), 0.07)
        d = diagonal_distribution(M)
        assert d.support.tolist() == [M.cosine[i, i] for i in range(5)]


def fd_fairclip(batch, groups, cfg, tau, h=1e-5):
    """Central differences of the total loss w.r.t. every embedding entry."""
    out = {}
    arrays_ = {("main", "image"): batch.image_embeddings, ("main", "text"): batch.text_embeddings}
    for lv, gb in groups.items():
        arrays_[(lv, "image")] = gb.image_embeddings
        arrays_[(lv, "text")] = gb.text_embeddings
    for key, arr in arrays_.items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1, -1):
                pert = {k: v.copy() for k, v in arrays_.items()}
                pert[key][idx] += sign * h
                gbs = {lv: EmbeddingBatch(pert[(lv, "image")], pert[(lv, "text")]) for lv in groups}
                vals.append(fairclip_loss(EmbeddingBatch(pert[("main", "image")], pert[("main", "text")]),
                                          gbs, cfg, tau).loss)
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        out[key] = fd
    return out


def analytic(res, groups):
    out = {("main", "image"): res.grads.image, ("main", "text"): res.grads.text}
    for lv in groups:
        out[(lv, "image")] = res.grads.group_image[lv]
        out[(lv, "text")] = res.grads.group_text[lv]
    return out


def stacked(d):
    return np.concatenate([d[k].ravel() for k in sorted(d, key=str)])


class TestFairClipLoss:
    def test_lambda_zero(self):
        rng = np.random.default_rng(6)
        b = random_batch(rng, 8)
        groups = {0: random_batch(rng, 4), 1: random_batch(rng, 4)}
        res = fairclip_loss(b, groups, FairClipConfig(lambda_fair=0.0), 0.07)
        loss, grad = clip_loss(similarity(b, 0.07))
        assert res.loss == loss
        for lv in groups:
            assert not res.grads.group_image[lv].any()
            assert not res.grads.group_text[lv].any()

    def test_identical_groups_debiased(self):
        rng = np.random.default_rng(7)
        b = random_batch(rng, 8)
        cfg = FairClipConfig(lambda_fair=1.0, sinkhorn=SinkhornConfig(debias=True, tolerance=1e-10,
                                                                      max_iters=100000))
        res = fairclip_loss(b, {0: b, 1: b}, cfg, 0.07)
        assert sum(res.sinkhorn_terms.values()) <= 1e-8

    def test_compositional(self):
        """Total = clip + lambda * sum of independently computed Sinkhorn terms."""
        rng = np.random.default_rng(8)
        tau = 0.07
        for _ in range(10):
            b = random_batch(rng, 8)
            groups = {0: random_batch(rng, 4), 1: random_batch(rng, 4)}
            cfg = FairClipConfig(lambda_fair=1e-7)
            res = fairclip_loss(b, groups, cfg, tau)
            overall = diagonal_distribution(similarity(b, tau))
            terms = [sinkhorn_distance(overall, diagonal_distribution(similarity(g, tau)), cfg.sinkhorn)
                     for g in groups.values()]
            expected = clip_loss(similarity(b, tau))[0] + 1e-7 * sum(terms)
            assert res.loss == pytest.approx(expected, abs=1e-10)

    def test_linear_in_lambda(self):
        rng = np.random.default_rng(9)
        b = random_batch(rng, 8)
        groups = {0: random_batch(rng, 4), 1: random_batch(rng, 4)}
        r1 = fairclip_loss(b, groups, FairClipConfig(lambda_fair=0.3), 0.1)
        r2 = fairclip_loss(b, groups, FairClipConfig(lambda_fair=2.0), 0.1)
        s = sum(r1.sinkhorn_terms[k] for k in sorted(r1.sinkhorn_terms))
        assert r2.loss - r1.loss == pytest.approx((2.0 - 0.3) * s, rel=1e-9)

    def test_level_order_irrelevant(self):
        rng = np.random.default_rng(10)
        b = random_batch(rng, 6)
        g0, g1 = random_batch(rng, 3), random_batch(rng, 5)
        cfg = FairClipConfig(lambda_fair=0.5)
        assert fairclip_loss(b, {0: g0, 1: g1}, cfg).loss == fairclip_loss(b, {1: g1, 0: g0}, cfg).loss

    @pytest.mark.parametrize("lambda_fair, debias", [(1e-7, False), (1.0, False), (1.0, True)])
    def test_gradient_finite_differences(self, lambda_fair, debias):
        """N=8 with two groups of 4 (the acceptance suite runs 50 instances)."""
        rng = np.random.default_rng(11 + int(debias) + int(lambda_fair > 1e-3))
        sk = SinkhornConfig(debias=debias, tolerance=1e-9, max_iters=100000)
        cfg = FairClipConfig(lambda_fair=lambda_fair, sinkhorn=sk)
        for _ in range(10):
            b = random_batch(rng, 8, 3)
            groups = {0: random_batch(rng, 4, 3), 1: random_batch(rng, 4, 3)}
            res = fairclip_loss(b, groups, cfg, 0.5)
            got, ref = stacked(analytic(res, groups)), stacked(fd_fairclip(b, groups, cfg, 0.5))
            assert np.linalg.norm(got - ref) / np.linalg.norm(ref) <= 1e-3
