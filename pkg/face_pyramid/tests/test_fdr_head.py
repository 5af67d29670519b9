"""Tests for the face dimensionality reduction head and the margin loss."""

import math

import numpy as np
import pytest

from fpvt import (
    ConfigError,
    DataError,
    FdrConfig,
    FdrState,
    Tensor,
    UnknownIdentityError,
    assign_groups,
    corresponding_anchor,
    fdr_forward,
    margin_softmax_loss,
    parameter_saving,
)
from fpvt.fdr_head import LinearHead, LossConfig, build_head, fdr_cosine, membership_matrix, writeback
from fpvt_tensor import backward


def _state(rng, n=3, m=2, dim=2, **cfg):
    state = FdrState(FdrConfig(groups=m, **cfg), n_identities=n, dim=dim, rng=rng)
    return state


class TestAssignGroups:
    """Test the identity-to-group surjection."""

    def test_m_equal_n_rejected(self):
        """There must be fewer groups than identities."""
        with pytest.raises(ConfigError, match="m=4, n=4"):
            assign_groups(4, 4, seed=0)

    def test_deterministic(self):
        """The same seed gives the same assignment."""
        np.testing.assert_array_equal(assign_groups(4, 2, seed=11), assign_groups(4, 2, seed=11))

    def test_surjective(self):
        """Every group receives at least one identity."""
        assignment = assign_groups(1000, 100, seed=3)
        counts = np.bincount(assignment, minlength=100)
        assert assignment.shape == (1000,)
        assert counts.min() >= 1
        assert counts.max() <= 1000
        assert counts.sum() == 1000

    def test_state_enforces_fewer_groups(self, rng):
        """The head cannot be built with m >= n."""
        with pytest.raises(ConfigError, match="1 <= m < n"):
            _state(rng, n=4, m=4)


class TestCorrespondingAnchor:
    """Test the in-batch group anchors."""

    def test_mean_of_members(self, float64):
        """Constant alphas average the members."""
        features = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        anchor = corresponding_anchor(features, [3, 3], 3)
        np.testing.assert_allclose(anchor.data, [0.5, 0.5])

    def test_weighted_mean(self, float64):
        """Alphas (1, 3) weight the members 1/4 and 3/4."""
        features = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        anchor = corresponding_anchor(features, [0, 0], 0, alphas=np.array([1.0, 3.0]))
        np.testing.assert_allclose(anchor.data, [0.25, 0.75])

    def test_single_member(self, float64):
        """A single member is its own anchor."""
        features = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
        anchor = corresponding_anchor(features, [0, 1, 0], 1)
        np.testing.assert_allclose(anchor.data, [3.0, 4.0])

    def test_absent_group(self, float64):
        """A group with no members has no corresponding anchor."""
        features = Tensor(np.ones((2, 2)))
        assert corresponding_anchor(features, [0, 0], 1) is None

    def test_only_members_count(self, float64):
        """Samples of other groups do not enter the anchor."""
        features = Tensor(np.array([[2.0, 0.0], [100.0, 100.0], [0.0, 2.0]]))
        anchor = corresponding_anchor(features, [1, 0, 1], 1)
        np.testing.assert_allclose(anchor.data, [1.0, 1.0])

    def test_alpha_scale_invariance(self, rng, float64):
        """Any constant alpha gives the same anchor as alpha 1."""
        features = Tensor(rng.standard_normal((5, 3)))
        groups = [0, 1, 0, 0, 1]
        plain = corresponding_anchor(features, groups, 0)
        scaled = corresponding_anchor(features, groups, 0, alphas=np.full(5, 7.5))
        np.testing.assert_allclose(scaled.data, plain.data)

    def test_matches_weighted_mean_loop(self, rng, float64):
        """Anchors and membership columns equal a plain weighted-mean loop on random batches."""
        m, dim = 4, 3
        for _ in range(100):
            k = int(rng.integers(1, 9))
            groups = rng.integers(0, m, size=k)
            alphas = rng.uniform(0.05, 5.0, size=k)
            features = Tensor(rng.standard_normal((k, dim)))
            matrix = membership_matrix(groups, m, alphas)
            for group in range(m):
                total = 0.0
                accumulated = np.zeros(dim)
                for row in range(k):
                    if groups[row] == group:
                        total += alphas[row]
                        accumulated += alphas[row] * features.data[row]
                anchor = corresponding_anchor(features, groups, group, alphas=alphas)
                if total == 0.0:
                    assert anchor is None
                    np.testing.assert_array_equal(matrix[:, group], 0.0)
                    continue
                np.testing.assert_allclose(anchor.data, accumulated / total, rtol=0, atol=1e-6)
                np.testing.assert_allclose(features.data.T @ matrix[:, group], accumulated / total, rtol=0, atol=1e-6)

    def test_non_positive_alpha(self, float64):
        """Alphas must be positive."""
        with pytest.raises(DataError, match="alphas must be positive"):
            corresponding_anchor(Tensor(np.ones((2, 2))), [0, 0], 0, alphas=np.array([1.0, 0.0]))


class TestFdrForward:
    """Test logits over the effective anchors."""

    def test_orthonormal_free_anchors(self, rng, float64):
        """Free columns e1, e2 and feature e1 give logits (1, 0)."""
        state = _state(rng, n=3, m=2, dim=2)
        state.anchors.data[...] = np.eye(2)
        logits = fdr_forward(Tensor(np.array([[1.0, 0.0]])), state, None)
        np.testing.assert_allclose(logits.data, [[1.0, 0.0]])

    def test_output_width_is_m(self, rng, float64):
        """Logits have one column per group whatever the batch holds."""
        state = _state(rng, n=10, m=4, dim=3)
        ids = [0, 0, 1]
        logits = fdr_forward(Tensor(rng.standard_normal((3, 3))), state, ids)
        assert logits.shape == (3, 4)

    def test_matches_group_loop(self, rng, float64):
        """Effective anchors equal a loop of corresponding anchors over groups."""
        state = _state(rng, n=8, m=3, dim=4)
        ids = np.array([0, 1, 2, 3, 4, 5])
        features = Tensor(rng.standard_normal((6, 4)))
        effective = state.effective_anchors(features, ids).data
        groups = state.groups_of(ids)
        for group in range(3):
            anchor = corresponding_anchor(features, groups, group)
            expected = state.anchors.data[:, group] if anchor is None else anchor.data
            np.testing.assert_allclose(effective[:, group], expected)

    def test_consistent_when_column_is_anchor(self, rng, float64):
        """With stored columns equal to the batch anchors both paths agree."""
        state = _state(rng, n=3, m=2, dim=2)
        state.assignment = np.array([0, 1, 1])
        features = Tensor(np.array([[1.0, 2.0], [3.0, 1.0], [1.0, 1.0]]))
        ids = [0, 1, 2]
        state.anchors.data[...] = np.array([[1.0, 2.0], [2.0, 1.0]])
        np.testing.assert_allclose(
            fdr_forward(features, state, ids).data,
            fdr_forward(features, state, None).data,
        )

    def test_attention_alphas(self, rng, float64):
        """Attention alphas weight members by their similarity to the column."""
        state = _state(rng, n=6, m=2, dim=3, alpha_mode="attention", temperature=0.5)
        state.assignment = np.array([0, 0, 0, 1, 1, 1])
        features = Tensor(rng.standard_normal((4, 3)))
        ids = [0, 1, 3, 4]
        groups = state.groups_of(ids)
        alphas = state.alphas(features, groups)
        assert np.all(alphas > 0.0)
        effective = state.effective_anchors(features, ids).data
        expected = corresponding_anchor(features, groups, 0, alphas=alphas).data
        np.testing.assert_allclose(effective[:, 0], expected)

    def test_gradient_routing(self, rng, float64, tape):
        """Represented columns take no gradient; free columns and features do."""
        state = _state(rng, n=4, m=3, dim=2)
        state.assignment = np.array([0, 1, 2, 2])
        features = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        loss = fdr_forward(features, state, [0, 1]).sum()
        backward(loss)
        np.testing.assert_array_equal(state.anchors.grad[:, :2], 0.0)
        assert np.any(state.anchors.grad[:, 2] != 0.0)
        assert np.any(features.grad != 0.0)

    def test_unknown_identity(self, rng, float64):
        """Identities outside the assignment are lookup errors."""
        state = _state(rng, n=5, m=2, dim=2)
        with pytest.raises(UnknownIdentityError, match=r"\[7\]"):
            fdr_forward(Tensor(np.ones((2, 2))), state, [0, 7])

    def test_cosines_bounded(self, rng, float64):
        """Cosine logits lie in [-1, 1]."""
        state = _state(rng, n=6, m=3, dim=4)
        cos = fdr_cosine(Tensor(rng.standard_normal((5, 4))), state, [0, 1, 2, 3, 4])
        assert np.all(np.abs(cos.data) <= 1.0 + 1e-12)

    def test_membership_columns_normalized(self):
        """Present columns sum to one and absent columns are zero."""
        matrix = membership_matrix(np.array([0, 2, 0]), 3)
        np.testing.assert_allclose(matrix.sum(axis=0), [1.0, 0.0, 1.0])


class TestWriteback:
    """Test the momentum write-back of stored columns."""

    def test_present_columns_move(self, rng, float64):
        """Represented columns move a tenth of the way; others stay."""
        state = _state(rng, n=3, m=2, dim=2)
        state.assignment = np.array([0, 0, 1])
        state.anchors.data[...] = np.zeros((2, 2))
        writeback(state, np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1])
        np.testing.assert_allclose(state.anchors.data[:, 0], [0.05, 0.05])
        np.testing.assert_array_equal(state.anchors.data[:, 1], [0.0, 0.0])

    def test_after_step_hook(self, rng, float64):
        """The head exposes write-back as its post-step hook."""
        state = _state(rng, n=3, m=2, dim=2, momentum=0.0)
        state.assignment = np.array([0, 1, 1])
        state.after_step(np.array([[2.0, 4.0]]), [2])
        np.testing.assert_allclose(state.anchors.data[:, 1], [2.0, 4.0])


class TestMarginLoss:
    """Test the margin softmax loss."""

    def test_softmax_arithmetic(self, float64):
        """Logits (ln 2, 0) with no margin give -ln(2/3)."""
        loss = margin_softmax_loss(Tensor(np.array([[math.log(2.0), 0.0]])), [0], margin=0.0, scale=1.0)
        assert loss.item() == pytest.approx(-math.log(2.0 / 3.0))
        assert loss.item() == pytest.approx(0.405, abs=1e-3)

    def test_large_scale_vanishes(self, float64):
        """Perfect alignment at scale 64 drives the loss below 1e-3."""
        loss = margin_softmax_loss(Tensor(np.eye(3)), [0, 1, 2], margin=0.0, scale=64.0)
        assert loss.item() < 1e-3

    def test_cosine_margin(self, float64):
        """The cosine margin is subtracted from the target logit only."""
        loss = margin_softmax_loss(Tensor(np.array([[0.5, 0.5]])), [1], margin=0.25, scale=2.0)
        expected = -math.log(math.exp(0.5) / (math.exp(1.0) + math.exp(0.5)))
        assert loss.item() == pytest.approx(expected)

    def test_angular_margin(self, float64):
        """The angular margin turns cos 60 degrees into cos 90 degrees."""
        loss = margin_softmax_loss(Tensor(np.array([[0.5, 0.2]])), [0], margin=math.pi / 6, scale=1.0, kind="angular")
        assert loss.item() == pytest.approx(math.log(1.0 + math.exp(0.2)), abs=1e-9)

    def test_angular_fallback(self, float64):
        """Past the fold point the angular margin falls back to a linear penalty."""
        margin = math.pi / 6
        loss = margin_softmax_loss(Tensor(np.array([[-0.9, 0.0]])), [0], margin=margin, scale=1.0, kind="angular")
        target = -0.9 - math.sin(math.pi - margin) * margin
        assert loss.item() == pytest.approx(math.log(1.0 + math.exp(-target)))

    def test_angular_zero_margin_equals_cosine(self, rng, float64):
        """With no margin the two kinds coincide."""
        cos = Tensor(rng.uniform(-0.9, 0.9, size=(4, 3)))
        targets = [0, 2, 1, 0]
        np.testing.assert_allclose(
            margin_softmax_loss(cos, targets, margin=0.0, scale=3.0, kind="angular").item(),
            margin_softmax_loss(cos, targets, margin=0.0, scale=3.0).item(),
        )

    def test_target_out_of_range(self, float64):
        """Targets must index a column."""
        with pytest.raises(DataError, match="targets must lie in"):
            margin_softmax_loss(Tensor(np.zeros((1, 2))), [2])

    def test_loss_config_validation(self):
        """Unknown loss kinds are rejected."""
        with pytest.raises(ConfigError, match="loss kind"):
            LossConfig(kind="arc")


class TestHeads:
    """Test head construction and sizing."""

    def test_parameter_saving(self):
        """1000 identities in 100 groups save 900 columns."""
        assert parameter_saving(1000, 100, 512) == 460800

    def test_build_fdr_head(self):
        """The default head is the grouped anchor head."""
        head = build_head(FdrConfig(groups=5), n_identities=10, dim=8)
        assert isinstance(head, FdrState)
        assert head.num_classes == 5
        assert head.num_parameters() == 40
        assert list(head.state_dict()) == ["anchors", "bias"]

    def test_build_is_deterministic(self):
        """Head weights depend only on the seed."""
        a = build_head(FdrConfig(groups=3, seed=4), 10, 4)
        b = build_head(FdrConfig(groups=3, seed=4), 10, 4)
        np.testing.assert_array_equal(a.anchors.data, b.anchors.data)
        np.testing.assert_array_equal(a.assignment, b.assignment)

    def test_linear_head(self):
        """The linear baseline keeps one column per identity."""
        head = build_head(FdrConfig(head="linear"), n_identities=10, dim=8)
        assert isinstance(head, LinearHead)
        assert head.num_parameters() == 80
        np.testing.assert_array_equal(head.targets([3, 9]), [3, 9])
        with pytest.raises(UnknownIdentityError):
            head.targets([10])
