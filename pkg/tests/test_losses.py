import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leapexit import losses as Lo
from leapexit.encoder import LayerTrace, Projection
from leapexit.errors import ConfigError, ContractError, ShapeError
from leapexit.losses import LeapLossWeights, progressive_ramp, total_loss
from leapexit.tensor import Tensor


def trace(arr, grad=False):
    return LayerTrace([Tensor(arr[:, l], requires_grad=grad) for l in range(arr.shape[1])], None)


def cos(a, b):
    return np.sum(a * b, -1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


@pytest.fixture
def pair(rng):
    s = rng.normal(size=(5, 4, 6))
    t = rng.normal(size=(5, 8, 6))
    return s, t


LMAP = {1: 2, 2: 4, 3: 6, 4: 8}


class TestOracles:
    """Each term against a direct numpy transcription of its formula."""

    def test_final(self, pair):
        s, t = pair
        want = np.mean(1 - cos(s[:, -1], t[:, -1]))
        assert Lo.loss_final(trace(s), trace(t)).item() == pytest.approx(want, abs=1e-12)

    def test_inter(self, pair):
        s, t = pair
        want = np.mean([np.mean(1 - cos(s[:, l - 1], t[:, LMAP[l] - 1])) for l in LMAP])
        assert Lo.loss_inter(trace(s), trace(t), LMAP).item() == pytest.approx(want, abs=1e-12)

    def test_exit(self, pair):
        s, t = pair
        w = LeapLossWeights(emphasis_start=3)
        lw = w.weights_for(4)
        np.testing.assert_allclose(lw, [0.125, 0.25, 0.75, 1.0])
        et = np.mean([lw[l] * np.mean(sig(10 * (0.98 - cos(s[:, l], t[:, -1])))) for l in range(4)])
        es = np.sum([lw[l] * np.mean(sig(10 * (0.98 - cos(s[:, l], s[:, -1])))) for l in range(3)]) / 3
        got_t, got_s = Lo.loss_exit(trace(s), trace(t), w)
        assert got_t.item() == pytest.approx(et, abs=1e-12)
        assert got_s.item() == pytest.approx(es, abs=1e-12)

    def test_contrast(self, pair):
        s, t = pair
        b = 5

        def logits(x):
            e = x / np.linalg.norm(x, axis=1, keepdims=True)
            m = e @ e.T / 0.1
            m[np.eye(b, dtype=bool)] = -np.inf
            return m - np.log(np.sum(np.exp(m - m.max(1, keepdims=True)), 1, keepdims=True)) - m.max(1, keepdims=True)

        ls, lt = logits(s[:, -1]), logits(t[:, -1])
        ps = np.exp(ls)
        off = ~np.eye(b, dtype=bool)
        want = np.sum(ps[off] * (ls[off] - lt[off])) / b
        assert Lo.loss_contrast(trace(s), trace(t), 0.1).item() == pytest.approx(want, abs=1e-10)

    def test_late(self, pair):
        s, _ = pair
        want = np.mean([np.mean(np.sqrt(1 - cos(s[:, l - 1], s[:, -1]))) for l in (2, 3)])
        assert Lo.loss_late(trace(s), (2, 3)).item() == pytest.approx(want, abs=1e-12)

    def test_redund(self, pair):
        s, _ = pair
        e = s / np.linalg.norm(s, axis=-1, keepdims=True)
        steps = np.minimum(np.linalg.norm(np.diff(e, axis=1), axis=-1), 0.5)
        want = -np.mean(steps, axis=0).sum() / 3
        assert Lo.loss_redund(trace(s), 0.5).item() == pytest.approx(want, abs=1e-12)


class TestBreakdown:
    def test_total_identity(self, pair):
        s, t = pair
        w = LeapLossWeights()
        br = total_loss(trace(s), trace(t), w, LMAP, schedule_fraction=0.35)
        want = (br.final + w.alpha * br.inter + w.beta * (br.exit_teacher + w.beta_student * br.exit_student)
                + w.delta_contrast * br.contrast + w.epsilon_late * br.late + w.gamma_redund * br.redund)
        assert br.total == pytest.approx(want, abs=1e-9)
        assert br.ramp == pytest.approx(0.5)
        for name in ("final", "inter", "exit_teacher", "exit_student", "contrast", "late"):
            assert getattr(br, name) >= 0
        assert br.redund <= 0

    def test_baseline_mask_drops_exit_terms(self, pair):
        s, t = pair
        br = total_loss(trace(s), trace(t), LeapLossWeights(), LMAP, terms=Lo.BASELINE_TERMS)
        assert br.exit_teacher == br.exit_student == br.late == br.redund == 0.0
        assert br.total == pytest.approx(br.final + 0.3 * br.inter + 0.3 * br.contrast, abs=1e-12)

    def test_ramp_zero_early(self, pair):
        s, t = pair
        br = total_loss(trace(s), trace(t), LeapLossWeights(), LMAP, schedule_fraction=0.05)
        assert br.exit_student == 0.0 and br.ramp == 0.0

    def test_unknown_term(self, pair):
        s, t = pair
        with pytest.raises(ContractError):
            total_loss(trace(s), trace(t), LeapLossWeights(), LMAP, terms={"final", "bogus"})

    def test_empty_mask(self, pair):
        s, t = pair
        with pytest.raises(ContractError):
            total_loss(trace(s), trace(t), LeapLossWeights(), LMAP, terms=set())

    def test_as_dict_excludes_tensor(self, pair):
        s, t = pair
        d = total_loss(trace(s), trace(t), LeapLossWeights(), LMAP).as_dict()
        assert "total_tensor" not in d and set(d) >= {"final", "total", "ramp"}


class TestEdgeCases:
    def test_identical_student_teacher(self, rng):
        s = rng.normal(size=(4, 3, 5))
        assert Lo.loss_final(trace(s), trace(s)).item() == pytest.approx(0.0, abs=1e-12)
        assert Lo.loss_contrast(trace(s), trace(s)).item() == pytest.approx(0.0, abs=1e-12)

    def test_dim_mismatch_needs_projection(self, rng):
        s, t = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 4, 6))
        with pytest.raises(ShapeError):
            Lo.loss_final(trace(s), trace(t))
        assert np.isfinite(Lo.loss_final(trace(s), trace(t), Projection(4, 6)).item())

    def test_contrast_needs_batch(self, rng):
        s = rng.normal(size=(1, 2, 4))
        with pytest.raises(ContractError):
            Lo.loss_contrast(trace(s), trace(s))

    def test_late_window_bounds(self, rng):
        s = rng.normal(size=(2, 4, 3))
        with pytest.raises(ContractError):
            Lo.loss_late(trace(s), (2, 4))

    def test_teacher_gets_no_grad(self, rng):
        s, t = trace(rng.normal(size=(4, 4, 6)), grad=True), trace(rng.normal(size=(4, 8, 6)), grad=True)
        total_loss(s, t, LeapLossWeights(), LMAP, 0.9).total_tensor.backward()
        assert all(p.grad is None for p in t.pooled)
        assert all(p.grad is not None for p in s.pooled)

    def test_weights_validation(self):
        with pytest.raises(ContractError):
            LeapLossWeights(alpha=-1)
        with pytest.raises(ContractError):
            LeapLossWeights(tau_train=1.5)
        with pytest.raises(ContractError):
            LeapLossWeights(tau_contrast=0)
        with pytest.raises(ConfigError):
            LeapLossWeights.from_dict({"beta": 0.8, "unused": 1})
        w = LeapLossWeights.from_dict({"beta": 0.8})
        assert w.beta == 0.8 and LeapLossWeights.from_dict(w.to_dict()) == w


class TestRamp:
    def test_endpoints(self):
        assert progressive_ramp(0.1) == 0.0 and progressive_ramp(0.6) == 1.0
        assert progressive_ramp(0.0) == 0.0 and progressive_ramp(1.0) == 1.0
        assert progressive_ramp(0.35) == pytest.approx(0.5)

    def test_outside_unit_interval(self):
        with pytest.raises(ContractError):
            progressive_ramp(1.2)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert progressive_ramp(lo) <= progressive_ramp(hi)


def test_default_layer_weights():
    w = Lo.default_layer_weights(12)
    assert w[5] == pytest.approx(0.5) and w[4] == pytest.approx(0.5 * 5 / 12) and w[-1] == 1.0
