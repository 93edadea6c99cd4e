import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from refinery.core import Domain, RngStream
from refinery.oracle import (
    Bump,
    OracleField,
    StageSpec,
    field_mean,
    finetune_update,
    random_landscape,
    rollout,
    success_map,
    success_map_csv,
    true_prob,
)

D2 = Domain.unit(2)


def one_bump(a=0.9, p_min=0.0, p_max=0.95, w=0.1, c=(0.5, 0.5)):
    return OracleField(D2, (Bump(c, a, w),), p_min, p_max)


class TestTrueProb:
    def test_peak(self):
        assert true_prob(one_bump(), [0.5, 0.5]) == 0.9

    def test_floor_far_away(self):
        f = OracleField(Domain.unit(2), (Bump((0.0, 0.0), 0.9, 0.01),), 0.02, 0.99)
        assert true_prob(f, [0.5, 0.5]) == 0.02

    def test_clamped_at_cap(self):
        f = OracleField(D2, (Bump((0.5, 0.5), 0.8, 0.2), Bump((0.52, 0.5), 0.8, 0.2)), 0.02, 0.95)
        assert true_prob(f, [0.51, 0.5]) == 0.95

    def test_out_of_domain(self):
        with pytest.raises(ValueError):
            true_prob(one_bump(), [1.5, 0.5])

    def test_vectorized(self):
        X = np.random.default_rng(0).random((10, 2))
        f = random_landscape(D2, RngStream(1))
        assert np.array_equal(true_prob(f, X), np.array([true_prob(f, x) for x in X]))

    @given(st.integers(0, 10_000))
    def test_within_bounds(self, seed):
        f = random_landscape(D2, RngStream(seed))
        p = f.prob(np.random.default_rng(seed).random((200, 2)))
        assert np.all((p >= f.p_min) & (p <= f.p_max))

    def test_validation(self):
        with pytest.raises(ValueError):
            Bump((0.0,), 1.5, 0.1)
        with pytest.raises(ValueError):
            OracleField(D2, (), 0.5, 0.4)
        with pytest.raises(ValueError):
            OracleField(D2, (Bump((0.0,), 0.5, 0.1),))


class TestRollout:
    def test_certain_success(self):
        s = StageSpec(OracleField.constant(D2, 1.0))
        assert rollout(s, [0.3, 0.3], 500, RngStream(0)).successes == 500

    def test_certain_failure(self):
        s = StageSpec(OracleField.constant(D2, 0.0))
        assert rollout(s, [0.3, 0.3], 500, RngStream(0)).successes == 0

    def test_binomial_interval(self):
        s = StageSpec(OracleField.constant(D2, 0.9))
        n = 10_000
        r = rollout(s, [0.5, 0.5], n, RngStream(1))
        assert abs(r.rate - 0.9) <= 3 * np.sqrt(0.9 * 0.1 / n)

    def test_chi_square_goodness_of_fit(self):
        # 5000 records of 20 trials each, 10^5 rollouts in total
        p, t = 0.37, 20
        s = StageSpec(one_bump(a=p, p_max=0.99, w=100.0))
        x = [0.5, 0.5]
        assert true_prob(s.oracle, x) == pytest.approx(p)
        root = RngStream(2)
        counts = np.array([rollout(s, x, t, root.child(i)).successes for i in range(5000)])
        obs = np.bincount(counts, minlength=t + 1).astype(float)
        exp = stats.binom.pmf(np.arange(t + 1), t, true_prob(s.oracle, x)) * len(counts)
        # merge sparse tails until every bin expects at least 5
        keep = exp >= 5
        lo, hi = np.argmax(keep), len(keep) - np.argmax(keep[::-1]) - 1
        o = np.concatenate([[obs[: lo + 1].sum()], obs[lo + 1 : hi], [obs[hi:].sum()]])
        e = np.concatenate([[exp[: lo + 1].sum()], exp[lo + 1 : hi], [exp[hi:].sum()]])
        _, pval = stats.chisquare(o, e * o.sum() / e.sum())
        assert pval > 0.001

    def test_noise_perturbs_inside_domain(self):
        # a sharp bump at the corner: noise both lowers the rate and
        # keeps perturbed points legal
        f = OracleField(D2, (Bump((0.0, 0.0), 0.95, 0.02),), 0.0, 0.99)
        quiet = rollout(StageSpec(f), [0.0, 0.0], 4000, RngStream(3)).rate
        noisy = rollout(StageSpec(f, eval_noise=(0.05, 0.05)), [0.0, 0.0], 4000, RngStream(3)).rate
        assert noisy < quiet - 0.2

    def test_deterministic_and_validated(self):
        s = StageSpec(random_landscape(D2, RngStream(0)), eval_noise=(0.01, 0.02))
        assert rollout(s, [0.2, 0.3], 50, RngStream(4)) == rollout(s, [0.2, 0.3], 50, RngStream(4))
        with pytest.raises(ValueError):
            rollout(s, [0.2, 0.3], 0, RngStream(4))
        with pytest.raises(ValueError):
            rollout(s, [1.2, 0.3], 5, RngStream(4))

    def test_stage_noise_validation(self):
        f = OracleField.constant(D2, 0.5)
        assert StageSpec(f).eval_noise == (0.0, 0.0)
        for bad in [(0.1,), (-0.1, 0.0), (1.0, 0.0)]:
            with pytest.raises(ValueError):
                StageSpec(f, eval_noise=bad)


class TestFinetuneUpdate:
    def test_fixed_point_at_cap(self):
        f = OracleField.constant(D2, 0.9)
        g = finetune_update(f, [[0.5, 0.5]], 0.5, 0.1)
        assert true_prob(g, [0.5, 0.5]) == 0.9

    def test_gap_closing(self):
        f = OracleField(D2, (), 0.5, 1.0)
        g = finetune_update(f, [[0.4, 0.4]], 0.5, 0.1)
        assert true_prob(g, [0.4, 0.4]) == 0.75

    def test_far_point_unchanged(self):
        f = random_landscape(D2, RngStream(0))
        g = finetune_update(f, [[0.0, 0.0]], 1.0, 0.05)
        x = [0.5, 0.5]
        d = np.hypot(0.5, 0.5) / 0.05
        assert d >= 10
        assert abs(true_prob(g, x) - true_prob(f, x)) < 1e-20

    def test_original_untouched(self):
        f = random_landscape(D2, RngStream(1))
        before = f.to_dict()
        finetune_update(f, np.array([[0.3, 0.3], [0.7, 0.1]]), 0.5, 0.1)
        assert f.to_dict() == before and f.boosts == ()

    def test_sequential_matches_definition(self):
        # compose updates one at a time with the stated rule and compare
        f = random_landscape(D2, RngStream(2))
        pts = np.random.default_rng(0).random((6, 2))
        X = np.random.default_rng(1).random((100, 2))
        p = f.prob(X)
        g = f
        for q in pts:
            gain = 0.4 * np.exp(-((X - q) ** 2).sum(1) / (2 * 0.15**2))
            p = p + gain * (f.p_max - p)
            g = finetune_update(g, q[None], 0.4, 0.15)
        assert np.allclose(g.prob(X), p, rtol=0, atol=1e-14)

    @given(st.integers(0, 1000), st.floats(0.01, 1.0), st.floats(0.01, 0.5))
    def test_monotone_and_capped(self, seed, eta, width):
        f = random_landscape(D2, RngStream(seed))
        pts = np.random.default_rng(seed).random((3, 2))
        g = finetune_update(f, pts, eta, width)
        X = np.random.default_rng(seed + 1).random((300, 2))
        assert np.all(g.prob(X) >= f.prob(X))
        assert np.all(g.prob(X) <= f.p_max)

    def test_replay_reproduces_field(self):
        f = random_landscape(D2, RngStream(3))
        log = [(np.random.default_rng(i).random((2, 2)), 0.3 + 0.1 * i, 0.1) for i in range(4)]
        a = b = f
        for pts, eta, w in log:
            a = finetune_update(a, pts, eta, w)
        for pts, eta, w in log:
            b = finetune_update(b, pts, eta, w)
        assert a == b
        rebuilt = OracleField.from_dict(json.loads(json.dumps(a.to_dict())))
        X = np.random.default_rng(5).random((50, 2))
        assert np.array_equal(rebuilt.prob(X), a.prob(X))

    def test_invalid(self):
        f = OracleField.constant(D2, 0.5)
        with pytest.raises(ValueError):
            finetune_update(f, [[0.5, 0.5]], 0.0, 0.1)
        with pytest.raises(ValueError):
            finetune_update(f, [[0.5, 0.5]], 0.5, 0.0)


class TestSuccessMap:
    def test_constant(self):
        g = success_map(OracleField.constant(D2, 0.42), 16, [None, None])
        assert g.shape == (16, 16) and np.all(g == 0.42)

    def test_peak_at_center_cell(self):
        g = success_map(one_bump(w=0.2), 9, [None, None])
        assert np.unravel_index(np.argmax(g), g.shape) == (4, 4)

    def test_mean_matches_monte_carlo(self):
        f = random_landscape(Domain.unit(3), RngStream(4))
        g = success_map(f, 256, [None, 0.4, None])
        U = np.random.default_rng(6).random((200_000, 3))
        U[:, 1] = 0.4
        assert abs(g.mean() - f.prob(U).mean()) < 0.01

    def test_orientation(self):
        f = OracleField(D2, (Bump((0.1, 0.9), 0.9, 0.05),), 0.0, 0.99)
        g = success_map(f, (10, 20), [None, None])
        assert g.shape == (10, 20)
        assert np.unravel_index(np.argmax(g), g.shape) == (1, 17)

    def test_free_dim_count(self):
        f = random_landscape(Domain.unit(3), RngStream(0))
        with pytest.raises(ValueError):
            success_map(f, 8, [None, None, None])
        with pytest.raises(ValueError):
            success_map(f, 8, [None, 0.1, 0.2])

    def test_csv_header(self):
        f = random_landscape(Domain.unit(3), RngStream(0))
        g = success_map(f, 4, [0.5, None, None])
        rows = list(csv.reader(io.StringIO(success_map_csv(g, [1, 2], [0.5, None, None]))))
        assert rows[0] == ["free_dims", "1", "2"]
        assert rows[1] == ["slice", "0.5", "", ""]
        assert np.array_equal(np.array(rows[2:], dtype=float), g)


class TestLandscape:
    def test_generator_ranges(self):
        for s in range(30):
            f = random_landscape(D2, RngStream(s))
            assert 1 <= len(f.bumps) <= 4
            assert all(0.4 <= b.amplitude <= 0.95 and 0.1 <= b.width <= 0.3 for b in f.bumps)
            assert (f.p_min, f.p_max) == (0.02, 0.99)

    def test_field_mean_regime(self):
        means = [field_mean(random_landscape(D2, RngStream(s))) for s in range(40)]
        assert 0.1 < np.median(means) < 0.6
