import numpy as np
import pytest

from tilab.evaluation import (
    EvalReport,
    distance_curve,
    effect_stats,
    evaluate_all_pairs,
    pair_class,
)
from tilab.numerics import make_rng
from tilab.taskgen import LABEL_DIM, ordered_pairs_by_rank, sample_hierarchy

P, D = 32, 64


class ClosureOracle:
    """Reads the context of each sequence and answers by transitive closure.

    Items are recovered by exact equality of content halves, so the oracle is
    independent of any model code.
    """

    def predict(self, X):
        out = []
        for seq in X:
            T = seq.shape[0]
            content = seq[:, P:]
            items, above = [], set()

            def key(v):
                for k, w in enumerate(items):
                    if np.array_equal(v, w):
                        return k
                items.append(v)
                return len(items) - 1

            for t in range(0, T - 1, 2):
                a, b = key(content[t, : D // 2]), key(content[t, D // 2 :])
                if seq[t + 1, P + LABEL_DIM] > 0:
                    above.add((a, b))
            changed = True
            while changed:
                new = {(a, c) for a, b in above for b2, c in above if b == b2} - above
                above |= new
                changed = bool(new)
            q = (key(content[-1, : D // 2]), key(content[-1, D // 2 :]))
            out.append(1.0 if q in above else -1.0)
        return np.array(out)


class Constant:
    def __init__(self, value):
        self.value = value

    def predict(self, X):
        return np.full(len(X), self.value)


class TestPairClass:
    def test_classes(self):
        assert pair_class((3, 4), 7) == "adjacent"
        assert pair_class((1, 5), 7) == "terminal"
        assert pair_class((7, 3), 7) == "terminal"
        assert pair_class((2, 5), 7) == "internal"

    def test_counts(self):
        classes = [pair_class(c, 7) for c in ordered_pairs_by_rank(7)]
        assert classes.count("adjacent") == 12
        assert classes.count("internal") == 12
        assert classes.count("terminal") == 18


class TestEvaluate:
    def test_icl_oracle_is_perfect(self):
        rep = evaluate_all_pairs(ClosureOracle(), "icl", 5, make_rng(0))
        assert len(rep.cells()) == 42
        assert rep.overall() == 1.0
        assert all(rep.trials[c] == 5 for c in rep.cells())

    def test_iwl_context_is_uninformative(self):
        # distractor context holds none of the hierarchy items, so the closure
        # oracle has nothing to go on and answers -1 everywhere
        h = sample_hierarchy(7, D // 2, make_rng(1))
        rep = evaluate_all_pairs(ClosureOracle(), "iwl", 3, make_rng(2), hierarchy=h)
        assert rep.overall() == 0.5

    def test_always_positive_is_exactly_half(self):
        rep = evaluate_all_pairs(Constant(1.0), "icl", 7, make_rng(3))
        assert rep.overall() == 0.5
        curve = distance_curve(rep)
        assert all(v == 0.5 for v in curve.values())

    def test_ties_counted_as_positive(self):
        rep = evaluate_all_pairs(Constant(0.0), "icl", 2, make_rng(4))
        assert rep.ties == 84
        assert rep.overall() == 0.5

    def test_random_model_at_chance(self):
        class Noise:
            rng = make_rng(5)

            def predict(self, X):
                return self.rng.standard_normal(len(X))

        rep = evaluate_all_pairs(Noise(), "icl", 2000, make_rng(6), batch_episodes=200)
        assert abs(rep.overall() - 0.5) < 0.05

    def test_seeded(self):
        a = evaluate_all_pairs(ClosureOracle(), "icl", 3, make_rng(7))
        b = evaluate_all_pairs(ClosureOracle(), "icl", 3, make_rng(7))
        assert a.correct == b.correct

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            evaluate_all_pairs(Constant(1.0), "iwl", 1, make_rng(0))
        with pytest.raises(ValueError):
            evaluate_all_pairs(Constant(1.0), "other", 1, make_rng(0))
        with pytest.raises(ValueError):
            evaluate_all_pairs(Constant(1.0), "icl", 0, make_rng(0))


def report_from(acc_fn, n=7, trials=4):
    rep = EvalReport(n_items=n, regime="synthetic", n_episodes=trials)
    for c in ordered_pairs_by_rank(n):
        rep.add(c, round(acc_fn(c) * trials), trials)
    return rep


class TestCurves:
    def test_trial_weighting(self):
        rep = EvalReport(n_items=3, regime="x", n_episodes=1)
        rep.add((1, 2), 3, 3)
        rep.add((2, 1), 0, 1)
        assert rep.overall([(1, 2), (2, 1)]) == 0.75

    def test_missing_cells(self):
        rep = EvalReport(n_items=4, regime="x", n_episodes=1)
        rep.add((1, 2), 1, 1)
        with pytest.raises(ValueError):
            distance_curve(rep)

    def test_csv_round_trip(self, tmp_path):
        rep = report_from(lambda c: 0.25 * (abs(c[0] - c[1]) % 4))
        rep.to_csv(tmp_path / "e.csv")
        back = EvalReport.from_csv(tmp_path / "e.csv")
        assert back.correct == rep.correct and back.trials == rep.trials
        header = (tmp_path / "e.csv").read_text().splitlines()[0]
        assert header == "first_item_rank,second_item_rank,signed_distance,accuracy,n_trials"

    def test_merge(self):
        a = report_from(lambda c: 1.0)
        b = report_from(lambda c: 0.0)
        m = a.merge(b)
        assert m.overall() == 0.5 and m.n_episodes == 8


class TestEffectStats:
    def test_linear_pattern(self):
        # accuracy rising with distance, no terminal bonus
        rep = report_from(lambda c: 0.4 + 0.1 * abs(c[0] - c[1]), trials=20)
        s = effect_stats(rep)
        assert s.distance_effect == pytest.approx(1.0)
        assert s.terminal_advantage == pytest.approx(0.0)
        assert s.memorization_gap == pytest.approx(-0.1)

    def test_match_and_copy_pattern(self):
        # adjacent pairs perfect, terminal-containing pairs perfect, internal
        # non-adjacent pairs at chance.  Pooled accuracy per distance is then
        # [0.7, 0.75, 0.8333, 1, 1] for distances 2..6, so the rank correlation
        # with distance is strongly positive even though no internal pair is
        # ever inferred.
        def acc(c):
            if abs(c[0] - c[1]) == 1 or {c[0], c[1]} & {1, 7}:
                return 1.0
            return 0.5

        s = effect_stats(report_from(acc, trials=20))
        curve = distance_curve(report_from(acc, trials=20))
        np.testing.assert_allclose([curve[d] for d in range(2, 7)], [0.7, 0.75, 5 / 6, 1.0, 1.0])
        # by hand: accuracy ranks [1, 2, 3, 4.5, 4.5] against [1..5] give
        # covariance 9.5 and variances 10 and 9.5, so rho = sqrt(0.95)
        assert s.distance_effect == pytest.approx(np.sqrt(0.95), abs=1e-12)
        assert s.distance_effect == pytest.approx(0.9746794344808963)
        assert s.terminal_advantage == pytest.approx(0.5)
        assert s.memorization_gap == pytest.approx(0.3)
        assert s.terminal_by_distance == {2: pytest.approx(0.5), 3: pytest.approx(0.5), 4: pytest.approx(0.5)}

    def test_flat_curve_has_no_distance_effect(self):
        s = effect_stats(report_from(lambda c: 1.0))
        assert s.distance_effect is None
        assert "distance_effect: absent" in s.summary()

    def test_too_few_items(self):
        with pytest.raises(ValueError):
            effect_stats(report_from(lambda c: 1.0, n=3))
