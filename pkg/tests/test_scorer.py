import numpy as np
import pytest

from evictd import autodiff as ad
from evictd.autodiff import Tape, Tensor
from evictd.scorer import (
    HALF_FIELD,
    RECEPTIVE_FIELD,
    binarize,
    init_scorer_params,
    score_center,
    score_tokens,
    scorer_channel_widths,
    scorer_param_count,
    scorer_receptive_bounds,
)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def params():
    return init_scorer_params(n_heads=2, d_head=8, seed=5)


def _random_kv(rng, t, h=2, d=8, b=None):
    shape = (t, h, d) if b is None else (b, t, h, d)
    return Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))


class TestParams:
    def test_receptive_field_constant(self):
        assert RECEPTIVE_FIELD == 13
        assert HALF_FIELD == 6

    def test_channel_widths_halve(self):
        assert scorer_channel_widths(16) == [32, 16, 8, 4, 1]

    def test_d_head_divisibility(self):
        with pytest.raises(ValueError):
            scorer_channel_widths(6)

    def test_param_count_matches_materialized(self):
        p = init_scorer_params(3, 16, seed=0)
        assert p.param_count() == scorer_param_count(3, 16)

    def test_biases_start_zero(self, params):
        for c in params.convs:
            assert np.array_equal(c.bias.data, np.zeros_like(c.bias.data))

    def test_init_deterministic(self):
        a = init_scorer_params(2, 8, seed=3)
        b = init_scorer_params(2, 8, seed=3)
        for ca, cb in zip(a.convs, b.convs):
            assert np.array_equal(ca.weight.data, cb.weight.data)


class TestScoreTokens:
    def test_zero_input_scores_exactly_half(self, params):
        t = 20
        z = Tensor(np.zeros((t, 2, 8)))
        r = score_tokens(z, z, params, mode="train")
        assert r.shape == (t, 2)
        assert np.all(r.data == 0.5)

    def test_output_in_open_interval(self, params, rng):
        k, v = _random_kv(rng, 30)
        r = score_tokens(k, v, params, mode="train").data
        assert np.all((r > 0.0) & (r < 1.0))

    def test_deferred_mode_withholds_tail(self, params, rng):
        t = 25
        k, v = _random_kv(rng, t)
        full = score_tokens(k, v, params, mode="train").data
        deferred = score_tokens(k, v, params, mode="deferred").data
        assert deferred.shape == (t - HALF_FIELD, 2)
        # positions with full right context must agree bit for bit
        assert np.array_equal(deferred, full[: t - HALF_FIELD])

    def test_deferred_too_short_is_empty(self, params, rng):
        k, v = _random_kv(rng, 5)
        r = score_tokens(k, v, params, mode="deferred")
        assert r.shape == (0, 2)

    def test_locality_beyond_half_field(self, params, rng):
        t = 40
        k, v = _random_kv(rng, t)
        base = score_tokens(k, v, params, mode="train").data
        j = 15
        kd = k.data.copy()
        kd[j + HALF_FIELD + 1] += 10.0  # just outside the receptive field of j
        moved = score_tokens(Tensor(kd), v, params, mode="train").data
        assert np.array_equal(base[j], moved[j])
        assert not np.array_equal(base[j + 1], moved[j + 1])

    def test_head_independence(self, params, rng):
        t = 30
        k, v = _random_kv(rng, t)
        base = score_tokens(k, v, params, mode="train").data
        vd = v.data.copy()
        vd[:, 1, :] += 5.0  # head 1 everywhere
        moved = score_tokens(k, Tensor(vd), params, mode="train").data
        assert np.array_equal(base[:, 0], moved[:, 0])
        assert not np.array_equal(base[:, 1], moved[:, 1])

    def test_locality_matches_bounds_on_random_positions(self, params, rng):
        t = 60
        k, v = _random_kv(rng, t)
        base = score_tokens(k, v, params, mode="train").data
        for _ in range(50):
            j = int(rng.integers(0, t))
            side = int(rng.choice([-1, 1]))
            off = HALF_FIELD + 1 + int(rng.integers(0, 5))
            jj = j + side * off
            if not (0 <= jj < t):
                continue
            lo1, hi1 = scorer_receptive_bounds(j + 1)  # 1-based bounds
            assert not (lo1 <= jj + 1 <= hi1)
            kd = k.data.copy()
            kd[jj] += 3.0
            moved = score_tokens(Tensor(kd), v, params, mode="train").data
            assert np.array_equal(base[j], moved[j])

    def test_batched_matches_unbatched(self, params, rng):
        t, b = 18, 3
        k, v = _random_kv(rng, t, b=b)
        rb = score_tokens(k, v, params, mode="train").data
        for i in range(b):
            one = score_tokens(Tensor(k.data[i]), Tensor(v.data[i]), params, "train").data
            assert np.array_equal(one, rb[i])

    def test_shape_mismatch_rejected(self, params, rng):
        k, _ = _random_kv(rng, 10)
        bad = Tensor(np.zeros((10, 3, 8)))
        with pytest.raises(ValueError):
            score_tokens(k, bad, params, mode="train")
        with pytest.raises(ValueError):
            score_tokens(bad, bad, params, mode="train")

    def test_dropout_train_vs_eval(self, params, rng):
        k, v = _random_kv(rng, 20)
        a = score_tokens(k, v, params, "train", seed=1, dropout_mode="train").data
        b = score_tokens(k, v, params, "train", seed=1, dropout_mode="train").data
        c = score_tokens(k, v, params, "train", seed=2, dropout_mode="train").data
        d = score_tokens(k, v, params, "train").data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_dropout_needs_seed(self, params, rng):
        k, v = _random_kv(rng, 10)
        with pytest.raises(ValueError):
            score_tokens(k, v, params, "train", dropout_mode="train")


class TestScoreCenter:
    def test_matches_batch_scores_bitwise(self, params, rng):
        t = 40
        k, v = _random_kv(rng, t)
        full = score_tokens(k, v, params, mode="train").data
        for j in (0, 3, 6, 17, t - 7):
            ks = np.zeros((RECEPTIVE_FIELD, 2, 8))
            vs = np.zeros((RECEPTIVE_FIELD, 2, 8))
            lo = j - HALF_FIELD
            for c in range(RECEPTIVE_FIELD):
                p = lo + c
                if 0 <= p < t:
                    ks[c] = k.data[p]
                    vs[c] = v.data[p]
            assert np.array_equal(score_center(ks, vs, params), full[j])

    def test_rejects_wrong_slab_size(self, params):
        z = np.zeros((12, 2, 8))
        with pytest.raises(ValueError):
            score_center(z, z, params)


class TestGradients:
    def test_end_to_end_matches_fd(self, rng):
        p = init_scorer_params(1, 4, seed=9, dropout_p=0.0)
        t = 16
        k = Tensor(rng.normal(size=(t, 1, 4)))
        v = Tensor(rng.normal(size=(t, 1, 4)))

        def run(kt, tape):
            return score_tokens(kt, v, p, mode="train", tape=tape)

        tape = Tape()
        tape.backward(ad.sum_all(run(k, tape), tape))
        numeric = ad.finite_difference_oracle(lambda kt: float(run(kt, None).data.sum()), k)
        assert ad.fd_relative_error(tape.grad(k), numeric) <= 1e-5

    def test_weight_gradients_match_fd(self, rng):
        p = init_scorer_params(1, 4, seed=9, dropout_p=0.0)
        k = Tensor(rng.normal(size=(12, 1, 4)))
        v = Tensor(rng.normal(size=(12, 1, 4)))
        w1 = p.convs[1].weight

        def run(wt, tape):
            p.convs[1] = ad.ConvParams(wt, p.convs[1].bias)
            try:
                return score_tokens(k, v, p, mode="train", tape=tape)
            finally:
                p.convs[1] = ad.ConvParams(w1, p.convs[1].bias)

        tape = Tape()
        tape.backward(ad.sum_all(run(w1, tape), tape))
        numeric = ad.finite_difference_oracle(lambda wt: float(run(wt, None).data.sum()), w1)
        assert ad.fd_relative_error(tape.grad(w1), numeric) <= 1e-5


class TestBinarize:
    def test_threshold_is_strict(self):
        assert not binarize(np.array(0.5))
        assert binarize(np.array(0.5 + 1e-9))

    def test_matches_elementwise_oracle(self, rng):
        r = rng.uniform(size=(30, 4))
        got = binarize(r)
        for j in range(30):
            for h in range(4):
                assert got[j, h] == (r[j, h] > 0.5)


class TestReceptiveBounds:
    def test_left_clamp(self):
        assert scorer_receptive_bounds(1) == (1, 7)

    def test_interior(self):
        assert scorer_receptive_bounds(100) == (94, 106)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            scorer_receptive_bounds(0)
