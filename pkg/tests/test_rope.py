import numpy as np
import pytest

from evictd import autodiff as ad
from evictd.autodiff import Tape, Tensor, finite_difference_oracle, fd_relative_error
from evictd.rope import SinusoidTable, apply_rope, invert_rope, rope


def _rotation_matrix_oracle(x, positions, table, inverse=False):
    """Apply the rotation as explicit 2x2 matrices (transposed for inverse)."""
    c, s = table.cos_sin(positions)
    out = np.empty_like(x)
    t_axis = x.shape[-2]
    for t in range(t_axis):
        for i in range(x.shape[-1] // 2):
            m = np.array([[c[t, i], -s[t, i]], [s[t, i], c[t, i]]])
            if inverse:
                m = m.T
            pair = x[..., t, 2 * i:2 * i + 2]
            out[..., t, 2 * i:2 * i + 2] = pair @ m.T
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(99)


class TestSinusoidTable:
    def test_rejects_odd_dim(self):
        with pytest.raises(ValueError):
            SinusoidTable(3)

    def test_rejects_bad_freqs_shape(self):
        with pytest.raises(ValueError):
            SinusoidTable(4, freqs=np.array([1.0]))

    def test_geometric_schedule(self):
        t = SinusoidTable(4, base=100.0)
        assert np.allclose(t.freqs, [1.0, 0.1], atol=1e-15)

    def test_unit_circle_invariant(self):
        t = SinusoidTable(8)
        c, s = t.cos_sin(np.arange(500))
        assert np.max(np.abs(c * c + s * s - 1.0)) <= 1e-12

    def test_lazy_extension_preserves_rows(self):
        t = SinusoidTable(4, initial_capacity=4)
        c1, s1 = t.cos_sin(np.array([3]))
        c1, s1 = c1.copy(), s1.copy()
        t.cos_sin(np.array([5000]))
        c2, s2 = t.cos_sin(np.array([3]))
        assert np.array_equal(c1, c2) and np.array_equal(s1, s2)

    def test_negative_position_rejected(self):
        t = SinusoidTable(4)
        with pytest.raises(ValueError):
            t.cos_sin(np.array([-1]))


class TestApply:
    def test_position_zero_is_identity(self, rng):
        t = SinusoidTable(8)
        x = rng.normal(size=(3, 1, 8))
        assert np.array_equal(apply_rope(x, np.array([0]), t), x)

    def test_quarter_turn(self):
        # one pair with angular frequency pi/2: position 1 turns (1,0) into (0,1)
        t = SinusoidTable(2, freqs=np.array([np.pi / 2]))
        y = apply_rope(np.array([[1.0, 0.0]]), np.array([1]), t)
        assert np.allclose(y, [[0.0, 1.0]], atol=1e-12)

    def test_relative_offset_property(self, rng):
        t = SinusoidTable(16)
        q = rng.normal(size=(1, 16))
        k = rng.normal(size=(1, 16))
        def score(pq, pk):
            return float(
                apply_rope(q, np.array([pq]), t)[0] @ apply_rope(k, np.array([pk]), t)[0]
            )
        assert abs(score(5, 3) - score(105, 103)) <= 1e-10

    def test_matches_matrix_oracle(self, rng):
        t = SinusoidTable(6)
        x = rng.normal(size=(2, 5, 6))
        pos = np.array([0, 3, 7, 2, 40])
        got = apply_rope(x, pos, t)
        expect = _rotation_matrix_oracle(x, pos, t)
        assert np.max(np.abs(got - expect)) <= 1e-12

    def test_norm_preserved(self, rng):
        t = SinusoidTable(8)
        x = rng.normal(size=(4, 8))
        y = apply_rope(x, np.array([1, 9, 17, 400]), t)
        assert np.allclose(
            np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12
        )


class TestInvert:
    def test_round_trip_many(self, rng):
        t = SinusoidTable(8)
        for _ in range(100):
            x = rng.normal(size=(1, 8))
            p = np.array([int(rng.integers(0, 2048))])
            back = invert_rope(apply_rope(x, p, t), p, t)
            assert np.max(np.abs(back - x)) <= 1e-12

    def test_identity_at_origin(self, rng):
        t = SinusoidTable(4)
        x = rng.normal(size=(1, 4))
        assert np.array_equal(invert_rope(x, np.array([0]), t), x)

    def test_offset_recovers_window_contents(self, rng):
        # shadow-copy oracle: keys rotated at absolute positions, then a window
        # of them un-rotated with window-relative positions plus the origin
        t = SinusoidTable(8)
        n, w = 300, 32
        pre = rng.normal(size=(n, 8))
        post = apply_rope(pre, np.arange(n), t)
        window = post[n - w:]
        back = invert_rope(window, np.arange(w), t, offset=n - w)
        assert np.max(np.abs(back - pre[n - w:])) <= 1e-12

    def test_negated_sine_equals_transpose_matrix(self, rng):
        t = SinusoidTable(6)
        x = rng.normal(size=(3, 4, 6))
        pos = np.array([1, 8, 2, 31])
        got = invert_rope(x, pos, t)
        expect = _rotation_matrix_oracle(x, pos, t, inverse=True)
        assert np.max(np.abs(got - expect)) <= 1e-12

    def test_unrotation_is_deterministic_across_batch_shapes(self, rng):
        # the same cached key must un-rotate to bitwise-identical values whether
        # processed alone or inside a larger batch
        t = SinusoidTable(8)
        keys = rng.normal(size=(10, 8))
        pos = np.arange(50, 60)
        whole = invert_rope(keys, pos, t)
        for i in range(10):
            one = invert_rope(keys[i:i + 1], pos[i:i + 1], t)
            assert np.array_equal(one[0], whole[i])


class TestDifferentiableRope:
    @pytest.mark.parametrize("shape", [(1, 4), (3, 2, 4), (2, 3, 5, 4)])
    def test_gradient_matches_fd(self, rng, shape):
        t = SinusoidTable(4)
        pos = np.arange(shape[-2]) + 3
        x = Tensor(rng.normal(size=shape))

        def run(xt, tape):
            return rope(xt, pos, t, tape)

        tape = Tape()
        loss = ad.sum_all(run(x, tape), tape)
        tape.backward(loss)
        numeric = finite_difference_oracle(lambda xt: float(run(xt, None).data.sum()), x)
        assert fd_relative_error(tape.grad(x), numeric) <= 1e-5

    def test_forward_matches_array_path(self, rng):
        t = SinusoidTable(8)
        x = rng.normal(size=(2, 3, 8))
        pos = np.array([4, 0, 9])
        assert np.array_equal(rope(Tensor(x), pos, t).data, apply_rope(x, pos, t))
