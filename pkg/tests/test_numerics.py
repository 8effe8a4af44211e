import json
import math

import numpy as np
import pytest

from klpnet import numerics
from klpnet.numerics import DomainError, NumericError, ShapeError


class TestMatmul:
    def test_identity(self):
        M = np.array([[1.5, -2.0], [0.25, 4.0]])
        assert np.array_equal(numerics.matmul(np.eye(2), M), M)

    def test_hand_product(self):
        out = numerics.matmul([[1, 2], [3, 4]], [[1], [1]])
        assert out.tolist() == [[3.0], [7.0]]

    def test_zeros(self):
        out = numerics.matmul(np.zeros((2, 3)), np.arange(12.0).reshape(3, 4))
        assert out.shape == (2, 4) and not out.any()

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            numerics.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associative(self):
        for seed in range(20):
            gen = numerics.rng(seed)
            a, b, c = (gen.standard_normal((4, 4)) for _ in range(3))
            left = numerics.matmul(numerics.matmul(a, b), c)
            right = numerics.matmul(a, numerics.matmul(b, c))
            assert np.max(np.abs(left - right)) <= 1e-12 * max(1.0, np.max(np.abs(left)))


class TestElementwise:
    def test_named_maps(self):
        assert numerics.elementwise([0.0], "tanh").tolist() == [0.0]
        assert numerics.elementwise([0.0], "sigmoid").tolist() == [0.5]
        assert numerics.elementwise([-1.0, 2.0], "relu").tolist() == [0.0, 2.0]
        assert numerics.elementwise([0.0], "exp").tolist() == [1.0]
        assert numerics.elementwise([math.e], "log").tolist() == pytest.approx([1.0])

    def test_log_domain(self):
        with pytest.raises(DomainError):
            numerics.elementwise([1.0, 0.0], "log")

    def test_unknown_map(self):
        with pytest.raises(ValueError):
            numerics.elementwise([1.0], "cosh")

    def test_sigmoid_extremes_finite(self):
        out = numerics.sigmoid(np.array([-800.0, 800.0]))
        assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


class TestConcat:
    def test_channel_extent(self):
        assert numerics.concat(np.zeros((4, 4, 2)), np.zeros((4, 4, 3)), axis=2).shape == (4, 4, 5)

    def test_empty_operand(self):
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(numerics.concat(x, np.zeros((2, 0)), axis=1), x)

    def test_hand_layout(self):
        assert numerics.concat([[1], [2]], [[3], [4]], axis=1).tolist() == [[1, 3], [2, 4]]

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            numerics.concat(np.zeros((2, 2)), np.zeros((3, 2)), axis=1)

    def test_slice_recovers_inputs(self):
        gen = numerics.rng(3)
        for axis in range(3):
            a = gen.standard_normal((3, 4, 5))
            b = gen.standard_normal(tuple(7 if k == axis else a.shape[k] for k in range(3)))
            c = numerics.concat(a, b, axis)
            left, right = np.split(c, [a.shape[axis]], axis=axis)
            assert np.array_equal(left, a) and np.array_equal(right, b)


class TestResample:
    def test_down_mean(self):
        out = numerics.resample2x(np.array([[1.0, 3.0], [5.0, 7.0]])[:, :, None], "down")
        assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4.0

    def test_constant_round_trip(self):
        x = np.full((8, 6, 3), 2.7)
        down = numerics.resample2x(x, "down")
        assert np.array_equal(down, np.full((4, 3, 3), 2.7))
        assert np.array_equal(numerics.resample2x(down, "up"), x)

    def test_up_is_nearest(self):
        x = np.arange(4.0).reshape(2, 2)
        up = numerics.resample2x(x, "up")
        assert up.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]

    def test_odd_extent(self):
        with pytest.raises(ShapeError):
            numerics.resample2x(np.zeros((3, 4, 1)), "down")

    def test_down_matches_block_mean(self):
        gen = numerics.rng(5)
        x = gen.standard_normal((6, 8, 2))
        expect = x.reshape(3, 2, 4, 2, 2).mean(axis=(1, 3))
        assert np.allclose(numerics.resample2x(x, "down"), expect, atol=1e-15)


class TestGradCheck:
    def test_square(self):
        err = numerics.grad_check(lambda x: float(x[0] ** 2), np.array([3.0]), np.array([6.0]), 1e-5)
        assert err <= 1e-8

    def test_tanh_sum(self):
        x = numerics.rng(0).standard_normal(10)
        err = numerics.grad_check(lambda v: float(np.tanh(v).sum()), x, 1 - np.tanh(x) ** 2)
        assert err <= 1e-6

    def test_fault_flagged(self):
        x = np.array([3.0])
        err = numerics.grad_check(lambda v: float(v[0] ** 2), x, np.array([12.0]))
        assert err == pytest.approx(0.5, abs=1e-6)

    def test_non_finite(self):
        with pytest.raises(NumericError), np.errstate(divide="ignore", invalid="ignore"):
            numerics.grad_check(lambda v: float(np.log(v[0])), np.array([0.0]), np.array([1.0]))

    def test_eps_positive(self):
        with pytest.raises(ValueError):
            numerics.grad_check(lambda v: 0.0, np.zeros(1), np.zeros(1), eps=0.0)


class TestRng:
    def test_reproducible(self):
        assert np.array_equal(numerics.rng(7).random(5), numerics.rng(7).random(5))

    def test_tuple_seeds_distinct(self):
        a = numerics.rng((1, 0)).random(4)
        b = numerics.rng((0, 1)).random(4)
        assert not np.array_equal(a, b)


class TestContainer:
    def test_layout(self):
        t = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        buf = numerics.encode_tensor(t)
        assert buf[:4] == b"KLPT"
        assert int.from_bytes(buf[4:8], "little") == 2
        assert int.from_bytes(buf[8:12], "little") == 2 and int.from_bytes(buf[12:16], "little") == 3
        assert np.frombuffer(buf[16:], "<f8").tolist() == [1, 2, 3, 4, 5, 6]

    def test_round_trip(self):
        gen = numerics.rng(1)
        for shape in [(3,), (2, 5), (2, 3, 4)]:
            t = gen.standard_normal(shape)
            back, end = numerics.decode_tensor(numerics.encode_tensor(t))
            assert np.array_equal(back, t) and end == len(numerics.encode_tensor(t))

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            numerics.decode_tensor(b"NOPE" + bytes(8))

    def test_file_round_trip(self, tmp_path):
        t = numerics.rng(2).standard_normal((4, 4))
        numerics.save_tensor(tmp_path / "t.klpt", t)
        assert np.array_equal(numerics.load_tensor(tmp_path / "t.klpt"), t)

    def test_archive(self, tmp_path):
        gen = numerics.rng(4)
        tensors = {"a": gen.standard_normal((2, 3)), "b": gen.standard_normal(5)}
        path = tmp_path / "m.klpt"
        numerics.save_archive(path, tensors)
        manifest = json.loads(numerics.manifest_path(path).read_text())
        assert manifest["entries"]["a"]["offset"] == 0
        assert manifest["entries"]["b"]["offset"] == manifest["entries"]["a"]["length"] == 16 + 48
        back = numerics.load_archive(path)
        assert set(back) == {"a", "b"}
        assert all(np.array_equal(back[k], tensors[k]) for k in tensors)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        numerics.atomic_write(tmp_path / "x.txt", "hello")
        assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]
