import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_diff, rel_err

from tdq import numerics as nm
from tdq.numerics import Param, RandomStream, Tensor, backward
from tdq.quant import QuantSpec, fake_quant_ste
from tdq.temporal import (
    GeneratorMLP,
    dynamic_fake_quant,
    encode_time,
    generator_forward,
    init_generator,
    precompute_table,
    softplus_inverse,
)


def test_encoding_at_zero_and_first_pair():
    e = encode_time(0, 64)
    np.testing.assert_array_equal(e[0::2], 0.0)
    np.testing.assert_array_equal(e[1::2], 1.0)
    for t in [1, 17, 999]:
        np.testing.assert_allclose(encode_time(t, 64)[:2], [np.sin(t), np.cos(t)], atol=1e-6)


def test_encoding_last_pair_at_t_max():
    np.testing.assert_allclose(encode_time(10000, 64)[-2:], [0.84147098, 0.54030231], atol=1e-6)


def test_encoding_shapes_and_errors():
    assert encode_time(np.arange(5), 8).shape == (5, 8)
    assert encode_time(3, 2).shape == (2,)
    for d in [3, 0]:
        with pytest.raises(ValueError):
            encode_time(1, d)
    with pytest.raises(ValueError):
        encode_time(-1, 8)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([2, 4, 16, 64, 128]))
def test_encoding_bounded_with_pythagorean_pairs(t, d):
    e = encode_time(t, d).astype(np.float64)
    assert np.all(np.abs(e) <= 1.0)
    np.testing.assert_allclose(e[0::2] ** 2 + e[1::2] ** 2, 1.0, atol=1e-6)


def test_constant_generator_emits_softplus_of_bias():
    gen = GeneratorMLP(64, 64)
    for w in gen.weights:
        w.data[...] = 0.0
    gen.biases[-1].data[...] = 0.3
    s = generator_forward(gen, encode_time(np.arange(0, 1000, 37), 64)).data
    np.testing.assert_allclose(s, np.log1p(np.exp(0.3)), rtol=1e-6)


def test_generator_positive_over_random_parameters():
    gen = GeneratorMLP(8, 8)
    enc = encode_time(np.arange(0, 1000, 50), 8)
    r = RandomStream(0)
    for i in range(10_000 // 20):
        sub = r.split(str(i))
        for j, p in enumerate(gen.params()):
            p.data[...] = sub.split(str(j)).normal(p.shape) * 5
        assert np.all(generator_forward(gen, enc).data > 0)


def test_generator_dimension_mismatch():
    with pytest.raises(ValueError):
        generator_forward(GeneratorMLP(64, 8), encode_time(3, 32))


def test_generator_parameter_gradients_match_finite_differences():
    gen = GeneratorMLP(8, 6, rng=RandomStream(1))
    r = RandomStream(2)
    for i, p in enumerate(gen.params()):
        p.data[...] = r.split(str(i)).normal(p.shape)
    enc = encode_time(np.arange(0, 200, 40), 8).astype(np.float64)
    w = np.linspace(-1, 1, len(enc))[:, None]
    params64 = [Param(p.data.astype(np.float64), dtype=np.float64) for p in gen.params()]

    def forward(ps):
        h = Tensor(enc, dtype=np.float64)
        h = nm.relu(nm.linear(h, ps[0], ps[1]))
        h = nm.relu(nm.linear(h, ps[2], ps[3]))
        return nm.tsum(nm.mul(nm.softplus(nm.linear(h, ps[4], ps[5])), Tensor(w, dtype=np.float64)))

    # the float64 replica must agree with the package forward before we trust it
    np.testing.assert_allclose(float(forward(params64).data), float((generator_forward(gen, enc).data * w).sum()), rtol=1e-5)
    backward(forward(params64))
    for k, p in enumerate(params64):
        def f(v, k=k):
            ps = [Tensor(q.data, dtype=np.float64) for q in params64]
            ps[k] = Tensor(v, dtype=np.float64)
            return float(forward(ps).data)

        assert rel_err(p.grad, central_diff(f, p.data, 1e-6)) <= 1e-3


def test_softplus_inverse():
    np.testing.assert_allclose(softplus_inverse(0.1), -2.2522, atol=1e-4)
    for s in [1e-4, 0.5, 3.0, 40.0]:
        np.testing.assert_allclose(np.log1p(np.exp(softplus_inverse(s))), s, rtol=1e-9)


def test_init_generator_sets_head_bias_and_mean_interval():
    spec = QuantSpec(4, symmetric=True)
    x = np.random.default_rng(0).normal(size=1000)
    ratios = []
    for seed in range(20):
        gen = GeneratorMLP(64, 64)
        s0 = init_generator(gen, x, spec, RandomStream(seed))
        np.testing.assert_allclose(gen.biases[-1].data[0], softplus_inverse(s0), rtol=1e-6)
        ratios.append(generator_forward(gen, encode_time(np.arange(1000), 64)).data.mean() / s0)
    assert np.all(np.abs(np.array(ratios) - 1) <= 0.15)
    with pytest.raises(ValueError):
        init_generator(GeneratorMLP(64, 64), [], spec, RandomStream(0))
    with pytest.raises(ValueError):
        init_generator(GeneratorMLP(64, 64), np.array([]), spec, RandomStream(0))


def test_init_generator_unit_gaussian_matches_dense_scalar_search():
    spec = QuantSpec(4, symmetric=True)
    x = np.random.default_rng(1).normal(size=100_000)
    s0 = init_generator(GeneratorMLP(64, 64), x, spec, RandomStream(0))

    def mse(s):
        q = np.clip(np.sign(x / s) * np.floor(np.abs(x / s) + 0.5), -7, 7)
        return np.mean((s * q - x) ** 2)

    grid = np.linspace(0.2, 0.5, 3001)
    oracle = grid[int(np.argmin([mse(s) for s in grid]))]
    assert abs(s0 - oracle) / oracle <= 0.02


def test_constant_generator_reduces_to_static_quantizer():
    spec = QuantSpec(4)
    gen = GeneratorMLP(64, 16)
    gen.biases[-1].data[...] = softplus_inverse(0.25)
    s_static = float(generator_forward(gen, encode_time(0, 64)).data[0, 0])
    xv = np.random.default_rng(2).normal(size=(6, 5)).astype(np.float32)
    xa, xb = Param(xv.copy()), Param(xv.copy())
    ya = dynamic_fake_quant(xa, gen, 123, spec, z=7.0)
    yb = fake_quant_ste(xb, Tensor(np.float32(s_static)), 7.0, spec)
    np.testing.assert_array_equal(ya.data, yb.data)
    backward(nm.tsum(nm.square(ya)))
    backward(nm.tsum(nm.square(yb)))
    np.testing.assert_array_equal(xa.grad, xb.grad)


def test_different_steps_give_different_lattices():
    spec = QuantSpec(4, symmetric=True)
    gen = GeneratorMLP(64, 64, rng=RandomStream(3))
    init_generator(gen, np.random.default_rng(3).normal(size=500), spec, RandomStream(3))
    gen.weights[-1].data[...] = RandomStream(4).normal(gen.weights[-1].shape)
    x = np.linspace(-3, 3, 101, dtype=np.float32)[None]
    s0, s1 = (float(generator_forward(gen, encode_time(t, 64)).data[0, 0]) for t in (0, 900))
    assert s0 != s1
    y0, y1 = dynamic_fake_quant(x, gen, 0, spec).data, dynamic_fake_quant(x, gen, 900, spec).data
    np.testing.assert_allclose(y0, s0 * np.clip(np.round(x / s0), -7, 7), atol=1e-6)
    np.testing.assert_allclose(y1, s1 * np.clip(np.round(x / s1), -7, 7), atol=1e-6)
    assert not np.array_equal(y0, y1)


def test_generator_gradient_flows_through_dynamic_quantizer():
    spec = QuantSpec(4, symmetric=True)
    gen = GeneratorMLP(16, 8, rng=RandomStream(5))
    gen.biases[-1].data[...] = softplus_inverse(0.2)
    x = np.random.default_rng(5).normal(size=(32, 4)).astype(np.float32)
    backward(nm.mse(dynamic_fake_quant(x, gen, 250, spec), x))
    assert abs(float(gen.biases[-1].grad[0])) > 0


def test_table_matches_live_exactly():
    gens = {"a": GeneratorMLP(64, 64, rng=RandomStream(6)), "b": GeneratorMLP(64, 32, rng=RandomStream(7))}
    for i, g in enumerate(gens.values()):
        g.weights[-1].data[...] = RandomStream(10 + i).normal(g.weights[-1].shape)
        g.biases[-1].data[...] = -1.0
    table = precompute_table(gens, 1000, {"a": 3.0})
    for site, g in gens.items():
        assert table.intervals[site].shape == (1000,)
        assert np.all(table.intervals[site] > 0)
        for t in range(1000):
            assert table.lookup(site, t)[0, 0] == generator_forward(g, encode_time(t, g.d)).data[0, 0]
    np.testing.assert_array_equal(table.lookup("a", np.array([5, 7]))[:, 0], table.intervals["a"][[5, 7]])
    assert table.zero_offsets == {"a": 3.0}
