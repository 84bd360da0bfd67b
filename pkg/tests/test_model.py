import numpy as np
import pytest

from sparsetof import tensor as T
from sparsetof.model import (
    DepthCompletionNet,
    LayerSize,
    ModelConfig,
    SizeReport,
    bits_to_mb,
    build,
    count_sizes,
    layer_specs,
    predict,
    size_bits,
    zero_last_layer,
)
from sparsetof.preproc import preprocess


def conv_params(c_in, c_out):
    return c_out * c_in * 9 + c_out


def params_oracle(n_f, n_s, c_in=5):
    """Independent tally of the UNet layer list."""
    ch = [n_f * 2**s for s in range(n_s)]
    total, prev = 0, c_in
    for c in ch:
        total += conv_params(prev, c) + conv_params(c, c)
        prev = c
    for s in range(n_s - 2, -1, -1):
        total += conv_params(ch[s + 1] + ch[s], ch[s]) + conv_params(ch[s], ch[s])
    return total + conv_params(ch[0], 1)


def test_doubling_rule():
    cfg = ModelConfig(8, 3)
    enc = [c_out for name, _, c_out, _ in layer_specs(cfg) if name.endswith("a") and name.startswith("enc")]
    assert enc == [8, 16, 32]
    assert cfg.multiple == 4


@pytest.mark.parametrize("n_f,n_s", [(4, 2), (8, 3), (16, 4), (64, 5)])
def test_param_count(n_f, n_s):
    net = build(ModelConfig(n_f, n_s), seed=0)
    assert net.n_params() == params_oracle(n_f, n_s)


def test_reference_size_logged(capsys):
    net = build(ModelConfig(64, 5), seed=0)
    print(f"MParams(n_f=64, n_s=5) = {net.mparams():.4f} (reference 50.3, deviation {net.mparams() / 50.3 - 1:+.1%})")
    assert net.mparams() == pytest.approx(31.380609)


def test_invalid_config():
    with pytest.raises(ValueError):
        ModelConfig(8, 1)
    with pytest.raises(ValueError):
        ModelConfig(2, 3)


def test_same_seed_same_init():
    a, b = build(ModelConfig(4, 2), 7), build(ModelConfig(4, 2), 7)
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.parameters(), b.parameters()))
    c = build(ModelConfig(4, 2), 8)
    assert a.parameters()[0].data.tobytes() != c.parameters()[0].data.tobytes()


def test_zero_last_layer_is_nni():
    g = np.random.default_rng(0)
    d = np.zeros((16, 20), np.float32)
    d[g.integers(16, size=8), g.integers(20, size=8)] = g.uniform(1, 10, 8)
    inp = preprocess(d, g.uniform(0, 255, (3, 16, 20)))
    net = build(ModelConfig(4, 3), seed=1)
    assert predict(net, inp)[0].tobytes() == inp.d_nni.tobytes()
    trained = build(ModelConfig(4, 3, zero_last=False), seed=1)
    assert predict(trained, inp)[0].tobytes() != inp.d_nni.tobytes()
    assert predict(zero_last_layer(trained), inp)[0].tobytes() == inp.d_nni.tobytes()


def test_indivisible_resolution():
    net = build(ModelConfig(4, 3))
    with pytest.raises(ValueError, match="divisible by 4"):
        net.forward(np.zeros((1, 5, 10, 12), np.float32))
    with pytest.raises(T.ShapeError):
        net.forward(np.zeros((1, 4, 8, 8), np.float32))


def test_output_shape_and_gradients_flow():
    net = build(ModelConfig(4, 2, zero_last=False), seed=2)
    x = np.random.default_rng(1).uniform(0, 1, (2, 5, 6, 8)).astype(np.float32)
    y = net(x)
    assert y.shape == (2, 1, 6, 8)
    grads = T.backward(y.sum())
    assert all(T.grad_of(grads, p) is not None and np.any(T.grad_of(grads, p) != 0) for p in net.parameters())


def test_clone_is_independent():
    net = build(ModelConfig(4, 2))
    c = net.clone()
    c.layers[0].weight.data += 1
    assert not np.array_equal(c.layers[0].weight.data, net.layers[0].weight.data)


class TestSizes:
    def test_two_layer_example(self):
        rep = SizeReport([LayerSize("a", 100, 4, 0, 32), LayerSize("b", 100, 8, 0, 32)])
        assert rep.weight_bits == 1200 == size_bits([100, 100], [4, 8])
        assert rep.weight_bits / 8 == 150
        assert bits_to_mb(8e6) == 1.0

    def test_all_32_bit(self):
        net = build(ModelConfig(8, 3))
        rep = count_sizes(net, (32, 32))
        assert rep.weight_bits == 32 * net.n_params()
        assert "b_W average" not in rep.table()

    def test_activation_counts_scale_quadratically(self):
        net = build(ModelConfig(8, 3))
        a = count_sizes(net, (32, 48)).activation_bits
        assert count_sizes(net, (64, 96)).activation_bits == 4 * a
        assert net.activation_counts(32, 48)["enc3a"] == 32 * 8 * 12

    def test_explicit_bitwidths_and_table(self):
        net = build(ModelConfig(4, 2))
        bw = {name: (4, 8) for name in net.layer_names[:-1]}
        rep = count_sizes(net, (8, 8), bw)
        assert rep.average_bits("w") == 4 and rep.average_bits("a") == 8
        out = net.layer("out")
        assert rep.rows[-1].b_w == 32 and rep.rows[-1].n_w == out.n_params
        lines = rep.table().splitlines()
        assert lines[0] == "layer, N_W, b_W, N_A, b_A, S^l_W, S^l_A"
        assert any(l.startswith("b_W average") for l in lines) and any(l.startswith("b_A average") for l in lines)
        assert f"{rep.weight_bits} bits" in rep.table()

    def test_mb_convention_matches_reference_table(self):
        # 50.3 MParams of float32 weights against the tabulated 198.5 MB
        decimal = 50.3e6 * 4 / 1e6
        binary = 50.3e6 * 4 / 2**20
        assert abs(decimal - 198.5) < abs(binary - 198.5)
        # same check with our activation count at 304x224 against 145.5 MB
        rep = count_sizes(build(ModelConfig(64, 5)), (224, 304))
        assert abs(rep.activation_mb - 145.5) < abs(rep.activation_bits / 8 / 2**20 - 145.5)
        assert rep.weight_mb == pytest.approx(bits_to_mb(32 * 31380609))
