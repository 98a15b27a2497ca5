import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lumisplit.formation import SynthParams, synth_scene
from lumisplit.nn import gradcheck as G
from lumisplit.nn import tensor as T
from lumisplit.nn.adam import AdamState, adam_step
from lumisplit.nn.nets import ChromNet, SeparateNet, ShadingNet, SingleNet, receptive_field
from lumisplit.nn.tensor import NumericError, ShapeError, Tensor
from lumisplit.physsep import separate


# --- layers --------------------------------------------------------------------------

def test_identity_kernel(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 4)))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(x, Tensor(w)).data, x.data)
    w1 = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(T.conv2d(x, Tensor(w1)).data, x.data)


def test_conv_matches_direct_sum(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    assert out.shape == (1, 3, 3, 3)
    for o in range(3):
        for i in range(3):
            for j in range(3):
                want = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
                assert out[0, o, i, j] == pytest.approx(want, rel=1e-12)


def test_relu_backward_examples():
    x = Tensor(np.array([-1.0, 2.0]).reshape(1, 2, 1, 1), requires_grad=True)
    T.relu(x).backward(np.ones((1, 2, 1, 1)))
    assert x.grad.ravel().tolist() == [0.0, 1.0]


def test_shape_errors():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        T.add(x, Tensor(np.zeros((1, 2, 4, 4))))
    with pytest.raises(ShapeError):
        T.concat([x, Tensor(np.zeros((1, 2, 2, 4)))])
    with pytest.raises(ShapeError):
        T.channels(x, 2, 5)
    y = Tensor(np.zeros((1, 3, 4, 4)), requires_grad=True)
    with pytest.raises(ShapeError):
        T.relu(y).backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_check():
    T.set_nan_check(True)
    try:
        with pytest.raises(NumericError):
            T.scale(Tensor(np.array([np.inf]).reshape(1, 1, 1, 1)), 0.0)
    finally:
        T.set_nan_check(False)
    # disabled: no error
    T.scale(Tensor(np.array([np.inf]).reshape(1, 1, 1, 1)), 0.0)


def test_gradient_accumulates_over_shared_inputs(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    y = T.add(x, x)
    y.backward(np.ones(y.shape))
    np.testing.assert_array_equal(x.grad, 2.0)


@given(st.integers(0, 2**31))
def test_simplex_head_on_simplex(seed):
    x = Tensor(np.random.default_rng(seed).normal(scale=5, size=(2, 3, 4, 4)))
    y = T.simplex_head(x).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("name", G.LAYER_CHECKS)
def test_layer_gradcheck_quick(name):
    for seed in range(3):
        for shape in G.LAYER_SHAPES:
            assert G.check_layer(name, seed, shape) < G.TOL


@pytest.mark.parametrize("name", G.LOSS_CHECKS)
def test_loss_gradcheck_quick(name):
    for seed in range(2):
        for shape in G.LOSS_SHAPES:
            assert G.check_loss(name, seed, shape) < G.TOL


@pytest.mark.parametrize("op,check", [("conv2d", "conv3x3"), ("conv2d", "stride2-conv"), ("relu", "relu"),
                                      ("softplus", "softplus"), ("upsample2", "upsample2"),
                                      ("concat", "concat"), ("simplex_head", "simplex_head")])
def test_mutation_is_caught(op, check):
    with T.corrupt_adjoint(op, 1.01):
        assert G.check_layer(check, 0, (2, 3, 5, 5)) > G.TOL
    assert G.check_layer(check, 0, (2, 3, 5, 5)) < G.TOL


def test_detached_scale_differs_from_full_derivative():
    # sanity check that the loss checker can tell the two gradients apart
    from lumisplit import losses
    r = np.random.default_rng(0)
    pred, gt, ctx = G._draw_loss_case("chrom_loss", r, (6, 6))
    g = losses.chrom_loss(pred, gt, ctx).grad
    err = G.directional_check(lambda: losses.chrom_loss(pred, gt, ctx).value, [pred], [g], r)
    assert err > G.TOL


# --- networks ---------------------------------------------------------------------------

NETS = [ChromNet, ShadingNet, SingleNet, SeparateNet]


@pytest.mark.parametrize("build", NETS)
def test_param_count_bound(build):
    net = build(np.random.default_rng(0))
    assert 0 < net.n_params() < 200_000


def test_shadingnet_receptive_field():
    rf = receptive_field(ShadingNet(np.random.default_rng(0)).topology)
    assert rf == 17 and rf >= 15
    assert receptive_field(SeparateNet(np.random.default_rng(0)).topology) == 1


def test_topology_kinds():
    allowed = {"conv3x3", "conv1x1", "stride2-conv", "nearest-upsample2", "relu", "softplus", "concat", "simplex-head"}
    for build in NETS:
        topo = build(np.random.default_rng(0)).topology
        assert {layer["kind"] for layer in topo} <= allowed
        heads = [i for i, layer in enumerate(topo) if layer["kind"] == "simplex-head"]
        assert heads in ([], [len(topo) - 1])


def test_chromnet_zero_init_is_neutral(rng):
    net = ChromNet(np.random.default_rng(0))
    y = net(Tensor(rng.random((2, 3, 8, 8)).astype(np.float32))).data
    np.testing.assert_allclose(y, 1 / 3, atol=1e-7)


@given(st.integers(0, 2**31))
def test_chromnet_output_on_simplex(seed):
    r = np.random.default_rng(seed)
    net = ChromNet(r, dtype=np.float64)
    for c in net.convs:
        c.w.data = r.normal(size=c.w.shape)
    y = net(Tensor(r.random((1, 3, 8, 8)) * 10)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("build,cin", [(ShadingNet, 6), (SingleNet, 3), (SeparateNet, 9)])
def test_pair_nets_non_negative(build, cin, rng):
    net = build(np.random.default_rng(1))
    y = net(Tensor(rng.normal(size=(1, cin, 8, 8)).astype(np.float32))).data
    assert y.shape == (1, 6, 8, 8) and (y >= 0).all()


def test_unet_needs_multiple_of_four(rng):
    with pytest.raises(ValueError):
        ShadingNet(np.random.default_rng(0))(Tensor(np.zeros((1, 6, 6, 6), np.float32)))
    with pytest.raises(ValueError):
        ChromNet(np.random.default_rng(0))(Tensor(np.zeros((1, 4, 8, 8), np.float32)))


def test_separatenet_is_per_pixel(rng):
    net = SeparateNet(np.random.default_rng(0), dtype=np.float64)
    x = rng.random((1, 9, 5, 6))
    y = net(Tensor(x)).data
    perm = rng.permutation(30)
    xp = x.reshape(1, 9, 30)[:, :, perm].reshape(1, 9, 5, 6)
    yp = net(Tensor(xp)).data
    np.testing.assert_allclose(yp, y.reshape(1, 6, 30)[:, :, perm].reshape(1, 6, 5, 6), atol=1e-12)


def test_separatenet_can_represent_the_split():
    s = synth_scene(0, SynthParams(size=32))
    t1, t2 = separate(s.input, *s.shadings)
    chw = lambda a: a.transpose(2, 0, 1)[None].astype(np.float32)
    x = Tensor(np.concatenate([chw(s.shadings[0]), chw(s.shadings[1]), chw(s.input)], axis=1))
    target = np.concatenate([chw(t1), chw(t2)], axis=1)
    net = SeparateNet(np.random.default_rng(0))
    state = AdamState()
    for k in range(1000):
        for p in net.params.values():
            p.zero_grad()
        out = net(x)
        d = out.data - target
        T.external([out], float(np.abs(d).mean()), [np.sign(d) / d.size]).backward()
        adam_step({n: p.data for n, p in net.params.items()}, {n: p.grad for n, p in net.params.items()},
                  state, lr=3e-3 if k < 800 else 3e-4)
    err = np.abs(net(x).data - target).mean()
    assert err < 1e-2


# --- Adam ----------------------------------------------------------------------------------

def test_adam_two_steps_by_hand():
    p = {"w": np.array([1.0])}
    st_ = AdamState()
    lr, b1, b2, eps = 0.1, 0.5, 0.999, 1e-8
    adam_step(p, {"w": np.array([0.5])}, st_, lr, b1, b2, eps)
    # step 1: mhat = g, vhat = g^2, so the update is lr * g / (|g| + eps)
    assert p["w"][0] == pytest.approx(1.0 - lr * 0.5 / (0.5 + eps), rel=1e-12)
    adam_step(p, {"w": np.array([-1.0])}, st_, lr, b1, b2, eps)
    m = b1 * (1 - b1) * 0.5 + (1 - b1) * -1.0
    v = b2 * (1 - b2) * 0.25 + (1 - b2) * 1.0
    mhat, vhat = m / (1 - b1**2), v / (1 - b2**2)
    want = 1.0 - lr * 0.5 / (0.5 + eps) - lr * mhat / (np.sqrt(vhat) + eps)
    assert p["w"][0] == pytest.approx(want, rel=1e-12)
    assert st_.t == 2


def test_adam_defaults_and_skips_missing():
    import inspect
    sig = inspect.signature(adam_step).parameters
    assert sig["lr"].default == 5e-4 and sig["beta1"].default == 0.5
    assert sig["beta2"].default == 0.999 and sig["eps"].default == 1e-8
    p = {"a": np.ones(2), "b": np.ones(2)}
    adam_step(p, {"a": np.ones(2)}, AdamState())
    assert (p["b"] == 1).all() and (p["a"] < 1).all()
