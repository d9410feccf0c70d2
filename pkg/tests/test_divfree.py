import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import eval_field, fd_divergence, interior_points, random_field
from gpot.divfree import (
    UNet,
    VelocityField,
    _eval_with_jacobian,
    _free_blocks,
    _masks,
    block_field,
    boundary_block_field,
    field_header,
    flatten_unet,
    init_unet,
    load_field,
    save_field,
    unet_eval,
    unet_jacobian,
    unflatten_unet,
    velocity,
)


def _zero_net(d, hidden=(5,)):
    net = init_unet(d, hidden)
    return UNet(tuple(jnp.zeros_like(w) for w in net.weights), tuple(jnp.zeros_like(b) for b in net.biases))


def _reference_eval(net, x, t):
    # layer-by-layer re-evaluation in plain numpy
    h = np.concatenate([np.asarray(x), [t]])
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = np.asarray(w) @ h + np.asarray(b)
        if i < len(net.weights) - 1:
            h = np.tanh(h)
    return h.reshape(len(x) - 1, len(x))


def _fd_jacobian(net, x, t, h=1e-6):
    cols = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(unet_eval(net, x + e, t)) - np.asarray(unet_eval(net, x - e, t))).ravel() / (2 * h))
    return np.stack(cols, axis=1)


def test_zero_net_gives_zero_output_and_field():
    net = _zero_net(3)
    x = jnp.array([0.1, -0.2, 0.3])
    assert np.all(np.asarray(unet_eval(net, x, 0.5)) == 0)
    assert np.all(np.asarray(unet_jacobian(net, x, 0.5)) == 0)
    for boundary in ("free", "cube"):
        assert np.all(np.asarray(velocity(VelocityField(net, boundary), x, 0.5)) == 0)


def test_affine_net_is_first_layer():
    rng = np.random.default_rng(0)
    d = 3
    w = rng.normal(size=(d * (d - 1), d + 1))
    b = rng.normal(size=d * (d - 1))
    net = UNet((jnp.asarray(w),), (jnp.asarray(b),))
    x, t = rng.normal(size=d), 0.4
    np.testing.assert_allclose(np.asarray(unet_eval(net, x, t)).ravel(), w @ np.append(x, t) + b, rtol=1e-14)
    np.testing.assert_array_equal(np.asarray(unet_jacobian(net, x, t)), w[:, :d])


def test_eval_is_bit_identical_to_straight_line_evaluation():
    net = init_unet(3, (7, 6), seed=4, final_scale=1.0)
    x, t = jnp.array([0.3, -0.1, 0.8]), 0.25
    h = jnp.concatenate([x, jnp.array([t])])
    h = jnp.tanh(net.weights[0] @ h + net.biases[0])
    h = jnp.tanh(net.weights[1] @ h + net.biases[1])
    h = net.weights[2] @ h + net.biases[2]
    np.testing.assert_array_equal(np.asarray(unet_eval(net, x, t)), np.asarray(h).reshape(2, 3))


def test_eval_matches_numpy_reimplementation():
    rng = np.random.default_rng(1)
    net = init_unet(4, (7, 6), seed=3, final_scale=1.0)
    for _ in range(5):
        x, t = rng.uniform(-1, 1, 4), rng.uniform()
        np.testing.assert_allclose(np.asarray(unet_eval(net, x, t)), _reference_eval(net, x, t), rtol=1e-14, atol=1e-15)


def test_jacobian_three_layer_d4_matches_fd():
    rng = np.random.default_rng(2)
    net = init_unet(4, (10, 10), seed=5, final_scale=1.0)
    x, t = rng.uniform(-1, 1, 4), 0.7
    jac = np.asarray(unet_jacobian(net, x, t))
    fd = _fd_jacobian(net, x, t)
    assert np.max(np.abs(jac - fd)) / np.max(np.abs(jac)) < 1e-6


@given(st.integers(2, 10), st.integers(0, 3), st.integers(0, 2**16))
def test_jacobian_matches_fd_property(d, n_hidden, seed):
    net = init_unet(d, (6,) * n_hidden, seed=seed, final_scale=1.0)
    rng = np.random.default_rng(seed)
    x, t = rng.uniform(-1, 1, d), rng.uniform()
    jac = np.asarray(unet_jacobian(net, x, t))
    fd = _fd_jacobian(net, x, t)
    assert np.max(np.abs(jac - fd)) / np.max(np.abs(jac)) < 1e-6


def test_hand_computed_block_for_xy_potential():
    # u^0 = (xy, 0): psi = u_1 - u_2 = xy, so v = (d_y psi, -d_x psi) = (x, -y)
    x, y = 0.3, -0.7
    u = jnp.array([[x * y, 0.0]])
    jac = jnp.array([[[y, x], [0.0, 0.0]]])
    v = _free_blocks(u, jac, _masks(2, jnp.float64))[0]
    np.testing.assert_allclose(np.asarray(v), [x, -y], atol=1e-15)


def test_block_index_range_is_checked():
    net = init_unet(3)
    with pytest.raises(ValueError):
        block_field(net, 2, jnp.zeros(3), 0.0)
    with pytest.raises(ValueError):
        boundary_block_field(net, -1, jnp.zeros(3), 0.0)


def test_block_masking_and_divergence_d5():
    rng = np.random.default_rng(3)
    net = init_unet(5, (8, 8), seed=1, final_scale=1.0)
    pts = rng.uniform(-1, 1, (50, 5))
    for x in pts:
        v = np.asarray(block_field(net, 2, jnp.asarray(x), 0.2))
        assert v[0] == 0.0 and v[1] == 0.0
    # divergence of the single block
    class Block:
        def __call__(self, x, t):
            u, jac = _eval_with_jacobian(net, x, t)
            return _free_blocks(u, jac, _masks(5, x.dtype))[2]

    h = 1e-5
    for x in pts[:10]:
        div = 0.0
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            div += (float(Block()(jnp.asarray(x + e), 0.2)[i]) - float(Block()(jnp.asarray(x - e), 0.2)[i])) / (2 * h)
        assert abs(div) < 1e-6


@pytest.mark.parametrize("d", [2, 3, 6, 10])
@pytest.mark.parametrize("boundary", ["free", "cube"])
def test_velocity_is_divergence_free(d, boundary):
    rng = np.random.default_rng(d)
    fld = random_field(d, (12, 12), seed=d, boundary=boundary)
    x = interior_points(rng, 100, d)
    v = eval_field(fld, x)
    div = fd_divergence(fld, x)
    scale = max(1.0, float(np.max(np.abs(v))))
    assert np.max(np.abs(div)) < 1e-6 * scale


def test_boundary_components_vanish_on_faces():
    rng = np.random.default_rng(4)
    for d in (2, 3, 6):
        fld = random_field(d, seed=d)
        for i in range(d):
            for sign in (-1.0, 1.0):
                x = rng.uniform(-1, 1, (20, d))
                x[:, i] = sign
                assert np.all(eval_field(fld, x)[:, i] == 0.0)


def test_d3_face_centers_have_no_normal_flux():
    fld = random_field(3, seed=9)
    centers = np.concatenate([np.eye(3), -np.eye(3)])
    v = eval_field(fld, centers)
    for c, vc in zip(centers, v):
        assert float(np.dot(c, vc)) == 0.0


def test_d2_velocity_equals_single_block():
    net = init_unet(2, (6,), seed=2, final_scale=1.0)
    x = jnp.array([0.2, -0.4])
    np.testing.assert_array_equal(np.asarray(velocity(VelocityField(net, "free"), x, 0.1)), np.asarray(block_field(net, 0, x, 0.1)))
    np.testing.assert_array_equal(
        np.asarray(velocity(VelocityField(net, "cube"), x, 0.1)), np.asarray(boundary_block_field(net, 0, x, 0.1))
    )


@given(st.integers(2, 6), st.integers(0, 1000), st.sampled_from([2.0, 0.5, 4.0]))
def test_final_layer_scaling_scales_field(d, seed, c):
    net = init_unet(d, (5,), seed=seed, final_scale=1.0)
    scaled = UNet(net.weights[:-1] + (c * net.weights[-1],), net.biases[:-1] + (c * net.biases[-1],))
    x = jnp.asarray(np.random.default_rng(seed).uniform(-1, 1, d))
    for boundary in ("free", "cube"):
        v = np.asarray(velocity(VelocityField(net, boundary), x, 0.3))
        vs = np.asarray(velocity(VelocityField(scaled, boundary), x, 0.3))
        np.testing.assert_array_equal(vs, c * v)


def test_construction_rejects_bad_shapes():
    with pytest.raises(ValueError):
        UNet((jnp.zeros((4, 3)),), (jnp.zeros(3),))
    with pytest.raises(ValueError):
        UNet((jnp.zeros((5, 3)),), (jnp.zeros(5),))  # d=2 needs 2 outputs
    with pytest.raises(ValueError):
        VelocityField(init_unet(2), "sphere")
    with pytest.raises(ValueError):
        unflatten_unet([3, 2], np.zeros(7))


def test_field_checkpoint_round_trip(tmp_path):
    fld = random_field(3, (4, 5), seed=11, boundary="free")
    save_field(tmp_path / "f.ckpt", fld)
    back = load_field(tmp_path / "f.ckpt")
    assert back.boundary == "free"
    np.testing.assert_array_equal(flatten_unet(back.unet), flatten_unet(fld.unet))
    assert field_header(back)["dims"] == [4, 4, 5, 6]
