"""Model zoo: parameter partition, rotation pretext, functional forwards,
checkpoint round-trips."""

import math

import numpy as np
import pytest

from streamadapt import tensor as T
from streamadapt.checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from streamadapt.model import ConvNetSpec, DualBranchConvNet, ParamBundle

SMALL = ConvNetSpec(in_channels=1, image_size=16, num_classes=5,
                    conv_channels=8, kernel_size=3, gn_groups=2, fc_hidden=16)

# reference architecture size, pinned as a regression guard
REFERENCE_PARAM_COUNT = 2_062_350


@pytest.fixture
def small_net():
    return DualBranchConvNet(SMALL)


@pytest.fixture
def small_params(small_net):
    return small_net.init_params(np.random.default_rng(0))


def test_groups_partition_every_parameter(small_params):
    names = set(small_params.names())
    by_group = [set(small_params.names(g)) for g in ("omega", "phi_ssl", "phi_sup")]
    assert set().union(*by_group) == names
    assert sum(len(s) for s in by_group) == len(names)  # pairwise disjoint


def test_reference_param_count():
    net = DualBranchConvNet(ConvNetSpec())
    assert net.param_count() == REFERENCE_PARAM_COUNT
    bundle = net.init_params(np.random.default_rng(0))
    assert bundle.param_count() == REFERENCE_PARAM_COUNT


def test_small_param_count_matches_bundle(small_net, small_params):
    assert small_net.param_count() == small_params.param_count()


def test_ssl_conv_initialized_as_copy_of_sup_conv(small_params):
    assert np.array_equal(small_params["ssl_conv3.weight"].data,
                          small_params["sup_conv3.weight"].data)
    assert small_params["ssl_conv3.weight"].data is not small_params["sup_conv3.weight"].data


def test_biases_zero_weights_kaiming_bounded(small_params):
    assert np.all(small_params["conv1.bias"].data == 0)
    assert np.all(small_params["sup_fc1.bias"].data == 0)
    w = small_params["conv1.weight"].data
    bound = math.sqrt(6.0 / (1 * 3 * 3))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.1 * bound  # actually randomized


def test_forward_shapes_and_determinism(small_net, small_params):
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.random((3, 1, 16, 16)))
    p = small_params.mapping()
    sup = small_net.forward_sup(x, p)
    ssl = small_net.forward_ssl(x, p)
    assert sup.shape == (3, 5)
    assert ssl.shape == (3, 4)
    assert np.array_equal(sup.data, small_net.forward_sup(x, p).data)


def test_forward_rejects_wrong_input_shape(small_net, small_params):
    with pytest.raises(T.ShapeError, match="expected"):
        small_net.forward_sup(T.Tensor(np.zeros((1, 1, 8, 8))), small_params.mapping())


def test_ssl_loss_uses_all_four_rotations(small_net, small_params):
    rng = np.random.default_rng(2)
    x = T.Tensor(rng.random((2, 1, 16, 16)))
    p = small_params.mapping()
    loss = small_net.ssl_loss(x, p)
    # oracle: mean CE over the four rotations computed one at a time
    per_rot = []
    for k in range(4):
        logits = small_net.forward_ssl(T.rotate90(x, k), p)
        per_rot.append(T.cross_entropy(logits, np.full(2, k)).item())
    assert abs(loss.item() - np.mean(per_rot)) < 1e-5


def test_ssl_loss_at_init_near_log4(small_net, small_params):
    # fresh random head: rotation logits carry little signal, so CE ~= ln 4
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.random((8, 1, 16, 16)))
    loss = small_net.ssl_loss(x, small_params.mapping()).item()
    assert abs(loss - math.log(4)) < 0.5


def test_predict_argmax_tie_lowest_index(small_net, small_params):
    p = small_params.mapping()
    # zero the final layer so all logits tie at the bias value
    p["sup_fc2.weight"] = T.Tensor(np.zeros_like(p["sup_fc2.weight"].data))
    p["sup_fc2.bias"] = T.Tensor(np.zeros_like(p["sup_fc2.bias"].data))
    x = T.Tensor(np.random.default_rng(4).random((3, 1, 16, 16)))
    assert np.all(small_net.predict(x, p) == 0)


def test_clone_is_deep_and_equal(small_params):
    c = small_params.clone()
    assert c.state_equal(small_params)
    c["conv1.weight"].data += 1.0
    assert not c.state_equal(small_params)


def test_checkpoint_roundtrip_bit_exact(tmp_path, small_params):
    path = save_checkpoint(small_params, tmp_path / "model.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.names() == small_params.names()
    for n in small_params.names():
        assert loaded.group_of(n) == small_params.group_of(n)
        assert loaded[n].data.dtype == small_params[n].data.dtype
        assert loaded[n].data.tobytes() == small_params[n].data.tobytes()


def test_checkpoint_digest_stable(tmp_path, small_params):
    p1 = save_checkpoint(small_params, tmp_path / "a.ckpt")
    p2 = save_checkpoint(small_params.clone(), tmp_path / "b.ckpt")
    assert checkpoint_digest(p1) == checkpoint_digest(p2)


def test_checkpoint_corruption_detected(tmp_path, small_params):
    path = save_checkpoint(small_params, tmp_path / "model.ckpt")
    bin_path = tmp_path / "model.ckpt.bin"
    raw = bytearray(bin_path.read_bytes())
    raw[0] ^= 0xFF
    bin_path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="digest mismatch"):
        load_checkpoint(path)


def test_bundle_rejects_unknown_group():
    t = T.Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="unknown group"):
        ParamBundle({"w": t}, {"w": "nonsense"})


def test_spec_validation():
    with pytest.raises(ValueError, match="divisible by 8"):
        ConvNetSpec(image_size=20)
    with pytest.raises(ValueError, match="odd"):
        ConvNetSpec(kernel_size=4)
    with pytest.raises(ValueError, match="gn_groups"):
        ConvNetSpec(conv_channels=6, gn_groups=4)
