import io
import math
import struct

import pytest
import torch

from licrobust import diffcore as dc
from licrobust.attacks import attack_loss
from licrobust.harness.data import make_dataset
from licrobust.models import (
    CompressionModel,
    Family,
    decode,
    encode,
    forward_rd,
    layer_list,
    load_checkpoint,
    model_bytes,
    partial_encode,
    save_checkpoint,
    trace,
)


@pytest.fixture(scope="module")
def image():
    return make_dataset(1, 3, 64)


@pytest.mark.parametrize("family", list(Family))
def test_shapes_and_rate_definition(family, image):
    torch.manual_seed(0)
    m = CompressionModel(family, 0.01)
    rd = forward_rd(m, image, "round")
    b = rd.bundle
    assert b.y.shape == (1, 48, 8, 8)
    assert rd.x_hat.shape == image.shape
    if family == Family.FACTORIZED:
        assert b.z is None and float(rd.rate_z) == 0.0
    else:
        assert b.z_hat.shape == (1, 32, 2, 2)
    bits = -(b.loglik_y.double().sum() + (0 if b.loglik_z is None else b.loglik_z.double().sum())) / math.log(2)
    assert float(rd.rate.detach()) == pytest.approx(float(bits.detach()) / (64 * 64), rel=1e-12)
    mse = float(((rd.x_hat.double() - image.double()) * 255).pow(2).mean())
    assert float(rd.distortion) == pytest.approx(mse, rel=1e-6)


def test_input_shape_errors():
    m = CompressionModel(Family.HYPER_S, 0.01)
    with pytest.raises(dc.ShapeError):
        encode(m, torch.rand(1, 3, 60, 64))
    with pytest.raises(dc.ShapeError):
        encode(m, torch.rand(1, 1, 64, 64))
    with pytest.raises(dc.ShapeError):
        decode(m, torch.zeros(1, 12, 8, 8))


def test_layer_registry():
    m = CompressionModel(Family.HYPER_MC, 0.01)
    names = [h.name for h in layer_list(m)]
    assert len(names) == 13
    assert names[5] == "Q"
    assert names[:5] == ["ga.conv0", "ga.gdn0", "ga.conv1", "ga.gdn1", "ga.conv2"]
    assert names[-2:] == ["gs.igdn2", "gs.conv_out"]


def test_partial_encode_and_trace_agree(image):
    torch.manual_seed(1)
    m = CompressionModel(Family.HYPER_S, 0.01)
    with torch.no_grad():
        tr = trace(m, image)
        assert len(tr) == 14
        assert torch.equal(partial_encode(m, image, 0), image)
        assert torch.equal(partial_encode(m, image, layer_list(m)[5]), tr[5])
        assert torch.equal(tr[6], torch.round(tr[5]))
        assert torch.equal(tr[-1], decode(m, encode(m, image, "round").y_hat))
    with pytest.raises(IndexError):
        partial_encode(m, image, 14)


def test_context_is_causal():
    torch.manual_seed(2)
    m = CompressionModel(Family.HYPER_MC, 0.01)
    y = torch.randn(1, 48, 6, 6)
    feat = torch.randn(1, 96, 6, 6)
    with torch.no_grad():
        mu0, s0 = m.params_from(feat, y)
        y2 = y.clone()
        y2[0, :, 3, 2] += 5.0
        mu1, s1 = m.params_from(feat, y2)
    changed = ((mu0 - mu1).abs() + (s0 - s1).abs()).sum(1)[0] > 0
    for i in range(6):
        for j in range(6):
            if (i, j) <= (3, 2):  # same or earlier in raster order
                assert not changed[i, j], (i, j)
    assert changed[3, 3] and changed[4, 2]


@pytest.mark.parametrize("family", list(Family))
def test_checkpoint_roundtrip(family, tmp_path, image):
    torch.manual_seed(3)
    m = CompressionModel(family, 0.0123)
    path = tmp_path / "m.licm"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    assert m2.family == family and m2.lmbda == 0.0123
    assert model_bytes(m2) == path.read_bytes()
    with torch.no_grad():
        assert torch.equal(forward_rd(m, image, "round").x_hat, forward_rd(m2, image, "round").x_hat)


def test_checkpoint_layout():
    m = CompressionModel(Family.FACTORIZED, 0.5)
    raw = model_bytes(m)
    assert raw[:4] == b"LICM"
    assert raw[4] == 1 and raw[5] == 0
    assert struct.unpack_from("<d", raw, 6)[0] == 0.5
    (n,) = struct.unpack_from("<I", raw, 14)
    name = raw[18 : 18 + n].decode()
    assert name == next(iter(m.state_dict()))
    rank, *dims = struct.unpack_from("<5I", raw, 18 + n)
    assert rank == 4 and tuple(dims) == tuple(m.state_dict()[name].shape)
    with pytest.raises(ValueError):
        load_checkpoint(b"NOPE" + raw[4:])


def test_nonfinite_synthesis_names_layer():
    m = CompressionModel(Family.FACTORIZED, 0.01)
    with torch.no_grad():
        m.gs["igdn1"].beta_raw.fill_(math.inf)
    with pytest.raises(dc.NonFiniteError) as err:
        decode(m, torch.ones(1, 48, 2, 2))
    assert "gs.igdn1" in str(err.value)


@pytest.mark.parametrize("family", list(Family))
@pytest.mark.parametrize("direction", [(1.0, 0.0), (1.0, 0.02), (0.0, 1.0)])
def test_attack_loss_gradient_wrt_delta(family, direction):
    """Autograd of L_s through the whole codec against central differences.

    Rounding is piecewise constant, so the finite differences use the
    equivalent pass y + c with the rounding offset c frozen at the base point;
    its forward values and its gradient coincide with the straight-through
    pass at that point.
    """
    torch.manual_seed(4)
    m = CompressionModel(family, 0.01).double()
    for name, p in m.named_parameters():
        p.requires_grad_(False)
        if name.endswith("bias"):
            # zero biases put every hyper ReLU exactly on its kink when z_hat = 0
            p.normal_(0.0, 0.1)
    # an untrained analysis transform maps everything to 0 after rounding,
    # leaving a ~1e-9 rate gradient; spread the latents over a few bins
    m.ga["conv2"].weight.mul_(30.0)
    x = make_dataset(1, 4, 16).double()
    g = torch.Generator().manual_seed(0)
    delta0 = 1e-3 * torch.randn(x.shape, generator=g, dtype=torch.float64)
    gr, gd = direction
    with torch.no_grad():
        b = encode(m, x + delta0, "round")
        cy = b.y_hat - b.y
        cz = None if b.z is None else b.z_hat - b.z

    def frozen(t):
        return t + (cy if t.shape[1] == 48 else cz)

    def loss(delta):
        if delta.requires_grad:
            return attack_loss(m, x + delta, gr, gd)
        rd = forward_rd(m, x + delta, frozen)
        return -gr * rd.rate - gd * rd.distortion

    err = dc.finite_difference_check(loss, [delta0], step=1e-6, coords=40)
    assert err <= 1e-3
