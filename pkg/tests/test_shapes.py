import pytest
import torch

from smilegen.checkpoint import ModelConfig, ModelState
from smilegen.errors import ShapeError
from smilegen.translator import PatchDiscriminator, UNetGenerator
from smilegen.vae import LandmarkVAE


def conv_out(n, k, s, p):
    return (n - k + 2 * p) // s + 1


@pytest.fixture(scope="module")
def vae():
    return LandmarkVAE().eval()


def test_vae_encoder_chain(vae):
    acts = vae.encoder_activations(torch.zeros(1, 1, 64, 64))
    shapes = [tuple(a.shape[1:]) for a in acts]
    assert shapes == [(1, 64, 64), (64, 32, 32), (128, 16, 16), (256, 8, 8), (512, 4, 4), (100, 1, 1)]
    # same chain from the layer arithmetic
    n, chain = 64, [64]
    for _ in range(4):
        n = conv_out(n, 4, 2, 1)
        chain.append(n)
    chain.append(conv_out(n, 4, 1, 0))
    assert [s[-1] for s in shapes] == chain


def test_vae_heads_and_decoder(vae):
    dist = vae.encode(torch.zeros(2, 1, 64, 64))
    assert dist.mean.shape == (2, 100) and dist.log_var.shape == (2, 100)
    out = vae.decode(torch.randn(3, 100))
    assert out.shape == (3, 1, 64, 64)
    assert torch.all((out > 0) & (out < 1))


def test_vae_rejects_bad_input(vae):
    with pytest.raises(ShapeError):
        vae.encode(torch.zeros(1, 1, 32, 32))
    with pytest.raises(ShapeError):
        vae.encode(torch.zeros(1, 64, 64))


def test_vae_inference_is_deterministic(vae):
    x = (torch.rand(2, 1, 64, 64) > 0.9).float()
    a, b = vae.encode(x), vae.encode(x)
    assert torch.equal(a.mean, b.mean) and torch.equal(a.log_var, b.log_var)


def test_translator_channels():
    g = UNetGenerator()
    assert g.in_channels == 4
    assert g.down[0][0].in_channels == 4
    assert g.up[-1][0].out_channels == 3
    w = g.eval()(torch.zeros(2, 1, 64, 64), torch.zeros(2, 3, 64, 64))
    assert w.shape == (2, 3, 64, 64)
    assert torch.all(w.abs() < 1)


def test_translator_encoder_channels_and_norms():
    g = UNetGenerator()
    outs = [stage[0].out_channels for stage in g.down]
    assert outs == [64, 128, 256, 512, 512, 512]
    kinds = [[type(m).__name__ for m in stage] for stage in g.down]
    assert kinds[0] == ["Conv2d", "LeakyReLU"]
    assert all(k == ["Conv2d", "BatchNorm2d", "LeakyReLU"] for k in kinds[1:5])
    assert kinds[5] == ["Conv2d", "ReLU"]


def test_translator_shape_error():
    with pytest.raises(ShapeError):
        UNetGenerator()(torch.zeros(1, 1, 64, 64), torch.zeros(1, 1, 64, 64))


def test_discriminator_map():
    d = PatchDiscriminator().eval()
    assert d.net[0].in_channels == 6
    p = d(torch.zeros(2, 6, 64, 64))
    assert p.shape == (2, 1, 6, 6)
    assert torch.all((p > 0) & (p < 1))
    n = 64
    for _ in range(3):
        n = conv_out(n, 4, 2, 1)
    for _ in range(2):
        n = conv_out(n, 4, 1, 1)
    assert n == 6
    with pytest.raises(ShapeError):
        d(torch.zeros(1, 3, 64, 64))


def test_model_state_default_sizes():
    st = ModelState(ModelConfig())
    assert st.cond_gen.cell.input_size == 116 and st.cond_gen.cell.hidden_size == 256
    assert st.cond_gen.head.out_features == 100
    assert len(st.mode_bank.cells) == 3
    assert st.mode_disc.fc.in_features == 100 and st.mode_disc.fc.out_features == 3
