import numpy as np
import pytest
import torch
from torch import nn

from noise_adapt import dsp
from noise_adapt.errors import ConfigurationError, InvalidInputError, ShapeError
from noise_adapt.models import (
    DeskEncoder,
    DiscriminatorSpec,
    FilmResnetGenerator,
    GeneratorSpec,
    NoiseEmbedding,
    PatchDiscriminator,
    ScriptedEncoder,
    build_backbone,
    discriminator_forward,
    encoder_classify,
    encoder_embed,
    film_apply,
    film_params_from_embedding,
    generator_forward,
    load_scripted_encoder,
    score_map_shape,
)

EMBED_DIM = 6


@pytest.fixture(scope="module")
def generator():
    torch.manual_seed(0)
    g = FilmResnetGenerator(GeneratorSpec(base_channels=4), EMBED_DIM)
    g.eval()
    return g


def test_film_apply_values():
    feats = torch.arange(24.0).reshape(2, 3, 4)
    weight = torch.tensor([1.0, 2.0])
    bias = torch.tensor([0.5, -1.0])
    out = film_apply(feats, weight, bias)
    assert torch.equal(out[0], feats[0] + 0.5)
    assert torch.equal(out[1], 2 * feats[1] - 1.0)
    batched = film_apply(feats[None].repeat(3, 1, 1, 1), weight[None].repeat(3, 1), bias[None].repeat(3, 1))
    assert torch.equal(batched[2], out)


def test_film_apply_shape_errors():
    feats = torch.zeros(3, 4, 4)
    with pytest.raises(ShapeError):
        film_apply(feats, torch.ones(2), torch.zeros(2))
    with pytest.raises(ShapeError):
        film_apply(feats, torch.ones(3), torch.zeros(2))
    with pytest.raises(ShapeError):
        film_apply(torch.zeros(3, 4), torch.ones(3), torch.zeros(3))


@pytest.mark.parametrize("seed", range(20))
def test_film_apply_gradcheck(seed):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(2, 3, 4, 5, dtype=torch.float64, generator=g, requires_grad=True)
    weight = torch.randn(2, 3, dtype=torch.float64, generator=g, requires_grad=True)
    bias = torch.randn(2, 3, dtype=torch.float64, generator=g, requires_grad=True)
    assert torch.autograd.gradcheck(film_apply, (feats, weight, bias))


@pytest.mark.parametrize("seed", range(20))
def test_film_params_gradcheck(seed):
    torch.manual_seed(seed)
    gen = FilmResnetGenerator(GeneratorSpec(base_channels=2), 5).double()
    n = torch.randn(5, dtype=torch.float64, requires_grad=True)

    def fn(vec):
        p = film_params_from_embedding(vec, seed % gen.spec.film_sites, gen)
        return p.weight, p.bias

    assert torch.autograd.gradcheck(fn, (n,))


def test_film_params_errors(generator):
    n = torch.zeros(EMBED_DIM)
    with pytest.raises(InvalidInputError):
        film_params_from_embedding(n, generator.spec.film_sites, generator)
    with pytest.raises(InvalidInputError):
        film_params_from_embedding(n, -1, generator)
    with pytest.raises(ShapeError):
        film_params_from_embedding(torch.zeros(EMBED_DIM + 1), 0, generator)


def test_zero_embedding_is_identity_film(generator):
    p = film_params_from_embedding(NoiseEmbedding(torch.zeros(EMBED_DIM)), 0, generator)
    assert torch.equal(p.weight, torch.ones(8))
    assert torch.equal(p.bias, torch.zeros(8))


def test_generator_output_shape(generator):
    torch.manual_seed(1)
    y = torch.rand(50, 1, 129, 128)
    n = torch.randn(50, EMBED_DIM)
    with torch.no_grad():
        out = generator(y, n)
    assert out.shape == (50, 1, 129, 128)
    with torch.no_grad():
        odd = generator(torch.rand(1, 1, 129, 37), n[:1])
    assert odd.shape == (1, 1, 129, 37)


def test_generator_rejects_bad_inputs(generator):
    with pytest.raises(ShapeError):
        generator(torch.rand(1, 2, 129, 128))
    with pytest.raises(ShapeError):
        generator(torch.rand(1, 1, 129, 128), torch.randn(1, EMBED_DIM + 1))
    with pytest.raises(ShapeError):
        generator(torch.rand(3, 1, 129, 128), torch.randn(2, EMBED_DIM))
    with pytest.raises(ShapeError):
        generator(torch.rand(1, 1, 129, 128), film=[])


def test_identity_film_matches_unconditioned():
    torch.manual_seed(2)
    gen = FilmResnetGenerator(GeneratorSpec(base_channels=4), EMBED_DIM).eval()
    for film in gen.films:
        film.set_identity()
    y = torch.rand(2, 1, 129, 128)
    with torch.no_grad():
        conditioned = gen(y, torch.randn(2, EMBED_DIM))
        plain = gen(y)
    assert torch.equal(conditioned, plain)


def test_zero_residual_returns_input(generator):
    torch.manual_seed(3)
    gen = FilmResnetGenerator(GeneratorSpec(base_channels=4), EMBED_DIM).eval()
    gen.zero_residual()
    y = torch.rand(1, 1, 129, 128)
    with torch.no_grad():
        assert torch.equal(gen(y, torch.randn(1, EMBED_DIM)), y)


def test_generator_features(generator):
    y = torch.rand(2, 1, 129, 128)
    with torch.no_grad():
        feats = generator.features(y, torch.randn(2, EMBED_DIM))
    assert [f.shape[1] for f in feats] == generator.pcl_channels() == [1, 4, 8, 8, 8]
    assert feats[0].shape[-2:] == (132, 128)
    assert feats[1].shape[-2:] == (66, 64)
    assert all(f.shape[-2:] == (33, 32) for f in feats[2:])


def test_generator_forward_keeps_metadata(generator):
    seg = dsp.SpectrogramSegment(np.random.rand(129, 128), "utt", frame_offset=128, valid_frames=40)
    out = generator_forward(seg, NoiseEmbedding(torch.zeros(EMBED_DIM)), generator)
    assert out.data.shape == (129, 128)
    assert (out.utterance_id, out.frame_offset, out.valid_frames) == ("utt", 128, 40)


@pytest.mark.parametrize(
    "kwargs",
    [{"res_blocks": 8}, {"base_channels": 0}, {"pcl_layers": ("input", "res10")}],
)
def test_generator_spec_validation(kwargs):
    with pytest.raises(ConfigurationError):
        GeneratorSpec(**kwargs)


def test_spec_dict_round_trip():
    spec = GeneratorSpec(base_channels=16, pcl_layers=("input", "res2"))
    assert GeneratorSpec.from_dict(spec.as_dict()) == spec
    disc = DiscriminatorSpec(base_channels=8)
    assert DiscriminatorSpec.from_dict(disc.as_dict()) == disc
    with pytest.raises(ConfigurationError):
        DiscriminatorSpec(strides=(2, 2, 1, 1, 1))


def test_discriminator_score_map():
    torch.manual_seed(0)
    disc = PatchDiscriminator(DiscriminatorSpec(base_channels=4)).eval()
    assert score_map_shape(129, 128) == (14, 14)
    seg = dsp.SpectrogramSegment(np.random.rand(129, 128))
    scores = discriminator_forward(seg, disc)
    assert scores.shape == (14, 14)
    assert np.all((scores > 0) & (scores < 1))
    with pytest.raises(ShapeError):
        discriminator_forward(dsp.SpectrogramSegment(np.random.rand(129, 64)), disc)
    with pytest.raises(ShapeError):
        disc(torch.rand(1, 129, 128))


def test_noise_embedding_validation():
    with pytest.raises(ShapeError):
        NoiseEmbedding(torch.zeros(2, 3))
    with pytest.raises(InvalidInputError):
        NoiseEmbedding(torch.tensor([0.0, float("inf")]))
    assert NoiseEmbedding(np.zeros(4)).dim == 4


def test_desk_encoder():
    torch.manual_seed(0)
    enc = DeskEncoder(embed_dim=32).eval()
    x = torch.rand(3, 1, 129, 128)
    with torch.no_grad():
        assert enc.penultimate(x).shape == (3, 32)
    with pytest.raises(ConfigurationError):
        enc.classify(x)
    enc.attach_head(5)
    with torch.no_grad():
        assert enc.classify(x).shape == (3, 5)
    seg = dsp.SpectrogramSegment(np.random.rand(129, 128), "u1")
    assert encoder_classify(seg, enc).shape == (5,)
    emb = encoder_embed(seg, enc)
    assert emb.dim == 32
    assert emb.source_utterance_id == "u1"
    enc.detach_head()
    assert enc.head is None
    assert enc.header() == {"kind": "desk", "embed_dim": 32}
    assert isinstance(build_backbone(enc.header()), DeskEncoder)


class _FrameSlice(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x[:, 0, :16, :].transpose(1, 2)


def test_scripted_encoder(tmpdir):
    path = str(tmpdir.join("enc.pt"))
    torch.jit.save(torch.jit.script(_FrameSlice()), path)
    enc = load_scripted_encoder(path, embed_dim=16)
    assert isinstance(enc, ScriptedEncoder)
    x = torch.rand(2, 1, 129, 20)
    torch.testing.assert_close(enc.penultimate(x), x[:, 0, :16, :].mean(dim=-1))
    header = enc.header()
    assert header == {"kind": "scripted", "embed_dim": 16, "source": path}
    assert isinstance(build_backbone(header), ScriptedEncoder)
    wrong = ScriptedEncoder(_FrameSlice(), embed_dim=8)
    with pytest.raises(ShapeError):
        wrong.penultimate(x)
    with pytest.raises(FileNotFoundError):
        load_scripted_encoder(str(tmpdir.join("missing.pt")))
