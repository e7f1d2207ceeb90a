import numpy as np
import pytest
import torch

from gesturedrums import codec as codec_mod
from gesturedrums import synth
from gesturedrums.codec import CodecConfig, ResidualVQCodec, SyntheticCodec, TokenGrid, train_codec
from gesturedrums.dsp import AudioClip
from gesturedrums.errors import (
    ConfigError,
    ContainerError,
    MaskedCellError,
    NotTrainedError,
    TrainingDivergedError,
)


@pytest.fixture(scope="module")
def small_corpus():
    return [synth.generate_clip([55, i], duration_s=1.5)[0] for i in range(3)]


@pytest.fixture(scope="module")
def trained_codec(small_corpus):
    cfg = CodecConfig(n_codebooks=4, n_tokens=32, latent_dim=16, channels=(8, 12, 16))
    codec, records = train_codec(
        small_corpus, cfg, steps=100, rng=np.random.default_rng(3),
        batch_size=2, excerpt_len=8192,
    )
    return codec, records


class TestTokenGrid:
    def test_rejects_out_of_range_ids(self):
        tokens = np.array([[0, 99]])
        with pytest.raises(ConfigError):
            TokenGrid(tokens, np.zeros_like(tokens, dtype=bool), 512, 64)

    def test_masked_cells_not_range_checked(self):
        # a masked cell carries no readable token
        tokens = np.array([[0, 99]])
        masked = np.array([[False, True]])
        grid = TokenGrid(tokens, masked, 512, 64)
        assert grid.n_frames == 2

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            TokenGrid(np.zeros((2, 3)), np.zeros((3, 2), dtype=bool), 512, 8)


class TestConfig:
    def test_hop_is_stride_product(self):
        assert CodecConfig().hop == 512

    def test_non_power_of_two_hop_rejected(self):
        with pytest.raises(ConfigError):
            CodecConfig(strides=(3, 8, 8), channels=(8, 8, 8))

    def test_roundtrip(self):
        cfg = CodecConfig(n_codebooks=5)
        assert CodecConfig.from_dict(cfg.to_dict()) == cfg


class TestSyntheticCodec:
    def test_frame_count(self, synthetic_codec):
        for n in (512, 513, 1000, 44100):
            clip = AudioClip(np.ones(n, dtype=np.float32) * 0.1)
            assert synthetic_codec.encode(clip).n_frames == -(-n // 512)

    def test_deterministic(self, synthetic_codec, drum_clip):
        a = synthetic_codec.encode(drum_clip)
        b = synthetic_codec.encode(drum_clip)
        assert np.array_equal(a.tokens, b.tokens)

    def test_decode_length_and_range(self, synthetic_codec, drum_clip):
        grid = synthetic_codec.encode(drum_clip)
        audio = synthetic_codec.decode(grid)
        assert len(audio) == grid.n_frames * 512
        assert np.abs(audio.samples).max() <= 1.0

    def test_decode_rejects_masked(self, synthetic_codec, drum_clip):
        grid = synthetic_codec.encode(drum_clip)
        grid.masked[0, 0] = True
        with pytest.raises(MaskedCellError):
            synthetic_codec.decode(grid)


class TestResidualVQ:
    def test_untrained_encode_rejected(self, drum_clip):
        codec = ResidualVQCodec(CodecConfig())
        with pytest.raises(NotTrainedError):
            codec.encode(drum_clip)

    def test_loss_decreases(self, trained_codec):
        _, records = trained_codec
        assert records[-1]["loss"] < records[0]["loss"]

    def test_frame_count(self, trained_codec, drum_clip):
        codec, _ = trained_codec
        grid = codec.encode(drum_clip)
        assert grid.n_frames == -(-len(drum_clip) // codec.hop)

    def test_residual_identity_and_monotonicity(self, trained_codec, drum_clip):
        codec, _ = trained_codec
        samples = np.pad(drum_clip.samples, (0, (-len(drum_clip)) % codec.hop))
        x = torch.from_numpy(samples).reshape(1, 1, -1)
        with torch.no_grad():
            latents = codec.encoder(x)
            tokens, zq, _, res_norms = codec.quantize(latents)
        d = codec.config.latent_dim
        summed = torch.zeros((latents.shape[-1], d))
        for c in range(codec.config.n_codebooks):
            summed += codec.codebooks[c][tokens[0, c]]
        zq_flat = zq.permute(0, 2, 1).reshape(-1, d)
        # quantized latent is exactly the codeword sum
        assert torch.equal(zq_flat, summed)
        # each stage can only shrink the residual
        assert bool((res_norms[1:] <= res_norms[:-1] + 1e-6).all())

    def test_encode_deterministic(self, trained_codec, drum_clip):
        codec, _ = trained_codec
        a = codec.encode(drum_clip)
        b = codec.encode(drum_clip)
        assert np.array_equal(a.tokens, b.tokens)

    def test_decode_shape(self, trained_codec, drum_clip):
        codec, _ = trained_codec
        grid = codec.encode(drum_clip)
        audio = codec.decode(grid)
        assert len(audio) == grid.n_frames * codec.hop

    def test_codebook_usage(self, trained_codec, small_corpus):
        codec, _ = trained_codec
        used = np.zeros((codec.config.n_codebooks, codec.config.n_tokens), dtype=bool)
        for clip in small_corpus:
            grid = codec.encode(clip)
            for c in range(grid.n_codebooks):
                used[c, np.unique(grid.tokens[c])] = True
        assert np.all(used.sum(axis=1) >= 2)

    def test_decode_rejects_masked(self, trained_codec, drum_clip):
        codec, _ = trained_codec
        grid = codec.encode(drum_clip)
        grid.masked[1, 3] = True
        with pytest.raises(MaskedCellError):
            codec.decode(grid)

    def test_single_codebook_degenerates_to_vq(self, small_corpus):
        cfg = CodecConfig(n_codebooks=1, n_tokens=16, latent_dim=8, channels=(8, 8, 8))
        codec, _ = train_codec(
            small_corpus, cfg, steps=30, rng=np.random.default_rng(1),
            batch_size=2, excerpt_len=4096,
        )
        clip = small_corpus[0]
        samples = np.pad(clip.samples, (0, (-len(clip)) % codec.hop))
        x = torch.from_numpy(samples).reshape(1, 1, -1)
        with torch.no_grad():
            tokens, zq, _, _ = codec.quantize(codec.encoder(x))
        zq_flat = zq.permute(0, 2, 1).reshape(-1, 8)
        assert torch.equal(zq_flat, codec.codebooks[0][tokens[0, 0]])

    def test_empty_corpus_rejected(self):
        with pytest.raises(ConfigError):
            train_codec([], CodecConfig(), steps=1, rng=np.random.default_rng(0))


class TestCheckpoint:
    def test_roundtrip_preserves_encode(self, trained_codec, drum_clip, tmp_path):
        codec, _ = trained_codec
        path = tmp_path / "c.gdc"
        codec.save(path)
        loaded = ResidualVQCodec.load(path)
        assert loaded.trained
        assert np.array_equal(loaded.encode(drum_clip).tokens, codec.encode(drum_clip).tokens)
        recon_a = codec.decode(codec.encode(drum_clip))
        recon_b = loaded.decode(loaded.encode(drum_clip))
        assert np.array_equal(recon_a.samples, recon_b.samples)

    def test_content_hash_stable_and_sensitive(self, trained_codec):
        codec, _ = trained_codec
        h1 = codec.content_hash()
        h2 = codec.content_hash()
        assert h1 == h2
        with torch.no_grad():
            codec.codebooks[0, 0, 0] += 1.0
        try:
            assert codec.content_hash() != h1
        finally:
            with torch.no_grad():
                codec.codebooks[0, 0, 0] -= 1.0

    def test_wrong_magic_rejected(self, trained_codec, tmp_path):
        codec, _ = trained_codec
        path = tmp_path / "c.gdc"
        codec.save(path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(ContainerError):
            ResidualVQCodec.load(path)


class TestDivergenceGuard:
    def test_nan_aborts_with_rollback(self, small_corpus, monkeypatch):
        calls = {"n": 0}
        real = codec_mod._spectral_loss

        def poisoned(pred, target, banks, floor):
            calls["n"] += 1
            if calls["n"] > 3:
                return real(pred, target, banks, floor) * float("nan")
            return real(pred, target, banks, floor)

        monkeypatch.setattr(codec_mod, "_spectral_loss", poisoned)
        cfg = CodecConfig(n_codebooks=2, n_tokens=8, latent_dim=8, channels=(8, 8, 8))
        with pytest.raises(TrainingDivergedError) as exc:
            train_codec(small_corpus, cfg, steps=10, rng=np.random.default_rng(0),
                        batch_size=1, excerpt_len=4096, snapshot_every=2)
        assert exc.value.step == 3
        # the rolled-back checkpoint is usable
        artifact = exc.value.artifact
        assert artifact.trained
        artifact.encode(small_corpus[0])
