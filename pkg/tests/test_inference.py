import numpy as np
import pytest
import torch

from gesturedrums import schedule
from gesturedrums.dsp import AudioClip, PIPELINE_RATE
from gesturedrums.errors import ConfigError, TraceError
from gesturedrums.inference import (
    GenerationRequest,
    GenerationTrace,
    build_buffer,
    generate,
    resume_trace,
    _decode_trace_grid,
    _forward_pair,
    _sample_rows,
    _softmax,
)
from gesturedrums.model import init_model
from gesturedrums.schedule import GenerationConfig


@pytest.fixture(scope="module")
def prompts():
    # 2 s timbre prompt, 4 s rhythm prompt at the pipeline rate
    rng = np.random.default_rng(77)
    t = np.arange(2 * PIPELINE_RATE) / PIPELINE_RATE
    timbre = AudioClip((0.4 * np.sin(2 * np.pi * 100 * t) * (1 + 0.3 * np.sin(7 * t))).astype(np.float32))
    n4 = 4 * PIPELINE_RATE
    beat = np.zeros(n4, dtype=np.float32)
    for k in range(0, n4, PIPELINE_RATE // 2):
        beat[k : k + 800] += 0.7 * np.exp(-np.arange(800) / 200)
    beat += 0.01 * rng.standard_normal(n4).astype(np.float32)
    return timbre, AudioClip(np.clip(beat, -1, 1))


@pytest.fixture()
def small_gen():
    return GenerationConfig(iters_per_codebook=(2, 2, 1, 1), seed=11)


@pytest.fixture()
def request_small(prompts, small_gen):
    timbre, beat = prompts
    return GenerationRequest(timbre_prompt=timbre, rhythm_prompt=beat, gen=small_gen)


class TestBuildBuffer:
    def test_frame_arithmetic_2s_plus_4s(self, request_small, synthetic_codec):
        grid, rhythm_values, prefix = build_buffer(request_small, synthetic_codec)
        # ceil(88200/512) = 173, ceil(176400/512) = 345
        assert prefix == 173
        assert grid.n_frames == 173 + 345 == 518
        assert rhythm_values.shape == (2, 518)

    def test_suffix_fully_masked_prefix_unmasked(self, request_small, synthetic_codec):
        grid, _, prefix = build_buffer(request_small, synthetic_codec)
        assert not grid.masked[:, :prefix].any()
        assert grid.masked[:, prefix:].all()

    def test_prefix_tokens_equal_standalone_encode(self, request_small, synthetic_codec):
        grid, _, prefix = build_buffer(request_small, synthetic_codec)
        standalone = synthetic_codec.encode(request_small.timbre_prompt)
        assert np.array_equal(grid.tokens[:, :prefix], standalone.tokens)

    def test_prefix_rhythm_is_zero(self, request_small, synthetic_codec):
        _, rhythm_values, prefix = build_buffer(request_small, synthetic_codec)
        assert np.all(rhythm_values[:, :prefix] == 0.0)

    def test_short_prompt_rejected(self, prompts, synthetic_codec, small_gen):
        timbre, _ = prompts
        req = GenerationRequest(
            timbre_prompt=timbre,
            rhythm_prompt=AudioClip(np.ones(100, dtype=np.float32) * 0.1),
            gen=small_gen,
        )
        with pytest.raises(ConfigError):
            build_buffer(req, synthetic_codec)


class TestGenerate:
    def test_output_duration_matches_rhythm_frames(self, request_small, tiny_model,
                                                   synthetic_codec):
        audio, trace = generate(request_small, tiny_model, synthetic_codec)
        assert len(audio) == trace.suffix_frames * 512
        assert trace.suffix_frames == 345

    def test_forward_pass_count_is_twice_total_iterations(self, request_small, tiny_model,
                                                          synthetic_codec, monkeypatch):
        calls = {"n": 0}
        orig = tiny_model.forward_tensors

        def counting(*args, **kwargs):
            calls["n"] += 1
            return orig(*args, **kwargs)

        monkeypatch.setattr(tiny_model, "forward_tensors", counting)
        generate(request_small, tiny_model, synthetic_codec)
        assert calls["n"] == 2 * sum(request_small.gen.iters_per_codebook)

    def test_coarse_to_fine_order_and_schedule_conformance(self, request_small, tiny_model,
                                                           synthetic_codec):
        _, trace = generate(request_small, tiny_model, synthetic_codec)
        seen = [it.codebook for it in trace.iterations]
        assert seen == sorted(seen)
        per_codebook = {}
        for it in trace.iterations:
            per_codebook.setdefault(it.codebook, []).append(len(it.confirmed_frames))
        for c, counts in per_codebook.items():
            expected = schedule.confirm_counts(345, request_small.gen.iters_per_codebook[c])
            assert counts == expected

    def test_confirmed_once_and_cover_suffix(self, request_small, tiny_model, synthetic_codec):
        _, trace = generate(request_small, tiny_model, synthetic_codec)
        suffix = set(range(trace.prefix_frames, trace.prefix_frames + trace.suffix_frames))
        for c in range(synthetic_codec.config.n_codebooks):
            confirmed = [f for it in trace.iterations if it.codebook == c
                         for f in it.confirmed_frames]
            assert len(confirmed) == len(set(confirmed))
            assert set(confirmed) == suffix

    def test_prefix_immutable(self, request_small, tiny_model, synthetic_codec):
        _, trace = generate(request_small, tiny_model, synthetic_codec)
        standalone = synthetic_codec.encode(request_small.timbre_prompt)
        assert np.array_equal(
            trace.final_grid.tokens[:, : trace.prefix_frames], standalone.tokens
        )

    def test_seed_determinism_bitwise(self, request_small, tiny_model, synthetic_codec):
        a, ta = generate(request_small, tiny_model, synthetic_codec)
        b, tb = generate(request_small, tiny_model, synthetic_codec)
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(ta.final_grid.tokens, tb.final_grid.tokens)

    def test_different_seed_differs(self, prompts, tiny_model, synthetic_codec):
        timbre, beat = prompts
        a, _ = generate(
            GenerationRequest(timbre, beat, GenerationConfig((2, 2, 1, 1), seed=1)),
            tiny_model, synthetic_codec,
        )
        b, _ = generate(
            GenerationRequest(timbre, beat, GenerationConfig((2, 2, 1, 1), seed=2)),
            tiny_model, synthetic_codec,
        )
        assert not np.array_equal(a.samples, b.samples)

    def test_cfg_weight_one_equals_conditional_only_oracle(self, prompts, tiny_model,
                                                           synthetic_codec):
        # independent single-pass implementation of the decoding loop
        timbre, beat = prompts
        gen = GenerationConfig(iters_per_codebook=(2, 1, 1, 1), seed=23, cfg_weight=1.0)
        req = GenerationRequest(timbre, beat, gen)
        audio, _ = generate(req, tiny_model, synthetic_codec)

        grid, rhythm_values, prefix = build_buffer(req, synthetic_codec)
        t_total = grid.n_frames
        rng = np.random.default_rng(gen.seed)
        rhythm_t = torch.from_numpy(rhythm_values).unsqueeze(0)
        for c in range(4):
            iters_c = gen.iters_per_codebook[c]
            counts = schedule.confirm_counts(t_total - prefix, iters_c)
            for i, quota in enumerate(counts):
                still = np.flatnonzero(grid.masked[c])
                with torch.no_grad():
                    logits = tiny_model.forward_tensors(
                        torch.from_numpy(grid.tokens).unsqueeze(0),
                        torch.from_numpy(grid.masked).unsqueeze(0),
                        rhythm_t, torch.tensor([False]), c,
                    )[0].numpy()
                probs = _softmax(logits[still])
                sampled = _sample_rows(probs, rng)
                sp = probs[np.arange(sampled.size), sampled]
                progress = i / (iters_c - 1) if iters_c > 1 else 1.0
                order = schedule.rank_confidence(
                    sp, still, t_total, gen.temperature, gen.causal_bias, progress, rng
                )
                chosen = order[:quota]
                grid.tokens[c, still[chosen]] = sampled[chosen]
                grid.masked[c, still[chosen]] = False
        oracle = synthetic_codec.decode(grid)
        oracle_suffix = oracle.samples[prefix * 512 :]
        assert np.array_equal(audio.samples, oracle_suffix)

    def test_mismatched_codec_rejected(self, request_small, tiny_model):
        from gesturedrums.codec import SyntheticCodec

        other = SyntheticCodec(n_codebooks=6, n_tokens=64, hop=512)
        with pytest.raises(ConfigError) as exc:
            generate(request_small, tiny_model, other)
        assert "4" in str(exc.value) and "6" in str(exc.value)

    def test_schedule_length_mismatch_rejected(self, prompts, tiny_model, synthetic_codec):
        timbre, beat = prompts
        req = GenerationRequest(timbre, beat, GenerationConfig((2, 2, 1), seed=0))
        with pytest.raises(ConfigError):
            generate(req, tiny_model, synthetic_codec)

    def test_include_prefix_flag(self, prompts, tiny_model, synthetic_codec):
        timbre, beat = prompts
        gen = GenerationConfig((1, 1, 1, 1), seed=3, include_prefix=True)
        audio, trace = generate(GenerationRequest(timbre, beat, gen), tiny_model,
                                synthetic_codec)
        assert len(audio) == (trace.prefix_frames + trace.suffix_frames) * 512


class TestTrace:
    def test_roundtrip_and_resume_bitwise(self, request_small, tiny_model, synthetic_codec,
                                          tmp_path):
        audio, trace = generate(request_small, tiny_model, synthetic_codec)
        path = tmp_path / "run.trace.json"
        trace.save(path)
        loaded = GenerationTrace.load(path)
        out = resume_trace(loaded, tiny_model, synthetic_codec)
        assert np.array_equal(out.samples, audio.samples)
        assert loaded.settings["cfg_weight"] == request_small.gen.cfg_weight

    def test_truncated_trace_rejected(self, request_small, tiny_model, synthetic_codec,
                                      tmp_path):
        _, trace = generate(request_small, tiny_model, synthetic_codec)
        path = tmp_path / "run.trace.json"
        trace.save(path)
        text = path.read_text()
        import json

        d = json.loads(text)
        del d["final_tokens"]
        path.write_text(json.dumps(d))
        with pytest.raises(TraceError):
            GenerationTrace.load(path)

    def test_foreign_model_hash_rejected(self, request_small, tiny_model, synthetic_codec,
                                         tiny_model_config):
        _, trace = generate(request_small, tiny_model, synthetic_codec)
        other = init_model(tiny_model_config, seed=999)
        with pytest.raises(TraceError):
            resume_trace(trace, other, synthetic_codec)

    def test_foreign_codec_hash_rejected(self, request_small, tiny_model, synthetic_codec):
        from gesturedrums.codec import SyntheticCodec

        _, trace = generate(request_small, tiny_model, synthetic_codec)
        other = SyntheticCodec(n_codebooks=4, n_tokens=32, hop=512)
        with pytest.raises(TraceError):
            resume_trace(trace, tiny_model, other)

    def test_incomplete_grid_rejected(self, request_small, tiny_model, synthetic_codec):
        _, trace = generate(request_small, tiny_model, synthetic_codec)
        trace.final_grid.masked[0, -1] = True
        with pytest.raises(TraceError):
            resume_trace(trace, tiny_model, synthetic_codec)
