import math

import numpy as np
import pytest

from memlane.model import (
    ArchitectureConfig,
    ExtractorKind,
    MemoryState,
    ModelParams,
    convlstm_step,
    decode,
    extract_fast,
    extract_slow,
    forward_frame,
    init_params,
    mac_count,
)
from memlane.tensor import ShapeError, Tensor, no_grad, precision

DESK = ArchitectureConfig()


def zero_params(arch: ArchitectureConfig) -> ModelParams:
    return ModelParams(arch, {n: Tensor.zeros(s) for n, s in arch.param_shapes().items()})


@pytest.fixture(scope="module")
def params():
    return init_params(DESK, seed=0)


def image(seed=0, size=64):
    return Tensor(np.random.default_rng(seed).random((3, size, size)))


def test_extractors_share_the_feature_space(params):
    x = image()
    assert extract_fast(x, params).shape == (32, 8, 8)
    assert extract_slow(x, params).shape == (32, 8, 8)


@pytest.mark.parametrize("size,downsample", [(16, 8), (32, 4), (224, 32), (64, 16)])
def test_shared_space_for_any_config(size, downsample):
    arch = ArchitectureConfig(input_size=size, feature_channels=4, memory_channels=4, downsample=downsample)
    p = zero_params(arch)
    x = Tensor.zeros((3, size, size))
    assert extract_fast(x, p).shape == extract_slow(x, p).shape == (4, size // downsample, size // downsample)


def test_zero_image_zero_weights_gives_zero_features():
    p = zero_params(DESK)
    assert not extract_fast(Tensor.zeros((3, 64, 64)), p).data.any()
    assert not extract_slow(Tensor.zeros((3, 64, 64)), p).data.any()


def test_extractor_rejects_wrong_shapes(params):
    with pytest.raises(ShapeError):
        extract_fast(Tensor.zeros((1, 64, 64)), params)
    with pytest.raises(ShapeError):
        extract_slow(Tensor.zeros((3, 60, 64)), params)


def test_full_scale_slow_extractor_emits_512_by_7_by_7():
    arch = ArchitectureConfig.full_scale()
    with no_grad():
        feat = extract_slow(Tensor.zeros((3, 224, 224)), zero_params(arch))
    assert feat.shape == (512, 7, 7)


def test_full_scale_decoder_has_five_layers_to_224():
    arch = ArchitectureConfig.full_scale()
    assert sum(s.transposed for s in arch.decoder_layers()) == 5
    with no_grad():
        logits = decode(Tensor.zeros((128, 7, 7)), zero_params(arch))
    assert logits.shape == (1, 224, 224)


def test_desk_decoder_maps_memory_to_image():
    assert sum(s.transposed for s in DESK.decoder_layers()) == 3
    logits = decode(Tensor.zeros((16, 8, 8)), zero_params(DESK))
    assert logits.shape == (1, 64, 64)
    assert not logits.data.any()


def test_decoder_rejects_wrong_channels(params):
    with pytest.raises(ShapeError):
        decode(Tensor.zeros((8, 8, 8)), params)


def test_mac_counts_match_closed_form():
    def conv(cout, cin, k, out):
        return cout * cin * k * k * out * out

    fast = conv(8, 3, 3, 32) + conv(16, 8, 3, 16) + conv(32, 16, 3, 8) + conv(32, 32, 1, 8)
    slow = (
        conv(16, 3, 3, 64)
        + conv(32, 16, 3, 32) + conv(32, 32, 3, 32)
        + conv(64, 32, 3, 16) + conv(64, 64, 3, 16)
        + conv(128, 64, 3, 8) + conv(128, 128, 3, 8)
        + conv(32, 128, 1, 8)
    )
    assert mac_count(DESK, "fast") == fast == 876_544
    assert mac_count(DESK, "slow") == slow == 44_498_944
    assert mac_count(DESK, "lstm") == 4 * conv(16, 48, 3, 8) == 1_769_472
    # transposed convs: every input pixel stamps a cin x cout x 4 x 4 block
    assert mac_count(DESK, "decoder") == 16 * 8 * 16 * 64 + 8 * 4 * 16 * 256 + 4 * 4 * 16 * 1024 + 4 * 64 * 64 == 540_672
    assert mac_count(DESK, "slow") >= 8 * mac_count(DESK, "fast")


def test_convlstm_zero_everything_stays_zero():
    p = zero_params(DESK)
    h, state = convlstm_step(Tensor(np.random.default_rng(0).random((32, 8, 8))), MemoryState.zeros(DESK), p)
    assert not h.data.any() and state.is_zero()


def test_convlstm_matches_scalar_lstm_oracle():
    arch = ArchitectureConfig(input_size=2, feature_channels=1, memory_channels=1, downsample=2, gate_kernel=1)
    p = zero_params(arch)
    # weights act on [x; h]
    w = {"i": (0.5, -0.3, 0.1), "f": (0.2, 0.4, 1.0), "o": (-0.7, 0.6, 0.0), "g": (1.1, -0.9, 0.2)}
    for gate, (wx, wh, b) in w.items():
        p.tensors[f"lstm.gate_{gate}.weight"] = Tensor(np.array([wx, wh], dtype=np.float64).reshape(1, 2, 1, 1))
        p.tensors[f"lstm.gate_{gate}.bias"] = Tensor([b])
    x, h0, c0 = 0.8, -0.25, 0.4

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    pre = {g: wx * x + wh * h0 + b for g, (wx, wh, b) in w.items()}
    i, f, o, g = sig(pre["i"]), sig(pre["f"]), sig(pre["o"]), math.tanh(pre["g"])
    c1 = f * c0 + i * g
    h1 = o * math.tanh(c1)

    with precision(np.float64):
        state = MemoryState(Tensor([[[h0]]]), Tensor([[[c0]]]))
        out, nxt = convlstm_step(Tensor([[[x]]]), state, p)
    assert out.data.item() == pytest.approx(h1, abs=1e-6)
    assert nxt.c.data.item() == pytest.approx(c1, abs=1e-6)
    assert nxt.h is out


def test_convlstm_is_stateful(params):
    feat = extract_slow(image(), params)
    h1, s1 = convlstm_step(feat, MemoryState.zeros(DESK), params)
    h2, _ = convlstm_step(feat, s1, params)
    assert not np.allclose(h1.data, h2.data)


def test_convlstm_rejects_geometry_mismatch(params):
    with pytest.raises(ShapeError):
        convlstm_step(Tensor.zeros((32, 4, 4)), MemoryState.zeros(DESK), params)


def test_memory_clear_is_idempotent_and_exact(params):
    _, state = forward_frame(image(), ExtractorKind.SLOW, MemoryState.zeros(DESK), params)
    assert not state.is_zero()
    state.clear()
    assert state.is_zero()
    state.clear()
    assert state.is_zero() and state.shape == (16, 8, 8)


def test_forward_frame_output_shape_for_both_kinds(params):
    for kind in ExtractorKind:
        logits, state = forward_frame(image(), kind, MemoryState.zeros(DESK), params)
        assert logits.shape == (1, 64, 64)
        assert state.shape == (16, 8, 8)


def test_fast_and_slow_give_different_logits(params):
    x, s = image(), MemoryState.zeros(DESK)
    fast, _ = forward_frame(x, ExtractorKind.FAST, s, params)
    slow, _ = forward_frame(x, ExtractorKind.SLOW, s, params)
    assert not np.allclose(fast.data, slow.data)


def test_repeated_frames_change_predictions(params):
    x, state = image(), MemoryState.zeros(DESK)
    outputs = []
    for _ in range(6):
        logits, state = forward_frame(x, ExtractorKind.FAST, state, params)
        outputs.append(logits.data)
    assert all(not np.array_equal(a, b) for a, b in zip(outputs[:-1], outputs[1:]))


def test_forward_frame_is_pure(params):
    x, s = image(), MemoryState.zeros(DESK)
    a, sa = forward_frame(x, ExtractorKind.SLOW, s, params)
    b, sb = forward_frame(x, ExtractorKind.SLOW, s, params)
    assert np.array_equal(a.data, b.data) and np.array_equal(sa.c.data, sb.c.data)
    assert s.is_zero()


def test_zero_init_decoder_gives_half_probability():
    p = init_params(DESK, 0)
    for name in DESK.param_shapes():
        if name.startswith("decoder."):
            p.tensors[name] = Tensor.zeros(p[name].shape)
    logits, _ = forward_frame(image(), ExtractorKind.FAST, MemoryState.zeros(DESK), p)
    np.testing.assert_array_equal(1.0 / (1.0 + np.exp(-logits.data)), 0.5)


def test_init_params_deterministic_and_forget_bias():
    a, b = init_params(DESK, 3), init_params(DESK, 3)
    assert list(a) == list(b)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    assert not np.array_equal(a["slow.conv3.weight"].data, init_params(DESK, 4)["slow.conv3.weight"].data)
    np.testing.assert_array_equal(a["lstm.gate_f.bias"].data, 1.0)
    np.testing.assert_array_equal(a["lstm.gate_i.bias"].data, 0.0)


def test_canonical_parameter_names():
    names = set(DESK.param_shapes())
    assert {"slow.conv3.weight", "lstm.gate_i.bias", "fast.conv3.weight", "decoder.head.weight"} <= names
    assert DESK.param_shapes()["lstm.gate_g.weight"] == (16, 48, 3, 3)


@pytest.mark.parametrize("kwargs", [dict(downsample=6), dict(input_size=60), dict(feature_channels=0)])
def test_architecture_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        ArchitectureConfig(**kwargs)


def test_end_to_end_gradient_check_sampled():
    from memlane.gradcheck import grad_check, model_check_problem

    f, p = model_check_problem(size=16, seed=1)
    report = grad_check(f, p, max_entries=3, seed=1)
    assert len(report.checks) == len(p)
    assert report.passed, report.format()
