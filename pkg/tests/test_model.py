import time

import numpy as np
import pytest

from hft import tensor as T
from hft.model import HFTModel, ModelConfig, init_model, micro_config, param_count, parameter_shapes
from hft.notes import NoteEvent
from hft.targets import TargetGrids, notes_to_targets
from hft.training import total_loss


def closed_form_count(cfg: ModelConfig) -> int:
    """Parameter count written out by hand from the layer inventory."""
    z, ff, f, p, n = cfg.d_model, cfg.d_ff, cfg.n_bins, cfg.n_pitches, cfg.n_frames
    c, k, layers = cfg.conv_channels, cfg.conv_kernel, cfg.n_layers
    attn = 4 * (z * z + z)
    feed = z * ff + ff + ff * z + z
    norm = 2 * z
    enc_layer = attn + feed + 2 * norm
    dec_layer = 2 * attn + feed + 3 * norm
    head = 3 * (z + 1) + z * 128 + 128
    total = c * k + c + c * (2 * cfg.margin + 1 - k + 1) * z + z + f * z + layers * enc_layer + head
    if cfg.variant.split("-")[2] == "D":
        total += p * z + layers * dec_layer
    else:
        total += f * p + p
    if cfg.variant != "1-F-D-N":
        total += n * z + layers * enc_layer + head
    return total


@pytest.mark.parametrize("variant,target,exact", [("1-F-D-T", 5.5e6, 5_785_886),
                                                  ("1-F-D-N", 3.9e6, 4_138_139),
                                                  ("1-F-L-T", 3.4e6, 3_413_622)])
def test_param_count_matches_published_sizes(variant, target, exact):
    cfg = ModelConfig(variant=variant)
    assert param_count(cfg) == closed_form_count(cfg) == exact
    assert abs(param_count(cfg) - target) <= 0.1 * target


def test_micro_param_count():
    cfg = micro_config()
    assert param_count(cfg) == closed_form_count(cfg) == 4662


def test_param_count_equals_flat_vector_length():
    m = HFTModel.create(micro_config(variant="1-F-L-T"))
    assert m.flat_parameters().size == param_count(m.cfg)


def test_unsupported_variant():
    with pytest.raises(NotImplementedError, match="2-F-D-T"):
        ModelConfig(variant="2-F-D-T")


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_frames=0)


def test_init_determinism_and_seed_sensitivity():
    cfg = micro_config()
    a, b, c = init_model(cfg, 3), init_model(cfg, 3), init_model(cfg, 4)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_init_distributions():
    cfg = ModelConfig()
    w = init_model(cfg, 0)
    assert (w["freq_enc.0.attn.q.bias"].data == 0).all()
    assert (w["freq_enc.0.norm1.weight"].data == 1).all()
    bound = 1 / np.sqrt(256)
    assert np.abs(w["freq_enc.0.ff1.weight"].data).max() <= bound
    pos = w["pos.freq"].data
    assert abs(pos.std() - 0.02) < 0.001 and abs(pos.mean()) < 0.001
    assert np.abs(w["conv.weight"].data).max() <= 1 / np.sqrt(5)


def test_names_unique_and_shapes_follow_layout():
    shapes = parameter_shapes(ModelConfig())
    names = [s[0] for s in shapes]
    assert len(names) == len(set(names))
    d = {n: s for n, s, _ in shapes}
    assert d["conv.weight"] == (4, 1, 5)
    assert d["embed.weight"] == (244, 256)
    assert d["head2.velocity.weight"] == (256, 128)


def micro_model(seed=0, dtype=np.float64, **kw):
    return HFTModel.create(micro_config(pitch_min=60, **kw), seed=seed, dtype=dtype)


def micro_input(b=2, seed=0):
    return np.random.default_rng(seed).normal(size=(b, 4, 8, 5))


def test_conv_embed_zero_input_gives_zero():
    m = micro_model()
    out = m.conv_embed(np.zeros((1, 4, 8, 5)))
    assert out.shape == (1, 4, 8, 8)
    assert (out.data == 0).all()


def test_conv_length():
    assert ModelConfig().conv_len == 61
    assert micro_config().conv_len == 1


def test_freq_encode_time_independent():
    m = micro_model()
    x = m.conv_embed(micro_input(1))
    perm = np.array([2, 0, 3, 1])
    a = m.freq_encode(x).data
    b = m.freq_encode(T.Tensor(x.data[:, perm])).data
    np.testing.assert_array_equal(a[:, perm], b)


def test_first_hierarchy_time_independent():
    m = micro_model()
    x = micro_input(1)
    perm = np.array([3, 1, 0, 2])
    a = m.forward(x).output_1st
    b = m.forward(x[:, perm]).output_1st
    for h in ("frame", "onset", "offset", "velocity_logits"):
        np.testing.assert_array_equal(getattr(a, h).data[:, perm], getattr(b, h).data)


def test_time_encode_commutes_with_pitch_permutation():
    m = micro_model()
    x = T.Tensor(np.random.default_rng(1).normal(size=(1, 4, 5, 8)))
    perm = np.array([4, 2, 0, 1, 3])
    a = m.time_encode(x).data
    b = m.time_encode(T.Tensor(x.data[:, :, perm])).data
    np.testing.assert_allclose(a[:, :, perm], b, rtol=0, atol=1e-12)


def test_attention_rows_sum_to_one():
    m = micro_model()
    m.record_attention = True
    m.forward(micro_input())
    assert len(m.attention_maps) == 4  # freq encoder, decoder self + cross, time encoder
    for probs in m.attention_maps:
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_single_frame_inputs():
    m = micro_model(n_frames=1)
    out = m.forward(np.random.default_rng(0).normal(size=(1, 1, 8, 5)))
    assert out.output_2nd.frame.shape == (1, 1, 5)


def test_converter_shapes_and_linear_variant():
    m = micro_model()
    enc = m.freq_encode(m.conv_embed(micro_input(1)))
    assert m.convert(enc).shape == (1, 4, 5, 8)

    lin = micro_model(variant="1-F-L-T")
    w = np.zeros((8, 5))
    w[np.arange(5), np.arange(5)] = 1.0
    lin.weights["converter.weight"].data[...] = w
    rows = T.Tensor(np.arange(1 * 4 * 8 * 8, dtype=np.float64).reshape(1, 4, 8, 8))
    out = lin.convert(rows).data
    assert out.shape == (1, 4, 5, 8)
    np.testing.assert_array_equal(out, rows.data[:, :, :5])
    assert len({out[0, 0, p].tobytes() for p in range(5)}) == 5


def test_heads_with_zero_weights_give_half():
    m = micro_model()
    for name, t in m.named_parameters():
        if name.startswith("head1."):
            t.data[...] = 0
    g = m.heads(T.Tensor(np.random.default_rng(0).normal(size=(1, 4, 5, 8))), 1)
    for h in (g.frame, g.onset, g.offset):
        assert (h.data == 0.5).all()
    assert g.velocity_logits.shape == (1, 4, 5, 128)


def test_outputs_in_open_interval():
    out = micro_model().forward(micro_input() * 50)
    for g in (out.output_1st, out.output_2nd):
        for h in (g.frame, g.onset, g.offset):
            assert ((h.data > 0) & (h.data < 1)).all()


def test_no_second_hierarchy_variant():
    m = micro_model(variant="1-F-D-N")
    out = m.forward(micro_input())
    assert out.output_2nd is None and out.final is out.output_1st
    with pytest.raises(ValueError, match="variant has no second hierarchy"):
        m.time_encode(T.Tensor(np.zeros((1, 4, 5, 8))))


def test_eval_forward_is_bit_identical():
    m = micro_model(dtype=np.float32, dropout=0.1)
    x = micro_input()
    a, b = m.forward(x).final, m.forward(x).final
    assert a.frame.data.tobytes() == b.frame.data.tobytes()
    assert a.velocity_logits.data.tobytes() == b.velocity_logits.data.tobytes()


def test_dropout_only_in_training():
    m = micro_model(dropout=0.5)
    x = micro_input()
    ev = m.forward(x).final.frame.data
    tr = m.forward(x, train=True, rng=np.random.default_rng(0)).final.frame.data
    assert not np.array_equal(ev, tr)


def test_default_config_output_shapes():
    m = HFTModel.create(ModelConfig(), seed=0)
    with T.no_grad():
        out = m.forward(np.zeros((128, 256, 65), dtype=np.float32))
    for g in (out.output_1st, out.output_2nd):
        assert g.frame.shape == (1, 128, 88)
        assert g.velocity_logits.shape == (1, 128, 88, 128)


def test_micro_forward_backward_under_one_second():
    m = micro_model(dtype=np.float32)
    x = micro_input(8)
    tg = notes_to_targets([NoteEvent(0.01, 61, 0.05, 64)], 4, pitch_min=60, n_pitches=5)
    tg = TargetGrids(*(np.stack([a] * 8) for a in (tg.frame, tg.onset, tg.offset, tg.velocity)))
    t0 = time.perf_counter()
    T.backward(total_loss(m.forward(x), tg).l_all)
    assert time.perf_counter() - t0 < 1.0


def _gradcheck_setup(seed=0):
    m = micro_model(seed)
    x = micro_input(2, seed)
    tg = notes_to_targets([NoteEvent(0.02, 61, 0.09, 70), NoteEvent(0.0, 63, 0.05, 30)], 4,
                          pitch_min=60, n_pitches=5)
    tg = TargetGrids(*(np.stack([a, a]) for a in (tg.frame, tg.onset, tg.offset, tg.velocity)))
    return m, lambda: total_loss(m.forward(x), tg).l_all


def test_full_model_gradient_within_roundoff():
    # Analytic vs central difference on every sampled coordinate. The
    # tolerance is 1e-4 relative plus the float64 rounding floor of the
    # difference quotient, a few ulp(L) / (2 eps): structurally-zero and
    # tiny gradients cannot be resolved more finely than that.
    m, f = _gradcheck_setup()
    eps = 1e-6
    for p in m.parameters():
        p.grad = None
    loss = f()
    T.backward(loss)
    floor = 8 * np.spacing(float(loss.data)) / (2 * eps)
    rng = np.random.default_rng(0)
    worst = 0.0
    with T.no_grad():
        for name, p in m.named_parameters():
            flat, ga = p.data.reshape(-1), p.grad.reshape(-1)
            for c in rng.choice(flat.size, size=min(flat.size, 200), replace=False):
                orig = flat[c]
                flat[c] = orig + eps
                fp = float(f().data)
                flat[c] = orig - eps
                fm = float(f().data)
                flat[c] = orig
                num = (fp - fm) / (2 * eps)
                ratio = abs(ga[c] - num) / (1e-4 * max(abs(ga[c]), abs(num)) + floor)
                worst = max(worst, ratio)
    assert worst < 1.0
