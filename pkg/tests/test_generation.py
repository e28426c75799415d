import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclevar.autograd import ShapeError
from cyclevar.generation import GenerationConfig, Translator
from cyclevar.quantizer import SRQConfig
from cyclevar.tokenizer import ScaleSchedule, Tokenizer
from cyclevar.transformer import Instrument, NextScaleTransformer

D = torch.float64


def _translator(sides=(1, 2, 4), bitwise=None, seed=0):
    torch.manual_seed(seed)
    tok = Tokenizer(image_size=16, C=4, V=8, factor=4, width=8,
                    schedule=ScaleSchedule.from_sides(sides), quantizer=bitwise or "vq").double().freeze()
    tr = NextScaleTransformer(4, 8, tok.schedule.sizes, width=16, heads=2, depth=1,
                              gate_init_std=0.3, bitwise=bitwise is not None).double()
    return Translator(tok, tr).eval()


@pytest.fixture(scope="module")
def translator():
    return _translator()


@pytest.fixture(scope="module")
def context(translator):
    g = torch.Generator().manual_seed(3)
    return translator.context(torch.rand(2, 3, 16, 16, generator=g, dtype=D))


def test_config_validation():
    for bad in (dict(mode="beam"), dict(a=-0.1), dict(a=1.5), dict(quantizer="soft"),
                dict(mode="serial", drop_ms_output=True), dict(mode="serial", drop_ms_context=True)):
        with pytest.raises(ValueError):
            GenerationConfig(**bad)


@pytest.mark.parametrize("mode", ["serial", "parallel"])
def test_zero_fusion_returns_source_context(translator, context, mode):
    st_ = translator.generate(context, 0, GenerationConfig(mode=mode, a=0.0))
    assert torch.equal(st_.Ehat, context[-1])


def test_full_fusion_parallel_is_generated_sum(translator, context):
    st_ = translator.parallel_generate(context, 1, GenerationConfig(a=1.0))
    expected = sum(translator.tokenizer.up(R) for R in st_.Rhat)
    assert torch.allclose(st_.Ehat, expected, atol=1e-12)


def test_single_scale_serial_unroll():
    tr = _translator(sides=(4,))
    F = tr.context(torch.rand(1, 3, 16, 16, dtype=D))
    cfg = GenerationConfig(mode="serial", a=0.3)
    st_ = tr.serial_generate(F, 0, cfg)
    s = tr.transformer.start_map(1)
    assert len(st_.Rhat) == 1
    assert torch.allclose(st_.Ehat, 0.3 * (st_.Rhat[0] + s) + 0.7 * F[0], atol=1e-12)


@given(a=st.floats(0.0, 1.0))
@settings(max_examples=15)
def test_serial_cache_matches_uncached(a):
    tr = _translator()
    F = tr.context(torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0), dtype=D))
    cfg = GenerationConfig(mode="serial", a=a)
    with_cache = tr.serial_generate(F, 1, cfg).Ehat
    without = tr.serial_generate(F, 1, cfg.with_(use_cache=False)).Ehat
    assert torch.allclose(with_cache, without, atol=1e-10)


def test_serial_fusion_recurrence(translator, context):
    a = 0.4
    st_ = translator.serial_generate(context, 0, GenerationConfig(mode="serial", a=a))
    sizes = translator.schedule.sizes
    for k in range(1, len(sizes)):
        fused = a * (st_.Rhat[k - 1] + st_.H[k - 1]) + (1 - a) * context[k - 1]
        assert torch.allclose(st_.H[k], translator.tokenizer.up(fused, sizes[k]), atol=1e-12)


def test_forward_counts(translator, context):
    inst = Instrument()
    translator.transformer.instrument = inst
    try:
        translator.generate(context, 0, GenerationConfig(mode="serial"))
        assert inst.calls == translator.schedule.K
        inst.reset()
        translator.generate(context, 0, GenerationConfig(mode="parallel"))
        assert inst.calls == 1
    finally:
        translator.transformer.instrument = None


def test_mask_flags(translator, context):
    cfg = GenerationConfig(a=0.6)
    base = translator.parallel_generate(context, 0, cfg)
    out_only = translator.mask_ablation(context, 0, cfg, drop_ms_output=True)
    expected = 0.6 * translator.tokenizer.up(base.Rhat[-1]) + 0.4 * context[-1]
    assert torch.allclose(out_only, expected, atol=1e-12)

    dropped = translator.parallel_generate(context, 0, cfg.with_(drop_ms_context=True))
    for r0, r1 in zip(base.Rhat[:-1], dropped.Rhat[:-1]):
        assert torch.equal(r0, r1)
    assert not torch.allclose(base.Rhat[-1], dropped.Rhat[-1])
    with pytest.raises(ValueError):
        translator.mask_ablation(context, 0, GenerationConfig(mode="serial"))


def test_translate_determinism_and_shape(translator):
    img = torch.rand(2, 3, 16, 16, dtype=D)
    cfg = GenerationConfig()
    out = translator.translate(img, [0, 1], cfg)
    assert out.shape == img.shape
    assert torch.equal(out, translator.translate(img, [0, 1], cfg))


def test_gumbel_translate_is_seeded(translator):
    img = torch.rand(1, 3, 16, 16, dtype=D)
    cfg = GenerationConfig(srq=SRQConfig(tau=1.0, gumbel=True, seed=11))
    a = translator.translate(img, 0, cfg)
    assert torch.equal(a, translator.translate(img, 0, cfg))
    other = translator.translate(img, 0, cfg.with_(srq=SRQConfig(tau=1.0, gumbel=True, seed=12)))
    assert not torch.equal(a, other)


def test_wrong_context_length(translator, context):
    with pytest.raises(ShapeError):
        translator.generate(context[:-1], 0, GenerationConfig())


def test_schedule_mismatch_rejected():
    tr = _translator()
    bad = NextScaleTransformer(4, 8, [(1, 1), (4, 4)], width=16, heads=2, depth=1)
    with pytest.raises(ShapeError):
        Translator(tr.tokenizer, bad)


def _head_grad(tr, quantizer):
    img = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(9), dtype=D)
    tr.transformer.zero_grad()
    out = tr.translate(img, 0, GenerationConfig(quantizer=quantizer, a=0.5))
    if not out.requires_grad:  # nothing upstream of the output is trainable
        return None
    out.square().mean().backward()
    return tr.transformer.head.weight.grad


def test_soft_quantization_passes_gradient_hard_does_not():
    tr = _translator()
    g_soft = _head_grad(tr, "srq")
    assert g_soft is not None and g_soft.abs().max() > 0
    g_hard = _head_grad(tr, "hard")
    assert g_hard is None or g_hard.abs().max() == 0


@pytest.mark.parametrize("mode", ["lfq", "bsq"])
def test_bitwise_generation(mode):
    tr = _translator(bitwise=mode)
    F = tr.context(torch.rand(1, 3, 16, 16, dtype=D))
    hard = tr.parallel_generate(F, 0, GenerationConfig(quantizer="hard"))
    b = 1.0 if mode == "lfq" else 0.5
    for R in hard.Rhat:
        assert torch.allclose(R.abs(), torch.full_like(R, b))
    soft = tr.serial_generate(F, 1, GenerationConfig(mode="serial"))
    assert torch.isfinite(soft.Ehat).all()
