import math

import numpy as np
import pytest
import torch
from matplotlib.colors import rgb_to_hsv

from cyclevar.generation import GenerationConfig, Translator
from cyclevar.synthetic import SyntheticDomainSpec, UnpairedStream, domain_index, synth_sample
from cyclevar.tokenizer import ScaleSchedule, Tokenizer, TrainingDivergedError
from cyclevar.training import (
    METRIC_COLUMNS,
    MetricsWriter,
    OptimConfig,
    Optimizers,
    TranslatorBundle,
    cycle_loss,
    disc_terms,
    discriminator_loss,
    gan_generator_loss,
    generator_losses,
    identity_loss,
    moving_average,
    nonsaturating_gen_term,
    train,
    train_step,
)
from cyclevar.transformer import NextScaleTransformer

LN2 = math.log(2.0)


def _bundle(mode="parallel", seed=0):
    torch.manual_seed(seed)
    tok = Tokenizer(image_size=16, C=4, V=8, width=8, schedule=ScaleSchedule.from_sides((1, 2, 4))).freeze()
    tr = NextScaleTransformer(4, 8, tok.schedule.sizes, width=16, heads=2, depth=1, gate_init_std=0.1)
    return TranslatorBundle(Translator(tok, tr), GenerationConfig(mode=mode), disc_width=4)


def _batch(n=2, size=16, start=0):
    spec = SyntheticDomainSpec(seed=5, size=size)
    return synth_sample(spec, n, "x", start=start), synth_sample(spec, n, "y", start=start + 100)


def _zero_discriminators(bundle):
    with torch.no_grad():
        for d in (bundle.disc_x, bundle.disc_y):
            d.net[-1].weight.zero_()
            d.net[-1].bias.zero_()


class _IdentityG:
    """Replaces the generator with the identity map."""

    def __init__(self, bundle):
        self.bundle = bundle

    def __enter__(self):
        self.orig = self.bundle.G
        self.bundle.G = lambda img, domain, generator=None: img
        return self.bundle

    def __exit__(self, *exc):
        self.bundle.G = self.orig


def test_tensor_loss_terms():
    z = torch.zeros(3, 1, 4, 4)
    assert nonsaturating_gen_term(z).item() == pytest.approx(LN2)
    assert disc_terms(z, z).item() == pytest.approx(2 * LN2)
    big = torch.full((2, 1, 2, 2), 30.0)
    assert disc_terms(big, -big).item() == pytest.approx(0.0, abs=1e-12)
    assert nonsaturating_gen_term(-big).item() == pytest.approx(30.0, rel=1e-9)


def test_uninformative_discriminators_give_log_oracles():
    bundle = _bundle()
    _zero_discriminators(bundle)
    batch = _batch()
    assert discriminator_loss(bundle, batch).item() == pytest.approx(4 * LN2, abs=1e-6)
    assert gan_generator_loss(bundle, batch).item() == pytest.approx(2 * LN2, abs=1e-6)


def test_identity_generator_has_zero_reconstruction_losses():
    bundle = _bundle()
    batch = _batch()
    with _IdentityG(bundle):
        assert cycle_loss(bundle, batch).item() == 0.0
        total, l1, perc = identity_loss(bundle, batch)
        assert total.item() == 0.0 and l1.item() == 0.0 and perc.item() == 0.0


def test_adversarial_losses_are_symmetric_in_domains():
    bundle = _bundle()
    x, y = _batch()
    with _IdentityG(bundle):
        g1 = gan_generator_loss(bundle, (x, y)).item()
        d1 = discriminator_loss(bundle, (x, y)).item()
        bundle.disc_x, bundle.disc_y = bundle.disc_y, bundle.disc_x
        g2 = gan_generator_loss(bundle, (y, x)).item()
        d2 = discriminator_loss(bundle, (y, x)).item()
    assert g1 == pytest.approx(g2, rel=1e-6)
    assert d1 == pytest.approx(d2, rel=1e-6)


def test_loss_separation():
    bundle = _bundle()
    batch = _batch()
    total, _, tr = generator_losses(bundle, batch)
    total.backward()
    assert all(p.grad is None for p in bundle.discriminator_parameters())
    assert any(p.grad is not None for p in bundle.generator_parameters())
    bundle.zero_grad(set_to_none=True)
    discriminator_loss(bundle, batch, tr).backward()
    assert all(p.grad is None for p in bundle.generator_parameters())
    assert all(p.grad is not None for p in bundle.discriminator_parameters())


@pytest.mark.parametrize("mode", ["serial", "parallel"])
def test_every_generator_tensor_receives_gradient(mode):
    bundle = _bundle(mode)
    total, _, _ = generator_losses(bundle, _batch())
    total.backward()
    unused = set() if mode == "serial" else {"start"}  # parallel decoding starts from the source context
    for name, p in bundle.generator.transformer.named_parameters():
        if name in unused:
            assert p.grad is None
        else:
            assert p.grad is not None and p.grad.abs().max() > 0, name


def test_zero_lr_step_leaves_parameters_unchanged():
    bundle = _bundle()
    before = {k: v.clone() for k, v in bundle.state_dict().items()}
    opt = Optimizers(bundle, OptimConfig(lr=0.0, disc_lr=0.0, weight_decay=0.0))
    rep = train_step(bundle, _batch(), opt)
    assert rep.grad_norm > 0
    for k, v in bundle.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_step_updates_transformer_but_not_tokenizer():
    bundle = _bundle()
    tok_before = {k: v.clone() for k, v in bundle.generator.tokenizer.state_dict().items()}
    head_before = bundle.generator.transformer.head.weight.clone()
    train_step(bundle, _batch(), Optimizers(bundle, OptimConfig(warmup=1)))
    for k, v in bundle.generator.tokenizer.state_dict().items():
        assert torch.equal(v, tok_before[k])
    assert all(not p.requires_grad for p in bundle.generator.tokenizer.parameters())
    assert not torch.equal(bundle.generator.transformer.head.weight, head_before)


def test_warmup_ramp():
    bundle = _bundle()
    opt = Optimizers(bundle, OptimConfig(lr=1e-3, disc_lr=1e-4, warmup=4))
    lrs = []
    for _ in range(6):
        lrs.append(opt.g.param_groups[0]["lr"])
        opt.g.step()
        opt.g_sched.step()
    assert lrs == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3])
    assert opt.d.param_groups[0]["lr"] == pytest.approx(2.5e-5)


def test_non_finite_parameters_raise():
    bundle = _bundle()
    with torch.no_grad():
        bundle.generator.transformer.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as info:
        train_step(bundle, _batch(), Optimizers(bundle, OptimConfig()))
    assert "losses" in info.value.report


def test_train_is_deterministic_and_logs(tmp_path):
    def run(path):
        bundle = _bundle(seed=3)
        stream = UnpairedStream(SyntheticDomainSpec(seed=1, size=16), 2, pool=16, seed=7)
        w = MetricsWriter(path)
        hist = train(bundle, stream.next, steps=5, log_every=2, writer=w)
        w.close()
        return [r.total_g for _, r in hist], path.read_text()

    a, csv_a = run(tmp_path / "a.csv")
    b, csv_b = run(tmp_path / "b.csv")
    assert a == b
    rows = csv_a.strip().splitlines()
    assert rows[0].split(",") == list(METRIC_COLUMNS)
    assert [int(r.split(",")[0]) for r in rows[1:]] == [0, 2, 4]
    strip = lambda text: [r.rsplit(",", 1)[0] for r in text.splitlines()]
    assert strip(csv_a) == strip(csv_b)  # identical apart from wall-clock time


def test_moving_average_example():
    assert moving_average([1, 2, 3, 4, 5], 2) == [1.0, 1.5, 2.5, 3.5, 4.5]
    assert moving_average([], 3) == []


# -- synthetic domains ---------------------------------------------------------------------

def test_synthetic_is_deterministic_and_in_range():
    spec = SyntheticDomainSpec(seed=9)
    a = synth_sample(spec, 4, "x")
    assert a.shape == (4, 3, 32, 32) and a.dtype == torch.float32
    assert torch.equal(a, synth_sample(spec, 4, "x"))
    assert a.min() >= 0 and a.max() <= 1
    assert not torch.equal(a, synth_sample(SyntheticDomainSpec(seed=10), 4, "x"))
    assert torch.equal(synth_sample(spec, 2, "y", start=2), synth_sample(spec, 4, "y")[2:])


def test_domains_share_geometry_but_not_palette():
    spec = SyntheticDomainSpec(seed=2)
    x, gx = synth_sample(spec, 8, "x", with_geometry=True)
    y, gy = synth_sample(spec, 8, "y", with_geometry=True)
    assert gx == gy
    # the background pixel sits in the domain's hue band
    for img, band in ((x, (0.92, 0.15)), (y, (0.45, 0.68))):
        for i in range(8):
            hue = rgb_to_hsv(img[i, :, 0, 0].numpy())[0]
            hue_ok = (hue >= band[0] or hue <= band[1]) if band[0] > band[1] else band[0] <= hue <= band[1]
            if not any(_covers_corner(s) for s in gx[i]):
                assert hue_ok, (i, hue)


def _covers_corner(shape, p=0.5):
    if shape["kind"] == "circle":
        return (p - shape["cy"]) ** 2 + (p - shape["cx"]) ** 2 <= shape["r"] ** 2
    return abs(p - shape["cy"]) <= shape["hh"] and abs(p - shape["cx"]) <= shape["hw"]


def test_domain_index():
    assert domain_index("X") == 0 and domain_index("y") == 1 and domain_index(1) == 1
    for bad in ("z", 2, -1):
        with pytest.raises(ValueError):
            domain_index(bad)


def test_unpaired_stream_is_seeded():
    spec = SyntheticDomainSpec(seed=1, size=16)
    a = UnpairedStream(spec, 3, pool=32, seed=4)
    b = UnpairedStream(spec, 3, pool=32, seed=4)
    for _ in range(3):
        xa, ya = a.next()
        xb, yb = b.next()
        assert torch.equal(xa, xb) and torch.equal(ya, yb)
    assert xa.shape == (3, 3, 16, 16)
    assert np.isfinite(ya.numpy()).all()
