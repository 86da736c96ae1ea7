"""Stripe features, blending, bounded noise fields, and mark reproducibility."""

import json

import numpy as np
import pytest

from markaudit.img import load_image, save_image
from markaudit.marking import (
    MarkingError,
    MarkSpec,
    PALETTE,
    PerlinParams,
    PerlinRandom,
    StripePattern,
    blend,
    gen_stripe_feature,
    inject_perlin,
    manifest_dict,
    mark,
    perlin_field,
    render_stripes,
)

DELTA = 8 / 255


def test_stripe_feature_deterministic():
    p1, img1 = gen_stripe_feature(99, 24, 48)
    p2, img2 = gen_stripe_feature(99, 24, 48)
    assert p1 == p2
    assert np.array_equal(img1, img2)
    p3, _ = gen_stripe_feature(100, 24, 48)
    assert p1 != p3


def test_stripe_equal_partition_width_32():
    pattern, img = gen_stripe_feature(5, 4, 32)
    for i, color in enumerate(pattern.colors):
        band = img[:, 2 * i : 2 * i + 2, :]
        assert np.all(band == PALETTE[color])


def test_stripe_remainder_goes_to_last_band():
    pattern = StripePattern(tuple(range(11)) + (0, 1, 2, 3, 4))
    img = render_stripes(pattern, 2, 37)  # 37 = 16*2 + 5
    assert np.all(img[:, 30:37, :] == PALETTE[pattern.colors[15]])


def test_stripe_width_too_small():
    with pytest.raises(MarkingError):
        gen_stripe_feature(1, 8, 15)


def test_stripe_patterns_do_not_collide_over_many_seeds():
    seen = set()
    for seed in range(10_000):
        pattern, _ = gen_stripe_feature(seed, 1, 16)
        seen.add(pattern.colors)
    assert len(seen) == 10_000


def test_stripe_pattern_validation():
    with pytest.raises(MarkingError):
        StripePattern((0,) * 15)
    with pytest.raises(MarkingError):
        StripePattern((0,) * 15 + (11,))


def test_blend_arithmetic():
    x = np.full((4, 20, 3), 0.5)
    ood = np.ones((4, 20, 3))
    out = blend(x, ood, 0.7)
    assert np.allclose(out, 0.65, atol=1e-12)
    assert np.array_equal(blend(x, ood, 1.0), x)
    assert np.array_equal(blend(x, ood, 0.0), ood)
    with pytest.raises(MarkingError):
        blend(x, np.ones((4, 21, 3)), 0.5)
    with pytest.raises(MarkingError):
        blend(x, ood, 1.5)


def test_blend_affine_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.uniform(0, 1, (8, 16, 3))
        ood = rng.uniform(0, 1, (8, 16, 3))
        m = float(rng.uniform(0, 1))
        lhs = blend(x, ood, m) - ood
        rhs = m * (x - ood)
        assert np.abs(lhs - rhs).max() <= 1e-6


def test_perlin_zero_at_origin():
    rng = np.random.default_rng(1)
    for _ in range(10):
        params = PerlinParams(
            lambda_x=float(rng.uniform(10, 180)),
            lambda_y=float(rng.uniform(10, 180)),
            omega=int(rng.integers(1, 5)),
            phi_sine=float(rng.uniform(4, 32)),
            delta=DELTA,
        )
        field = perlin_field(params, int(rng.integers(2**63)), 5, 5)
        assert field[0, 0] == 0.0


def test_perlin_bounded_and_deterministic():
    params = PerlinParams(lambda_x=25, lambda_y=60, omega=4, phi_sine=12, delta=DELTA)
    f1 = perlin_field(params, 77, 64, 64)
    f2 = perlin_field(params, 77, 64, 64)
    assert np.array_equal(f1, f2)
    assert np.abs(f1).max() <= 1.0
    assert not np.array_equal(f1, perlin_field(params, 78, 64, 64))


def test_perlin_param_validation():
    with pytest.raises(MarkingError):
        PerlinParams(lambda_x=-1, lambda_y=10, omega=1, phi_sine=4, delta=DELTA)
    with pytest.raises(MarkingError):
        PerlinParams(lambda_x=10, lambda_y=10, omega=9, phi_sine=4, delta=DELTA)
    with pytest.raises(MarkingError):
        PerlinParams(lambda_x=10, lambda_y=10, omega=1, phi_sine=4, delta=0.0)
    with pytest.raises(MarkingError):
        PerlinRandom(delta=1.5)


def test_inject_perlin_linf_budget():
    params = PerlinParams(lambda_x=20, lambda_y=20, omega=2, phi_sine=8, delta=DELTA)
    x = np.full((32, 32, 3), 0.5)
    out = inject_perlin(x, params, 3)
    assert np.abs(out - x).max() <= DELTA
    assert out.min() >= 0.5 - DELTA and out.max() <= 0.5 + DELTA

    ones = np.ones((32, 32, 3))
    clamped = inject_perlin(ones, params, 3)
    assert clamped.max() == 1.0
    assert clamped.min() >= 1.0 - DELTA
    field = perlin_field(params, 3, 32, 32)
    assert np.all(clamped[field > 0] == 1.0)


def test_mark_noop_composition():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, (16, 16, 3))
    spec = MarkSpec(blend_m=1.0, stripe_seed=4, perlin=None, master_seed=9)
    out, resolved = mark(x, spec, "id0")
    assert np.array_equal(out, x)
    assert out is not x
    assert not resolved.blend_applied
    assert resolved.perlin is None


def test_mark_default_mse_bound():
    rng = np.random.default_rng(3)
    spec = MarkSpec(blend_m=0.7, stripe_seed=11, perlin=PerlinRandom(DELTA), master_seed=21)
    for i in range(10):
        x = rng.uniform(0, 1, (32, 32, 3))
        out, _ = mark(x, spec, f"img{i}")
        diff = out - x
        assert float(np.mean(diff * diff)) <= 0.12


def test_mark_distinct_fields_per_image_id():
    x = np.full((32, 32, 3), 0.5)
    spec = MarkSpec(blend_m=1.0, perlin=PerlinRandom(DELTA), master_seed=33)
    outputs = [mark(x, spec, f"img{i}")[0] for i in range(20)]
    seeds = {mark(x, spec, f"img{i}")[1].seed for i in range(20)}
    assert len(seeds) == 20
    for i in range(20):
        for j in range(i + 1, 20):
            assert not np.array_equal(outputs[i], outputs[j])


def test_mark_deterministic():
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (20, 20, 3))
    spec = MarkSpec(blend_m=0.7, stripe_seed=8, perlin=PerlinRandom(DELTA), master_seed=5)
    out1, res1 = mark(x, spec, "a/b")
    out2, res2 = mark(x, spec, "a/b")
    assert np.array_equal(out1, out2)
    assert res1 == res2


def test_mark_with_ood_image_reference(tmp_path):
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, (16, 16, 3))
    _, feature = gen_stripe_feature(70, 16, 16)
    path = str(tmp_path / "feature.png")
    save_image(feature, path)
    spec = MarkSpec(blend_m=0.7, ood_image=path, perlin=None, master_seed=0)
    out, resolved = mark(x, spec, "z")
    assert resolved.blend_applied
    # Oracle uses the PNG-quantized feature, exactly what mark() loads.
    assert np.array_equal(out, blend(x, load_image(path), 0.7))

    missing = MarkSpec(blend_m=0.7, ood_image=str(tmp_path / "nope.png"), perlin=None)
    with pytest.raises(MarkingError):
        mark(x, missing, "z")

    wrong_dims = MarkSpec(blend_m=0.7, ood_image=path, perlin=None)
    with pytest.raises(MarkingError):
        mark(rng.uniform(0, 1, (8, 16, 3)), wrong_dims, "z")


def test_mark_ablation_flags():
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 1, (16, 16, 3))
    spec = MarkSpec(blend_m=0.7, stripe_seed=2, perlin=PerlinRandom(DELTA), master_seed=1)
    blend_only, r1 = mark(x, spec, "q", do_noise=False)
    assert r1.blend_applied and r1.perlin is None
    noise_only, r2 = mark(x, spec, "q", do_blend=False)
    assert not r2.blend_applied and r2.perlin is not None
    assert np.abs(noise_only - x).max() <= DELTA
    untouched, r3 = mark(x, spec, "q", do_blend=False, do_noise=False)
    assert np.array_equal(untouched, x)


def test_markspec_canonical_json_round_trip():
    specs = [
        MarkSpec(blend_m=0.7, stripe_seed=12, perlin=PerlinRandom(DELTA), master_seed=99),
        MarkSpec(blend_m=0.5, stripe=StripePattern(tuple([3] * 16)), perlin=None, master_seed=1),
        MarkSpec(
            blend_m=1.0,
            ood_image="x.png",
            perlin=PerlinParams(lambda_x=11, lambda_y=12, omega=2, phi_sine=6, delta=DELTA),
        ),
    ]
    for spec in specs:
        text = spec.to_json()
        assert MarkSpec.from_json(text) == spec
        assert MarkSpec.from_json(MarkSpec.from_json(text).to_json()) == spec
        # canonical: sorted keys, stable bytes
        assert text == MarkSpec.from_json(text).to_json()
        assert json.dumps(json.loads(text), sort_keys=True, separators=(",", ":")) == text


def test_markspec_validation():
    with pytest.raises(MarkingError):
        MarkSpec(blend_m=1.2)
    with pytest.raises(MarkingError):
        MarkSpec(blend_m=0.5, stripe_seed=1, ood_image="a.png")


def test_manifest_counts_entries():
    rng = np.random.default_rng(7)
    spec = MarkSpec(blend_m=0.7, stripe_seed=3, perlin=PerlinRandom(DELTA), master_seed=17)
    resolved = [mark(rng.uniform(0, 1, (16, 16, 3)), spec, f"i{j}")[1] for j in range(5)]
    manifest = manifest_dict(spec, resolved)
    assert len(manifest["images"]) == 5
    assert manifest["spec"] == spec.to_dict()


def test_mark_spec_with_explicit_pattern_matches_seeded_pattern():
    pattern, _ = gen_stripe_feature(123, 16, 16)
    x = np.random.default_rng(8).uniform(0, 1, (16, 16, 3))
    by_seed = MarkSpec(blend_m=0.7, stripe_seed=123, perlin=None, master_seed=0)
    by_pattern = MarkSpec(blend_m=0.7, stripe=pattern, perlin=None, master_seed=0)
    out1, r1 = mark(x, by_seed, "s")
    out2, r2 = mark(x, by_pattern, "s")
    assert np.array_equal(out1, out2)
    assert r1.stripe_colors == r2.stripe_colors == pattern.colors
