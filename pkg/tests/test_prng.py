"""Seed-derivation determinism and stream distinctness."""

import numpy as np

from markaudit.prng import derive_seed, fnv1a64, make_rng, splitmix64


def test_fnv1a64_known_vectors():
    # Published FNV-1a 64-bit test vectors.
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a64("foobar") == 0x85944171F73967E8


def test_splitmix64_known_sequence():
    # Reference splitmix64 outputs for starting state 1234567.
    state = 1234567
    expected = [
        6457827717110365317,
        3203168211198807973,
        9817491932198370423,
        4593380528125082431,
        16408922859458223821,
    ]
    golden = 0x9E3779B97F4A7C15
    for want in expected:
        assert splitmix64(state) == want
        state = (state + golden) & 0xFFFFFFFFFFFFFFFF


def test_derive_seed_deterministic_and_distinct():
    seeds = {derive_seed(42, f"image:{i}") for i in range(10_000)}
    assert len(seeds) == 10_000
    assert derive_seed(42, "image:0") == derive_seed(42, "image:0")
    assert derive_seed(42, "image:0") != derive_seed(43, "image:0")


def test_make_rng_reproducible_stream():
    a = make_rng(7).integers(0, 2**32, 100)
    b = make_rng(7).integers(0, 2**32, 100)
    assert np.array_equal(a, b)
