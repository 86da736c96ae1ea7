"""Outlier-feature generation, image blending and bounded procedural noise.

Marking an image is a two-step edit: blend it with an out-of-distribution
stripe feature, then add a low-amplitude sine-banded gradient-noise field
under an L-infinity budget. Both steps are driven by explicit seeds and a
MarkSpec records everything needed to reproduce a marking bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .img import load_image, validate_image
from .prng import SEED_RULE, derive_seed, make_rng

# 11 common colors; any stripe pattern is 16 indices into this table,
# giving an 11**16 pattern space. Bump the version if the values change.
PALETTE_VERSION = 1
PALETTE_NAMES = (
    "red", "green", "blue", "yellow", "cyan", "magenta",
    "orange", "purple", "white", "black", "gray",
)
PALETTE = np.array(
    [
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (0.0, 0.0, 1.0),
        (1.0, 1.0, 0.0),
        (0.0, 1.0, 1.0),
        (1.0, 0.0, 1.0),
        (1.0, 0.5, 0.0),
        (0.5, 0.0, 0.5),
        (1.0, 1.0, 1.0),
        (0.0, 0.0, 0.0),
        (0.5, 0.5, 0.5),
    ],
    dtype=np.float64,
)

NUM_STRIPES = 16
DEFAULT_BLEND_M = 0.7
DEFAULT_NOISE_DELTA = 8.0 / 255.0

# Per-image draw ranges for randomized noise parameters.
PERLIN_LAMBDA_RANGE = (10.0, 180.0)
PERLIN_OCTAVE_CHOICES = (1, 2, 3, 4)
PERLIN_PHI_RANGE = (4.0, 32.0)

MAX_OCTAVES = 8


class MarkingError(ValueError):
    """Invalid marking specification or unsatisfiable marking request."""


@dataclass(frozen=True)
class StripePattern:
    """16 palette indices rendered as equal-width vertical bands."""

    colors: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.colors) != NUM_STRIPES:
            raise MarkingError(f"stripe pattern needs {NUM_STRIPES} colors")
        if any(not (0 <= c < len(PALETTE)) for c in self.colors):
            raise MarkingError("stripe color index out of palette range")


@dataclass(frozen=True)
class PerlinParams:
    """Concrete noise-field parameters: wavelengths, octaves, sine period, budget."""

    lambda_x: float
    lambda_y: float
    omega: int
    phi_sine: float
    delta: float

    def __post_init__(self) -> None:
        if self.lambda_x <= 0 or self.lambda_y <= 0:
            raise MarkingError("wavelengths must be positive")
        if not (1 <= int(self.omega) <= MAX_OCTAVES):
            raise MarkingError(f"octave count must be in [1, {MAX_OCTAVES}]")
        if self.phi_sine <= 0:
            raise MarkingError("sine periodicity must be positive")
        if not (0.0 < self.delta <= 1.0):
            raise MarkingError("noise budget delta must be in (0, 1]")


@dataclass(frozen=True)
class PerlinRandom:
    """Directive to draw fresh noise parameters per image from its seed stream."""

    delta: float = DEFAULT_NOISE_DELTA

    def __post_init__(self) -> None:
        if not (0.0 < self.delta <= 1.0):
            raise MarkingError("noise budget delta must be in (0, 1]")


@dataclass(frozen=True)
class MarkSpec:
    """Full record of a marking decision.

    The OOD feature comes from at most one of: an explicit stripe pattern,
    a stripe seed (pattern generated deterministically), or a reference
    image on disk. With none of them, the blending step is skipped.
    `perlin` is either concrete parameters (shared by all images), a
    PerlinRandom directive (fresh draws per image), or None (step skipped).
    """

    blend_m: float = DEFAULT_BLEND_M
    stripe: Optional[StripePattern] = None
    stripe_seed: Optional[int] = None
    ood_image: Optional[str] = None
    perlin: Union[PerlinParams, PerlinRandom, None] = PerlinRandom()
    master_seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.blend_m <= 1.0):
            raise MarkingError("blend ratio m must be in [0, 1]")
        sources = [s for s in (self.stripe, self.stripe_seed, self.ood_image) if s is not None]
        if len(sources) > 1:
            raise MarkingError("at most one OOD feature source may be set")

    @property
    def has_ood_source(self) -> bool:
        return self.stripe is not None or self.stripe_seed is not None or self.ood_image is not None

    def to_dict(self) -> dict:
        if self.stripe is not None:
            stripe: Optional[dict] = {"colors": [int(c) for c in self.stripe.colors]}
        elif self.stripe_seed is not None:
            stripe = {"seed": int(self.stripe_seed)}
        else:
            stripe = None
        if isinstance(self.perlin, PerlinParams):
            perlin: Optional[dict] = {"mode": "fixed", **_perlin_params_dict(self.perlin)}
        elif isinstance(self.perlin, PerlinRandom):
            perlin = {"mode": "random", "delta": float(self.perlin.delta)}
        else:
            perlin = None
        return {
            "palette_version": PALETTE_VERSION,
            "blend_m": float(self.blend_m),
            "stripe": stripe,
            "ood_image": self.ood_image,
            "perlin": perlin,
            "master_seed": int(self.master_seed),
            "per_image_seed_rule": SEED_RULE,
        }

    @staticmethod
    def from_dict(d: dict) -> "MarkSpec":
        if d.get("palette_version", PALETTE_VERSION) != PALETTE_VERSION:
            raise MarkingError(f"unknown palette version {d.get('palette_version')}")
        if d.get("per_image_seed_rule", SEED_RULE) != SEED_RULE:
            raise MarkingError("unknown per-image seed rule")
        stripe_field = d.get("stripe")
        stripe = stripe_seed = None
        if stripe_field is not None:
            if "colors" in stripe_field:
                stripe = StripePattern(tuple(int(c) for c in stripe_field["colors"]))
            elif "seed" in stripe_field:
                stripe_seed = int(stripe_field["seed"])
            else:
                raise MarkingError("stripe field needs 'colors' or 'seed'")
        perlin_field_ = d.get("perlin")
        perlin: Union[PerlinParams, PerlinRandom, None]
        if perlin_field_ is None:
            perlin = None
        elif perlin_field_.get("mode") == "random":
            perlin = PerlinRandom(delta=float(perlin_field_["delta"]))
        elif perlin_field_.get("mode") == "fixed":
            perlin = PerlinParams(
                lambda_x=float(perlin_field_["lambda_x"]),
                lambda_y=float(perlin_field_["lambda_y"]),
                omega=int(perlin_field_["omega"]),
                phi_sine=float(perlin_field_["phi_sine"]),
                delta=float(perlin_field_["delta"]),
            )
        else:
            raise MarkingError("perlin field needs mode 'fixed' or 'random'")
        return MarkSpec(
            blend_m=float(d["blend_m"]),
            stripe=stripe,
            stripe_seed=stripe_seed,
            ood_image=d.get("ood_image"),
            perlin=perlin,
            master_seed=int(d.get("master_seed", 0)),
        )

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @staticmethod
    def from_json(text: str) -> "MarkSpec":
        return MarkSpec.from_dict(json.loads(text))


@dataclass(frozen=True)
class ResolvedMark:
    """What actually happened to one image: derived seed and realized steps."""

    image_id: str
    seed: int
    blend_applied: bool
    stripe_colors: Optional[tuple[int, ...]]
    perlin: Optional[PerlinParams]

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "seed": int(self.seed),
            "blend_applied": self.blend_applied,
            "stripe_colors": list(self.stripe_colors) if self.stripe_colors is not None else None,
            "perlin": _perlin_params_dict(self.perlin) if self.perlin is not None else None,
        }


def _perlin_params_dict(params: PerlinParams) -> dict:
    return {
        "lambda_x": float(params.lambda_x),
        "lambda_y": float(params.lambda_y),
        "omega": int(params.omega),
        "phi_sine": float(params.phi_sine),
        "delta": float(params.delta),
    }


def canonical_json(obj) -> str:
    """Stable JSON encoding: sorted keys, compact separators, repr floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def render_stripes(pattern: StripePattern, height: int, width: int) -> np.ndarray:
    """Render 16 vertical bands; the last band absorbs width % 16 columns."""
    if width < NUM_STRIPES:
        raise MarkingError(f"width must be >= {NUM_STRIPES}")
    if height < 1:
        raise MarkingError("height must be positive")
    base = width // NUM_STRIPES
    out = np.empty((height, width, 3), dtype=np.float64)
    for i, color_idx in enumerate(pattern.colors):
        lo = i * base
        hi = (i + 1) * base if i < NUM_STRIPES - 1 else width
        out[:, lo:hi, :] = PALETTE[color_idx]
    return out


def gen_stripe_feature(seed: int, height: int, width: int) -> tuple[StripePattern, np.ndarray]:
    """Draw a random stripe pattern from `seed` and render it at (height, width)."""
    rng = make_rng(seed)
    pattern = StripePattern(tuple(int(c) for c in rng.integers(0, len(PALETTE), NUM_STRIPES)))
    return pattern, render_stripes(pattern, height, width)


def blend(x: np.ndarray, x_ood: np.ndarray, m: float) -> np.ndarray:
    """Convex combination m*x + (1-m)*x_ood, clipped against float round-off."""
    if x.shape != x_ood.shape:
        raise MarkingError(f"dimension mismatch: {x.shape} vs {x_ood.shape}")
    if not (0.0 <= m <= 1.0):
        raise MarkingError("blend ratio m must be in [0, 1]")
    if m == 1.0:
        return x.copy()
    if m == 0.0:
        return x_ood.copy()
    return np.clip(m * x + (1.0 - m) * x_ood, 0.0, 1.0)


def _fade(t: np.ndarray) -> np.ndarray:
    # Quintic fade 6t^5 - 15t^4 + 10t^3; zero value/slope at lattice points.
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


_SQ2 = np.sqrt(0.5)
_GRADS = np.array(
    [
        (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0),
        (_SQ2, _SQ2), (-_SQ2, _SQ2), (_SQ2, -_SQ2), (-_SQ2, -_SQ2),
    ],
    dtype=np.float64,
)


def _gradient_noise(perm: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Classic 2D lattice gradient noise; exactly zero on lattice points."""
    xi = np.floor(xs).astype(np.int64)
    yi = np.floor(ys).astype(np.int64)
    xf = xs - xi
    yf = ys - yi
    xi &= 255
    yi &= 255

    def corner(dx: int, dy: int, ox: np.ndarray, oy: np.ndarray) -> np.ndarray:
        g = _GRADS[perm[perm[xi + dx] + yi + dy] & 7]
        return g[..., 0] * ox + g[..., 1] * oy

    n00 = corner(0, 0, xf, yf)
    n10 = corner(1, 0, xf - 1.0, yf)
    n01 = corner(0, 1, xf, yf - 1.0)
    n11 = corner(1, 1, xf - 1.0, yf - 1.0)
    u = _fade(xf)
    v = _fade(yf)
    top = n00 + u * (n10 - n00)
    bottom = n01 + u * (n11 - n01)
    return top + v * (bottom - top)


def perlin_field(params: PerlinParams, seed: int, height: int, width: int) -> np.ndarray:
    """Sine-banded octave gradient noise, shape (height, width), values in [-1, 1].

    Octave n samples the base noise at (x*2^(n-1)/lambda_x, y*2^(n-1)/lambda_y)
    with unit gain; the octave sum is mapped through sin(s * 2*pi*phi_sine).
    Deterministic given (params, seed, dims).
    """
    if height < 1 or width < 1:
        raise MarkingError("field dimensions must be positive")
    rng = make_rng(seed)
    perm = rng.permutation(256)
    perm = np.concatenate([perm, perm])
    cols = np.arange(width, dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)
    xs_base, ys_base = np.meshgrid(cols, rows)
    total = np.zeros((height, width), dtype=np.float64)
    for n in range(1, int(params.omega) + 1):
        freq = 2.0 ** (n - 1)
        total += _gradient_noise(perm, xs_base * (freq / params.lambda_x), ys_base * (freq / params.lambda_y))
    return np.sin(total * (2.0 * np.pi * params.phi_sine))


def inject_perlin(x: np.ndarray, params: PerlinParams, seed: int) -> np.ndarray:
    """Add the same noise field to all channels; |change before clamping| <= delta."""
    field = perlin_field(params, seed, x.shape[0], x.shape[1])
    return np.clip(x + params.delta * field[:, :, None], 0.0, 1.0)


def draw_perlin_params(directive: PerlinRandom, rng: np.random.Generator) -> PerlinParams:
    """Draw concrete noise parameters from a per-image stream."""
    lam_lo, lam_hi = PERLIN_LAMBDA_RANGE
    phi_lo, phi_hi = PERLIN_PHI_RANGE
    return PerlinParams(
        lambda_x=float(rng.uniform(lam_lo, lam_hi)),
        lambda_y=float(rng.uniform(lam_lo, lam_hi)),
        omega=int(rng.choice(PERLIN_OCTAVE_CHOICES)),
        phi_sine=float(rng.uniform(phi_lo, phi_hi)),
        delta=directive.delta,
    )


def _resolve_ood_feature(spec: MarkSpec, height: int, width: int) -> tuple[np.ndarray, Optional[tuple[int, ...]]]:
    if spec.stripe is not None:
        return render_stripes(spec.stripe, height, width), spec.stripe.colors
    if spec.stripe_seed is not None:
        pattern, image = gen_stripe_feature(spec.stripe_seed, height, width)
        return image, pattern.colors
    if spec.ood_image is not None:
        try:
            feature = load_image(spec.ood_image)
        except Exception as exc:
            raise MarkingError(f"missing OOD reference {spec.ood_image!r}: {exc}") from exc
        if feature.shape != (height, width, 3):
            raise MarkingError(
                f"OOD reference {spec.ood_image!r} is {feature.shape[:2]}, image is {(height, width)}"
            )
        return feature, None
    raise MarkingError("mark spec has no OOD feature source")


def mark(
    x: np.ndarray,
    spec: MarkSpec,
    image_id: str,
    *,
    do_blend: bool = True,
    do_noise: bool = True,
) -> tuple[np.ndarray, ResolvedMark]:
    """Apply the spec's marking steps to one image.

    The per-image seed is derived from (spec.master_seed, image_id); the
    noise parameter stream and the field seed are labeled substreams of it,
    so adding steps can never shift existing draws. Steps can be disabled
    for ablation runs via `do_blend` / `do_noise`.
    """
    validate_image(x)
    height, width = x.shape[:2]
    per_seed = derive_seed(spec.master_seed, image_id)

    apply_blend = do_blend and spec.has_ood_source and spec.blend_m < 1.0
    out = x
    stripe_colors: Optional[tuple[int, ...]] = None
    if apply_blend:
        feature, stripe_colors = _resolve_ood_feature(spec, height, width)
        out = blend(out, feature, spec.blend_m)

    params: Optional[PerlinParams] = None
    if do_noise and spec.perlin is not None:
        if isinstance(spec.perlin, PerlinRandom):
            params = draw_perlin_params(spec.perlin, make_rng(derive_seed(per_seed, "perlin-params")))
        else:
            params = spec.perlin
        out = inject_perlin(out, params, derive_seed(per_seed, "perlin-field"))

    if out is x:
        out = x.copy()
    return out, ResolvedMark(
        image_id=image_id,
        seed=per_seed,
        blend_applied=apply_blend,
        stripe_colors=stripe_colors,
        perlin=params,
    )


def manifest_dict(spec: MarkSpec, resolved: list[ResolvedMark], ablation: str = "full") -> dict:
    """Manifest for one marking run: the spec plus every per-image resolution."""
    return {
        "format": "mark-manifest/1",
        "ablation": ablation,
        "spec": spec.to_dict(),
        "images": {r.image_id: r.to_dict() for r in resolved},
    }
