"""Image data marking and set-based membership auditing toolkit."""

from .audit import (
    AuditOutcome,
    CalibrationSet,
    RocMetrics,
    UserLossSet,
    audit_user,
    cross_entropy_loss,
    derive_threshold,
    instance_audit,
    label_only_loss,
    logit_transform,
    roc_metrics,
)
from .img import load_image, mse, save_image, ssim
from .lab import Scenario, ToyModel, gen_synthetic, run_scenario, train
from .marking import (
    MarkSpec,
    PerlinParams,
    PerlinRandom,
    StripePattern,
    blend,
    gen_stripe_feature,
    inject_perlin,
    mark,
    perlin_field,
)

__version__ = "0.1.0"
