"""Bit-flip fault injection and range-restriction toolkit."""

from ._flipshield import (
    BoundsProfile,
    ConfigError,
    Detection,
    DimensionError,
    FaultPlan,
    FaultSite,
    FormatError,
    GtObject,
    MatchOutcome,
    Model,
    PairingError,
    ParseError,
    PlacementError,
    RangeError,
    TraceEntry,
    VersionError,
    ap50,
    bits_to_float,
    default_campaign_config,
    flip_bits,
    float_to_bits,
    generate_dataset,
    iou,
    ivmod,
    layerwise_sweep,
    match_detections,
    placement_ablation,
    profile_bounds,
    report_bundle,
    restrict_value,
    run_campaign,
    run_inference,
    sample_plan,
)

__all__ = [
    "BoundsProfile",
    "ConfigError",
    "Detection",
    "DimensionError",
    "FaultPlan",
    "FaultSite",
    "FormatError",
    "GtObject",
    "MatchOutcome",
    "Model",
    "PairingError",
    "ParseError",
    "PlacementError",
    "RangeError",
    "TraceEntry",
    "VersionError",
    "ap50",
    "bits_to_float",
    "default_campaign_config",
    "flip_bits",
    "float_to_bits",
    "generate_dataset",
    "iou",
    "ivmod",
    "layerwise_sweep",
    "match_detections",
    "placement_ablation",
    "profile_bounds",
    "report_bundle",
    "restrict_value",
    "run_campaign",
    "run_inference",
    "sample_plan",
]
