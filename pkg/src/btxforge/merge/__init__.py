"""
Fusion Branch-Train-MiX et adaptateurs LoRA.
"""

from btxforge.merge.btx import (
    CompatibilityReport,
    MergeManifest,
    MergePlan,
    check_compatibility,
    dense_equivalence,
    load_merge_manifest,
    merge_btx,
)
from btxforge.merge.lora import LoraAdapter, init_adapters, materialize_lora

__all__ = [
    "CompatibilityReport",
    "LoraAdapter",
    "MergeManifest",
    "MergePlan",
    "check_compatibility",
    "dense_equivalence",
    "init_adapters",
    "load_merge_manifest",
    "materialize_lora",
    "merge_btx",
]
