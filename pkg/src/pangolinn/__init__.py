"""Padding-safe sequence encoder blocks, reproductions of three real padding
bugs, and a property-test harness that catches them."""

from .bugs import BugSet, VARIANTS, build_encoder_with_bugs
from .conformer import (
    ConformerConfig,
    DESK_CONFIG,
    PAPER_CONFIG,
    ParameterSet,
    causal_attention_layer,
    encoder,
    encoder_length_transfer,
    init_parameters,
    rel_mhsa,
)
from .ctc import CtcDistribution, ctc_compress, ctc_project, run_length_oracle
from .harness import (
    CheckConfig,
    CheckReport,
    ModuleUnderTest,
    batch_size_sweep,
    causality_check,
    mask_preservation_check,
    padding_invariance_check,
)
from .numerics import Rng, SequenceBatch, apply_mask, make_batch, unbatch

__version__ = "0.1.0"

__all__ = [
    "BugSet",
    "VARIANTS",
    "build_encoder_with_bugs",
    "ConformerConfig",
    "DESK_CONFIG",
    "PAPER_CONFIG",
    "ParameterSet",
    "causal_attention_layer",
    "encoder",
    "encoder_length_transfer",
    "init_parameters",
    "rel_mhsa",
    "CtcDistribution",
    "ctc_compress",
    "ctc_project",
    "run_length_oracle",
    "CheckConfig",
    "CheckReport",
    "ModuleUnderTest",
    "batch_size_sweep",
    "causality_check",
    "mask_preservation_check",
    "padding_invariance_check",
    "Rng",
    "SequenceBatch",
    "apply_mask",
    "make_batch",
    "unbatch",
    "__version__",
]
