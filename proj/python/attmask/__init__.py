"""Attention-guided masked image modeling at desk scale."""

from ._attmask import (
    MaskVector,
    attmask_high,
    attmask_hint,
    attmask_low,
    blockwise_mask,
    cls_attention,
    config_hash,
    dump_config,
    extract_features,
    knn_classify,
    load_amim,
    make_mask,
    make_synthetic,
    masked_count,
    pretrain,
    random_mask,
    strategies,
    write_amim,
)

__all__ = [
    "MaskVector",
    "attmask_high",
    "attmask_hint",
    "attmask_low",
    "blockwise_mask",
    "cls_attention",
    "config_hash",
    "dump_config",
    "extract_features",
    "knn_classify",
    "load_amim",
    "make_mask",
    "make_synthetic",
    "masked_count",
    "pretrain",
    "random_mask",
    "strategies",
    "write_amim",
]
