"""Few-shot action recognition with spatio-temporal frame-tuple enhancement."""

from ._soap import (
    SoapNet,
    classify,
    evaluate,
    generate_dataset,
    gradcheck,
    loss_ce,
    position_embedding,
    reverse_order,
    sliding_windows,
    train,
)

__all__ = [
    "SoapNet",
    "classify",
    "evaluate",
    "generate_dataset",
    "gradcheck",
    "loss_ce",
    "position_embedding",
    "reverse_order",
    "sliding_windows",
    "train",
]
