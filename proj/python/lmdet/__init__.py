"""Python surface of the detection-token pipeline.

The heavy lifting lives in the C++ extension; this package re-exports the
operations most useful from notebooks and scripts.
"""

from ._core import (
    LmdetError,
    box_to_center,
    box_to_corners,
    det_token_id,
    detokenize,
    evaluate,
    format_sample,
    generate_dataset,
    giou,
    giou_loss,
    gradcheck,
    hungarian_match,
    infer,
    iou,
    l1_box_loss,
    mask_to_box,
    tokenize,
    train,
    vocab_size,
)

__all__ = [
    "LmdetError",
    "box_to_center",
    "box_to_corners",
    "det_token_id",
    "detokenize",
    "evaluate",
    "format_sample",
    "generate_dataset",
    "giou",
    "giou_loss",
    "gradcheck",
    "hungarian_match",
    "infer",
    "iou",
    "l1_box_loss",
    "mask_to_box",
    "tokenize",
    "train",
    "vocab_size",
]
