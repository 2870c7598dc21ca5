"""Variance-gated fusion for image-guided retrieval."""

from figrot._figrot import (
    FigrotError,
    average_precision_at_k,
    cli,
    clip_filter,
    encode,
    gen_synthetic,
    infonce,
    mask_size,
    precision_at_k,
    rank1,
    read_store,
    recall_at_k,
    search_topk,
    triplet_loss,
    write_store,
)
from figrot.fige import EMPTY_TEXT_ID, decode_store, encode_store, load_store, save_store

__all__ = [
    "EMPTY_TEXT_ID",
    "FigrotError",
    "average_precision_at_k",
    "cli",
    "clip_filter",
    "decode_store",
    "encode",
    "encode_store",
    "gen_synthetic",
    "infonce",
    "load_store",
    "mask_size",
    "precision_at_k",
    "rank1",
    "read_store",
    "recall_at_k",
    "save_store",
    "search_topk",
    "triplet_loss",
    "write_store",
]
