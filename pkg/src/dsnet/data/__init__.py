"""Image/label codecs, dataset scanning and checkpoint persistence."""

from .checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .codecs import CodecError, decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_image, read_label, write_image, write_label
from .dataset import (
    IGNORE_INDEX,
    DatasetError,
    DatasetIndex,
    Sample,
    read_class_sidecar,
    resize_image,
    resize_label,
    resize_pair,
    scan_dataset,
    synthetic_samples,
    write_dataset,
)

__all__ = [
    "CheckpointError",
    "CodecError",
    "DatasetError",
    "DatasetIndex",
    "IGNORE_INDEX",
    "Sample",
    "decode_checkpoint",
    "decode_pgm",
    "decode_ppm",
    "encode_checkpoint",
    "encode_pgm",
    "encode_ppm",
    "load_checkpoint",
    "read_class_sidecar",
    "read_image",
    "read_label",
    "resize_image",
    "resize_label",
    "resize_pair",
    "save_checkpoint",
    "scan_dataset",
    "synthetic_samples",
    "write_dataset",
    "write_image",
    "write_label",
]
