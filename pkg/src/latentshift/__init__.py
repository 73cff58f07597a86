"""Hyperprior image codec with decoder-side latent shifting along entropy gradients."""

from .bitstream import Bitstream, FormatError
from .codec import CodecModel, decode, encode, encode_with_details, init_model, train
from .latent_shift import STEP_TABLE

__all__ = [
    "Bitstream",
    "CodecModel",
    "FormatError",
    "STEP_TABLE",
    "decode",
    "encode",
    "encode_with_details",
    "init_model",
    "train",
]
