"""Quaternion deep-learning toolkit and the two-stage QSAM-Net rain-streak remover."""

from qsamnet.quaternion import Quaternion, hamilton, conjugate, modulus, encode_image, decode_image
from qsamnet.autograd import Tensor, Parameter, no_grad, grad_check
from qsamnet.model import NetConfig, QSAMNet, count_params

__all__ = [
    "Quaternion",
    "hamilton",
    "conjugate",
    "modulus",
    "encode_image",
    "decode_image",
    "Tensor",
    "Parameter",
    "no_grad",
    "grad_check",
    "NetConfig",
    "QSAMNet",
    "count_params",
]

__version__ = "0.1.0"
