"""Desk-scale vision-language single-object tracker.

Deterministic encoder stubs stand in for a pretrained joint image/text model;
everything downstream (description bags, instance-conditioned selection,
temporal text attention, text-modulated correlation, the prediction head, the
loss with hand-written gradients and one-pass evaluation) runs on numpy.
"""

__version__ = "0.1.0"

from .embedding import cosine_sim, l2_normalize, softmax  # noqa: E402
from .encoders import ImagePatch, StubBackend, encode_image, encode_text  # noqa: E402
from .geometry import BBox, iou  # noqa: E402

__all__ = ["BBox", "ImagePatch", "StubBackend", "cosine_sim", "encode_image", "encode_text", "iou",
           "l2_normalize", "softmax", "__version__"]
