"""Teacher/student knowledge distillation for online early action prediction and detection.

The public estimators are :class:`OfflineTeacher`, :class:`OnlineStudent` and
:class:`OKDADDetector`; the streaming runtime lives in :mod:`okdad.runtime`.
"""
from .estimators import OfflineTeacher, OKDADDetector, OnlineStudent
from .sampling import KeypointCropper

__all__ = ["KeypointCropper", "OfflineTeacher", "OKDADDetector", "OnlineStudent"]
__version__ = "0.1.0"
