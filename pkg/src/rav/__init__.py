"""Reverse pass-through face pipeline.

Subpackages cover VR-camera image degradation simulation, eye/lower-face
frontalization, reference-guided 2D restoration, one-shot tri-plane head
avatars, evaluation metrics and a latency benchmark harness.
"""

__version__ = "0.1.0"
