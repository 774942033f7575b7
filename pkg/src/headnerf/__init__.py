"""Expression-controllable head radiance fields driven by a blendshape motion volume."""

__version__ = "0.1.0"
