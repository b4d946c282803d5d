"""Desk-scale 3D body shape-and-pose estimation toolkit.

Pure-numpy float64 numerics with a reverse-mode gradient tape, an
SMPL-style linear-blend-skinning body model, decoupled / multi-scale /
joint-aware attention operators, a hierarchical refinement network, and
a FLOP-accounting bench harness with a CLI front end.
"""

__version__ = "0.1.0"
