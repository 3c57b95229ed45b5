"""sideseg: semi-automatic semantic segmentation driven by user side information.

A small segmentation engine that fuses image features with sparse user
annotations (brush strokes or tagged points). Annotations are embedded into
a shared feature space, spread spatially by a learnable diffusion operator,
and concatenated into the backbone at quarter resolution; residual blocks
behind the fusion point are gated on and off per input by tiny relevance
networks trained toward a target execution rate.
"""

__version__ = "0.1.0"
