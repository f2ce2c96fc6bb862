"""Self-supervised super-resolution toolkit.

Pipeline: synthesize degraded training pairs, pretrain a low-resolution
reconstruction stack whose degradation embedding is scaled by a
quality-driven controller, then adapt a small SR model on unpaired
real low-resolution images with the pretrained stack frozen.
"""

__version__ = "0.1.0"
