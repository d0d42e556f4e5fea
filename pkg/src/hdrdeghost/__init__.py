"""Ghost-free HDR fusion of multi-exposure LDR triplets, with a hand-written
reverse-mode autodiff core, trainable at desk scale on CPU."""

__version__ = "0.1.0"
