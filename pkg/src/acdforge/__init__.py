"""Raw-audio CNN toolchain.

Builds strided-convolution audio classifiers, trains them with
between-class mixing, compresses them by sparsification and channel
pruning, quantizes to int8, and emits a self-contained C inference
routine for microcontroller targets.
"""

__version__ = "0.1.0"
