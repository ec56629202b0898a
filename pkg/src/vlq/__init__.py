"""Vertical-layered quantized networks.

One set of stored weights serves every precision from the 2-bit basic layer
up to the full width: a 2-bit basic layer plus 1-bit enhance planes, an
integer inference path, a progressive file format and once-for-all
quantization-aware training.
"""

__version__ = "0.1.0"
