"""Model-weight steganography and steganalysis toolkit.

Embeds byte payloads in the low-order bytes of f32 weights inside MTAR
model containers, plans layer selection by capacity and neuron coverage,
grafts an input-conditioned trigger branch, extracts payloads with MD5
integrity checks, and scans archives for structural and statistical
evidence of all of the above. Extraction only ever writes bytes to disk.
"""

__version__ = "0.1.0"
