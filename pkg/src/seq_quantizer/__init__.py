"""Supervised-encoding quantizer: supervised encoder + k-means codebook + frozen-encoder decoder."""
