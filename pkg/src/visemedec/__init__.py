"""Masked-denoising transcription of a synthetic viseme channel.

A fixed-length token canvas is progressively unmasked by a small
bidirectional transformer conditioned on a noisy viseme-class frame
sequence.  Decoding is either implicit (the model emits its own EOS/PAD
layout), pinned to a known transcript length, or length-guided: a separate
length predictor proposes a window of candidate lengths which are decoded
in parallel and reranked jointly by decoder confidence, length posterior
and iteration count.
"""

__version__ = "0.1.0"
