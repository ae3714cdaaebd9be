"""codec_probe: quantify how speech attributes (content, identity, pitch,
loudness) are encoded in neural-audio-codec token streams.

Submodules:
  corpus      token corpus format, alignment, attribute binning
  synth       synthetic corpora with analytic ground truth
  assoc       co-occurrence statistics and association rankings
  projection  t-SNE of codebooks and utterance means, SVG/CSV emission
  mi          mutual-information estimation (plug-in oracle + variational)
  nn          tensors, reverse-mode autodiff, transformer layers, Adam
  ancogen     masked encoder-decoder token transformer
  metrics     pitch AAE, token accuracy, cosine similarity, purity
  cli         command-line entry point (codec-probe)
"""

__version__ = "0.1.0"
