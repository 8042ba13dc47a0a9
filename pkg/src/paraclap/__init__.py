"""paraclap: desk-scale toolkit for paraphrase-robust audio-text retrieval."""

__version__ = "0.1.0"
