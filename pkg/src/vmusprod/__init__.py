"""Video background music generation: symbolic annotation, compound-token
codec, video controller features, staged transformers and evaluation."""

__version__ = "0.1.0"
