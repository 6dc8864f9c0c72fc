"""flowcast: normalizing-flow video prediction with an autoregressive latent prior."""

__version__ = "0.1.0"
