"""latentscope: unsupervised tool-presence detection from video frame latents."""

__version__ = "0.1.0"
