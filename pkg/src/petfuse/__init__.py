"""petfuse: parameter-efficient multimodal training at desk scale."""

__version__ = "0.1.0"
