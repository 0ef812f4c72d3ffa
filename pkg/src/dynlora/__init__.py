"""Dynamic LoRA adapters with pre-gated routing and fused per-token switching."""

__version__ = "0.1.0"
