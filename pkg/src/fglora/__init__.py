"""Few-shot task-incremental continual learning with a frozen 3-D UNet and per-task LoRA adapters."""

__version__ = "0.1.0"
