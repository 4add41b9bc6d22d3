"""Many-to-many multimodal summarization with two-way distillation and
vision-summary contrastive alignment, on a small numpy autodiff core."""

__version__ = "0.1.0"
