"""Fine-tuning robustness laboratory."""
