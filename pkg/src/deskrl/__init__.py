"""Desk-scale prolonged GRPO training lab."""
