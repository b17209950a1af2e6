"""Noise-conditional kernel Stein sampling package."""

__all__ = []
