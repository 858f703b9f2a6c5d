"""Utility modules for PestVL-Net."""
