"""Synthetic community polling about proposed data centers."""
