"""Offline model construction: pair scheduling, reconstruction, compression, alignment and storage."""
