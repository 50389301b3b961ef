"""Deformation quantization of Klein-Gordon fields on truncated mode spaces."""
