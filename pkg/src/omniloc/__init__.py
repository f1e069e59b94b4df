"""Panoramic-feature indoor localization: descriptors, retrieval, aggregation."""
