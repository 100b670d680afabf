"""Coreference and hierarchy metrics, the edit-distance baseline and report rendering.

Submodules are imported directly (``hcdcr.evaluation.metrics`` and so on).
"""
