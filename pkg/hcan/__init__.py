"""
HCAN: emotion recognition in conversation with continuation and attribution encoders.

Pure numpy implementation with its own reverse-mode differentiation tape.
"""

__version__ = "1.0.0"
