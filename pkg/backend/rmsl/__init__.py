"""
Robust multi-sphere learning for behavior-level insider threat detection.
"""

__version__ = '1.0.0'
