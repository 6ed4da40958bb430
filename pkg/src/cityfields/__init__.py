"""Desk-scale hash-encoded dynamic radiance fields with static, dynamic and far-field branches."""

__version__ = "0.1.0"
