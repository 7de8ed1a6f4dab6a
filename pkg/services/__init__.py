"""Service layer for the cascade-kd toolkit.

Modules cover configuration loading, logging setup, storage path utilities,
the synthetic compressed-video data generator, the differentiable kernel,
and pluggable IC training strategies and early-exit policies.
"""

from services.errors import CascadeError

__all__ = ["CascadeError"]
