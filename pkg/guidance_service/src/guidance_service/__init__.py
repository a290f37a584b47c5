"""HTTP guidance service speaking the splat-avatar distillation protocol."""

__version__ = "0.1.0"

from .backends import BackendError, MockBackend, load_backend
from .service import ServiceConfig, create_app

__all__ = [
    "BackendError",
    "MockBackend",
    "ServiceConfig",
    "create_app",
    "load_backend",
    "__version__",
]
