"""
Development settings for the shiftlab project.
These settings are used for local experiments.
"""

from decouple import config

# ruff: noqa: F403, F405
from .base import *

DEBUG = True

# Pretrained meta models are cached on local disk
CACHES = {
    "default": {
        "BACKEND": "django.core.cache.backends.filebased.FileBasedCache",
        "LOCATION": config("LAB_CACHE_DIR", default=str(BASE_DIR / ".cache" / "pretrain")),
        "TIMEOUT": LAB_SETTINGS["PRETRAIN_CACHE_TIMEOUT"],
    }
}

# Development-specific logging
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": "INFO",
    },
    "loggers": {
        "django": {
            "handlers": ["console"],
            "level": "WARNING",
            "propagate": False,
        },
    },
}
