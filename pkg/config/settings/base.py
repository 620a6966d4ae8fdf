"""
Base settings for the shiftlab project.
These settings are common to all environments.
"""

from pathlib import Path

from decouple import Csv, config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent.parent

# Security settings (unused by the lab, required by Django)
SECRET_KEY = config("SECRET_KEY", default="shiftlab-insecure-local-key")

# Application definition
INSTALLED_APPS = [
    "rest_framework",
    "apps.netcore",  # Dense classifier and exact gradients
    "apps.stream",  # Non-stationary episode stream
    "apps.detect",  # Task-switch and distribution-shift detectors
    "apps.learner",  # Pretraining and online learners
    "apps.theory",  # Regret and detection-bound verification
    "apps.harness",  # Experiment orchestration and CLI verbs
]

# No database: every run is file based.
DATABASES = {}

# Internationalization
LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# REST Framework is used for config validation only
REST_FRAMEWORK = {
    "UNAUTHENTICATED_USER": None,
}

# Lab configuration
LAB_SETTINGS = {
    "OUTPUT_DIR": config("LAB_OUTPUT_DIR", default=str(BASE_DIR / "runs")),
    "MAX_WORKERS": config("LAB_MAX_WORKERS", default=1, cast=int),
    "PRETRAIN_CACHE_TIMEOUT": config(
        "LAB_PRETRAIN_CACHE_TIMEOUT", default=None, cast=lambda v: int(v) if v else None
    ),
    "CALIBRATION_SUPPORTS": config("LAB_CALIBRATION_SUPPORTS", default=200, cast=int),
    "CALIBRATION_COVERAGE": 0.95,
    "DEFAULT_DELTA": 1.0,
    "ENERGY_SIGN": config("LAB_ENERGY_SIGN", default="negated"),
    "THEORY_SEEDS": config("LAB_THEORY_SEEDS", default=20, cast=int),
    "THEORY_SUPPORT_GRID": config(
        "LAB_THEORY_SUPPORT_GRID", default="4,8,16,32", cast=Csv(int)
    ),
    "THEORY_DETECTION_TRIALS": config("LAB_THEORY_DETECTION_TRIALS", default=10_000, cast=int),
    "VERSION": "shiftlab-0.1.0",
}
