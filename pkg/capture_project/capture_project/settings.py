"""
Django settings for capture_project project.

The project has no web surface: Django hosts the workbench's configuration,
logging and management commands (train, sweep, report, plot, tune_mpc).
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get("DJANGO_SECRET_KEY", "asv-workbench-local-only")

DEBUG = os.environ.get("DJANGO_DEBUG", "0") == "1"

ALLOWED_HOSTS: list[str] = []


# Application definition
INSTALLED_APPS = [
    "capture",
]

# Results are files (CSV, JSON, checkpoints); nothing is stored in a database.
DATABASES: dict[str, dict[str, str]] = {}

USE_TZ = True
TIME_ZONE = "UTC"

# Workbench settings
ASV_OUTPUT_ROOT = Path(os.environ.get("ASV_OUTPUT_ROOT", BASE_DIR / "runs"))
ASV_DEFAULT_CONFIG = Path(
    os.environ.get("ASV_DEFAULT_CONFIG", BASE_DIR / "configs" / "base.yaml")
)
ASV_JOBS = int(os.environ.get("ASV_JOBS", os.cpu_count() or 1))
ASV_LOG_LEVEL = os.environ.get("ASV_LOG_LEVEL", "INFO")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{asctime} {levelname} {name} {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        "capture": {
            "handlers": ["console"],
            "level": ASV_LOG_LEVEL,
            "propagate": False,
        },
    },
}
