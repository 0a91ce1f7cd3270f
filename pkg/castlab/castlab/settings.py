"""
Django settings for castlab project.

The project has no web surface: it hosts the ``cast`` app, whose
management commands generate data, train and evaluate, and whose models
keep a registry of runs.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.1/ref/settings/
"""

from pathlib import Path
import os

from django.core.exceptions import ImproperlyConfigured
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('SECRET_KEY', 'django-insecure-castlab-local-only')

DEBUG = os.environ.get('DEBUG', 'False').lower() == 'true'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'cast',
]

MIDDLEWARE = []


# Database
# https://docs.djangoproject.com/en/5.1/ref/settings/#databases

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.environ.get('CAST_DATABASE_PATH', str(BASE_DIR / 'cast.sqlite3')),
    }
}


# Internationalization
# https://docs.djangoproject.com/en/5.1/topics/i18n/

LANGUAGE_CODE = 'fr'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Default primary key field type
# https://docs.djangoproject.com/en/5.1/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Runs

LOG_LEVELS = {'error': 'ERROR', 'info': 'INFO', 'debug': 'DEBUG'}

CAST_LOG_LEVEL = os.environ.get('CAST_LOG_LEVEL', 'info').lower()
if CAST_LOG_LEVEL not in LOG_LEVELS:
    raise ImproperlyConfigured(
        f"CAST_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {CAST_LOG_LEVEL!r}"
    )

try:
    CAST_EVAL_SEED = int(os.environ.get('CAST_EVAL_SEED', '1234'))
except ValueError as exc:
    raise ImproperlyConfigured("CAST_EVAL_SEED must be an integer") from exc


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'cast': {
            'handlers': ['console'],
            'level': LOG_LEVELS[CAST_LOG_LEVEL],
            'propagate': False,
        },
    },
}
