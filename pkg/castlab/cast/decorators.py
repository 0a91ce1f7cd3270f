import logging
from functools import wraps

from django.core.management.base import CommandError

from .exceptions import CastError, ConfigError

logger = logging.getLogger(__name__)

CONFIG_ERROR_EXIT = 2
FAILURE_EXIT = 1


def exit_codes(handle):
    """Map domain errors of a command's ``handle`` to its exit status.

    Configuration errors exit with 2, any other domain or I/O failure with 1.
    """
    @wraps(handle)
    def _wrapped_handle(self, *args, **options):
        try:
            return handle(self, *args, **options)
        except ConfigError as exc:
            logger.error("Configuration error: %s", exc)
            raise CommandError(f"configuration error: {exc}", returncode=CONFIG_ERROR_EXIT) from exc
        except (CastError, OSError) as exc:
            logger.error("%s failed: %s", self.__module__.rsplit('.', 1)[-1], exc)
            raise CommandError(str(exc), returncode=FAILURE_EXIT) from exc
    return _wrapped_handle
