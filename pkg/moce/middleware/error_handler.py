from typing import Any, Dict, Optional, Union
import json
import logging
import sys
import traceback

from pydantic import ValidationError

from ..config.moce_config import ERROR_HANDLING
from ..utils.exceptions import (
    ConfigurationError,
    ContractError,
    DataFormatError,
    NumericError,
    SetupError,
    ShapeError,
)

logger = logging.getLogger(__name__)

EXIT_CODES = ERROR_HANDLING["exit_codes"]


class ErrorHandler:
    """Maps pipeline failures to a standardized error payload and a CLI exit code."""

    def __init__(self, show_traceback: bool = False):
        self.show_traceback = show_traceback
        self.last_response: Optional[Dict[str, Any]] = None

    def handle_error(self, exc: BaseException) -> int:
        """Handle different types of exceptions and return the matching exit code."""

        if isinstance(exc, (ConfigurationError, SetupError, ValidationError)):
            return self._handle_configuration_error(exc)
        elif isinstance(exc, (DataFormatError, ContractError, ShapeError, FileNotFoundError)):
            return self._handle_data_format_error(exc)
        elif isinstance(exc, NumericError):
            return self._handle_numeric_error(exc)
        else:
            return self._handle_generic_error(exc)

    def _handle_configuration_error(self, exc: BaseException) -> int:
        """Handle invalid configuration or an unrecoverable setup."""
        self._report("Configuration error", "config_error", str(exc))
        return EXIT_CODES["config_error"]

    def _handle_data_format_error(self, exc: BaseException) -> int:
        """Handle malformed inputs and violated call contracts."""
        self._report("Invalid input data", "data_format_error", str(exc))
        return EXIT_CODES["data_format_error"]

    def _handle_numeric_error(self, exc: NumericError) -> int:
        self._report("Numeric failure", "numeric_error", str(exc))
        return EXIT_CODES["numeric_error"]

    def _handle_generic_error(self, exc: BaseException) -> int:
        """Handle any other unhandled exceptions."""
        logger.error(f"Unhandled error: {str(exc)}\n{traceback.format_exc()}")
        self._report("An unexpected error occurred", "internal_error", str(exc))
        return EXIT_CODES["internal_error"]

    def _report(self, message: str, error_type: str, detail: str) -> None:
        """Log the failure and write the error payload to stderr as one JSON line."""
        self.last_response = self._create_error_response(message, error_type, detail)
        if self.show_traceback:
            self.last_response["error"]["traceback"] = traceback.format_exc()
        logger.error(f"{message}: {detail}")
        print(json.dumps(self.last_response), file=sys.stderr)

    def _create_error_response(
        self,
        message: str,
        error_type: str,
        detail: Union[str, Dict[str, Any]] = None
    ) -> Dict[str, Any]:
        """Create a standardized error response."""
        response = {
            "success": False,
            "error": {
                "type": error_type,
                "message": message
            }
        }

        if detail:
            response["error"]["detail"] = detail

        return response
