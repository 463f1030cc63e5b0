"""
Precision Handler Module - numeric formatting and tolerances shared by all outputs

CSV files carry full double precision (17 significant digits); summary
tables and console lines use Decimal half-up rounding. Projection residuals
are judged against a tolerance relative to the size of the constraint.
"""

import math
from decimal import Decimal, ROUND_HALF_UP
from typing import Optional, Union

import numpy as np

Number = Union[float, int, str]


class PrecisionHandler:
    """Centralized precision handling for reports and residual checks"""

    DEFAULT_DECIMALS = 4
    TOLERANCE = 1e-9
    CSV_FORMAT = "%.17g"
    RESIDUAL_TOLERANCE = 1e-8

    @staticmethod
    def round_value(value: Number, decimals: int = DEFAULT_DECIMALS) -> float:
        """
        Round using Decimal for accuracy

        Examples:
            >>> round_value(0.12345, 4)
            0.1235
            >>> round_value(-1.49995, 4)
            -1.5
        """
        try:
            if isinstance(value, float) and not math.isfinite(value):
                return value
            d = Decimal(str(value))
            if decimals == 0:
                return float(d.quantize(Decimal("1"), ROUND_HALF_UP))
            quantizer = Decimal("0.1") ** decimals
            return float(d.quantize(quantizer, ROUND_HALF_UP))
        except (ValueError, TypeError, ArithmeticError):
            return 0.0

    @staticmethod
    def format_display(value: Optional[Number], unit: Optional[str] = None,
                       decimals: int = DEFAULT_DECIMALS) -> str:
        """
        Format value for summary tables

        Args:
            value: The value to format (None prints as "n/a")
            unit: "s", "1/s", "%" (value is a fraction) or None
            decimals: Number of decimal places

        Examples:
            >>> format_display(0.95, "%", 1)
            "95.0%"
            >>> format_display(-1.5, "1/s", 2)
            "-1.50 1/s"
        """
        if value is None:
            return "n/a"
        if isinstance(value, float) and not math.isfinite(value):
            return str(value)
        if unit == "%":
            value = float(value) * 100
        rounded_value = PrecisionHandler.round_value(value, decimals)
        formatted = f"{int(rounded_value)}" if decimals == 0 else f"{rounded_value:.{decimals}f}"

        if unit == "%":
            return f"{formatted}%"
        if unit in ("s", "1/s"):
            return f"{formatted} {unit}"
        if unit:
            return f"{formatted}{unit}"
        return formatted

    @staticmethod
    def values_equal(value1: Union[float, int], value2: Union[float, int],
                     tolerance: float = TOLERANCE) -> bool:
        return abs(float(value1) - float(value2)) < tolerance

    @staticmethod
    def residual_tolerance(scale: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """Pointwise acceptance tolerance 1e-8 (1 + |scale|) for projection residuals, elementwise on arrays"""
        if isinstance(scale, np.ndarray):
            return PrecisionHandler.RESIDUAL_TOLERANCE * (1.0 + np.abs(scale))
        return PrecisionHandler.RESIDUAL_TOLERANCE * (1.0 + abs(float(scale)))


def round_value(value: Number, decimals: int = PrecisionHandler.DEFAULT_DECIMALS) -> float:
    return PrecisionHandler.round_value(value, decimals)


def format_display(value: Optional[Number], unit: Optional[str] = None,
                   decimals: int = PrecisionHandler.DEFAULT_DECIMALS) -> str:
    return PrecisionHandler.format_display(value, unit, decimals)


def values_equal(value1: Union[float, int], value2: Union[float, int],
                 tolerance: float = PrecisionHandler.TOLERANCE) -> bool:
    return PrecisionHandler.values_equal(value1, value2, tolerance)


def residual_tolerance(scale: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    return PrecisionHandler.residual_tolerance(scale)
