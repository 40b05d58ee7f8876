"""
Controller metrics computed on a per-trial table
(columns raw_distance, capped_distance, success).
"""
import numpy as np
import pandas as pd


def mean_capped_distance(data: pd.DataFrame, cap: float = 0.03) -> float:
    """Mean final distance with each trial capped at `cap` (meters)."""
    capped = np.minimum(data["capped_distance"].to_numpy(), cap)
    # cap - mean shortfall is exactly cap when every trial hits it
    return float(cap - np.mean(cap - capped))


def success_rate(data: pd.DataFrame) -> float:
    """Fraction of successful trials."""
    return float(data["success"].astype(bool).mean())


def capped_distance_stderr(data: pd.DataFrame) -> float:
    """Standard error of the mean capped distance."""
    n = len(data)
    if n < 2:
        return 0.0
    return float(data["capped_distance"].std(ddof=1) / np.sqrt(n))


def mean_raw_distance(data: pd.DataFrame) -> float:
    return float(data["raw_distance"].mean())


def median_raw_distance(data: pd.DataFrame) -> float:
    return float(data["raw_distance"].median())


def get_all_metrics(data: pd.DataFrame, cap: float = 0.03) -> dict:
    """All metrics, rounded, as written to the JSON report."""
    return {
        "Trials": int(len(data)),
        "Mean Capped Distance (cm)": round(mean_capped_distance(data, cap) * 100, 3),
        "Capped Distance Std Error (cm)": round(capped_distance_stderr(data) * 100, 3),
        "Success Rate (%)": round(success_rate(data) * 100, 2),
        "Mean Raw Distance (cm)": round(mean_raw_distance(data) * 100, 3),
        "Median Raw Distance (cm)": round(median_raw_distance(data) * 100, 3),
    }
