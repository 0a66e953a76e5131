"""Mixed effect gradient boosting for unit-level small area estimation."""

from .core import (CensusFrame, Hyperparams, Schema, SchemaError, SurveySample, load_census_csv,
                   load_survey_csv, substream)
from .megb import EmConfig, MegbModel, area_means, area_totals, fit_megb, load_model, save_model
from .rebb import BootstrapResult, bootstrap_mse

__version__ = "0.1.0"

__all__ = [
    "BootstrapResult", "CensusFrame", "EmConfig", "Hyperparams", "MegbModel", "Schema",
    "SchemaError", "SurveySample", "area_means", "area_totals", "bootstrap_mse", "fit_megb",
    "load_census_csv", "load_model", "load_survey_csv", "save_model", "substream",
]
