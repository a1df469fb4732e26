"""Structure-preserving multiple imputation for periodic time series.

Periodic components are isolated with a KZFT bandpass filter, stabilised by a
phase-aligned block bootstrap and fed as covariates to an EM-with-bootstrapping
multiple imputation model.
"""
__version__ = "0.1.0"
