"""Semiclassical initial value representation engine.

Computes vibrational power spectra of model potentials from classical
trajectory ensembles (Herman-Kluk and time-averaged estimators, with the
full family of pre-exponential factor treatments) and cross-checks them
against a sinc-function DVR eigensolver.
"""
__version__ = "0.1.0"
