"""Test package for milstein-ips.

This package contains the unit tests for the noise, model, scheme, metric and
study modules and for the command-line runner. Long-running order checks are
skipped unless RUN_ACCEPTANCE is set.
"""
