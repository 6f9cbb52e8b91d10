"""Two-stage, multi-round clinical diagnosis dialogue harness with an
offline mock client and an ICD-standardized metric suite."""

__version__ = "0.1.0"
