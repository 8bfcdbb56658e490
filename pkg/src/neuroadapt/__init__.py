"""Test-time adaptation engine and distribution-shift benchmark harness
for classifiers over windowed multichannel signals."""

__version__ = "0.1.0"
