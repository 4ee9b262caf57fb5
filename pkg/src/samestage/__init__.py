"""Unpaired image translation with same-stage encoder/decoder patch constraints."""

__version__ = "0.1.0"
