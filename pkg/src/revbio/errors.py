"""Shared exception roots.

Most errors live next to the code that raises them; only the ones used by
several modules are defined here.
"""


class RevBioError(Exception):
    """Base class for all errors raised by this package."""


class UnknownInstanceError(RevBioError):
    """A model-instance id is not registered / not present in a corpus."""
