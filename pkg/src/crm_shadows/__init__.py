"""Common randomized measurement (CRM) classical shadows."""

__version__ = "0.1.0"
