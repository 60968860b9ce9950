"""Dialog policy learning with an adversarially estimated reward, against an agenda-based user simulator."""

__version__ = "0.1.0"
