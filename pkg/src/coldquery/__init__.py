"""coldquery: discrete-event simulation of analytics queries over stored
video on cameras that upload nothing until queried."""

__version__ = "0.1.0"
