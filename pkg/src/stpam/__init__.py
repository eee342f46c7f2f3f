"""Progressive spatio-temporal attention experts for RSVP EEG classification."""

__version__ = "0.1.0"
