"""Sleep stage scoring on one- or two-channel EEG with a 7-stage 1D CNN."""

__version__ = "0.1.0"
