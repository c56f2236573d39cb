"""Multi-modal deep prompt tuning with a cross-modal injection network, at desk scale."""

__version__ = "0.1.0"
