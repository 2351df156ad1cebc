"""
Error types raised across the VAPNEV modules.

Library code raises these; the CLI in `main_vapnev.py` maps them to exit codes.
"""


class VapnevError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(VapnevError, ValueError):
    pass


class DomainError(VapnevError, ValueError):
    """Value outside the domain of an op, or an ImageBatch in the wrong domain tag."""


class ContractError(VapnevError):
    """Caller broke a precondition (non-scalar loss, missing z, non-binary mask...)."""


class ConfigError(VapnevError, ValueError):
    pass


class FormatError(VapnevError):
    """On-disk data (CIFAR, VFT1, VPNV checkpoint) does not match its declared layout."""


class IoError(VapnevError, OSError):
    pass


class NumericsError(VapnevError):
    """
    A NaN/Inf showed up where a finite value is required.

    `term` names the sub-term that went bad first (e.g. 'kl', 'flow_logdet', 'grad:flow.0.f1.in.w')
    so a diverging run can be traced back.
    """

    def __init__(self, message, term=None):
        super().__init__(message if term is None else f"{message} [term={term}]")
        self.term = term
